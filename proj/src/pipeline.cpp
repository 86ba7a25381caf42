#include "m2d/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <future>

#include "m2d/rng.hpp"

namespace m2d::pipeline {

DataBundle prepare_data(const config::RunConfig& rc) {
    const config::DatasetBlock& db = rc.dataset;
    DataBundle out;
    data::Dataset in, ood;
    if (db.kind == "blobs") {
        in = data::gen_blobs(db.classes, db.per_class, db.centers, db.spread, db.seed);
        ood = data::gen_ood_blob(db.ood_center, db.ood_n, db.ood_spread, db.seed + 1);
    } else if (db.kind == "images") {
        in = data::gen_shape_images(db.classes, db.per_class, db.image_side, db.image_noise, db.seed);
        ood = data::gen_stripe_images(db.ood_n, db.image_side, db.image_noise, db.seed + 1);
    } else if (db.kind == "csv") {
        in = data::load_csv(db.in_path);
        if (!in.labeled())
            throw config::ConfigError("dataset.in_csv: " + db.in_path + " has no label column");
        ood = data::load_csv(db.ood_path);
    } else {  // idx
        in = data::load_idx(db.in_path, db.labels_path);
        ood = data::load_idx_images(db.ood_path);
    }
    if (in.dim() != ood.dim())
        throw std::invalid_argument("in-distribution dim " + std::to_string(in.dim()) +
                                    " does not match OOD dim " + std::to_string(ood.dim()));

    out.in = data::split(in, db.split, db.seed + 2);
    out.ood = std::move(ood);
    if (db.normalize)
        data::normalize(out.in.train,
                        {&out.in.fit, &out.in.test, &out.in.detector_subset, &out.ood});
    out.pair_name = in.name + "-vs-" + out.ood.name;
    return out;
}

double accuracy(const nets::Network& classifier, const data::Dataset& d) {
    if (!d.labeled()) throw std::invalid_argument("accuracy needs labels");
    std::vector<int> pred = classifier.classify(d.features);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == d.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

TrainResult train_classifier(const config::RunConfig& rc, const DataBundle& data) {
    const data::Dataset& train = data.in.train;
    if (!train.labeled()) throw std::invalid_argument("train_classifier: unlabeled training data");

    TrainResult result{nets::build(rc.model.spec, rc.model.seed), 0.0, 0.0, {}};
    nets::Network& net = result.classifier;

    std::size_t n = train.size();
    std::size_t d = train.dim();
    std::size_t batch_size = std::min(rc.model.batch_size, n);
    Rng shuffle_rng(rc.model.seed ^ 0x5DEECE66DF00FF00ull);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    ad::OptimizerState opt{rc.model.learning_rate, 0};
    for (std::size_t epoch = 0; epoch < rc.model.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t pos = 0; pos < n; pos += batch_size) {
            std::size_t take = std::min(batch_size, n - pos);
            ad::Tensor batch = ad::Tensor::zeros({take, d});
            std::vector<int> labels(take);
            for (std::size_t b = 0; b < take; ++b) {
                std::memcpy(&batch.data[b * d], &train.features.data[order[pos + b] * d],
                            d * sizeof(double));
                labels[b] = train.labels[order[pos + b]];
            }
            nets::ForwardGraph g = net.forward(batch);
            ad::VarPtr loss = ad::softmax_cross_entropy(g.output, labels);
            epoch_loss += loss->value.item();
            ++batches;
            ad::backward(loss);
            ad::sgd_step(net.params(), net.collect_gradients(g), opt);
        }
        result.loss_trace.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    }

    result.train_accuracy = accuracy(net, train);
    result.test_accuracy = accuracy(net, data.in.test);
    return result;
}

detector::BundleBuildResult convert_model(const config::RunConfig& rc,
                                          const nets::Network& classifier, const DataBundle& data,
                                          detector::EncoderMode mode,
                                          std::optional<std::size_t> steps_override) {
    detector::BundleConfig cfg;
    cfg.retrain = rc.det.retrain;
    if (steps_override) cfg.retrain.steps = *steps_override;
    cfg.sever_at = rc.det.sever_at;
    cfg.taps = rc.det.taps;
    cfg.ridge = rc.det.ridge;
    cfg.ensemble_weights = rc.det.ensemble_weights;
    cfg.preprocess_epsilon = rc.det.preprocess_epsilon;
    cfg.mode = mode;
    return detector::build_bundle(classifier, cfg, data.in.detector_subset.features,
                                  data.in.fit.features, data.in.fit.labels);
}

namespace {

std::string taps_label(const std::vector<std::string>& taps) {
    if (taps.empty()) return "embed";
    std::string out;
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (i) out += '+';
        out += taps[i];
    }
    return out;
}

}  // namespace

MethodOutcome run_methods(const config::RunConfig& rc, const nets::Network& classifier,
                          const DataBundle& data) {
    std::vector<long> steps = rc.eval.steps_grid;
    if (steps.empty()) steps.push_back(static_cast<long>(rc.det.retrain.steps));

    const ad::Tensor& in_test = data.in.test.features;
    const ad::Tensor& ood = data.ood.features;
    std::string tapl = taps_label(rc.det.taps);

    std::vector<eval::GridCell> cells;
    auto detector_cell = [&](detector::EncoderMode mode, long step_count) {
        eval::GridCell cell;
        std::string method = detector::encoder_mode_name(mode);
        long steps_field = mode == detector::EncoderMode::no_retrain ? -1 : step_count;
        cell.id = data.pair_name + "/" + method +
                  (steps_field >= 0 ? "/" + std::to_string(steps_field) : "");
        cell.run = [&, mode, steps_field, method] {
            auto built = convert_model(rc, classifier, data, mode,
                                       steps_field >= 0
                                           ? std::optional<std::size_t>(static_cast<std::size_t>(steps_field))
                                           : std::nullopt);
            auto bundle = std::make_shared<detector::DetectorBundle>(std::move(built.bundle));
            eval::Scorer scorer = [bundle](const ad::Tensor& x) { return detector::score(*bundle, x); };
            eval::EvalContext ctx{data.pair_name, method, steps_field, tapl, rc.det.retrain.seed};
            return eval::evaluate(scorer, ctx, in_test, ood);
        };
        cells.push_back(std::move(cell));
    };

    for (const std::string& method : rc.eval.methods) {
        if (method == "m2d") {
            for (long s : steps) detector_cell(detector::EncoderMode::retrained, s);
        } else if (method == "vanilla-ae") {
            for (long s : steps) detector_cell(detector::EncoderMode::vanilla_ae, s);
        } else if (method == "m2d-no-retrain") {
            detector_cell(detector::EncoderMode::no_retrain, -1);
        } else if (method == "msp") {
            eval::GridCell cell;
            cell.id = data.pair_name + "/msp";
            cell.run = [&] {
                double t = rc.eval.temperature;
                eval::Scorer scorer = [&classifier, t](const ad::Tensor& x) {
                    return baselines::msp_score(classifier, x, t);
                };
                eval::EvalContext ctx{data.pair_name, "msp", -1, "-", rc.model.seed};
                return eval::evaluate(scorer, ctx, in_test, ood);
            };
            cells.push_back(std::move(cell));
        } else if (method == "odin") {
            eval::GridCell cell;
            cell.id = data.pair_name + "/odin";
            cell.run = [&] {
                baselines::BaselineConfig bc{rc.eval.temperature, rc.eval.odin_epsilon};
                eval::Scorer scorer = [&classifier, bc](const ad::Tensor& x) {
                    return baselines::odin_score(classifier, x, bc);
                };
                eval::EvalContext ctx{data.pair_name, "odin", -1, "-", rc.model.seed};
                return eval::evaluate(scorer, ctx, in_test, ood);
            };
            cells.push_back(std::move(cell));
        }
    }

    eval::GridResult grid = eval::ablation_grid(cells, rc.eval.threads);
    return {std::move(grid.reports), std::move(grid.cell_errors)};
}

std::vector<SampleVerdict> score_samples(const detector::DetectorBundle& bundle,
                                         const ad::Tensor& rows, double threshold) {
    std::size_t n = rows.shape.empty() ? 0 : rows.shape[0];
    std::size_t d = n ? rows.numel() / n : 0;
    std::vector<SampleVerdict> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ad::Tensor x({1, d}, std::vector<double>(rows.data.begin() + static_cast<long>(i * d),
                                                 rows.data.begin() + static_cast<long>((i + 1) * d)));
        // prediction and detection share no mutable state: run them in parallel
        auto detect = std::async(std::launch::async,
                                 [&] { return detector::score(bundle, x); });
        auto predict = std::async(std::launch::async,
                                  [&] { return bundle.frozen_classifier.classify(x)[0]; });
        SampleVerdict v;
        v.score = detect.get();
        v.predicted_class = predict.get();
        v.in_distribution = v.score > threshold;
        out.push_back(v);
    }
    return out;
}

}  // namespace m2d::pipeline
