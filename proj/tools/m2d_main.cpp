// Command-line front end: gen-data | train | convert | evaluate | score.
// Every run is fully determined by (config file, --set overrides, --seed);
// artifacts are written atomically and re-runs are byte-identical.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "m2d/config.hpp"
#include "m2d/data.hpp"
#include "m2d/detector.hpp"
#include "m2d/eval.hpp"
#include "m2d/nets.hpp"
#include "m2d/pipeline.hpp"
#include "m2d/serialize.hpp"

namespace {

using namespace m2d;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) return;
    if (!std::filesystem::exists(path))
        throw config::ConfigError(what + " does not exist: " + path);
}

config::RunConfig load_run_config(const CommonArgs& args) {
    config::Config cfg = config::Config::parse_file(args.config_path);
    for (const std::string& s : args.overrides) cfg.apply_override(s);
    config::RunConfig rc = config::RunConfig::from(cfg, args.seed);
    require_file(rc.dataset.in_path, "dataset path");
    require_file(rc.dataset.labels_path, "dataset labels path");
    require_file(rc.dataset.ood_path, "OOD dataset path");
    return rc;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

std::string trace_csv(const std::vector<double>& trace, const char* value_name) {
    std::string out = std::string("step,") + value_name + "\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, trace[i]);
        out += buf;
    }
    return out;
}

int cmd_gen_data(const CommonArgs& args) {
    config::RunConfig rc = load_run_config(args);
    const config::DatasetBlock& db = rc.dataset;
    if (db.kind == "blobs") {
        auto in = data::gen_blobs(db.classes, db.per_class, db.centers, db.spread, db.seed);
        auto ood = data::gen_ood_blob(db.ood_center, db.ood_n, db.ood_spread, db.seed + 1);
        data::save_csv(in, join_path(args.out_dir, "in.csv"));
        data::save_csv(ood, join_path(args.out_dir, "ood.csv"));
        std::cout << "event=gen-data kind=blobs rows_in=" << in.size() << " rows_ood=" << ood.size()
                  << " out=" << args.out_dir << "\n";
    } else if (db.kind == "images") {
        auto in = data::gen_shape_images(db.classes, db.per_class, db.image_side, db.image_noise,
                                         db.seed);
        auto ood = data::gen_stripe_images(db.ood_n, db.image_side, db.image_noise, db.seed + 1);
        data::write_idx(in, join_path(args.out_dir, "in-images.idx3"),
                        join_path(args.out_dir, "in-labels.idx1"));
        data::write_idx_images(ood, join_path(args.out_dir, "ood-images.idx3"));
        std::cout << "event=gen-data kind=images rows_in=" << in.size() << " rows_ood=" << ood.size()
                  << " out=" << args.out_dir << "\n";
    } else {
        throw config::ConfigError("gen-data only generates: dataset.kind must be blobs or images");
    }
    return 0;
}

int cmd_train(const CommonArgs& args) {
    config::RunConfig rc = load_run_config(args);
    pipeline::DataBundle data = pipeline::prepare_data(rc);
    pipeline::TrainResult result = pipeline::train_classifier(rc, data);

    nets::save(result.classifier, join_path(args.out_dir, "model.bin"));
    io::atomic_write_text(join_path(args.out_dir, "train_log.csv"),
                          trace_csv(result.loss_trace, "mean_epoch_loss"));
    std::cout << "event=train epochs=" << rc.model.epochs << " train_accuracy=" << result.train_accuracy
              << " test_accuracy=" << result.test_accuracy
              << " model=" << join_path(args.out_dir, "model.bin") << "\n";
    return 0;
}

int cmd_convert(const CommonArgs& args, const std::string& model_path, bool no_retrain,
                bool vanilla_ae) {
    config::RunConfig rc = load_run_config(args);
    if (no_retrain && vanilla_ae)
        throw config::ConfigError("--no-retrain and --vanilla-ae are mutually exclusive");
    require_file(model_path, "model file");
    nets::Network classifier = nets::load(model_path);
    pipeline::DataBundle data = pipeline::prepare_data(rc);

    detector::EncoderMode mode = detector::EncoderMode::retrained;
    if (no_retrain) mode = detector::EncoderMode::no_retrain;
    if (vanilla_ae) mode = detector::EncoderMode::vanilla_ae;

    auto built = pipeline::convert_model(rc, classifier, data, mode);
    detector::save_bundle(built.bundle, join_path(args.out_dir, "bundle.bin"));
    io::atomic_write_text(join_path(args.out_dir, "retrain_trace.csv"),
                          trace_csv(built.loss_trace, "reconstruction_loss"));

    std::cout << "event=convert mode=" << detector::encoder_mode_name(mode)
              << " steps=" << (mode == detector::EncoderMode::no_retrain ? 0 : rc.det.retrain.steps)
              << " heads=" << built.bundle.heads.size()
              << " bundle=" << join_path(args.out_dir, "bundle.bin") << "\n";
    if (!built.loss_trace.empty())
        std::cout << "event=retrain first_loss=" << built.loss_trace.front()
                  << " last_loss=" << built.loss_trace.back() << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& model_path,
                 const std::string& bundle_path) {
    config::RunConfig rc = load_run_config(args);
    nets::Network classifier;
    if (!bundle_path.empty()) {
        require_file(bundle_path, "bundle file");
        classifier = detector::load_bundle(bundle_path).frozen_classifier;
    } else if (!model_path.empty()) {
        require_file(model_path, "model file");
        classifier = nets::load(model_path);
    }
    else
        throw config::ConfigError("evaluate needs --bundle or --model");

    pipeline::DataBundle data = pipeline::prepare_data(rc);
    pipeline::MethodOutcome outcome = pipeline::run_methods(rc, classifier, data);

    for (const std::string& err : outcome.errors) std::cerr << "cell-error " << err << "\n";
    if (!rc.eval.timings)
        for (auto& r : outcome.reports) r.wall_ms = 0;

    io::atomic_write_text(join_path(args.out_dir, "reports.csv"), eval::reports_csv(outcome.reports));
    io::atomic_write_text(join_path(args.out_dir, "reports.json"),
                          eval::reports_json(outcome.reports));
    io::atomic_write_text(join_path(args.out_dir, "table.csv"), eval::pivot_csv(outcome.reports));

    for (const auto& r : outcome.reports)
        std::cout << "event=eval pair=" << r.dataset_pair << " method=" << r.method
                  << " steps=" << (r.steps < 0 ? std::string("-") : std::to_string(r.steps))
                  << " auroc=" << r.auroc << " det_acc=" << r.detection_accuracy << "\n";
    std::cout << "event=reports csv=" << join_path(args.out_dir, "reports.csv")
              << " json=" << join_path(args.out_dir, "reports.json")
              << " table=" << join_path(args.out_dir, "table.csv") << "\n";
    return outcome.errors.empty() ? 0 : 1;
}

int cmd_score(const std::string& bundle_path, const std::string& input_path, double threshold,
              const std::string& out_path) {
    require_file(bundle_path, "bundle file");
    require_file(input_path, "input file");
    // an empty input (no rows, or a bare header) yields empty output
    std::vector<std::uint8_t> raw = io::read_file(input_path);
    std::string text(raw.begin(), raw.end());
    std::size_t lines = 0;
    for (std::size_t pos = 0; pos < text.size();) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        if (end > pos) ++lines;
        pos = end + 1;
    }
    std::string out = "index,score,verdict,predicted_class\n";
    if (lines > 1) {
        detector::DetectorBundle bundle = detector::load_bundle(bundle_path);
        data::Dataset input = data::load_csv(input_path);
        auto verdicts = pipeline::score_samples(bundle, input.features, threshold);
        char buf[96];
        for (std::size_t i = 0; i < verdicts.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%s,%d\n", i, verdicts[i].score,
                          verdicts[i].in_distribution ? "in" : "out", verdicts[i].predicted_class);
            out += buf;
        }
    }
    if (out_path.empty())
        std::cout << out;
    else
        io::atomic_write_text(out_path, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Model2Detector: convert a trained classifier into an OOD detector"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string model_path, bundle_path, input_path, out_path;
    bool no_retrain = false, vanilla_ae = false;
    double threshold = 0.0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_path, "run configuration file")->required();
        cmd->add_option("--out", common.out_dir, "output directory");
        cmd->add_option("--set", common.overrides, "override: section.key=value")->take_all();
        cmd->add_option("--seed", common.seed, "override every block seed");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a dataset pair");
    add_common(gen);

    CLI::App* train = app.add_subcommand("train", "train the classifier");
    add_common(train);

    CLI::App* convert = app.add_subcommand("convert", "turn a trained model into a detector bundle");
    add_common(convert);
    convert->add_option("--model", model_path, "trained model file")->required();
    convert->add_flag("--no-retrain", no_retrain, "skip reconstruction retraining");
    convert->add_flag("--vanilla-ae", vanilla_ae, "use an untrained encoder copy");

    CLI::App* evaluate = app.add_subcommand("evaluate", "run the configured methods and write reports");
    add_common(evaluate);
    evaluate->add_option("--model", model_path, "trained model file");
    evaluate->add_option("--bundle", bundle_path, "detector bundle file");

    CLI::App* score = app.add_subcommand("score", "per-sample verdicts for an input file");
    score->add_option("--bundle", bundle_path, "detector bundle file")->required();
    score->add_option("--input", input_path, "CSV of samples")->required();
    score->add_option("--threshold", threshold, "in-distribution threshold")->required();
    score->add_option("--out", out_path, "write verdicts here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(gen)) return cmd_gen_data(common);
        if (app.got_subcommand(train)) return cmd_train(common);
        if (app.got_subcommand(convert)) return cmd_convert(common, model_path, no_retrain, vanilla_ae);
        if (app.got_subcommand(evaluate)) return cmd_evaluate(common, model_path, bundle_path);
        if (app.got_subcommand(score)) return cmd_score(bundle_path, input_path, threshold, out_path);
    } catch (const m2d::config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
