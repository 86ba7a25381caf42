#include "m2d/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "m2d/rng.hpp"
#include "m2d/serialize.hpp"

namespace m2d::data {

ad::Tensor Dataset::row(std::size_t i) const {
    std::size_t d = dim();
    if (i >= size()) throw std::out_of_range("dataset row " + std::to_string(i));
    return ad::Tensor({1, d}, std::vector<double>(features.data.begin() + static_cast<long>(i * d),
                                                  features.data.begin() + static_cast<long>((i + 1) * d)));
}

void Dataset::validate() const {
    if (!features.all_finite()) throw std::invalid_argument("dataset '" + name + "': non-finite feature");
    if (labeled() && labels.size() != size())
        throw std::invalid_argument("dataset '" + name + "': " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(size()) + " rows");
    for (int l : labels)
        if (l < 0) throw std::invalid_argument("dataset '" + name + "': negative label");
}

Dataset gen_blobs(int num_classes, std::size_t n_per_class,
                  const std::vector<std::vector<double>>& centers, double spread,
                  std::uint64_t seed) {
    if (num_classes < 1) throw std::invalid_argument("gen_blobs: need at least one class");
    if (centers.size() != static_cast<std::size_t>(num_classes))
        throw std::invalid_argument("gen_blobs: " + std::to_string(centers.size()) + " centers for " +
                                    std::to_string(num_classes) + " classes");
    if (!(spread > 0.0)) throw std::invalid_argument("gen_blobs: spread must be positive");
    if (n_per_class == 0) throw std::invalid_argument("gen_blobs: empty classes");
    std::size_t d = centers[0].size();
    for (const auto& c : centers)
        if (c.size() != d) throw std::invalid_argument("gen_blobs: center dims differ");
    for (std::size_t a = 0; a < centers.size(); ++a)
        for (std::size_t b = a + 1; b < centers.size(); ++b)
            if (centers[a] == centers[b])
                throw std::invalid_argument("gen_blobs: duplicate centers for classes " +
                                            std::to_string(a) + " and " + std::to_string(b));

    Rng rng(seed);
    std::size_t n = n_per_class * static_cast<std::size_t>(num_classes);
    Dataset ds;
    ds.features = ad::Tensor::zeros({n, d});
    ds.labels.reserve(n);
    ds.sample_dims = {d};
    ds.name = "blobs";
    ds.split = "all";
    ds.seed = seed;
    std::size_t r = 0;
    for (int c = 0; c < num_classes; ++c)
        for (std::size_t i = 0; i < n_per_class; ++i, ++r) {
            for (std::size_t j = 0; j < d; ++j)
                ds.features.data[r * d + j] = centers[static_cast<std::size_t>(c)][j] + spread * rng.gaussian();
            ds.labels.push_back(c);
        }
    return ds;
}

Dataset gen_ood_blob(const std::vector<double>& center, std::size_t n, double spread,
                     std::uint64_t seed) {
    Dataset ds = gen_blobs(1, n, {center}, spread, seed);
    ds.labels.clear();
    ds.name = "ood-blob";
    return ds;
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

Dataset gen_shape_images(int num_classes, std::size_t n_per_class, std::size_t side, double noise,
                         std::uint64_t seed) {
    if (num_classes < 1 || n_per_class == 0 || side < 4)
        throw std::invalid_argument("gen_shape_images: bad dimensions");
    if (noise < 0.0) throw std::invalid_argument("gen_shape_images: negative noise");
    Rng rng(seed);
    std::size_t n = n_per_class * static_cast<std::size_t>(num_classes);
    std::size_t d = side * side;
    Dataset ds;
    ds.features = ad::Tensor::zeros({n, d});
    ds.sample_dims = {side, side};
    ds.name = "shape-images";
    ds.split = "all";
    ds.seed = seed;
    double mid = (static_cast<double>(side) - 1.0) / 2.0;
    double ring = static_cast<double>(side) / 4.0;
    double sigma = static_cast<double>(side) / 6.0;
    std::size_t r = 0;
    for (int c = 0; c < num_classes; ++c) {
        double angle = 2.0 * std::numbers::pi * c / num_classes;
        double cy = mid + ring * std::sin(angle);
        double cx = mid + ring * std::cos(angle);
        for (std::size_t i = 0; i < n_per_class; ++i, ++r) {
            double jy = cy + 0.5 * rng.gaussian();
            double jx = cx + 0.5 * rng.gaussian();
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    double dy = static_cast<double>(y) - jy;
                    double dx = static_cast<double>(x) - jx;
                    double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                    v += noise * rng.gaussian();
                    ds.features.data[r * d + y * side + x] = clamp01(v);
                }
            ds.labels.push_back(c);
        }
    }
    return ds;
}

Dataset gen_stripe_images(std::size_t n, std::size_t side, double noise, std::uint64_t seed) {
    if (n == 0 || side < 4) throw std::invalid_argument("gen_stripe_images: bad dimensions");
    if (noise < 0.0) throw std::invalid_argument("gen_stripe_images: negative noise");
    Rng rng(seed);
    std::size_t d = side * side;
    Dataset ds;
    ds.features = ad::Tensor::zeros({n, d});
    ds.sample_dims = {side, side};
    ds.name = "stripe-images";
    ds.split = "all";
    ds.seed = seed;
    for (std::size_t r = 0; r < n; ++r) {
        double freq = 1.0 + 2.0 * rng.uniform01();
        double phase = 2.0 * std::numbers::pi * rng.uniform01();
        bool vertical = rng.uniform01() < 0.5;
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                double t = static_cast<double>(vertical ? x : y);
                double v = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * t /
                                                    static_cast<double>(side) +
                                                phase);
                v += noise * rng.gaussian();
                ds.features.data[r * d + y * side + x] = clamp01(v);
            }
    }
    return ds;
}

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(io::Reader& r) {
    std::uint8_t b[4];
    r.raw(b, 4);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

struct IdxImages {
    std::size_t n, h, w;
    std::vector<std::uint8_t> pixels;
};

IdxImages read_idx_images(const std::string& path) {
    io::Reader r(io::read_file(path));
    std::uint32_t magic;
    try {
        magic = read_be32(r);
    } catch (const std::exception&) {
        throw std::runtime_error(path + ": bad magic (file too short)");
    }
    if (magic != kIdxImagesMagic)
        throw std::runtime_error(path + ": bad magic, not an IDX image file");
    IdxImages img;
    img.n = read_be32(r);
    img.h = read_be32(r);
    img.w = read_be32(r);
    std::size_t total = img.n * img.h * img.w;
    if (r.remaining() != total)
        throw std::runtime_error(path + ": truncated, expected " + std::to_string(total) +
                                 " pixels, found " + std::to_string(r.remaining()));
    img.pixels.resize(total);
    r.raw(img.pixels.data(), total);
    return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
    io::Reader r(io::read_file(path));
    std::uint32_t magic;
    try {
        magic = read_be32(r);
    } catch (const std::exception&) {
        throw std::runtime_error(path + ": bad magic (file too short)");
    }
    if (magic != kIdxLabelsMagic)
        throw std::runtime_error(path + ": bad magic, not an IDX label file");
    std::uint32_t n = read_be32(r);
    if (r.remaining() != n)
        throw std::runtime_error(path + ": truncated, expected " + std::to_string(n) + " labels");
    std::vector<std::uint8_t> labels(n);
    r.raw(labels.data(), n);
    return labels;
}

Dataset images_to_dataset(IdxImages img, const std::string& name) {
    Dataset ds;
    std::size_t d = img.h * img.w;
    ds.features = ad::Tensor::zeros({img.n, d});
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        ds.features.data[i] = static_cast<double>(img.pixels[i]) / 255.0;
    ds.sample_dims = {img.h, img.w};
    ds.name = name;
    ds.split = "all";
    return ds;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    IdxImages img = read_idx_images(images_path);
    std::vector<std::uint8_t> labels = read_idx_labels(labels_path);
    if (labels.size() != img.n)
        throw std::runtime_error("IDX count mismatch: " + std::to_string(img.n) + " images vs " +
                                 std::to_string(labels.size()) + " labels");
    Dataset ds = images_to_dataset(std::move(img), "idx");
    ds.labels.assign(labels.begin(), labels.end());
    return ds;
}

Dataset load_idx_images(const std::string& images_path) {
    return images_to_dataset(read_idx_images(images_path), "idx");
}

void write_idx_images(const Dataset& d, const std::string& images_path) {
    if (d.sample_dims.size() != 2)
        throw std::invalid_argument("write_idx: dataset is not image-shaped");
    std::size_t h = d.sample_dims[0], w = d.sample_dims[1];
    std::vector<std::uint8_t> out;
    out.reserve(16 + d.size() * h * w);
    write_be32(out, kIdxImagesMagic);
    write_be32(out, static_cast<std::uint32_t>(d.size()));
    write_be32(out, static_cast<std::uint32_t>(h));
    write_be32(out, static_cast<std::uint32_t>(w));
    for (double v : d.features.data)
        out.push_back(static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0)));
    io::atomic_write_file(images_path, out);
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    if (!d.labeled()) throw std::invalid_argument("write_idx: dataset has no labels");
    write_idx_images(d, images_path);
    std::vector<std::uint8_t> out;
    write_be32(out, kIdxLabelsMagic);
    write_be32(out, static_cast<std::uint32_t>(d.labels.size()));
    for (int l : d.labels) {
        if (l < 0 || l > 255) throw std::invalid_argument("write_idx: label out of u8 range");
        out.push_back(static_cast<std::uint8_t>(l));
    }
    io::atomic_write_file(labels_path, out);
}

Dataset load_csv(const std::string& path) {
    std::vector<std::uint8_t> raw = io::read_file(path);
    std::string text(raw.begin(), raw.end());

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
        if (end == text.size()) break;
        start = end + 1;
    }
    if (lines.empty()) throw std::runtime_error(path + ": empty CSV");

    auto split_commas = [](const std::string& s) {
        std::vector<std::string> out;
        std::size_t pos = 0;
        while (true) {
            std::size_t c = s.find(',', pos);
            if (c == std::string::npos) {
                out.push_back(s.substr(pos));
                break;
            }
            out.push_back(s.substr(pos, c - pos));
            pos = c + 1;
        }
        return out;
    };

    std::vector<std::string> header = split_commas(lines[0]);
    bool labeled = !header.empty() && header.back() == "label";
    std::size_t d = header.size() - (labeled ? 1 : 0);
    if (d == 0) throw std::runtime_error(path + ": no feature columns");

    std::size_t n = lines.size() - 1;
    if (n == 0) throw std::runtime_error(path + ": no data rows");
    Dataset ds;
    ds.features = ad::Tensor::zeros({n, d});
    ds.sample_dims = {d};
    ds.name = path;
    ds.split = "all";
    for (std::size_t i = 0; i < n; ++i) {
        auto cells = split_commas(lines[i + 1]);
        if (cells.size() != header.size())
            throw std::runtime_error(path + ":" + std::to_string(i + 2) + ": expected " +
                                     std::to_string(header.size()) + " columns, got " +
                                     std::to_string(cells.size()));
        for (std::size_t j = 0; j < d; ++j) {
            char* end = nullptr;
            double v = std::strtod(cells[j].c_str(), &end);
            if (end == cells[j].c_str() || *end != '\0')
                throw std::runtime_error(path + ":" + std::to_string(i + 2) + ": bad number '" +
                                         cells[j] + "'");
            ds.features.data[i * d + j] = v;
        }
        if (labeled) {
            char* end = nullptr;
            long v = std::strtol(cells.back().c_str(), &end, 10);
            if (end == cells.back().c_str() || *end != '\0' || v < 0)
                throw std::runtime_error(path + ":" + std::to_string(i + 2) + ": bad label '" +
                                         cells.back() + "'");
            ds.labels.push_back(static_cast<int>(v));
        }
    }
    ds.validate();
    return ds;
}

void save_csv(const Dataset& d, const std::string& path) {
    std::string out;
    std::size_t dim = d.dim();
    for (std::size_t j = 0; j < dim; ++j) {
        if (j) out += ',';
        out += "f" + std::to_string(j);
    }
    if (d.labeled()) out += ",label";
    out += '\n';
    char buf[64];
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            if (j) out += ',';
            std::snprintf(buf, sizeof(buf), "%.17g", d.features.data[i * dim + j]);
            out += buf;
        }
        if (d.labeled()) out += ',' + std::to_string(d.labels[i]);
        out += '\n';
    }
    io::atomic_write_text(path, out);
}

Normalization normalize(Dataset& train, const std::vector<Dataset*>& others) {
    if (train.size() == 0) throw std::invalid_argument("normalize: empty training split");
    if (train.normalized) throw std::invalid_argument("normalize: training split already normalized");
    for (const Dataset* o : others)
        if (o->normalized) throw std::invalid_argument("normalize: dataset already normalized");
    std::size_t d = train.dim(), n = train.size();

    Normalization norm;
    norm.mean.assign(d, 0.0);
    norm.scale.assign(d, 1.0);
    norm.clamped.assign(d, false);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) norm.mean[j] += train.features.data[i * d + j];
    for (std::size_t j = 0; j < d; ++j) norm.mean[j] /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double dv = train.features.data[i * d + j] - norm.mean[j];
            var[j] += dv * dv;
        }
    for (std::size_t j = 0; j < d; ++j) {
        double s = std::sqrt(var[j] / static_cast<double>(n));
        if (s > 0.0)
            norm.scale[j] = s;
        else
            norm.clamped[j] = true;  // scale stays 1, column maps to 0
    }

    auto apply = [&](Dataset& ds) {
        if (ds.dim() != d) throw std::invalid_argument("normalize: dimension mismatch");
        for (std::size_t i = 0; i < ds.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                ds.features.data[i * d + j] = (ds.features.data[i * d + j] - norm.mean[j]) / norm.scale[j];
        ds.normalized = true;
        ds.norm = norm;
    };
    apply(train);
    for (Dataset* o : others) apply(*o);
    return norm;
}

Splits split(const Dataset& d, const SplitPlan& plan, std::uint64_t seed) {
    if (!(plan.train_frac > 0.0) || !(plan.fit_frac > 0.0) || !(plan.test_frac > 0.0))
        throw std::invalid_argument("split: fractions must be positive");
    if (std::abs(plan.train_frac + plan.fit_frac + plan.test_frac - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");
    if (d.size() == 0) throw std::invalid_argument("split: empty dataset");

    // per-class index lists in data order, each shuffled from one stream
    std::vector<std::vector<std::size_t>> classes;
    if (d.labeled()) {
        int max_label = *std::max_element(d.labels.begin(), d.labels.end());
        classes.assign(static_cast<std::size_t>(max_label) + 1, {});
        for (std::size_t i = 0; i < d.size(); ++i)
            classes[static_cast<std::size_t>(d.labels[i])].push_back(i);
    } else {
        classes.assign(1, {});
        classes[0].resize(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) classes[0][i] = i;
    }
    Rng rng(seed);
    for (auto& idx : classes) rng.shuffle(idx);

    const double fracs[3] = {plan.train_frac, plan.fit_frac, plan.test_frac};
    std::vector<std::size_t> buckets[3];
    for (const auto& idx : classes) {
        std::size_t nc = idx.size();
        std::size_t take[3];
        double rem[3];
        std::size_t used = 0;
        for (int k = 0; k < 3; ++k) {
            double exact = fracs[k] * static_cast<double>(nc);
            take[k] = static_cast<std::size_t>(exact);
            rem[k] = exact - static_cast<double>(take[k]);
            used += take[k];
        }
        // distribute the remainder by largest fractional part, ties to the
        // earlier bucket
        while (used < nc) {
            int best = 0;
            for (int k = 1; k < 3; ++k)
                if (rem[k] > rem[best]) best = k;
            take[best] += 1;
            rem[best] = -1.0;
            used += 1;
        }
        std::size_t pos = 0;
        for (int k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < take[k]; ++i) buckets[k].push_back(idx[pos++]);
    }

    if (plan.detector_subset > buckets[0].size())
        throw std::invalid_argument("split: detector subset " + std::to_string(plan.detector_subset) +
                                    " exceeds train size " + std::to_string(buckets[0].size()));

    auto gather = [&](const std::vector<std::size_t>& idx, const std::string& split_name) {
        if (idx.empty())
            throw std::invalid_argument("split: bucket '" + split_name + "' came out empty");
        std::size_t dim = d.dim();
        Dataset out;
        out.features = ad::Tensor::zeros({idx.size(), dim});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::memcpy(&out.features.data[i * dim], &d.features.data[idx[i] * dim],
                        dim * sizeof(double));
            if (d.labeled()) out.labels.push_back(d.labels[idx[i]]);
        }
        out.sample_dims = d.sample_dims;
        out.name = d.name;
        out.split = split_name;
        out.seed = seed;
        out.normalized = d.normalized;
        out.norm = d.norm;
        return out;
    };

    Splits s;
    s.train = gather(buckets[0], "train");
    s.fit = gather(buckets[1], "fit");
    s.test = gather(buckets[2], "test");
    std::vector<std::size_t> sub(buckets[0].begin(),
                                 buckets[0].begin() + static_cast<long>(
                                                          plan.detector_subset ? plan.detector_subset
                                                                               : buckets[0].size()));
    s.detector_subset = gather(sub, "detector_subset");
    return s;
}

}  // namespace m2d::data
