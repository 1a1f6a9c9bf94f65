#include "akd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "akd/errors.hpp"

namespace akd {

namespace {

constexpr double kPi = 3.14159265358979323846;

// spread for the blobs-hard benchmark; tuned so the default MLP teacher
// tests in the 80-95% band (centers sit ~5.7 apart in 32-d)
constexpr double kBlobsHardSpread = 1.1;

Dataset select_rows(const Dataset& d, const std::vector<Index>& rows, std::string name) {
    Dataset out;
    out.features = Tensor::zeros({static_cast<Index>(rows.size()), d.dim()});
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.mat().row(static_cast<Index>(i)) = d.features.mat().row(rows[i]);
        out.labels.push_back(d.labels[static_cast<std::size_t>(rows[i])]);
    }
    out.num_classes = d.num_classes;
    out.name = std::move(name);
    return out;
}

}  // namespace

void check_dataset(const Dataset& d, const char* where) {
    if (d.features.rank() != 2) {
        throw ShapeError(std::string(where) + ": features must be [n x d], got " + d.features.shape_string());
    }
    if (static_cast<Index>(d.labels.size()) != d.features.rows()) {
        throw ShapeError(std::string(where) + ": label count does not match feature rows");
    }
    if (d.num_classes < 2) throw ParamError(std::string(where) + ": need at least 2 classes");
    for (int y : d.labels) {
        if (y < 0 || y >= d.num_classes) {
            throw LabelError(std::string(where) + ": label " + std::to_string(y) + " out of range");
        }
    }
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes < 2) throw ParamError("gen_synthetic: need at least 2 classes");
    if (spec.samples_per_class < 1) throw ParamError("gen_synthetic: samples_per_class must be >= 1");
    if (spec.spread < 0.0) throw ParamError("gen_synthetic: spread must be nonnegative");
    const bool blobs = spec.kind == SyntheticKind::Blobs;
    if (blobs && spec.input_dim < 1) throw ParamError("gen_synthetic: input_dim must be >= 1");
    if (!blobs && spec.input_dim != 2) throw ParamError("gen_synthetic: spirals are 2-D");
    const Index d = blobs ? spec.input_dim : 2;
    const Index n = spec.num_classes * spec.samples_per_class;

    Rng root(spec.seed);
    Dataset out;
    out.features = Tensor::zeros({n, d});
    out.labels.reserve(static_cast<std::size_t>(n));
    out.num_classes = spec.num_classes;
    out.name = blobs ? "blobs" : "spirals";

    std::vector<Eigen::ArrayXd> centers;
    if (blobs) {
        Rng centers_rng = root.fork("centers");
        for (Index c = 0; c < spec.num_classes; ++c) {
            Rng cr = centers_rng.fork(static_cast<std::uint64_t>(c));
            Eigen::ArrayXd v(d);
            for (Index k = 0; k < d; ++k) v[k] = cr.normal();
            const double norm = std::sqrt(v.square().sum());
            centers.push_back(4.0 * v / std::max(norm, 1e-12));
        }
    }

    Rng samples_rng = root.fork("samples");
    Index row = 0;
    for (Index c = 0; c < spec.num_classes; ++c) {
        Rng class_rng = samples_rng.fork(static_cast<std::uint64_t>(c));
        for (Index s = 0; s < spec.samples_per_class; ++s, ++row) {
            Rng sr = class_rng.fork(static_cast<std::uint64_t>(s));
            if (blobs) {
                for (Index k = 0; k < d; ++k) {
                    out.features(row, k) = centers[static_cast<std::size_t>(c)][k] + spec.spread * sr.normal();
                }
            } else {
                const double t = (static_cast<double>(s) + 0.5) / static_cast<double>(spec.samples_per_class);
                const double radius = 4.0 * t;
                const double theta = 2.0 * kPi * (static_cast<double>(c) / static_cast<double>(spec.num_classes) +
                                                  1.25 * t) +
                                     spec.spread * sr.normal();
                out.features(row, 0) = radius * std::cos(theta);
                out.features(row, 1) = radius * std::sin(theta);
            }
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& d, Index train_per_class) {
    check_dataset(d, "split_per_class");
    if (train_per_class < 0) throw ParamError("split_per_class: negative count");
    std::vector<Index> seen(static_cast<std::size_t>(d.num_classes), 0);
    std::vector<Index> head, tail;
    for (Index i = 0; i < d.size(); ++i) {
        Index& k = seen[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])];
        (k < train_per_class ? head : tail).push_back(i);
        ++k;
    }
    return {select_rows(d, head, d.name), select_rows(d, tail, d.name)};
}

std::pair<Dataset, Dataset> blobs_hard(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::Blobs;
    spec.num_classes = 20;
    spec.samples_per_class = 150;  // 100 train + 50 test per class
    spec.input_dim = 32;
    spec.spread = kBlobsHardSpread;
    spec.seed = seed;
    Dataset all = gen_synthetic(spec);
    auto [train, test] = split_per_class(all, 100);
    train.name = "blobs-hard-train";
    test.name = "blobs-hard-test";
    return {std::move(train), std::move(test)};
}

Dataset make_imbalanced(const Dataset& d, const std::set<int>& classes, Index cap) {
    check_dataset(d, "make_imbalanced");
    if (cap < 0) throw ParamError("make_imbalanced: negative cap");
    for (int c : classes) {
        if (c < 0 || c >= d.num_classes) {
            throw ParamError("make_imbalanced: unknown class " + std::to_string(c));
        }
    }
    std::vector<Index> seen(static_cast<std::size_t>(d.num_classes), 0);
    std::vector<Index> keep;
    for (Index i = 0; i < d.size(); ++i) {
        const int y = d.labels[static_cast<std::size_t>(i)];
        Index& k = seen[static_cast<std::size_t>(y)];
        if (classes.count(y) == 0 || k < cap) keep.push_back(i);
        ++k;
    }
    return select_rows(d, keep, d.name + "-imbalanced");
}

Dataset take_fraction(const Dataset& d, double p) {
    check_dataset(d, "take_fraction");
    if (!(p > 0.0) || p > 1.0) throw ParamError("take_fraction: fraction must be in (0, 1]");
    const Index n = static_cast<Index>(std::floor(p * static_cast<double>(d.size())));
    std::vector<Index> keep;
    keep.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) keep.push_back(i);
    return select_rows(d, keep, d.name + "-fraction");
}

std::vector<Batch> batch_iter(const Dataset& d, Index batch_size, Rng& rng, bool shuffle) {
    check_dataset(d, "batch_iter");
    if (batch_size < 1) throw ParamError("batch_iter: batch_size must be >= 1");
    std::vector<std::size_t> order;
    if (shuffle) {
        order = rng.permutation(static_cast<std::size_t>(d.size()));
    } else {
        order.resize(static_cast<std::size_t>(d.size()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    }
    std::vector<Batch> out;
    for (Index start = 0; start < d.size(); start += batch_size) {
        const Index stop = std::min(start + batch_size, d.size());
        Batch b;
        b.features = Tensor::zeros({stop - start, d.dim()});
        for (Index i = start; i < stop; ++i) {
            const Index src = static_cast<Index>(order[static_cast<std::size_t>(i)]);
            b.features.mat().row(i - start) = d.features.mat().row(src);
            b.labels.push_back(d.labels[static_cast<std::size_t>(src)]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

Standardizer fit_standardizer(const Dataset& train, double eps) {
    check_dataset(train, "fit_standardizer");
    if (eps <= 0.0) throw ParamError("fit_standardizer: eps must be positive");
    const Index n = train.size();
    const Index d = train.dim();
    Standardizer s;
    s.mean = Tensor::zeros({1, d});
    s.std = Tensor::zeros({1, d});
    for (Index k = 0; k < d; ++k) {
        double mean = train.features.mat().col(k).mean();
        double var = (train.features.mat().col(k).array() - mean).square().sum() / static_cast<double>(n);
        s.mean(0, k) = mean;
        s.std(0, k) = std::max(std::sqrt(var), eps);
    }
    return s;
}

Dataset apply_standardizer(const Standardizer& s, const Dataset& d) {
    check_dataset(d, "apply_standardizer");
    if (s.std.rank() != 2 || s.std.cols() != d.dim()) {
        throw ShapeError("apply_standardizer: statistics do not match feature width");
    }
    Dataset out = d;
    for (Index k = 0; k < d.dim(); ++k) {
        out.features.mat().col(k) = (d.features.mat().col(k).array() - s.mean(0, k)) / s.std(0, k);
    }
    return out;
}

namespace {

std::uint32_t read_u32_be(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError(std::string("idx: truncated file while reading ") + what);
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("idx: cannot open " + images_path);
    const std::uint32_t img_magic = read_u32_be(img, "image magic");
    if (img_magic != 0x00000803u) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "0x%08x", img_magic);
        throw FormatError(std::string("idx: bad image magic ") + buf);
    }
    const std::uint32_t count = read_u32_be(img, "image count");
    const std::uint32_t rows = read_u32_be(img, "image rows");
    const std::uint32_t cols = read_u32_be(img, "image cols");
    const std::size_t pixels = static_cast<std::size_t>(count) * rows * cols;
    std::vector<unsigned char> raw(pixels);
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(img.gcount()) != pixels) {
        throw IoError("idx: truncated pixel data in " + images_path);
    }

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("idx: cannot open " + labels_path);
    const std::uint32_t lab_magic = read_u32_be(lab, "label magic");
    if (lab_magic != 0x00000801u) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "0x%08x", lab_magic);
        throw FormatError(std::string("idx: bad label magic ") + buf);
    }
    const std::uint32_t lab_count = read_u32_be(lab, "label count");
    if (lab_count != count) {
        throw FormatError("idx: image count " + std::to_string(count) + " does not match label count " +
                          std::to_string(lab_count));
    }
    std::vector<unsigned char> ybytes(count);
    lab.read(reinterpret_cast<char*>(ybytes.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(lab.gcount()) != count) {
        throw IoError("idx: truncated label data in " + labels_path);
    }

    Dataset out;
    const Index d = static_cast<Index>(rows) * static_cast<Index>(cols);
    out.features = Tensor::zeros({static_cast<Index>(count), d});
    for (Index i = 0; i < static_cast<Index>(count); ++i) {
        for (Index k = 0; k < d; ++k) {
            out.features(i, k) =
                static_cast<double>(raw[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) +
                                        static_cast<std::size_t>(k)]) /
                255.0;
        }
    }
    int max_label = 0;
    out.labels.reserve(count);
    for (unsigned char y : ybytes) {
        out.labels.push_back(static_cast<int>(y));
        max_label = std::max(max_label, static_cast<int>(y));
    }
    out.num_classes = max_label + 1 < 2 ? 2 : max_label + 1;
    out.name = images_path;
    return out;
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
    check_dataset(d, "write_idx");
    if (d.num_classes > 256) throw ParamError("write_idx: labels do not fit in one byte");
    std::ofstream img(images_path, std::ios::binary);
    if (!img) throw IoError("idx: cannot open " + images_path + " for writing");
    write_u32_be(img, 0x00000803u);
    write_u32_be(img, static_cast<std::uint32_t>(d.size()));
    write_u32_be(img, 1u);
    write_u32_be(img, static_cast<std::uint32_t>(d.dim()));
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(d.size()) * static_cast<std::size_t>(d.dim()));
    for (Index i = 0; i < d.size(); ++i) {
        for (Index k = 0; k < d.dim(); ++k) {
            const double v = std::clamp(d.features(i, k), 0.0, 1.0);
            raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
        }
    }
    img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!img) throw IoError("idx: failed writing " + images_path);

    std::ofstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("idx: cannot open " + labels_path + " for writing");
    write_u32_be(lab, 0x00000801u);
    write_u32_be(lab, static_cast<std::uint32_t>(d.size()));
    for (int y : d.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
    if (!lab) throw IoError("idx: failed writing " + labels_path);
}

}  // namespace akd
