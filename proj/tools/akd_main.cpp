// akd — experiment driver. Subcommands cover the whole pipeline: synthesize
// data, pretrain a teacher, run the augmented-distillation experiment, verify
// the ensemble-diversity identities numerically, and compare configurations.
//
// Exit codes: 0 success, 1 bad invocation or config, 2 runtime failure.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "akd/augment.hpp"
#include "akd/data.hpp"
#include "akd/diversity.hpp"
#include "akd/errors.hpp"
#include "akd/harness.hpp"
#include "akd/nn.hpp"

namespace fs = std::filesystem;
using namespace akd;

namespace {

// ---- config file ------------------------------------------------------------
//
// Flat key=value text. Keys are the training-config keys plus the dataset
// block below; anything else is rejected so a typo cannot silently change an
// experiment. `seed` belongs to the training config, so the dataset generator
// seed is spelled `data_seed`.

struct DataConfig {
    std::string kind = "blobs-hard";  // blobs | spirals | blobs-hard | idx
    Index num_classes = 2;
    Index samples_per_class = 100;
    Index input_dim = 2;
    double spread = 1.0;
    std::uint64_t data_seed = 0;
    Index train_per_class = -1;  // -1: 4/5 of samples_per_class
    bool standardize = false;
    std::string train_images, train_labels, test_images, test_labels;
};

const std::vector<std::string>& dataset_keys() {
    static const std::vector<std::string> keys = {
        "kind",           "num_classes", "samples_per_class", "input_dim",
        "spread",         "data_seed",   "train_per_class",   "standardize",
        "train_images",   "train_labels", "test_images",      "test_labels"};
    return keys;
}

bool is_dataset_key(const std::string& k) {
    const auto& keys = dataset_keys();
    return std::find(keys.begin(), keys.end(), k) != keys.end();
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ParamError("config: bad value for " + key + ": '" + v + "'");
    }
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw ParamError("config: bad value for " + key + ": '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ParamError("config: bad value for " + key + ": '" + v + "' (want true|false)");
}

DataConfig data_config_from_kv(const std::map<std::string, std::string>& kv) {
    DataConfig d;
    for (const auto& [k, v] : kv) {
        if (k == "kind") {
            if (v != "blobs" && v != "spirals" && v != "blobs-hard" && v != "idx") {
                throw ParamError("config: kind must be blobs|spirals|blobs-hard|idx, got '" + v + "'");
            }
            d.kind = v;
        } else if (k == "num_classes") {
            d.num_classes = static_cast<Index>(parse_int(k, v));
        } else if (k == "samples_per_class") {
            d.samples_per_class = static_cast<Index>(parse_int(k, v));
        } else if (k == "input_dim") {
            d.input_dim = static_cast<Index>(parse_int(k, v));
        } else if (k == "spread") {
            d.spread = parse_double(k, v);
        } else if (k == "data_seed") {
            d.data_seed = static_cast<std::uint64_t>(parse_int(k, v));
        } else if (k == "train_per_class") {
            d.train_per_class = static_cast<Index>(parse_int(k, v));
        } else if (k == "standardize") {
            d.standardize = parse_bool(k, v);
        } else if (k == "train_images") {
            d.train_images = v;
        } else if (k == "train_labels") {
            d.train_labels = v;
        } else if (k == "test_images") {
            d.test_images = v;
        } else if (k == "test_labels") {
            d.test_labels = v;
        } else {
            throw ParamError("config: unknown dataset key '" + k + "'");
        }
    }
    return d;
}

std::map<std::string, std::string> data_config_to_kv(const DataConfig& d) {
    std::map<std::string, std::string> kv;
    kv["kind"] = d.kind;
    kv["num_classes"] = std::to_string(d.num_classes);
    kv["samples_per_class"] = std::to_string(d.samples_per_class);
    kv["input_dim"] = std::to_string(d.input_dim);
    kv["spread"] = fmt_double(d.spread);
    kv["data_seed"] = std::to_string(d.data_seed);
    kv["train_per_class"] = std::to_string(d.train_per_class);
    kv["standardize"] = d.standardize ? "true" : "false";
    kv["train_images"] = d.train_images;
    kv["train_labels"] = d.train_labels;
    kv["test_images"] = d.test_images;
    kv["test_labels"] = d.test_labels;
    return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParamError("config file not found: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = line;
        if (auto hash = s.find('#'); hash != std::string::npos) s.erase(hash);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
        std::size_t start = s.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        s = s.substr(start);
        auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ParamError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        }
        std::string key = s.substr(0, eq);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string value = s.substr(eq + 1);
        std::size_t vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? std::string{} : value.substr(vstart);
        if (key.empty()) throw ParamError(path + ":" + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ParamError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

void apply_overrides(std::map<std::string, std::string>& kv, const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) {
        auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ParamError("override must be key=value, got '" + o + "'");
        }
        kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
}

// The full resolved configuration of a run. Training keys sit on top of the
// desk-scale defaults so a config file only has to state what it changes.
struct ResolvedConfig {
    TrainConfig train;
    DataConfig data;
};

ResolvedConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    std::map<std::string, std::string> file_kv;
    if (!config_path.empty()) file_kv = read_kv_file(config_path);
    apply_overrides(file_kv, overrides);

    std::map<std::string, std::string> train_kv = to_kv(TrainConfig::desk());
    std::map<std::string, std::string> data_kv;
    for (const auto& [k, v] : file_kv) {
        if (is_dataset_key(k)) {
            data_kv[k] = v;
        } else {
            if (!train_kv.count(k)) throw ParamError("config: unknown key '" + k + "'");
            train_kv[k] = v;
        }
    }
    ResolvedConfig rc;
    rc.train = train_config_from_kv(train_kv);
    rc.data = data_config_from_kv(data_kv);
    validate(rc.train);
    return rc;
}

// Canonical dump: parse-then-format, so dump -> load -> dump is byte-identical.
std::string dump_config(const ResolvedConfig& rc) {
    std::map<std::string, std::string> kv = to_kv(rc.train);
    for (const auto& [k, v] : data_config_to_kv(rc.data)) kv[k] = v;
    std::ostringstream out;
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
    return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

// ---- dataset construction ---------------------------------------------------

Index resolved_train_per_class(const DataConfig& d) {
    return d.train_per_class >= 0 ? d.train_per_class : d.samples_per_class * 4 / 5;
}

std::pair<Dataset, Dataset> build_dataset(const DataConfig& d) {
    std::pair<Dataset, Dataset> split;
    if (d.kind == "blobs-hard") {
        split = blobs_hard(d.data_seed);
    } else if (d.kind == "blobs" || d.kind == "spirals") {
        SyntheticSpec spec;
        spec.kind = d.kind == "blobs" ? SyntheticKind::Blobs : SyntheticKind::Spirals;
        spec.num_classes = d.num_classes;
        spec.samples_per_class = d.samples_per_class;
        spec.input_dim = d.input_dim;
        spec.spread = d.spread;
        spec.seed = d.data_seed;
        Index per = resolved_train_per_class(d);
        if (per <= 0 || per >= d.samples_per_class) {
            throw ParamError("config: train_per_class must be in (0, samples_per_class)");
        }
        split = split_per_class(gen_synthetic(spec), per);
    } else if (d.kind == "idx") {
        if (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() ||
            d.test_labels.empty()) {
            throw ParamError("config: kind=idx needs train_images/train_labels/test_images/test_labels");
        }
        split.first = load_idx(d.train_images, d.train_labels);
        split.second = load_idx(d.test_images, d.test_labels);
        if (split.first.num_classes != split.second.num_classes) {
            Index c = std::max(split.first.num_classes, split.second.num_classes);
            split.first.num_classes = split.second.num_classes = c;
        }
    } else {
        throw ParamError("config: unknown dataset kind '" + d.kind + "'");
    }
    if (d.standardize) {
        Standardizer st = fit_standardizer(split.first);
        split.first = apply_standardizer(st, split.first);
        split.second = apply_standardizer(st, split.second);
    }
    return split;
}

// ---- experiment checkpoints -------------------------------------------------

void append_params(Checkpoint& ck, const std::string& prefix, std::span<const Var> params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        ck.arrays.emplace_back(prefix + "." + std::to_string(i), params[i].value());
    }
}

Checkpoint experiment_checkpoint(const TeacherBundle& teacher, const ViewHeadSet& heads,
                                 const StudentBundle& student, const TrainConfig& cfg) {
    Checkpoint ck;
    ck.config = to_kv(cfg);
    append_params(ck, "teacher", parameters(teacher));
    append_params(ck, "heads", parameters(heads));
    // batchnorm running statistics are state, not parameters, but eval-mode
    // forwards need them to reproduce the run
    for (std::size_t i = 0; i < heads.heads.size(); ++i) {
        ck.arrays.emplace_back("heads.bn." + std::to_string(i) + ".mean", heads.heads[i].bn.running_mean);
        ck.arrays.emplace_back("heads.bn." + std::to_string(i) + ".var", heads.heads[i].bn.running_var);
    }
    append_params(ck, "student", parameters(student));
    return ck;
}

const Tensor& find_array(const Checkpoint& ck, const std::string& name) {
    for (const auto& [n, t] : ck.arrays) {
        if (n == name) return t;
    }
    throw FormatError("checkpoint is missing array '" + name + "'");
}

// ---- common output plumbing -------------------------------------------------

std::string out_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_output_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

// ---- subcommands --------------------------------------------------------------

int cmd_gen_data(const ResolvedConfig& rc, const std::string& outdir) {
    if (rc.data.kind == "idx") {
        throw ParamError("gen-data synthesizes data; kind=idx is for loading existing files");
    }
    auto [train, test] = build_dataset(rc.data);

    // IDX pixels are bytes in [0,1]; map each feature dimension there with one
    // affine transform fitted over both splits so train and test stay comparable.
    Index dims = train.dim();
    std::vector<double> lo(static_cast<std::size_t>(dims)), hi(static_cast<std::size_t>(dims));
    for (Index k = 0; k < dims; ++k) {
        double mn = train.features(0, k), mx = mn;
        for (Index i = 0; i < train.size(); ++i) {
            mn = std::min(mn, train.features(i, k));
            mx = std::max(mx, train.features(i, k));
        }
        for (Index i = 0; i < test.size(); ++i) {
            mn = std::min(mn, test.features(i, k));
            mx = std::max(mx, test.features(i, k));
        }
        lo[static_cast<std::size_t>(k)] = mn;
        hi[static_cast<std::size_t>(k)] = mx;
    }
    auto rescale = [&](Dataset& d) {
        for (Index i = 0; i < d.size(); ++i) {
            for (Index k = 0; k < dims; ++k) {
                double span = hi[static_cast<std::size_t>(k)] - lo[static_cast<std::size_t>(k)];
                double v = span > 0 ? (d.features(i, k) - lo[static_cast<std::size_t>(k)]) / span : 0.5;
                d.features(i, k) = v;
            }
        }
    };
    rescale(train);
    rescale(test);

    write_idx(train, out_path(outdir, "train-images.idx"), out_path(outdir, "train-labels.idx"));
    write_idx(test, out_path(outdir, "test-images.idx"), out_path(outdir, "test-labels.idx"));
    std::printf("wrote %lld train / %lld test samples (%lld classes, %lld dims) to %s\n",
                static_cast<long long>(train.size()), static_cast<long long>(test.size()),
                static_cast<long long>(train.num_classes), static_cast<long long>(dims), outdir.c_str());
    return 0;
}

int cmd_train_teacher(const ResolvedConfig& rc, const std::string& outdir) {
    auto [train, test] = build_dataset(rc.data);
    TeacherPretrainResult tp = pretrain_teacher(rc.train, train, test);
    save_checkpoint(tp.checkpoint, out_path(outdir, "teacher.ckpt"));
    write_metrics(tp.metrics, out_path(outdir, "teacher-metrics.jsonl"));
    std::printf("teacher: train acc %.4f, test acc %.4f (%d epochs)\n", tp.final_train_acc,
                tp.final_test_acc, rc.train.epochs);
    return 0;
}

int cmd_distill(const ResolvedConfig& rc, const std::string& outdir) {
    auto [train, test] = build_dataset(rc.data);
    TeacherPretrainResult tp = pretrain_teacher(rc.train, train, test);
    ExperimentResult ex = run_experiment(tp.teacher, rc.train, train, test);

    RunMetrics all = tp.metrics;
    all.insert(all.end(), ex.warmup.metrics.begin(), ex.warmup.metrics.end());
    all.insert(all.end(), ex.distill.metrics.begin(), ex.distill.metrics.end());
    write_metrics(all, out_path(outdir, "metrics.jsonl"));
    save_checkpoint(experiment_checkpoint(tp.teacher, ex.heads, ex.student, rc.train),
                    out_path(outdir, "experiment.ckpt"));
    save_checkpoint(ex.distill.student_checkpoint, out_path(outdir, "student.ckpt"));

    std::printf("teacher test acc %.4f\n", tp.final_test_acc);
    std::printf("student test acc %.4f (train %.4f), ensemble %.4f, mode %s\n",
                ex.distill.final_test_acc, ex.distill.final_train_acc, ex.distill.ensemble_test_acc,
                to_string(rc.train.aug_mode).c_str());
    for (std::size_t i = 0; i < ex.distill.view_test_accs.size(); ++i) {
        std::printf("view %zu test acc %.4f\n", i, ex.distill.view_test_accs[i]);
    }
    if (ex.distill.final_report) {
        const DiversityReport& r = *ex.distill.final_report;
        std::printf("diversity %.6f, inter angle %.2f deg, intra angle %.2f deg, bound slack %.3e\n",
                    r.diversity_direct, r.mean_inter_angle_deg, r.mean_intra_angle_deg, r.bound_slack);
    }
    if (ex.distill.diverged) {
        std::fprintf(stderr, "distillation diverged at epoch %d; wrote last good student checkpoint\n",
                     ex.distill.diverged_epoch);
        return 2;
    }
    return 0;
}

int cmd_compare(const ResolvedConfig& rc, const std::string& outdir, const std::string& modes_csv,
                const std::string& seeds_csv, const std::string& ablations_csv) {
    std::vector<AugMode> modes;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> ablations;
    {
        std::stringstream ms(modes_csv);
        std::string tok;
        while (std::getline(ms, tok, ',')) {
            if (!tok.empty()) modes.push_back(aug_mode_from_string(tok));
        }
        std::stringstream ss(seeds_csv);
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) seeds.push_back(static_cast<std::uint64_t>(parse_int("seeds", tok)));
        }
        std::stringstream as(ablations_csv);
        while (std::getline(as, tok, ',')) {
            if (!tok.empty()) ablations.push_back(tok);
        }
    }
    auto [train, test] = build_dataset(rc.data);
    CompareTable table = compare_experiment(rc.train, modes, seeds, ablations, train, test);
    write_text_file(out_path(outdir, "compare-rows.csv"), to_csv(table));
    std::string summary = to_csv(summarize(table));
    write_text_file(out_path(outdir, "compare-summary.csv"), summary);
    std::fputs(summary.c_str(), stdout);
    return 0;
}

int cmd_report_diversity(const ResolvedConfig& rc, const std::string& outdir,
                         const std::string& ckpt_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    std::map<std::string, std::string> train_kv = to_kv(TrainConfig::desk());
    for (const auto& [k, v] : ck.config) {
        if (!train_kv.count(k)) throw FormatError("checkpoint config has unknown key '" + k + "'");
        train_kv[k] = v;
    }
    TrainConfig cfg = train_config_from_kv(train_kv);
    if (cfg.n_views < 2) {
        throw ParamError("report-diversity needs a checkpoint trained with at least 2 views");
    }
    auto [train, test] = build_dataset(rc.data);

    Rng scratch(0);  // shapes only; every parameter is overwritten from the checkpoint
    TeacherBundle teacher = make_desk_teacher(train.dim(), train.num_classes, cfg.tau_z, scratch);
    ViewHeadSet heads = build_view_heads(cfg.n_views, kTeacherFeatureDim, train.num_classes,
                                         cfg.dropout_probs, cfg.tau_z, scratch);
    auto tparams = parameters(teacher);
    auto hparams = parameters(heads);
    restore_params(ck, "teacher", tparams);
    restore_params(ck, "heads", hparams);
    for (std::size_t i = 0; i < heads.heads.size(); ++i) {
        heads.heads[i].bn.running_mean = find_array(ck, "heads.bn." + std::to_string(i) + ".mean");
        heads.heads[i].bn.running_var = find_array(ck, "heads.bn." + std::to_string(i) + ".var");
    }

    DiversityReport r = head_diversity_report(teacher, heads, test);
    std::ostringstream out;
    out << "views " << cfg.n_views << "\n";
    out << "diversity " << fmt_double(r.diversity_direct) << "\n";
    out << "inter-form " << fmt_double(r.inter_form) << "\n";
    out << "intra-form " << fmt_double(r.intra_form) << "\n";
    out << "raw-variance " << fmt_double(r.raw_variance) << "\n";
    out << "mean-inter-angle-deg " << fmt_double(r.mean_inter_angle_deg) << "\n";
    out << "mean-intra-angle-deg " << fmt_double(r.mean_intra_angle_deg) << "\n";
    out << "kl-bound-lhs " << fmt_double(r.kl_bound_lhs) << "\n";
    out << "kl-bound-rhs " << fmt_double(r.kl_bound_rhs) << "\n";
    out << "bound-slack " << fmt_double(r.bound_slack) << "\n";
    write_text_file(out_path(outdir, "diversity-report.txt"), out.str());
    std::fputs(out.str().c_str(), stdout);
    return 0;
}

// ---- theory verification ------------------------------------------------------

// Offset form with the i == j diagonal wrongly included in the pair sum; kept
// behind a hidden flag as a negative control that the identity check really
// can fail.
double intra_form_with_diagonal(const Tensor& teacher, const LogitSet& set) {
    const Index n = set.count();
    const Index batch = set.batch();
    const Index classes = set.classes();
    double total = 0.0;
    for (Index b = 0; b < batch; ++b) {
        std::vector<Eigen::VectorXd> offsets;
        offsets.reserve(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            Eigen::VectorXd d(classes);
            for (Index c = 0; c < classes; ++c) {
                d(c) = teacher(b, c) - set.members[static_cast<std::size_t>(i)](b, c);
            }
            offsets.push_back(std::move(d));
        }
        double acc = 0.0;
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < n; ++j) {  // bug on purpose: j should skip i
                acc += offsets[static_cast<std::size_t>(i)].dot(offsets[static_cast<std::size_t>(j)]);
            }
        }
        total += -acc / static_cast<double>(n);
    }
    return total / static_cast<double>(batch);
}

Tensor random_simplex_rows(Index rows, Index cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (Index r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (Index c = 0; c < cols; ++c) {
            double e = -std::log(1.0 - rng.uniform());  // Exp(1): Dirichlet(1,..,1) after normalizing
            t(r, c) = e;
            sum += e;
        }
        for (Index c = 0; c < cols; ++c) t(r, c) /= sum;
    }
    return t;
}

struct VerifyOutcome {
    double max_inter_dev = 0.0;
    double max_intra_dev = 0.0;
    double min_bound_slack = std::numeric_limits<double>::infinity();
    double max_coincide_slack = 0.0;  // |slack| when all members are identical
    double worst_backstep = 0.0;      // largest diversity decrease along a growing ray
    bool pass = false;
};

VerifyOutcome run_verify_theory(int trials, std::uint64_t seed, bool corrupt_intra) {
    VerifyOutcome out;
    Rng root(seed);
    for (int t = 0; t < trials; ++t) {
        Rng r = root.fork(static_cast<std::uint64_t>(t));
        const Index n = 2 + static_cast<Index>(r.uniform_index(7));    // 2..8 members
        const Index c = 2 + static_cast<Index>(r.uniform_index(19));   // 2..20 classes
        const Index b = 1 + static_cast<Index>(r.uniform_index(4));    // small batch

        LogitSet set;
        for (Index i = 0; i < n; ++i) set.members.push_back(random_simplex_rows(b, c, r));

        // Identity: pairwise-cosine form vs direct member variance.
        out.max_inter_dev =
            std::max(out.max_inter_dev, std::abs(diversity_inter_form(set) - total_logit_variance(set)));

        // Identity: offset form vs variance, teacher placed at the member mean
        // so the offsets cancel.
        Tensor mean = Tensor::zeros({b, c});
        for (const Tensor& m : set.members) mean.array() += m.array();
        mean.array() /= static_cast<double>(n);
        double intra = corrupt_intra ? intra_form_with_diagonal(mean, set)
                                     : diversity_intra_form(mean, set);
        out.max_intra_dev = std::max(out.max_intra_dev, std::abs(intra - total_logit_variance(set)));

        // Averaging bound against a random target, sharpened targets included.
        Tensor y = random_simplex_rows(b, c, r);
        double u = r.uniform();
        if (u < 0.25) {
            // near-one-hot target
            for (Index row = 0; row < b; ++row) {
                Index arg = 0;
                for (Index k = 1; k < c; ++k) {
                    if (y(row, k) > y(row, arg)) arg = k;
                }
                for (Index k = 0; k < c; ++k) y(row, k) = 1e-7;
                y(row, arg) = 1.0 - 1e-7 * static_cast<double>(c - 1);
            }
        } else if (u < 0.5) {
            // spiky target: raise to a power and renormalize
            for (Index row = 0; row < b; ++row) {
                double sum = 0.0;
                for (Index k = 0; k < c; ++k) {
                    y(row, k) = std::pow(y(row, k), 4.0);
                    sum += y(row, k);
                }
                for (Index k = 0; k < c; ++k) y(row, k) /= sum;
            }
        }
        KlBoundResult kb = kl_bound_check(y, set);
        out.min_bound_slack = std::min(out.min_bound_slack, kb.min_sample_slack);

        // Coinciding members: the bound collapses to equality.
        if (t % 10 == 0) {
            LogitSet same;
            for (Index i = 0; i < n; ++i) same.members.push_back(set.members[0]);
            KlBoundResult eq = kl_bound_check(y, same);
            out.max_coincide_slack = std::max(out.max_coincide_slack, std::abs(eq.slack));
        }

        // Monotone link: growing a zero-sum perturbation never lowers diversity.
        {
            Tensor base = random_simplex_rows(b, c, r);
            std::vector<Tensor> perturb;
            Tensor psum = Tensor::zeros({b, c});
            for (Index i = 0; i < n; ++i) {
                Tensor p = r.normal_tensor({b, c});
                for (Index row = 0; row < b; ++row) {
                    double rowmean = 0.0;
                    for (Index k = 0; k < c; ++k) rowmean += p(row, k);
                    rowmean /= static_cast<double>(c);
                    for (Index k = 0; k < c; ++k) p(row, k) -= rowmean;  // keep rows on the simplex plane
                }
                psum.array() += p.array();
                perturb.push_back(std::move(p));
            }
            for (Tensor& p : perturb) p.array() -= psum.array() / static_cast<double>(n);  // members stay centered
            double t_max = std::numeric_limits<double>::infinity();
            for (const Tensor& p : perturb) {
                for (Index idx = 0; idx < p.size(); ++idx) {
                    if (p[idx] < 0.0) t_max = std::min(t_max, (base[idx] - 1e-9) / (-p[idx]));
                }
            }
            if (!std::isfinite(t_max) || t_max <= 0.0) t_max = 0.0;
            double prev = -std::numeric_limits<double>::infinity();
            for (double frac : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                LogitSet ray;
                for (const Tensor& p : perturb) {
                    Tensor m = base;
                    m.array() += frac * t_max * p.array();
                    ray.members.push_back(std::move(m));
                }
                double d = generalized_diversity(ray);
                if (prev > -std::numeric_limits<double>::infinity() && d < prev) {
                    out.worst_backstep = std::max(out.worst_backstep, prev - d);
                }
                prev = d;
            }
        }
    }
    out.pass = out.max_inter_dev <= 1e-9 && out.max_intra_dev <= 1e-9 &&
               out.min_bound_slack >= -1e-12 && out.max_coincide_slack <= 1e-12 &&
               out.worst_backstep <= 1e-12;
    return out;
}

int cmd_verify_theory(int trials, std::uint64_t seed, bool corrupt_intra, const std::string& outdir) {
    if (trials < 1) throw ParamError("verify-theory: trials must be at least 1");
    VerifyOutcome v = run_verify_theory(trials, seed, corrupt_intra);
    std::ostringstream out;
    char buf[64];
    auto fmt = [&](double x) {
        std::snprintf(buf, sizeof(buf), "%.6e", x);
        return std::string(buf);
    };
    out << "trials " << trials << " seed " << seed << "\n";
    out << "identity-inter max deviation " << fmt(v.max_inter_dev) << "\n";
    out << "identity-intra max deviation " << fmt(v.max_intra_dev) << "\n";
    out << "kl-bound min slack " << fmt(v.min_bound_slack) << "\n";
    out << "kl-bound coinciding max |slack| " << fmt(v.max_coincide_slack) << "\n";
    out << "monotone-link worst backstep " << fmt(v.worst_backstep) << "\n";
    out << "result " << (v.pass ? "PASS" : "FAIL") << "\n";
    write_text_file(out_path(outdir, "verify-report.txt"), out.str());
    std::fputs(out.str().c_str(), stdout);
    return v.pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"angular view-augmentation distillation driver"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string outdir = ".";

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", config_path, "key=value config file");
        if (config_required) opt->required();
        sub->add_option("--override", overrides, "key=value applied after the config file");
        sub->add_option("--output-dir", outdir, "directory for output files");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "synthesize a dataset and write IDX files");
    add_common(gen, true);

    CLI::App* teach = app.add_subcommand("train-teacher", "pretrain the teacher and checkpoint it");
    add_common(teach, true);

    CLI::App* dist = app.add_subcommand("distill", "run the full augmented distillation experiment");
    add_common(dist, true);

    CLI::App* comp = app.add_subcommand("compare", "run several modes/seeds and tabulate");
    add_common(comp, true);
    std::string modes_csv = "angular,none,noise";
    std::string seeds_csv = "1,2,3";
    std::string ablations_csv;
    comp->add_option("--modes", modes_csv, "comma list of aug modes");
    comp->add_option("--seeds", seeds_csv, "comma list of seeds (at least 2)");
    comp->add_option("--ablations", ablations_csv, "comma list of full|inter_only|intra_only|gt_only");

    CLI::App* rep = app.add_subcommand("report-diversity", "diversity report for a saved experiment");
    add_common(rep, true);
    std::string ckpt_path;
    rep->add_option("--checkpoint", ckpt_path, "experiment checkpoint from distill")->required();

    CLI::App* verify = app.add_subcommand("verify-theory", "numerically check the diversity identities");
    int trials = 1000;
    std::uint64_t vseed = 0;
    bool corrupt_intra = false;
    verify->add_option("--trials", trials, "random configurations to sample");
    verify->add_option("--seed", vseed, "sampling seed");
    verify->add_option("--output-dir", outdir, "directory for output files");
    verify->add_flag("--corrupt-intra-convention", corrupt_intra)->group("");  // negative control

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help() << "\n";
        return 1;
    }

    try {
        ensure_output_dir(outdir);
        if (verify->parsed()) return cmd_verify_theory(trials, vseed, corrupt_intra, outdir);

        ResolvedConfig rc = resolve_config(config_path, overrides);
        write_text_file(out_path(outdir, "config.cfg"), dump_config(rc));
        if (gen->parsed()) return cmd_gen_data(rc, outdir);
        if (teach->parsed()) return cmd_train_teacher(rc, outdir);
        if (dist->parsed()) return cmd_distill(rc, outdir);
        if (comp->parsed()) return cmd_compare(rc, outdir, modes_csv, seeds_csv, ablations_csv);
        if (rep->parsed()) return cmd_report_diversity(rc, outdir, ckpt_path);
        std::cerr << "error: no subcommand\n" << app.help() << "\n";
        return 1;
    } catch (const ParamError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
