#include "akd/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "akd/errors.hpp"

namespace akd {

namespace {

// 17 significant digits: enough that strtod gives the exact double back.
std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s(buf);
    if (s == "-nan") s = "nan";
    return s;
}

// Shortest digit string that round-trips; used where humans read the output.
std::string fmt_shortest(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

std::string json_number(double v) { return std::isfinite(v) ? fmt17(v) : "null"; }

double parse_double_field(const std::string& key, const std::string& s) {
    if (s.empty()) throw ParamError("config: empty value for '" + key + "'");
    const char* b = s.c_str();
    char* e = nullptr;
    double v = std::strtod(b, &e);
    if (e != b + s.size()) throw ParamError("config: bad number for '" + key + "': '" + s + "'");
    return v;
}

long long parse_int_field(const std::string& key, const std::string& s) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParamError("config: bad integer for '" + key + "': '" + s + "'");
    return v;
}

std::uint64_t parse_u64_field(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParamError("config: bad unsigned integer for '" + key + "': '" + s + "'");
    return v;
}

bool parse_bool_field(const std::string& key, const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ParamError("config: bad boolean for '" + key + "' (want true|false): '" + s + "'");
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    if (s.empty()) return parts;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(',', start);
        parts.push_back(s.substr(start, pos == std::string::npos ? pos : pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return parts;
}

template <typename T, typename F>
std::string join_list(const std::vector<T>& xs, F fmt) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += fmt(xs[i]);
    }
    return out;
}

struct MeanAcc {
    double sum = 0.0;
    long n = 0;
    void add(double v) {
        sum += v;
        ++n;
    }
    double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

}  // namespace

// ---- configuration -----------------------------------------------------------

std::string to_string(AugMode m) {
    switch (m) {
        case AugMode::None: return "none";
        case AugMode::Noise: return "noise";
        case AugMode::Angular: return "angular";
    }
    return "angular";
}

AugMode aug_mode_from_string(const std::string& s) {
    if (s == "none") return AugMode::None;
    if (s == "noise") return AugMode::Noise;
    if (s == "angular") return AugMode::Angular;
    throw ParamError("config: unknown aug_mode '" + s + "' (none|noise|angular)");
}

std::string to_string(Level l) {
    switch (l) {
        case Level::Feature: return "feature";
        case Level::Logit: return "logit";
        case Level::Both: return "both";
    }
    return "both";
}

Level level_from_string(const std::string& s) {
    if (s == "feature") return Level::Feature;
    if (s == "logit") return Level::Logit;
    if (s == "both") return Level::Both;
    throw ParamError("config: unknown level '" + s + "' (feature|logit|both)");
}

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.epochs = 60;
    c.warmup_epochs = 8;
    c.lr_milestones = {35, 45, 55};
    return c;
}

TrainConfig TrainConfig::desk_blobs_hard() {
    TrainConfig c = desk();
    c.tau_z = 2.0;
    c.tau_c = 1.0;
    c.ensemble_weights = {0.7, 0.06, 0.06, 0.06, 0.06, 0.06};
    return c;
}

int resolved_warmup_epochs(const TrainConfig& cfg) {
    if (cfg.warmup_epochs >= 0) return cfg.warmup_epochs;
    return std::max(1, cfg.epochs * 30 / 240);
}

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw ParamError("config: epochs must be >= 1");
    const int warm = resolved_warmup_epochs(cfg);
    if (warm >= cfg.epochs) throw ParamError("config: warmup_epochs must be < epochs");
    if (cfg.batch_size < 1) throw ParamError("config: batch_size must be >= 1");
    if (!(cfg.lr > 0.0)) throw ParamError("config: lr must be positive");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0))
        throw ParamError("config: momentum must lie in [0, 1)");
    if (!(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0))
        throw ParamError("config: lr_decay must lie in (0, 1]");
    for (std::size_t i = 0; i < cfg.lr_milestones.size(); ++i) {
        if (cfg.lr_milestones[i] >= cfg.epochs)
            throw ParamError("config: lr_milestones must be < epochs");
        if (i > 0 && cfg.lr_milestones[i] <= cfg.lr_milestones[i - 1])
            throw ParamError("config: lr_milestones must be strictly increasing");
    }
    if (cfg.n_views < 0) throw ParamError("config: n_views must be >= 0");
    if (cfg.aug_mode == AugMode::Angular && cfg.n_views > 0) {
        if (cfg.dropout_probs.size() != static_cast<std::size_t>(cfg.n_views))
            throw ParamError("config: dropout_probs needs one entry per view");
        for (double p : cfg.dropout_probs)
            if (!(p >= 0.0 && p < 1.0)) throw ParamError("config: dropout_probs must lie in [0, 1)");
    }
    if (!(cfg.tau_z > 0.0)) throw ParamError("config: tau_z must be positive");
    if (!(cfg.tau_c > 0.0)) throw ParamError("config: tau_c must be positive");
    if (!(cfg.tau_feat > 0.0)) throw ParamError("config: tau_feat must be positive");
    if (!(cfg.gamma_init >= 0.0 && cfg.gamma_init <= 1.0))
        throw ParamError("config: gamma_init must lie in [0, 1]");
    if (!(cfg.noise_sigma >= 0.0)) throw ParamError("config: noise_sigma must be >= 0");
    if (!cfg.ensemble_weights.empty()) {
        if (cfg.ensemble_weights.size() != static_cast<std::size_t>(cfg.n_views) + 1)
            throw ParamError("config: ensemble_weights needs n_views + 1 entries (teacher first)");
        double sum = 0.0;
        for (double w : cfg.ensemble_weights) {
            if (w < 0.0) throw ParamError("config: ensemble_weights must be nonnegative");
            sum += w;
        }
        if (!(sum > 0.0)) throw ParamError("config: ensemble_weights must not all be zero");
    }
}

std::map<std::string, std::string> to_kv(const TrainConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["epochs"] = std::to_string(cfg.epochs);
    kv["warmup_epochs"] = std::to_string(cfg.warmup_epochs);
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["lr"] = fmt_shortest(cfg.lr);
    kv["momentum"] = fmt_shortest(cfg.momentum);
    kv["lr_milestones"] = join_list(cfg.lr_milestones, [](int m) { return std::to_string(m); });
    kv["lr_decay"] = fmt_shortest(cfg.lr_decay);
    kv["seed"] = std::to_string(cfg.seed);
    kv["n_views"] = std::to_string(cfg.n_views);
    kv["dropout_probs"] = join_list(cfg.dropout_probs, fmt_shortest);
    kv["tau_z"] = fmt_shortest(cfg.tau_z);
    kv["tau_c"] = fmt_shortest(cfg.tau_c);
    kv["gamma_init"] = fmt_shortest(cfg.gamma_init);
    kv["tau_feat"] = fmt_shortest(cfg.tau_feat);
    kv["level"] = to_string(cfg.level);
    kv["aug_mode"] = to_string(cfg.aug_mode);
    kv["ensemble_weights"] = join_list(cfg.ensemble_weights, fmt_shortest);
    kv["noise_sigma"] = fmt_shortest(cfg.noise_sigma);
    kv["disable_inter"] = cfg.disable_inter ? "true" : "false";
    kv["disable_intra"] = cfg.disable_intra ? "true" : "false";
    return kv;
}

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig cfg;
    for (const auto& [key, value] : kv) {
        if (key == "epochs") {
            cfg.epochs = static_cast<int>(parse_int_field(key, value));
        } else if (key == "warmup_epochs") {
            cfg.warmup_epochs = static_cast<int>(parse_int_field(key, value));
        } else if (key == "batch_size") {
            cfg.batch_size = static_cast<Index>(parse_int_field(key, value));
        } else if (key == "lr") {
            cfg.lr = parse_double_field(key, value);
        } else if (key == "momentum") {
            cfg.momentum = parse_double_field(key, value);
        } else if (key == "lr_milestones") {
            cfg.lr_milestones.clear();
            for (const std::string& part : split_commas(value))
                cfg.lr_milestones.push_back(static_cast<int>(parse_int_field(key, part)));
        } else if (key == "lr_decay") {
            cfg.lr_decay = parse_double_field(key, value);
        } else if (key == "seed") {
            cfg.seed = parse_u64_field(key, value);
        } else if (key == "n_views") {
            cfg.n_views = static_cast<int>(parse_int_field(key, value));
        } else if (key == "dropout_probs") {
            cfg.dropout_probs.clear();
            for (const std::string& part : split_commas(value))
                cfg.dropout_probs.push_back(parse_double_field(key, part));
        } else if (key == "tau_z") {
            cfg.tau_z = parse_double_field(key, value);
        } else if (key == "tau_c") {
            cfg.tau_c = parse_double_field(key, value);
        } else if (key == "gamma_init") {
            cfg.gamma_init = parse_double_field(key, value);
        } else if (key == "tau_feat") {
            cfg.tau_feat = parse_double_field(key, value);
        } else if (key == "level") {
            cfg.level = level_from_string(value);
        } else if (key == "aug_mode") {
            cfg.aug_mode = aug_mode_from_string(value);
        } else if (key == "ensemble_weights") {
            cfg.ensemble_weights.clear();
            for (const std::string& part : split_commas(value))
                cfg.ensemble_weights.push_back(parse_double_field(key, part));
        } else if (key == "noise_sigma") {
            cfg.noise_sigma = parse_double_field(key, value);
        } else if (key == "disable_inter") {
            cfg.disable_inter = parse_bool_field(key, value);
        } else if (key == "disable_intra") {
            cfg.disable_intra = parse_bool_field(key, value);
        } else {
            throw ParamError("config: unknown key '" + key + "'");
        }
    }
    return cfg;
}

// ---- metrics -------------------------------------------------------------------

std::string metrics_json_line(const MetricsRow& row) {
    std::string out = "{\"epoch\":" + std::to_string(row.epoch);
    out += ",\"phase\":\"" + row.phase + "\"";
    out += ",\"loss_total\":" + json_number(row.loss_total);
    auto field = [&out](const char* name, const std::optional<double>& v) {
        out += ",\"";
        out += name;
        out += "\":";
        out += v ? json_number(*v) : "null";
    };
    field("loss_inter_constraint", row.loss_inter_constraint);
    field("loss_inter_diversity", row.loss_inter_diversity);
    field("loss_intra", row.loss_intra);
    field("loss_aug_gt", row.loss_aug_gt);
    field("loss_kd_kl", row.loss_kd_kl);
    field("loss_feat_contrastive", row.loss_feat_contrastive);
    field("loss_student_ce", row.loss_student_ce);
    field("train_acc", row.train_acc);
    field("test_acc", row.test_acc);
    field("diversity", row.diversity);
    field("diversity_inter_form", row.diversity_inter_form);
    field("diversity_intra_form", row.diversity_intra_form);
    field("raw_variance", row.raw_variance);
    field("kl_bound_lhs", row.kl_bound_lhs);
    field("kl_bound_rhs", row.kl_bound_rhs);
    field("bound_slack", row.bound_slack);
    field("mean_inter_angle_deg", row.mean_inter_angle_deg);
    field("mean_intra_angle_deg", row.mean_intra_angle_deg);
    field("gamma", row.gamma);
    field("gate_active_fraction", row.gate_active_fraction);
    out += "}";
    return out;
}

void write_metrics_row(const MetricsRow& row, std::ostream& sink) {
    sink << metrics_json_line(row) << '\n';
    sink.flush();
    if (!sink) throw IoError("metrics: write failed");
}

void write_metrics(const RunMetrics& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("metrics: cannot open '" + path + "' for writing");
    for (const MetricsRow& row : rows) write_metrics_row(row, out);
}

// ---- optimizer ---------------------------------------------------------------

SgdState make_sgd(std::span<const Var> params, const TrainConfig& cfg) {
    SgdState s;
    s.base_lr = cfg.lr;
    s.momentum = cfg.momentum;
    s.milestones = cfg.lr_milestones;
    s.decay = cfg.lr_decay;
    s.current_lr = cfg.lr;
    s.velocity.reserve(params.size());
    for (const Var& p : params) s.velocity.push_back(Tensor::zeros(p.shape()));
    return s;
}

double lr_at_epoch(const SgdState& state, int epoch) {
    int hits = 0;
    for (int m : state.milestones)
        if (m <= epoch) ++hits;
    return state.base_lr * std::pow(state.decay, hits);
}

void sgd_update(std::span<Var> params, SgdState& state, int epoch) {
    if (params.size() != state.velocity.size())
        throw ShapeError("sgd_update: parameter list does not match optimizer state");
    const double lr = lr_at_epoch(state, epoch);
    state.current_lr = lr;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& v = state.velocity[i];
        const Tensor& g = params[i].grad();
        if (!v.same_shape(g))
            throw ShapeError("sgd_update: gradient shape does not match velocity");
        v.array() = state.momentum * v.array() + g.array();
        params[i].mutable_value().array() -= lr * v.array();
    }
}

void clamp_unit_interval(Var& v) {
    auto& arr = v.mutable_value().array();
    arr = arr.max(0.0).min(1.0);
}

// ---- checkpoints ---------------------------------------------------------------

Checkpoint snapshot_params(const std::string& prefix, std::span<const Var> params,
                           const TrainConfig& cfg) {
    Checkpoint ck;
    ck.config = to_kv(cfg);
    ck.arrays.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        ck.arrays.emplace_back(prefix + "." + std::to_string(i), params[i].value());
    return ck;
}

void restore_params(const Checkpoint& ck, const std::string& prefix, std::span<Var> params) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ck.arrays) by_name[name] = &t;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string name = prefix + "." + std::to_string(i);
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw FormatError("checkpoint: missing array '" + name + "'");
        if (!it->second->same_shape(params[i].value()))
            throw FormatError("checkpoint: shape mismatch for array '" + name + "'");
        params[i].mutable_value() = *it->second;
    }
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out << "akd-checkpoint " << ck.format_version << "\n";
    out << "config " << ck.config.size() << "\n";
    for (const auto& [k, v] : ck.config) out << k << "=" << v << "\n";
    out << "rng " << ck.rng_state << "\n";
    out << "tensors " << ck.arrays.size() << "\n";
    for (const auto& [name, t] : ck.arrays) {
        out << "tensor " << name << " " << t.rank();
        for (Index d : t.shape()) out << " " << d;
        out << "\n";
        for (Index i = 0; i < t.size(); ++i) {
            if (i) out << " ";
            out << fmt17(t[i]);
        }
        out << "\n";
    }
    out << "end\n";
    out.flush();
    if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

namespace {

std::string next_line(std::ifstream& in, const char* what) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(std::string("checkpoint: truncated before ") + what);
    return line;
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    Checkpoint ck;

    {
        std::istringstream hdr(next_line(in, "header"));
        std::string tag;
        int version = -1;
        hdr >> tag >> version;
        if (tag != "akd-checkpoint" || hdr.fail())
            throw FormatError("checkpoint: '" + path + "' is not a checkpoint file");
        if (version != 1)
            throw FormatError("checkpoint: unsupported format version " + std::to_string(version) +
                              " (this build reads version 1)");
        ck.format_version = version;
    }

    {
        std::istringstream cl(next_line(in, "config count"));
        std::string tag;
        long long n = -1;
        cl >> tag >> n;
        if (tag != "config" || cl.fail() || n < 0) throw FormatError("checkpoint: bad config count");
        for (long long i = 0; i < n; ++i) {
            std::string line = next_line(in, "config entry");
            std::size_t eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("checkpoint: bad config line '" + line + "'");
            ck.config[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }

    {
        std::string line = next_line(in, "rng state");
        if (line.rfind("rng", 0) != 0) throw FormatError("checkpoint: missing rng line");
        ck.rng_state = line.size() > 4 ? line.substr(4) : "";
    }

    long long tensor_count = -1;
    {
        std::istringstream tl(next_line(in, "tensor count"));
        std::string tag;
        tl >> tag >> tensor_count;
        if (tag != "tensors" || tl.fail() || tensor_count < 0)
            throw FormatError("checkpoint: bad tensor count");
    }

    for (long long ti = 0; ti < tensor_count; ++ti) {
        std::istringstream hl(next_line(in, "tensor header"));
        std::string tag, name;
        long long rank = -1;
        hl >> tag >> name >> rank;
        if (tag != "tensor" || hl.fail() || rank < 0 || rank > 2)
            throw FormatError("checkpoint: corrupted shape header for tensor #" + std::to_string(ti));
        std::vector<Index> shape;
        Index size = 1;
        for (long long d = 0; d < rank; ++d) {
            long long dim = -1;
            hl >> dim;
            if (hl.fail() || dim <= 0)
                throw FormatError("checkpoint: corrupted shape for tensor '" + name + "'");
            shape.push_back(static_cast<Index>(dim));
            size *= static_cast<Index>(dim);
        }
        std::string values = next_line(in, "tensor values");
        Eigen::ArrayXd data(size);
        const char* p = values.c_str();
        for (Index i = 0; i < size; ++i) {
            char* end = nullptr;
            double v = std::strtod(p, &end);
            if (end == p)
                throw FormatError("checkpoint: too few values for tensor '" + name + "'");
            data[i] = v;
            p = end;
        }
        while (*p == ' ') ++p;
        if (*p != '\0') throw FormatError("checkpoint: trailing data after tensor '" + name + "'");
        ck.arrays.emplace_back(name, Tensor(std::move(shape), std::move(data)));
    }

    if (next_line(in, "end marker") != "end") throw FormatError("checkpoint: missing end marker");
    return ck;
}

// ---- models at desk scale -------------------------------------------------------

TeacherBundle make_desk_teacher(Index d_in, Index num_classes, double tau_z, Rng& rng) {
    return make_teacher(d_in, {128, 128}, kTeacherFeatureDim, num_classes, tau_z, rng);
}

StudentBundle make_desk_student(Index d_in, Index num_classes, Rng& rng) {
    return make_student(d_in, {32, 32}, kStudentFeatureDim, kTeacherFeatureDim, num_classes, rng);
}

// ---- evaluation ------------------------------------------------------------------

double evaluate_top1(const Tensor& scores, const std::vector<int>& labels) {
    if (labels.empty()) throw ParamError("evaluate_top1: empty dataset");
    if (scores.rows() != static_cast<Index>(labels.size()))
        throw ShapeError("evaluate_top1: score rows do not match label count");
    long correct = 0;
    for (Index r = 0; r < scores.rows(); ++r) {
        Index best = 0;
        for (Index c = 1; c < scores.cols(); ++c)
            if (scores(r, c) > scores(r, best)) best = c;
        if (static_cast<int>(best) == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate_top1(const TeacherBundle& teacher, const Dataset& data) {
    if (data.size() == 0) throw ParamError("evaluate_top1: empty dataset");
    return evaluate_top1(teacher_forward(teacher, data.features).raw_logits.value(), data.labels);
}

double evaluate_top1(const StudentBundle& student, const Dataset& data) {
    if (data.size() == 0) throw ParamError("evaluate_top1: empty dataset");
    return evaluate_top1(student_forward(student, data.features).raw_logits.value(), data.labels);
}

// ---- training pipelines ------------------------------------------------------------

TeacherPretrainResult pretrain_teacher(const TrainConfig& cfg, const Dataset& train,
                                       const Dataset& test) {
    validate(cfg);
    check_dataset(train, "harness");
    check_dataset(test, "harness");

    Rng root(cfg.seed);
    Rng init_rng = root.fork("teacher-init");
    TeacherPretrainResult res;
    res.teacher = make_desk_teacher(train.dim(), train.num_classes, cfg.tau_z, init_rng);
    std::vector<Var> params = parameters(res.teacher);
    SgdState opt = make_sgd(params, cfg);
    Rng data_root = root.fork("teacher-data");

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng er = data_root.fork(static_cast<std::uint64_t>(epoch));
        MeanAcc loss_acc;
        for (const Batch& b : batch_iter(train, cfg.batch_size, er, true)) {
            TeacherOutput out = teacher_forward(res.teacher, b.features);
            Var loss = student_ce_loss(b.labels, out.raw_logits);
            if (!loss.value().all_finite())
                throw NumericError("pretrain_teacher: loss diverged at epoch " +
                                   std::to_string(epoch));
            for (Var& p : params) p.zero_grad();
            backward(loss);
            sgd_update(params, opt, epoch);
            loss_acc.add(loss.value().item());
        }
        MetricsRow row;
        row.epoch = epoch;
        row.phase = "teacher";
        row.loss_total = loss_acc.mean();
        row.loss_student_ce = row.loss_total;
        row.train_acc = evaluate_top1(res.teacher, train);
        row.test_acc = evaluate_top1(res.teacher, test);
        res.metrics.push_back(row);
    }

    res.final_train_acc = *res.metrics.back().train_acc;
    res.final_test_acc = *res.metrics.back().test_acc;
    res.checkpoint = snapshot_params("teacher", params, cfg);
    res.checkpoint.rng_state = root.state_string();
    return res;
}

namespace {

// Shared tail of the diversity reporting: view distributions against the
// teacher's, bound target = labels one-hot smoothed to be strictly positive.
DiversityReport views_report(const Tensor& teacher_probs, const AugmentedViews& views,
                             const std::vector<int>& labels, Index num_classes) {
    LogitSet set;
    set.members.reserve(views.logits.size());
    for (const Var& z : views.logits) set.members.push_back(z.value());
    Tensor y = one_hot(labels, num_classes);
    const double smooth = 1e-6;
    y.array() = (1.0 - smooth) * y.array() + smooth / static_cast<double>(num_classes);
    return compute_diversity_report(teacher_probs, set, y);
}

void fill_report_fields(MetricsRow& row, const DiversityReport& rep) {
    row.diversity = rep.diversity_direct;
    row.diversity_inter_form = rep.inter_form;
    row.diversity_intra_form = rep.intra_form;
    row.raw_variance = rep.raw_variance;
    row.kl_bound_lhs = rep.kl_bound_lhs;
    row.kl_bound_rhs = rep.kl_bound_rhs;
    row.bound_slack = rep.bound_slack;
    row.mean_inter_angle_deg = rep.mean_inter_angle_deg;
    row.mean_intra_angle_deg = rep.mean_intra_angle_deg;
}

}  // namespace

DiversityReport head_diversity_report(const TeacherBundle& teacher, ViewHeadSet& heads,
                                      const Dataset& data) {
    if (heads.heads.size() < 2)
        throw ParamError("head_diversity_report: needs at least two heads");
    TeacherOutput t = teacher_forward(teacher, data.features);
    Rng unused(0);  // eval mode draws nothing
    AugmentedViews views = augment_views(heads, t.features.value(), Mode::Eval, unused);
    return views_report(t.logits.value(), views, data.labels, data.num_classes);
}

WarmupResult warmup_heads(const TeacherBundle& teacher, ViewHeadSet& heads,
                          AngularLossConfig& ang, const TrainConfig& cfg, const Dataset& train) {
    validate(cfg);
    check_dataset(train, "harness");
    if (heads.heads.empty()) throw ParamError("warmup_heads: no heads to train");

    Rng root(cfg.seed);
    Rng data_root = root.fork("warmup-data");
    Rng aug_root = root.fork("warmup-aug");

    std::vector<Var> opt_params = parameters(heads);
    opt_params.push_back(ang.margin_gamma);
    SgdState opt = make_sgd(opt_params, cfg);

    WarmupResult res;
    const bool reportable = heads.heads.size() >= 2;
    if (reportable) res.init_report = head_diversity_report(teacher, heads, train);
    res.final_report = res.init_report;

    const int warm = resolved_warmup_epochs(cfg);
    for (int epoch = 0; epoch < warm; ++epoch) {
        Rng er = data_root.fork(static_cast<std::uint64_t>(epoch));
        Rng ar = aug_root.fork(static_cast<std::uint64_t>(epoch));
        MeanAcc total, constraint, diversity, intra, gt, gate;
        std::uint64_t step = 0;
        for (const Batch& b : batch_iter(train, cfg.batch_size, er, true)) {
            TeacherOutput t = teacher_forward(teacher, b.features);
            const Tensor F_T = t.features.value();
            const Tensor Z_T = t.logits.value();
            Rng sr = ar.fork(step++);
            AugmentedViews views = augment_views(heads, F_T, Mode::Train, sr);
            AugLoss loss = total_aug_loss(constant(F_T), views.features, constant(Z_T),
                                          views.logits, one_hot(b.labels, train.num_classes), ang,
                                          !cfg.disable_inter, !cfg.disable_intra);
            if (!loss.total.value().all_finite())
                throw NumericError("warmup_heads: loss diverged at epoch " + std::to_string(epoch));
            for (Var& p : opt_params) p.zero_grad();
            backward(loss.total);
            sgd_update(opt_params, opt, epoch);
            clamp_unit_interval(ang.margin_gamma);
            total.add(loss.total.value().item());
            constraint.add(loss.inter_constraint.value().item());
            diversity.add(loss.inter_diversity.value().item());
            intra.add(loss.intra.value().item());
            gt.add(loss.gt.value().item());
            gate.add(loss.gate_active_fraction);
        }
        MetricsRow row;
        row.epoch = epoch;
        row.phase = "warmup";
        row.loss_total = total.mean();
        row.loss_inter_constraint = constraint.mean();
        row.loss_inter_diversity = diversity.mean();
        row.loss_intra = intra.mean();
        row.loss_aug_gt = gt.mean();
        row.gamma = ang.margin_gamma.value().item();
        row.gate_active_fraction = gate.mean();
        if (reportable) {
            res.final_report = head_diversity_report(teacher, heads, train);
            fill_report_fields(row, res.final_report);
        }
        res.metrics.push_back(row);
    }
    return res;
}

DistillResult run_distillation(const TeacherBundle& teacher, ViewHeadSet& heads,
                               AngularLossConfig& ang, StudentBundle& student,
                               const TrainConfig& cfg, const Dataset& train, const Dataset& test) {
    validate(cfg);
    check_dataset(train, "harness");
    check_dataset(test, "harness");

    const bool angular = cfg.aug_mode == AugMode::Angular;
    const bool noise = cfg.aug_mode == AugMode::Noise;
    const bool use_heads = angular && cfg.n_views > 0;
    const bool has_views = (angular || noise) && cfg.n_views > 0;
    if (use_heads && heads.heads.size() != static_cast<std::size_t>(cfg.n_views))
        throw ParamError("run_distillation: head count does not match n_views");

    Rng root(cfg.seed);
    Rng data_root = root.fork("data");
    Rng aug_root = root.fork("augment");
    Rng report_root = root.fork("report");

    std::vector<Var> student_params = parameters(student);
    SgdState student_opt = make_sgd(student_params, cfg);
    std::vector<Var> head_params;
    SgdState head_opt;
    if (use_heads) {
        head_params = parameters(heads);
        head_params.push_back(ang.margin_gamma);
        head_opt = make_sgd(head_params, cfg);
    }

    const bool want_feat = cfg.level == Level::Feature || cfg.level == Level::Both;
    const bool want_logit = cfg.level == Level::Logit || cfg.level == Level::Both;
    const bool reportable = has_views && cfg.n_views >= 2;

    DistillResult res;
    Checkpoint last_good = snapshot_params("student", student_params, cfg);

    for (int epoch = 0; epoch < cfg.epochs && !res.diverged; ++epoch) {
        Rng er = data_root.fork(static_cast<std::uint64_t>(epoch));
        Rng ar = aug_root.fork(static_cast<std::uint64_t>(epoch));
        MeanAcc total, a_constraint, a_diversity, a_intra, a_gt, gate;
        MeanAcc kd, feat_c, ce;
        std::uint64_t step = 0;
        for (const Batch& b : batch_iter(train, cfg.batch_size, er, true)) {
            TeacherOutput t = teacher_forward(teacher, b.features);
            const Tensor F_T = t.features.value();
            const Tensor Z_T = t.logits.value();

            AugmentedViews views;
            if (use_heads) {
                views = augment_views(heads, F_T, Mode::Train, ar.fork(step));
            } else if (noise && cfg.n_views > 0) {
                views = noise_augment_baseline(F_T, teacher, cfg.n_views, cfg.noise_sigma,
                                               ar.fork(step));
            }
            ++step;

            // Targets are plain tensors taken before the head step, so the
            // student never backpropagates into the augmentation path.
            EnsembleOutput ens = combine_ensemble(Z_T, F_T, views, cfg.ensemble_weights);

            double step_total = 0.0;
            if (use_heads) {
                AugLoss aug = total_aug_loss(constant(F_T), views.features, constant(Z_T),
                                             views.logits, one_hot(b.labels, train.num_classes),
                                             ang, !cfg.disable_inter, !cfg.disable_intra);
                if (!aug.total.value().all_finite()) {
                    restore_params(last_good, "student", student_params);
                    res.diverged = true;
                    res.diverged_epoch = epoch;
                    break;
                }
                for (Var& p : head_params) p.zero_grad();
                backward(aug.total);
                sgd_update(head_params, head_opt, epoch);
                clamp_unit_interval(ang.margin_gamma);
                a_constraint.add(aug.inter_constraint.value().item());
                a_diversity.add(aug.inter_diversity.value().item());
                a_intra.add(aug.intra.value().item());
                a_gt.add(aug.gt.value().item());
                gate.add(aug.gate_active_fraction);
                step_total += aug.total.value().item();
            }

            StudentOutput s = student_forward(student, b.features);
            std::optional<Var> feat, logit;
            if (want_feat)
                feat = feature_contrastive_loss(ens.feature_ensemble, s.features_projected,
                                                cfg.tau_feat);
            if (want_logit) logit = kd_kl_loss(ens.logit_ensemble, s.raw_logits, cfg.tau_z);
            Var gt = student_ce_loss(b.labels, s.raw_logits);
            DistillLoss dl = total_distill_loss(feat, logit, gt);
            if (!dl.total.value().all_finite()) {
                restore_params(last_good, "student", student_params);
                res.diverged = true;
                res.diverged_epoch = epoch;
                break;
            }
            for (Var& p : student_params) p.zero_grad();
            backward(dl.total);
            sgd_update(student_params, student_opt, epoch);

            if (dl.feat) feat_c.add(dl.feat->value().item());
            if (dl.logit) kd.add(dl.logit->value().item());
            ce.add(dl.gt.value().item());
            step_total += dl.total.value().item();
            total.add(step_total);
        }
        if (res.diverged) break;

        MetricsRow row;
        row.epoch = epoch;
        row.phase = "distill";
        row.loss_total = total.mean();
        if (use_heads) {
            row.loss_inter_constraint = a_constraint.mean();
            row.loss_inter_diversity = a_diversity.mean();
            row.loss_intra = a_intra.mean();
            row.loss_aug_gt = a_gt.mean();
            row.gamma = ang.margin_gamma.value().item();
            row.gate_active_fraction = gate.mean();
        }
        if (want_logit) row.loss_kd_kl = kd.mean();
        if (want_feat) row.loss_feat_contrastive = feat_c.mean();
        row.loss_student_ce = ce.mean();
        row.train_acc = evaluate_top1(student, train);
        row.test_acc = evaluate_top1(student, test);
        if (reportable) {
            DiversityReport rep;
            if (use_heads) {
                rep = head_diversity_report(teacher, heads, train);
            } else {
                TeacherOutput t = teacher_forward(teacher, train.features);
                AugmentedViews v = noise_augment_baseline(
                    t.features.value(), teacher, cfg.n_views, cfg.noise_sigma,
                    report_root.fork(static_cast<std::uint64_t>(epoch)));
                rep = views_report(t.logits.value(), v, train.labels, train.num_classes);
            }
            fill_report_fields(row, rep);
        }
        res.metrics.push_back(row);
        last_good = snapshot_params("student", student_params, cfg);
    }

    res.student_checkpoint = last_good;
    res.student_checkpoint.rng_state = root.state_string();
    res.final_train_acc = evaluate_top1(student, train);
    res.final_test_acc = evaluate_top1(student, test);

    // Final ensemble and per-view quality on the test split, eval mode.
    {
        TeacherOutput t = teacher_forward(teacher, test.features);
        const Tensor F_T = t.features.value();
        const Tensor Z_T = t.logits.value();
        AugmentedViews views;
        if (use_heads) {
            Rng unused(0);
            views = augment_views(heads, F_T, Mode::Eval, unused);
        } else if (noise && cfg.n_views > 0) {
            views = noise_augment_baseline(F_T, teacher, cfg.n_views, cfg.noise_sigma,
                                           root.fork("final-views"));
        }
        EnsembleOutput ens = combine_ensemble(Z_T, F_T, views, cfg.ensemble_weights);
        res.ensemble_test_acc = evaluate_top1(ens.logit_ensemble, test.labels);
        for (const Var& z : views.logits)
            res.view_test_accs.push_back(evaluate_top1(z.value(), test.labels));
        if (reportable) res.final_report = views_report(Z_T, views, test.labels, test.num_classes);
    }
    return res;
}

ExperimentResult run_experiment(const TeacherBundle& teacher, const TrainConfig& cfg,
                                const Dataset& train, const Dataset& test) {
    validate(cfg);
    ExperimentResult res;
    Rng root(cfg.seed);
    AngularLossConfig ang = make_angular_config(cfg.gamma_init, cfg.tau_c, cfg.level);

    if (cfg.aug_mode == AugMode::Angular && cfg.n_views > 0) {
        Rng hr = root.fork("head-build");
        res.heads = build_view_heads(cfg.n_views, teacher.feature_dim, teacher.num_classes,
                                     cfg.dropout_probs, cfg.tau_z, hr);
        if (resolved_warmup_epochs(cfg) > 0)
            res.warmup = warmup_heads(teacher, res.heads, ang, cfg, train);
    }

    Rng sr = root.fork("student-init");
    res.student = make_desk_student(train.dim(), train.num_classes, sr);
    res.distill = run_distillation(teacher, res.heads, ang, res.student, cfg, train, test);
    return res;
}

// ---- experiment comparison -----------------------------------------------------------

namespace {

const std::vector<std::string>& known_ablations() {
    static const std::vector<std::string> known{"full", "inter_only", "intra_only", "gt_only"};
    return known;
}

}  // namespace

CompareTable compare_experiment(const TrainConfig& base, const std::vector<AugMode>& modes,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<std::string>& ablations, const Dataset& train,
                                const Dataset& test) {
    validate(base);
    if (seeds.size() < 2) throw ParamError("compare_experiment: need at least 2 seeds");
    if (modes.empty()) throw ParamError("compare_experiment: no modes given");
    std::vector<std::string> abl = ablations.empty() ? std::vector<std::string>{"full"} : ablations;
    for (const std::string& a : abl) {
        const auto& known = known_ablations();
        if (std::find(known.begin(), known.end(), a) == known.end())
            throw ParamError("compare_experiment: unknown ablation '" + a +
                             "' (full|inter_only|intra_only|gt_only)");
    }

    CompareTable table;
    for (std::uint64_t seed : seeds) {
        TrainConfig cfg = base;
        cfg.seed = seed;
        TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
        for (AugMode mode : modes) {
            cfg.aug_mode = mode;
            std::vector<std::string> cells =
                mode == AugMode::Angular ? abl : std::vector<std::string>{"-"};
            for (const std::string& cell : cells) {
                TrainConfig run_cfg = cfg;
                if (mode == AugMode::Angular) {
                    run_cfg.disable_inter = (cell == "intra_only" || cell == "gt_only");
                    run_cfg.disable_intra = (cell == "inter_only" || cell == "gt_only");
                }
                ExperimentResult ex = run_experiment(tp.teacher, run_cfg, train, test);
                CompareRow row;
                row.mode = to_string(mode);
                row.ablation = cell;
                row.seed = seed;
                row.test_acc = ex.distill.final_test_acc;
                if (ex.distill.final_report) {
                    row.diversity = ex.distill.final_report->diversity_direct;
                    row.mean_inter_deg = ex.distill.final_report->mean_inter_angle_deg;
                    row.mean_intra_deg = ex.distill.final_report->mean_intra_angle_deg;
                } else {
                    row.diversity = 0.0;
                    row.mean_inter_deg = std::nan("");
                    row.mean_intra_deg = std::nan("");
                }
                if (!ex.distill.metrics.empty() &&
                    ex.distill.metrics.back().gate_active_fraction)
                    row.gate_frac = *ex.distill.metrics.back().gate_active_fraction;
                table.rows.push_back(row);
            }
        }
    }

    // Seed-major execution (one teacher per seed), cell-major presentation.
    auto position = [](const std::vector<std::string>& order, const std::string& v) {
        for (std::size_t i = 0; i < order.size(); ++i)
            if (order[i] == v) return i;
        return order.size();
    };
    std::vector<std::string> mode_order;
    for (AugMode m : modes) mode_order.push_back(to_string(m));
    std::vector<std::string> cell_order = abl;
    cell_order.insert(cell_order.begin(), "-");
    std::map<std::uint64_t, std::size_t> seed_order;
    for (std::size_t i = 0; i < seeds.size(); ++i) seed_order.emplace(seeds[i], i);
    std::stable_sort(table.rows.begin(), table.rows.end(),
                     [&](const CompareRow& a, const CompareRow& b) {
                         auto ka = std::make_tuple(position(mode_order, a.mode),
                                                   position(cell_order, a.ablation),
                                                   seed_order.at(a.seed));
                         auto kb = std::make_tuple(position(mode_order, b.mode),
                                                   position(cell_order, b.ablation),
                                                   seed_order.at(b.seed));
                         return ka < kb;
                     });
    return table;
}

std::string to_csv(const CompareTable& table) {
    std::string out = "mode,ablation,seed,test_acc,diversity,mean_inter_deg,mean_intra_deg,gate_frac\n";
    for (const CompareRow& r : table.rows) {
        out += r.mode + "," + r.ablation + "," + std::to_string(r.seed) + ",";
        out += fmt17(r.test_acc) + "," + fmt17(r.diversity) + ",";
        out += fmt17(r.mean_inter_deg) + "," + fmt17(r.mean_intra_deg) + ",";
        out += fmt17(r.gate_frac) + "\n";
    }
    return out;
}

std::vector<CompareSummary> summarize(const CompareTable& table) {
    std::vector<CompareSummary> out;
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    std::vector<std::vector<const CompareRow*>> groups;
    for (const CompareRow& r : table.rows) {
        auto key = std::make_pair(r.mode, r.ablation);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, groups.size()).first;
            groups.emplace_back();
            CompareSummary s;
            s.mode = r.mode;
            s.ablation = r.ablation;
            out.push_back(s);
        }
        groups[it->second].push_back(&r);
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        CompareSummary& s = out[g];
        MeanAcc acc, acc2, div, inter, intra, gate;
        for (const CompareRow* r : groups[g]) {
            acc.add(r->test_acc);
            acc2.add(r->test_acc * r->test_acc);
            div.add(r->diversity);
            inter.add(r->mean_inter_deg);
            intra.add(r->mean_intra_deg);
            gate.add(r->gate_frac);
        }
        s.num_seeds = static_cast<int>(groups[g].size());
        s.mean_acc = acc.mean();
        s.std_acc = std::sqrt(std::max(0.0, acc2.mean() - acc.mean() * acc.mean()));
        s.mean_diversity = div.mean();
        s.mean_inter_deg = inter.mean();
        s.mean_intra_deg = intra.mean();
        s.mean_gate_frac = gate.mean();
    }
    return out;
}

std::string to_csv(const std::vector<CompareSummary>& rows) {
    std::string out =
        "mode,ablation,num_seeds,mean_acc,std_acc,mean_diversity,mean_inter_deg,mean_intra_deg,"
        "mean_gate_frac\n";
    for (const CompareSummary& s : rows) {
        out += s.mode + "," + s.ablation + "," + std::to_string(s.num_seeds) + ",";
        out += fmt17(s.mean_acc) + "," + fmt17(s.std_acc) + "," + fmt17(s.mean_diversity) + ",";
        out += fmt17(s.mean_inter_deg) + "," + fmt17(s.mean_intra_deg) + "," +
               fmt17(s.mean_gate_frac) + "\n";
    }
    return out;
}

}  // namespace akd
