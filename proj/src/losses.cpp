#include "akd/losses.hpp"

#include <cmath>

#include "akd/errors.hpp"

namespace akd {

namespace {

void check_view_stack(const Var& anchor, const std::vector<Var>& views, const char* where) {
    if (views.empty()) throw ParamError(std::string(where) + ": no views given");
    if (anchor.value().rank() != 2) {
        throw ShapeError(std::string(where) + ": anchor must be [B x d], got " + anchor.value().shape_string());
    }
    for (const Var& v : views) check_same_shape(anchor.value(), v.value(), where);
}

void check_finite(const Var& v, const char* term) {
    if (!v.value().all_finite()) {
        throw NumericError(std::string("loss: non-finite value in term '") + term + "'");
    }
}

Var zero_scalar() { return constant(Tensor::scalar(0.0)); }

}  // namespace

AngularLossConfig make_angular_config(double gamma_init, double tau_c, Level level) {
    if (gamma_init < 0.0 || gamma_init > 1.0) {
        throw ParamError("angular config: gamma_init must lie in [0, 1]");
    }
    if (tau_c <= 0.0) throw ParamError("angular config: tau_C must be positive");
    AngularLossConfig cfg;
    cfg.margin_gamma = parameter(Tensor::scalar(gamma_init));
    cfg.contrastive_temperature = tau_c;
    cfg.level = level;
    return cfg;
}

InterAngleLoss inter_angle_loss(const Var& anchor, const std::vector<Var>& views,
                                const AngularLossConfig& cfg) {
    check_view_stack(anchor, views, "inter_angle_loss");
    if (!cfg.margin_gamma.defined() || cfg.margin_gamma.value().size() != 1) {
        throw ParamError("inter_angle_loss: margin gamma must be a scalar parameter");
    }
    const double inv_tau = 1.0 / cfg.contrastive_temperature;
    const std::size_t n = views.size();
    const Index b = anchor.value().rows();
    const double gamma_now = cfg.margin_gamma.value()[0];

    // Per-sample gate: active when every view sits within the margin of its
    // anchor. Decided on current values; no gradient flows through it.
    std::vector<bool> gate(static_cast<std::size_t>(b), true);

    Var constraint_acc;  // [B], summed over views
    for (std::size_t i = 0; i < n; ++i) {
        // C[b, b'] = cos(anchor_b, view_i_{b'}); the diagonal holds the
        // positive pairs, each full row is that sample's negative set.
        Var C = row_cosine_matrix(anchor, views[i]);
        Var s = diag(C);
        Var clipped = min_const(add_scalar(s, cfg.margin_gamma), 1.0);
        Var lse = rows_logsumexp(scale(C, inv_tau));
        Var ci = sub(lse, scale(clipped, inv_tau));
        constraint_acc = i == 0 ? ci : add(constraint_acc, ci);
        for (Index r = 0; r < b; ++r) {
            if (gamma_now + s.value()[r] < 1.0) gate[static_cast<std::size_t>(r)] = false;
        }
    }

    InterAngleLoss out;
    out.constraint = mean(constraint_acc);

    Tensor gate_mask = Tensor::zeros({b});
    double active = 0.0;
    for (Index r = 0; r < b; ++r) {
        if (gate[static_cast<std::size_t>(r)]) {
            gate_mask[r] = 1.0;
            active += 1.0;
        }
    }
    out.gate_active_fraction = active / static_cast<double>(b);

    if (n >= 2) {
        Var div_acc;  // [B], unordered pairs
        bool first = true;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                Var c = rows_cosine(views[i], views[j]);
                div_acc = first ? c : add(div_acc, c);
                first = false;
            }
        }
        // ordered-pair sum = 2 * unordered; gate applied per sample
        out.diversity = mean(mul(scale(div_acc, 2.0), constant(gate_mask)));
    } else {
        out.diversity = zero_scalar();
    }

    out.total = add(out.constraint, out.diversity);
    check_finite(out.total, "inter_angle");
    return out;
}

Var intra_angle_loss(const Var& anchor, const std::vector<Var>& views, double eps) {
    check_view_stack(anchor, views, "intra_angle_loss");
    if (eps <= 0.0) throw ParamError("intra_angle_loss: eps must be positive");
    const std::size_t n = views.size();
    const Index b = anchor.value().rows();
    if (n < 2) return zero_scalar();

    std::vector<Var> deltas;
    deltas.reserve(n);
    for (const Var& v : views) deltas.push_back(sub(anchor, v));

    // Per-sample offset norms decide which pairs are well-defined; a pair
    // with a vanishing offset contributes exactly zero, gradient included.
    std::vector<Eigen::ArrayXd> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = deltas[i].value().mat().rowwise().norm().array();
    }

    Var acc;
    bool first = true;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            Tensor mask = Tensor::zeros({b});
            for (Index r = 0; r < b; ++r) {
                mask[r] = (norms[i][r] >= eps && norms[j][r] >= eps) ? 1.0 : 0.0;
            }
            Var c = mul(rows_cosine(deltas[i], deltas[j]), constant(std::move(mask)));
            acc = first ? c : add(acc, c);
            first = false;
        }
    }
    Var loss = mean(scale(acc, 2.0));  // ordered pairs
    check_finite(loss, "intra_angle");
    return loss;
}

Tensor one_hot(const std::vector<int>& labels, Index num_classes) {
    if (num_classes < 2) throw ParamError("one_hot: need at least 2 classes");
    Tensor y = Tensor::zeros({static_cast<Index>(labels.size()), num_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int c = labels[i];
        if (c < 0 || c >= num_classes) {
            throw LabelError("one_hot: label " + std::to_string(c) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        y(static_cast<Index>(i), c) = 1.0;
    }
    return y;
}

namespace {

void check_one_hot(const Tensor& y, const char* where) {
    if (y.rank() != 2) throw LabelError(std::string(where) + ": labels must be a one-hot matrix");
    for (Index r = 0; r < y.rows(); ++r) {
        double rowsum = 0.0;
        for (Index c = 0; c < y.cols(); ++c) {
            const double v = y(r, c);
            if (v != 0.0 && v != 1.0) {
                throw LabelError(std::string(where) + ": entry not in {0,1} at row " + std::to_string(r));
            }
            rowsum += v;
        }
        if (rowsum != 1.0) {
            throw LabelError(std::string(where) + ": row " + std::to_string(r) + " is not one-hot");
        }
    }
}

}  // namespace

Var aug_gt_loss(const Tensor& y_onehot, const std::vector<Var>& view_logits, double eps) {
    if (view_logits.empty()) throw ParamError("aug_gt_loss: no views given");
    check_one_hot(y_onehot, "aug_gt_loss");
    const double b = static_cast<double>(y_onehot.rows());
    Var acc;
    bool first = true;
    for (const Var& z : view_logits) {
        check_same_shape(y_onehot, z.value(), "aug_gt_loss");
        Var term = scale(sum(mul(constant(y_onehot), log_clamped(z, eps))), -1.0 / b);
        acc = first ? term : add(acc, term);
        first = false;
    }
    check_finite(acc, "aug_gt");
    return acc;
}

AugLoss total_aug_loss(const Var& anchor_feat, const std::vector<Var>& view_feats,
                       const Var& anchor_logit, const std::vector<Var>& view_logits,
                       const Tensor& y_onehot, const AngularLossConfig& cfg,
                       bool enable_inter, bool enable_intra) {
    AugLoss out;
    out.inter_constraint = zero_scalar();
    out.inter_diversity = zero_scalar();
    out.intra = zero_scalar();

    const bool use_feat = cfg.level == Level::Feature || cfg.level == Level::Both;
    const bool use_logit = cfg.level == Level::Logit || cfg.level == Level::Both;

    double gate_sum = 0.0;
    int gate_terms = 0;
    auto add_level = [&](const Var& anchor, const std::vector<Var>& views) {
        if (enable_inter) {
            InterAngleLoss il = inter_angle_loss(anchor, views, cfg);
            out.inter_constraint = add(out.inter_constraint, il.constraint);
            out.inter_diversity = add(out.inter_diversity, il.diversity);
            gate_sum += il.gate_active_fraction;
            ++gate_terms;
        }
        if (enable_intra) {
            out.intra = add(out.intra, intra_angle_loss(anchor, views, cfg.epsilon));
        }
    };
    if (use_feat) add_level(anchor_feat, view_feats);
    if (use_logit) add_level(anchor_logit, view_logits);

    out.gt = aug_gt_loss(y_onehot, view_logits);
    out.gate_active_fraction = gate_terms > 0 ? gate_sum / gate_terms : 0.0;

    out.total = add(add(add(out.inter_constraint, out.inter_diversity), out.intra), out.gt);
    check_finite(out.inter_constraint, "inter_constraint");
    check_finite(out.inter_diversity, "inter_diversity");
    check_finite(out.intra, "intra");
    check_finite(out.gt, "gt");
    return out;
}

Var kd_kl_loss(const Tensor& target_probs, const Var& student_raw, double tau) {
    if (tau <= 0.0) throw ParamError("kd_kl_loss: tau must be positive");
    check_same_shape(target_probs, student_raw.value(), "kd_kl_loss");
    if ((target_probs.array() < 0.0).any()) {
        throw DomainError("kd_kl_loss: target distribution has negative entries");
    }
    const double b = static_cast<double>(target_probs.rows());
    const double eps = 1e-12;
    // sum_b sum_c p log p, computed outside the graph (targets are constant);
    // p = 0 terms contribute exactly zero.
    double neg_entropy = 0.0;
    for (Index i = 0; i < target_probs.size(); ++i) {
        const double p = target_probs[i];
        if (p > 0.0) neg_entropy += p * std::log(std::max(p, eps));
    }
    Var s = softmax_with_temperature(student_raw, tau);
    Var cross = sum(mul(constant(target_probs), log_clamped(s, eps)));
    Var kl = sub(constant(Tensor::scalar(neg_entropy)), cross);
    Var loss = scale(kl, tau * tau / b);
    check_finite(loss, "kd_kl");
    return loss;
}

Var feature_contrastive_loss(const Tensor& target_feats, const Var& student_feats, double tau) {
    if (tau <= 0.0) throw ParamError("feature_contrastive_loss: tau must be positive");
    check_same_shape(target_feats, student_feats.value(), "feature_contrastive_loss");
    if (target_feats.rank() != 2) {
        throw ShapeError("feature_contrastive_loss: expected [B x d] features");
    }
    const double inv_tau = 1.0 / tau;
    Var C = row_cosine_matrix(student_feats, constant(target_feats));
    Var loss = mean(sub(rows_logsumexp(scale(C, inv_tau)), scale(diag(C), inv_tau)));
    check_finite(loss, "feature_contrastive");
    return loss;
}

Var student_ce_loss(const std::vector<int>& labels, const Var& raw_logits, double eps) {
    if (raw_logits.value().rank() != 2) {
        throw ShapeError("student_ce_loss: expected [B x C] logits");
    }
    if (static_cast<Index>(labels.size()) != raw_logits.value().rows()) {
        throw LabelError("student_ce_loss: label count does not match the batch");
    }
    Tensor y = one_hot(labels, raw_logits.value().cols());
    const double b = static_cast<double>(y.rows());
    Var s = softmax_with_temperature(raw_logits, 1.0);
    Var loss = scale(sum(mul(constant(y), log_clamped(s, eps))), -1.0 / b);
    check_finite(loss, "student_ce");
    return loss;
}

DistillLoss total_distill_loss(std::optional<Var> feat, std::optional<Var> logit, Var gt) {
    DistillLoss out;
    out.feat = std::move(feat);
    out.logit = std::move(logit);
    out.gt = std::move(gt);
    out.total = out.gt;
    if (out.logit) out.total = add(out.total, *out.logit);
    if (out.feat) out.total = add(out.total, *out.feat);
    check_finite(out.total, "distill_total");
    return out;
}

LossBundle snapshot(const AugLoss& l) {
    LossBundle b;
    b.terms["inter_constraint"] = l.inter_constraint.value().item();
    b.terms["inter_diversity"] = l.inter_diversity.value().item();
    b.terms["intra"] = l.intra.value().item();
    b.terms["gt"] = l.gt.value().item();
    b.total = l.total.value().item();
    b.gate_active_fraction = l.gate_active_fraction;
    return b;
}

LossBundle snapshot(const DistillLoss& l) {
    LossBundle b;
    b.terms["feat"] = l.feat ? l.feat->value().item() : 0.0;
    b.terms["logit"] = l.logit ? l.logit->value().item() : 0.0;
    b.terms["gt"] = l.gt.value().item();
    b.total = l.total.value().item();
    return b;
}

}  // namespace akd
