#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "akd/autodiff.hpp"

namespace akd {

// Which representation level a loss pass works on.
enum class Level { Feature, Logit, Both };

struct AngularLossConfig {
    Var margin_gamma;                       // learnable scalar, clamped to [0,1] by the optimizer step
    double contrastive_temperature = 0.07;  // tau_C
    Level level = Level::Both;
    double epsilon = 1e-12;
};

AngularLossConfig make_angular_config(double gamma_init = 0.2, double tau_c = 0.07,
                                      Level level = Level::Both);

struct InterAngleLoss {
    Var total;             // constraint + gated diversity, batch mean
    Var constraint;        // batch mean of per-sample, per-view InfoNCE terms
    Var diversity;         // batch mean of gated pairwise view similarity
    double gate_active_fraction = 0.0;
};

// Margin-clipped contrastive alignment of every view to its anchor, plus a
// pairwise view-similarity penalty that only switches on for samples whose
// views all sit within the margin of the anchor (gamma + s_i >= 1). The gate
// is evaluated on current values and carries no gradient. Negatives for
// (sample b, view i) are the anchors' cosines to view i of every sample in
// the batch, the positive pair included.
InterAngleLoss inter_angle_loss(const Var& anchor, const std::vector<Var>& views,
                                const AngularLossConfig& cfg);

// Sum over ordered view pairs of cos(delta_i, delta_j) with delta_i = anchor -
// view_i, batch mean. Pairs where either offset norm falls below eps
// contribute exactly zero.
Var intra_angle_loss(const Var& anchor, const std::vector<Var>& views, double eps = 1e-12);

// Sum over views of the mean cross-entropy between one-hot labels and the
// view distributions. Logs are clamped at eps.
Var aug_gt_loss(const Tensor& y_onehot, const std::vector<Var>& view_logits, double eps = 1e-12);

struct AugLoss {
    Var total;
    Var inter_constraint;
    Var inter_diversity;
    Var intra;
    Var gt;
    double gate_active_fraction = 0.0;
};

// inter + intra + gt with unit weights; checks every term is finite.
AugLoss total_aug_loss(const Var& anchor_feat, const std::vector<Var>& view_feats,
                       const Var& anchor_logit, const std::vector<Var>& view_logits,
                       const Tensor& y_onehot, const AngularLossConfig& cfg,
                       bool enable_inter = true, bool enable_intra = true);

// Temperature-scaled KL(target || softmax(raw / tau)) * tau^2, batch mean.
// The target is a plain tensor: gradient-stopped by construction.
Var kd_kl_loss(const Tensor& target_probs, const Var& student_raw, double tau);

// In-batch InfoNCE over cosines between student (projected) features and the
// gradient-stopped ensemble features, anchor-matched pair positive.
Var feature_contrastive_loss(const Tensor& target_feats, const Var& student_feats, double tau = 0.07);

// Plain cross-entropy of softmax(raw) against integer labels.
Var student_ce_loss(const std::vector<int>& labels, const Var& raw_logits, double eps = 1e-12);

struct DistillLoss {
    Var total;
    std::optional<Var> feat;
    std::optional<Var> logit;
    Var gt;
};

// Sums the enabled distillation terms (feature contrastive and/or logit KL)
// with the ground-truth cross-entropy, unit weights.
DistillLoss total_distill_loss(std::optional<Var> feat, std::optional<Var> logit, Var gt);

// Value snapshot of a loss for logging; total always equals the sum of terms.
struct LossBundle {
    double total = 0.0;
    std::map<std::string, double> terms;
    double gate_active_fraction = 0.0;
};

LossBundle snapshot(const AugLoss& l);
LossBundle snapshot(const DistillLoss& l);

// One-hot encode integer labels; throws LabelError on out-of-range values.
Tensor one_hot(const std::vector<int>& labels, Index num_classes);

}  // namespace akd
