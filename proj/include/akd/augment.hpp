#pragma once

#include <vector>

#include "akd/nn.hpp"

namespace akd {

// One view-augmentation head on top of the (frozen) teacher features:
// dropout mask -> square linear map (no bias) -> batchnorm gives the view
// features; a second bias-free linear plus temperature softmax gives the
// view's class distribution.
struct ViewHead {
    double dropout_prob = 0.0;
    LinearLayer feature_linear;  // [d_T x d_T], no bias
    BatchNormState bn;
    LinearLayer logit_linear;  // [C x d_T], no bias
    int index = 0;
};

struct ViewHeadSet {
    std::vector<ViewHead> heads;
    double logit_temperature = 4.0;  // tau_Z shared with the teacher
};

struct AugmentedViews {
    std::vector<Var> features;  // F_A_i [B x d_T]
    std::vector<Var> logits;    // Z_A_i [B x C], simplex rows
    std::vector<Tensor> masks;  // dropout keep masks actually drawn
};

struct EnsembleOutput {
    Tensor logit_ensemble;    // Z_E [B x C]
    Tensor feature_ensemble;  // F_E [B x d_T]
    std::vector<double> weights;  // normalized, teacher first
};

// Builds n heads with orthogonal feature/logit maps, identity batchnorm and
// one dropout probability per head. Each head gets its own fork of `rng`, so
// the set is stable under adding or removing later heads.
ViewHeadSet build_view_heads(int n, Index d_T, Index num_classes, const std::vector<double>& dropout_probs,
                             double logit_temperature, Rng& rng);

// Runs every head on the teacher features. F_T enters as a plain tensor:
// gradients stop at the teacher by construction. In train mode fresh dropout
// masks are drawn from per-head forks of `rng` and batchnorm uses (and
// updates) batch statistics; eval mode is deterministic.
AugmentedViews augment_views(ViewHeadSet& heads, const Tensor& F_T, Mode mode, const Rng& rng);

// Convex combination of teacher and view outputs. `weights` has N+1 entries
// ordered (teacher, view_1 .. view_N); empty means uniform. With zero views
// the teacher tensors are returned unchanged (bit-exact).
EnsembleOutput combine_ensemble(const Tensor& Z_T, const Tensor& F_T, const AugmentedViews& views,
                                std::vector<double> weights);

// Parameter-free baseline: view features are F_T plus Gaussian noise of the
// given sigma, classified by the frozen teacher head at its temperature.
AugmentedViews noise_augment_baseline(const Tensor& F_T, const TeacherBundle& teacher, int n, double sigma,
                                      const Rng& rng);

// Trainable parameters of every head (feature map, bn scale/shift, logit map).
std::vector<Var> parameters(const ViewHeadSet& heads);

}  // namespace akd
