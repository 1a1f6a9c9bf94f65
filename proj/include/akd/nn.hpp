#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "akd/autodiff.hpp"
#include "akd/rng.hpp"

namespace akd {

enum class Mode { Train, Eval };

// ---- layers ----------------------------------------------------------------

struct LinearLayer {
    Var weight;                // [out x in]
    std::optional<Var> bias;   // [out]
};

// Orthogonal weight init: QR of a standard-normal draw with the Q columns
// sign-corrected by the diagonal of R. rows <= cols gives orthonormal rows
// (W W^T = I), rows > cols gives orthonormal columns (W^T W = I).
Tensor orthogonal_init(Index rows, Index cols, Rng& rng);

LinearLayer make_linear(Index out, Index in, bool with_bias, Rng& rng);

// x [B x in] -> x W^T (+ bias). Throws ShapeError on width mismatch.
Var linear_forward(const LinearLayer& layer, const Var& x);

struct BatchNormState {
    Var scale;            // [d], init 1
    Var shift;            // [d], init 0
    Tensor running_mean;  // [d]
    Tensor running_var;   // [d]
    double eps = 1e-5;
    double momentum = 0.1;  // running = (1 - momentum) * running + momentum * batch
};

BatchNormState make_batchnorm(Index d);

// Train mode normalizes with batch statistics (population variance, divisor
// B) and updates the running estimates; needs B >= 2. Eval mode applies the
// frozen running statistics. Differentiable w.r.t. x, scale and shift.
Var batchnorm_forward(const Var& x, BatchNormState& state, Mode mode);

struct DropoutResult {
    Var out;
    Tensor mask;  // the sampled 0/1 keep mask (all ones in eval mode)
};

// Inverted dropout: keep with probability 1-p and rescale by 1/(1-p) so the
// expectation matches the input. A fresh mask is sampled on every call.
DropoutResult dropout_forward(const Var& x, double p, Rng& rng, Mode mode);

// ---- teacher / student bundles ----------------------------------------------

struct TeacherBundle {
    std::vector<LinearLayer> extractor;  // relu between layers, linear output
    LinearLayer classifier;              // [C x d_T]
    Index feature_dim = 0;
    Index num_classes = 0;
    double logit_temperature = 4.0;  // tau_Z applied inside teacher_forward
};

struct TeacherOutput {
    Var features;    // F_T [B x d_T]
    Var raw_logits;  // W F_T (+ b) [B x C]
    Var logits;      // softmax(raw / tau_Z) [B x C]
};

TeacherBundle make_teacher(Index d_in, std::vector<Index> hidden, Index d_T, Index num_classes,
                           double logit_temperature, Rng& rng);

TeacherOutput teacher_forward(const TeacherBundle& teacher, const Tensor& x);

struct StudentBundle {
    std::vector<LinearLayer> extractor;
    LinearLayer classifier;       // [C x d_S]
    LinearLayer projection;       // [d_T x d_S], no bias; lines features up with the teacher
    Index feature_dim = 0;
    Index num_classes = 0;
};

struct StudentOutput {
    Var features;            // F_S [B x d_S]
    Var features_projected;  // F_S W_proj^T [B x d_T]
    Var raw_logits;          // [B x C]
};

StudentBundle make_student(Index d_in, std::vector<Index> hidden, Index d_S, Index d_T,
                           Index num_classes, Rng& rng);

StudentOutput student_forward(const StudentBundle& student, const Tensor& x);

// Parameter lists for optimizers / checkpoints (stable order).
std::vector<Var> parameters(const TeacherBundle& t);
std::vector<Var> parameters(const StudentBundle& s);

// FNV-1a over the raw bytes of every parameter, in order. Used to assert
// that a frozen model really did not move.
std::uint64_t parameter_checksum(std::span<const Var> params);

}  // namespace akd
