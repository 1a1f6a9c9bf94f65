#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "akd/tensor.hpp"

namespace akd {

namespace detail {

struct Node;

// Backward callback: given the gradient flowing into this node, add each
// parent's contribution into the corresponding slot. A null slot means that
// parent needs no gradient and the work can be skipped.
using BackwardFn = std::function<void(const Tensor& g, const std::vector<Tensor*>& parent_slots)>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily; only populated on requires-grad leaves
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

// Handle to a node of the differentiation graph. Cheap to copy; two copies
// alias the same node. A graph is built bottom-up by the free functions in
// this header and differentiated once (or more; gradients accumulate) by
// backward(). A single graph must stay confined to one thread.
class Var {
public:
    Var() = default;

    const Tensor& value() const { return node_->value; }
    // In-place value access for optimizer updates and finite differencing.
    // Mutating a leaf invalidates any graph already built on top of it.
    Tensor& mutable_value() { return node_->value; }

    // Accumulated gradient; zero tensor of the value's shape if none yet.
    const Tensor& grad() const;
    void zero_grad();
    bool requires_grad() const { return node_->requires_grad; }
    bool defined() const { return node_ != nullptr; }

    const std::vector<Index>& shape() const { return node_->value.shape(); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> shared_node() const { return node_; }

    static Var wrap(std::shared_ptr<detail::Node> n) { Var v; v.node_ = std::move(n); return v; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Leaf constructors.
Var constant(Tensor value);             // requires_grad = false
Var parameter(Tensor value);            // requires_grad = true

// Runs reverse-mode differentiation from a scalar root. Gradients are
// accumulated additively into every requires-grad leaf; call zero_grad on the
// leaves (or Var::zero_grad) to reset between steps. Intermediate gradients
// live only for the duration of the sweep.
void backward(const Var& root);

// ---- graph-building operations -------------------------------------------

Var matmul(const Var& a, const Var& b);       // [m x k] * [k x n]
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);          // same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);          // elementwise
Var scale(const Var& a, double c);
Var relu(const Var& a);                       // subgradient 0 at 0
Var log(const Var& a);                        // domain error on x <= 0
Var exp(const Var& a);
Var log_clamped(const Var& a, double eps);    // log(max(x, eps)); zero grad where clamped
Var sqrt(const Var& a);                       // domain error on x < 0
Var min_const(const Var& a, double c);        // min(x, c); at x >= c gradient is 0
Var add_scalar(const Var& a, const Var& s);   // broadcast a 1-element Var
Var add_rowvec(const Var& a, const Var& v);   // [B x d] + [d]

Var sum(const Var& a);
Var mean(const Var& a);
Var l2norm(const Var& a);                     // sqrt(sum x^2); guarded backward near 0

// Softmax over the last dimension (each row of a matrix, or a whole vector),
// computed as softmax(x / tau) with max-subtraction for stability.
Var softmax_with_temperature(const Var& a, double tau);

// cos(u, v) for two equal-length vectors; denominator guarded by
// max(|u||v|, 1e-12) and differentiable through both arguments.
Var cosine_similarity(const Var& u, const Var& v);

// Row-wise cosine between corresponding rows of two [B x d] matrices -> [B].
Var rows_cosine(const Var& x, const Var& y);

// Full cross cosine matrix between rows: [m x d], [n x d] -> [m x n].
Var row_cosine_matrix(const Var& x, const Var& y);

Var diag(const Var& a);                       // [n x n] -> [n]
Var row(const Var& a, Index i);               // [m x n] -> [n]
Var rows_logsumexp(const Var& a);             // [m x n] -> [m], stable

// Sugar so loss code reads like the math.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

// Central-difference gradient check. `f` rebuilds the scalar loss from the
// current values of `params`; h is the step. Returns the maximum relative
// error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over every
// coordinate of every parameter.
double finite_difference_check(const std::function<Var()>& f, std::span<Var> params, double h = 1e-5);

}  // namespace akd
