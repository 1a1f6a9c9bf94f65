#include "akd/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "akd/errors.hpp"

namespace akd {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

constexpr double kNormEps = 1e-12;  // guard for norm/cosine denominators

Var make_node(Tensor value, std::vector<NodePtr> parents, detail::BackwardFn fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        // Constant results keep neither parents nor a backward callback, so
        // purely-constant subgraphs are pruned from every backward sweep.
        n->parents = std::move(parents);
        n->backward = std::move(fn);
    }
    return Var::wrap(std::move(n));
}

void require_rank2(const Var& a, const char* where) {
    if (a.value().rank() != 2) {
        throw ShapeError(std::string(where) + ": expected a rank-2 tensor, got " + a.value().shape_string());
    }
}

void require_nonempty(const Var& a, const char* where) {
    if (a.value().size() == 0) {
        throw ShapeError(std::string(where) + ": empty tensor " + a.value().shape_string());
    }
}

// Shared row-cosine backward math: gradient of cos(u, v) w.r.t. u given the
// incoming scalar g, written into gu. den is the guarded denominator.
inline void cosine_grad_row(double g, const Eigen::ArrayXd& u, const Eigen::ArrayXd& v,
                            double nu, double den, double c, bool guarded, Eigen::Ref<Eigen::ArrayXd> gu) {
    if (guarded) {
        gu += (g / kNormEps) * v;
    } else {
        gu += g * (v / den - (c / (nu * nu)) * u);
    }
}

}  // namespace

const Tensor& Var::grad() const {
    if (!node_->has_grad) {
        node_->grad = Tensor::zeros(node_->value.shape());
        node_->has_grad = true;
    }
    return node_->grad;
}

void Var::zero_grad() {
    node_->grad = Tensor::zeros(node_->value.shape());
    node_->has_grad = true;
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = false;
    return Var::wrap(std::move(n));
}

Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var::wrap(std::move(n));
}

void backward(const Var& root) {
    if (!root.defined()) throw ParamError("backward: undefined root");
    if (root.value().size() != 1) {
        throw ShapeError("backward: root must be a scalar, got " + root.value().shape_string());
    }
    Node* r = root.node();
    if (!r->requires_grad) return;  // nothing differentiable below

    // Post-order DFS: a node lands after all of its parents, so walking the
    // order backwards visits every node before the nodes it feeds from.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(r, 0);
    visited.insert(r);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Gradients for this sweep live in a local map; only requires-grad leaves
    // receive a persistent (additive) copy at the end. That keeps repeated
    // backward calls exact: each sweep is independent, leaf grads accumulate.
    std::unordered_map<Node*, Tensor> local;
    local.emplace(r, Tensor::full(r->value.shape(), 1.0));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        auto gi = local.find(n);
        if (gi == local.end()) continue;  // no gradient reached this node
        if (n->is_leaf()) {
            if (n->requires_grad) {
                if (!n->has_grad) {
                    n->grad = Tensor::zeros(n->value.shape());
                    n->has_grad = true;
                }
                n->grad.array() += gi->second.array();
            }
            continue;
        }
        std::vector<Tensor*> slots(n->parents.size(), nullptr);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            Node* p = n->parents[i].get();
            if (!p->requires_grad) continue;
            auto pit = local.find(p);
            if (pit == local.end()) {
                pit = local.emplace(p, Tensor::zeros(p->value.shape())).first;
            }
            slots[i] = &pit->second;
        }
        n->backward(gi->second, slots);
    }
}

// ---- ops -------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.value().cols() != b.value().rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.value().shape_string() + " * " +
                         b.value().shape_string());
    }
    Tensor out = Tensor::zeros({a.value().rows(), b.value().cols()});
    out.mat() = a.value().mat() * b.value().mat();
    NodePtr pa = a.shared_node(), pb = b.shared_node();
    return make_node(std::move(out), {pa, pb},
                     [pa, pb](const Tensor& g, const std::vector<Tensor*>& slots) {
                         ConstMatMap G = g.mat();
                         if (slots[0]) slots[0]->mat() += G * pb->value.mat().transpose();
                         if (slots[1]) slots[1]->mat() += pa->value.mat().transpose() * G;
                     });
}

Var transpose(const Var& a) {
    require_rank2(a, "transpose");
    Tensor out = Tensor::zeros({a.value().cols(), a.value().rows()});
    out.mat() = a.value().mat().transpose();
    return make_node(std::move(out), {a.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->mat() += g.mat().transpose();
                     });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out(a.value().shape(), a.value().array() + b.value().array());
    return make_node(std::move(out), {a.shared_node(), b.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array();
                         if (slots[1]) slots[1]->array() += g.array();
                     });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out(a.value().shape(), a.value().array() - b.value().array());
    return make_node(std::move(out), {a.shared_node(), b.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array();
                         if (slots[1]) slots[1]->array() -= g.array();
                     });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.value().shape(), a.value().array() * b.value().array());
    NodePtr pa = a.shared_node(), pb = b.shared_node();
    return make_node(std::move(out), {pa, pb},
                     [pa, pb](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array() * pb->value.array();
                         if (slots[1]) slots[1]->array() += g.array() * pa->value.array();
                     });
}

Var scale(const Var& a, double c) {
    Tensor out(a.value().shape(), a.value().array() * c);
    return make_node(std::move(out), {a.shared_node()},
                     [c](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array() * c;
                     });
}

Var relu(const Var& a) {
    Tensor out(a.value().shape(), a.value().array().max(0.0));
    NodePtr pa = a.shared_node();
    return make_node(std::move(out), {pa},
                     [pa](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) {
                             // subgradient 0 at exactly 0
                             slots[0]->array() += g.array() * (pa->value.array() > 0.0).cast<double>();
                         }
                     });
}

Var log(const Var& a) {
    if ((a.value().array() <= 0.0).any()) {
        throw DomainError("log: input must be strictly positive");
    }
    Tensor out(a.value().shape(), a.value().array().log());
    NodePtr pa = a.shared_node();
    return make_node(std::move(out), {pa},
                     [pa](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array() / pa->value.array();
                     });
}

Var exp(const Var& a) {
    Tensor out(a.value().shape(), a.value().array().exp());
    Eigen::ArrayXd ev = out.array();
    return make_node(std::move(out), {a.shared_node()},
                     [ev = std::move(ev)](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array() * ev;
                     });
}

Var log_clamped(const Var& a, double eps) {
    if (eps <= 0.0) throw ParamError("log_clamped: eps must be positive");
    Tensor out(a.value().shape(), a.value().array().max(eps).log());
    NodePtr pa = a.shared_node();
    return make_node(std::move(out), {pa},
                     [pa, eps](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) {
                             // zero gradient where the clamp is active (x < eps)
                             const auto& x = pa->value.array();
                             slots[0]->array() +=
                                 g.array() * (x >= eps).cast<double>() / x.max(eps);
                         }
                     });
}

Var sqrt(const Var& a) {
    if ((a.value().array() < 0.0).any()) {
        throw DomainError("sqrt: input must be nonnegative");
    }
    Tensor out(a.value().shape(), a.value().array().sqrt());
    Eigen::ArrayXd sv = out.array();
    return make_node(std::move(out), {a.shared_node()},
                     [sv = std::move(sv)](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += 0.5 * g.array() / sv.max(kNormEps);
                     });
}

Var min_const(const Var& a, double c) {
    Tensor out(a.value().shape(), a.value().array().min(c));
    NodePtr pa = a.shared_node();
    return make_node(std::move(out), {pa},
                     [pa, c](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) {
                             // gradient 1 strictly inside the clip, 0 at and above c
                             slots[0]->array() += g.array() * (pa->value.array() < c).cast<double>();
                         }
                     });
}

Var add_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) {
        throw ShapeError("add_scalar: broadcast operand must have one element, got " + s.value().shape_string());
    }
    Tensor out(a.value().shape(), a.value().array() + s.value()[0]);
    return make_node(std::move(out), {a.shared_node(), s.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array();
                         if (slots[1]) slots[1]->array()[0] += g.array().sum();
                     });
}

Var add_rowvec(const Var& a, const Var& v) {
    require_rank2(a, "add_rowvec");
    if (v.value().rank() != 1 || v.value().size() != a.value().cols()) {
        throw ShapeError("add_rowvec: vector " + v.value().shape_string() + " does not match matrix " +
                         a.value().shape_string());
    }
    Tensor out = Tensor::zeros(a.value().shape());
    out.mat() = a.value().mat().rowwise() + v.value().vec().transpose();
    return make_node(std::move(out), {a.shared_node(), v.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g.array();
                         if (slots[1]) slots[1]->vec() += g.mat().colwise().sum().transpose();
                     });
}

Var sum(const Var& a) {
    require_nonempty(a, "sum");
    Tensor out = Tensor::scalar(a.value().array().sum());
    return make_node(std::move(out), {a.shared_node()},
                     [](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g[0];
                     });
}

Var mean(const Var& a) {
    require_nonempty(a, "mean");
    const double n = static_cast<double>(a.value().size());
    Tensor out = Tensor::scalar(a.value().array().sum() / n);
    return make_node(std::move(out), {a.shared_node()},
                     [n](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->array() += g[0] / n;
                     });
}

Var l2norm(const Var& a) {
    require_nonempty(a, "l2norm");
    const double norm = std::sqrt(a.value().array().square().sum());
    NodePtr pa = a.shared_node();
    return make_node(Tensor::scalar(norm), {pa},
                     [pa, norm](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) {
                             slots[0]->array() += (g[0] / std::max(norm, kNormEps)) * pa->value.array();
                         }
                     });
}

Var softmax_with_temperature(const Var& a, double tau) {
    if (tau <= 0.0) throw ParamError("softmax_with_temperature: tau must be positive");
    require_nonempty(a, "softmax_with_temperature");
    if (a.value().rank() < 1) throw ShapeError("softmax_with_temperature: scalar input");
    Tensor out = Tensor::zeros(a.value().shape());
    {
        MatMap o = out.mat();
        ConstMatMap x = a.value().mat();
        for (Index r = 0; r < x.rows(); ++r) {
            Eigen::ArrayXd z = x.row(r).transpose().array() / tau;
            z -= z.maxCoeff();
            Eigen::ArrayXd e = z.exp();
            o.row(r) = (e / e.sum()).matrix().transpose();
        }
    }
    Eigen::ArrayXd sflat = out.array();
    const Index ncols = out.cols();
    return make_node(std::move(out), {a.shared_node()},
                     [sflat = std::move(sflat), tau, ncols](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (!slots[0]) return;
                         const Index nrows = g.array().size() / ncols;
                         ConstMatMap G(g.array().data(), nrows, ncols);
                         ConstMatMap S(sflat.data(), nrows, ncols);
                         MatMap GA(slots[0]->array().data(), nrows, ncols);
                         for (Index r = 0; r < nrows; ++r) {
                             const double dot = G.row(r).dot(S.row(r));
                             GA.row(r).array() +=
                                 (G.row(r).array() - dot) * S.row(r).array() / tau;
                         }
                     });
}

Var cosine_similarity(const Var& u, const Var& v) {
    if (u.value().rank() != 1 || v.value().rank() != 1) {
        throw ShapeError("cosine_similarity: expects two vectors, got " + u.value().shape_string() + " and " +
                         v.value().shape_string());
    }
    if (u.value().size() != v.value().size()) {
        throw ShapeError("cosine_similarity: length mismatch " + u.value().shape_string() + " vs " +
                         v.value().shape_string());
    }
    require_nonempty(u, "cosine_similarity");
    const double nu = u.value().vec().norm();
    const double nv = v.value().vec().norm();
    const double den = std::max(nu * nv, kNormEps);
    const bool guarded = nu * nv < kNormEps;
    const double c = u.value().vec().dot(v.value().vec()) / den;
    NodePtr pu = u.shared_node(), pv = v.shared_node();
    return make_node(Tensor::scalar(c), {pu, pv},
                     [pu, pv, nu, nv, den, c, guarded](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) {
                             cosine_grad_row(g[0], pu->value.array(), pv->value.array(), nu, den, c, guarded,
                                             slots[0]->array());
                         }
                         if (slots[1]) {
                             cosine_grad_row(g[0], pv->value.array(), pu->value.array(), nv, den, c, guarded,
                                             slots[1]->array());
                         }
                     });
}

Var rows_cosine(const Var& x, const Var& y) {
    require_rank2(x, "rows_cosine");
    require_rank2(y, "rows_cosine");
    check_same_shape(x.value(), y.value(), "rows_cosine");
    const Index b = x.value().rows();
    Tensor out = Tensor::zeros({b});
    Eigen::ArrayXd nx(b), ny(b);
    Eigen::Array<bool, Eigen::Dynamic, 1> guarded(b);
    {
        ConstMatMap X = x.value().mat(), Y = y.value().mat();
        for (Index r = 0; r < b; ++r) {
            nx[r] = X.row(r).norm();
            ny[r] = Y.row(r).norm();
            const double den = std::max(nx[r] * ny[r], kNormEps);
            guarded[r] = nx[r] * ny[r] < kNormEps;
            out[r] = X.row(r).dot(Y.row(r)) / den;
        }
    }
    Eigen::ArrayXd cv = out.array();
    NodePtr px = x.shared_node(), py = y.shared_node();
    return make_node(std::move(out), {px, py},
                     [px, py, nx = std::move(nx), ny = std::move(ny), cv = std::move(cv),
                      guarded = std::move(guarded)](const Tensor& g, const std::vector<Tensor*>& slots) {
                         const Tensor& xv = px->value;
                         const Tensor& yv = py->value;
                         ConstMatMap X = xv.mat();
                         ConstMatMap Y = yv.mat();
                         const Index b = X.rows();
                         for (Index r = 0; r < b; ++r) {
                             if (g[r] == 0.0) continue;
                             const double den = std::max(nx[r] * ny[r], kNormEps);
                             if (slots[0]) {
                                 MatMap GX(slots[0]->array().data(), X.rows(), X.cols());
                                 Eigen::ArrayXd row = GX.row(r).transpose().array();
                                 cosine_grad_row(g[r], X.row(r).transpose().array(),
                                                 Y.row(r).transpose().array(), nx[r], den, cv[r], guarded[r], row);
                                 GX.row(r) = row.matrix().transpose();
                             }
                             if (slots[1]) {
                                 MatMap GY(slots[1]->array().data(), Y.rows(), Y.cols());
                                 Eigen::ArrayXd row = GY.row(r).transpose().array();
                                 cosine_grad_row(g[r], Y.row(r).transpose().array(),
                                                 X.row(r).transpose().array(), ny[r], den, cv[r], guarded[r], row);
                                 GY.row(r) = row.matrix().transpose();
                             }
                         }
                     });
}

Var row_cosine_matrix(const Var& x, const Var& y) {
    require_rank2(x, "row_cosine_matrix");
    require_rank2(y, "row_cosine_matrix");
    if (x.value().cols() != y.value().cols()) {
        throw ShapeError("row_cosine_matrix: feature dims disagree, " + x.value().shape_string() + " vs " +
                         y.value().shape_string());
    }
    const Index m = x.value().rows(), n = y.value().rows();
    ConstMatMap X = x.value().mat(), Y = y.value().mat();
    Eigen::ArrayXd nx = X.rowwise().norm().array();
    Eigen::ArrayXd ny = Y.rowwise().norm().array();
    MatrixRM den = (nx.matrix() * ny.matrix().transpose()).cwiseMax(kNormEps);
    MatrixRM mask = ((nx.matrix() * ny.matrix().transpose()).array() >= kNormEps).cast<double>();
    Tensor out = Tensor::zeros({m, n});
    out.mat() = ((X * Y.transpose()).array() / den.array()).matrix();
    MatrixRM C = out.mat();
    NodePtr px = x.shared_node(), py = y.shared_node();
    return make_node(std::move(out), {px, py},
                     [px, py, nx = std::move(nx), ny = std::move(ny), den = std::move(den), C = std::move(C),
                      mask = std::move(mask)](const Tensor& g, const std::vector<Tensor*>& slots) {
                         const Tensor& xv = px->value;
                         const Tensor& yv = py->value;
                         ConstMatMap X = xv.mat();
                         ConstMatMap Y = yv.mat();
                         ConstMatMap G = g.mat();
                         // W = G / den covers both the plain and the guarded branch
                         // (the guard freezes the denominator at kNormEps).
                         MatrixRM W = (G.array() / den.array()).matrix();
                         // The -cos * x / |x|^2 term only exists where the guard is off.
                         MatrixRM GC = (G.array() * C.array() * mask.array()).matrix();
                         if (slots[0]) {
                             Eigen::ArrayXd s = GC.rowwise().sum().array() / nx.square().max(1e-300);
                             slots[0]->mat() += W * Y - (s.matrix().asDiagonal() * X);
                         }
                         if (slots[1]) {
                             Eigen::ArrayXd t = GC.colwise().sum().transpose().array() / ny.square().max(1e-300);
                             slots[1]->mat() += W.transpose() * X - (t.matrix().asDiagonal() * Y);
                         }
                     });
}

Var diag(const Var& a) {
    require_rank2(a, "diag");
    if (a.value().rows() != a.value().cols()) {
        throw ShapeError("diag: expected a square matrix, got " + a.value().shape_string());
    }
    const Index n = a.value().rows();
    Tensor out = Tensor::zeros({n});
    for (Index i = 0; i < n; ++i) out[i] = a.value()(i, i);
    return make_node(std::move(out), {a.shared_node()},
                     [n](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (!slots[0]) return;
                         for (Index i = 0; i < n; ++i) (*slots[0])(i, i) += g[i];
                     });
}

Var row(const Var& a, Index i) {
    require_rank2(a, "row");
    if (i < 0 || i >= a.value().rows()) {
        throw ShapeError("row: index out of range for " + a.value().shape_string());
    }
    const Index n = a.value().cols();
    Tensor out = Tensor::zeros({n});
    out.vec() = a.value().mat().row(i).transpose();
    return make_node(std::move(out), {a.shared_node()},
                     [i](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (slots[0]) slots[0]->mat().row(i) += g.vec().transpose();
                     });
}

Var rows_logsumexp(const Var& a) {
    require_rank2(a, "rows_logsumexp");
    require_nonempty(a, "rows_logsumexp");
    const Index m = a.value().rows(), n = a.value().cols();
    Tensor out = Tensor::zeros({m});
    MatrixRM soft(m, n);
    {
        ConstMatMap X = a.value().mat();
        for (Index r = 0; r < m; ++r) {
            const double mx = X.row(r).maxCoeff();
            Eigen::ArrayXd e = (X.row(r).transpose().array() - mx).exp();
            const double s = e.sum();
            out[r] = mx + std::log(s);
            soft.row(r) = (e / s).matrix().transpose();
        }
    }
    return make_node(std::move(out), {a.shared_node()},
                     [soft = std::move(soft)](const Tensor& g, const std::vector<Tensor*>& slots) {
                         if (!slots[0]) return;
                         MatMap GA(slots[0]->array().data(), soft.rows(), soft.cols());
                         for (Index r = 0; r < soft.rows(); ++r) {
                             GA.row(r) += g[r] * soft.row(r);
                         }
                     });
}

double finite_difference_check(const std::function<Var()>& f, std::span<Var> params, double h) {
    if (h <= 0.0) throw ParamError("finite_difference_check: h must be positive");
    for (Var& p : params) p.zero_grad();
    backward(f());
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Var& p : params) analytic.push_back(p.grad());

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& v = params[pi].mutable_value();
        for (Index k = 0; k < v.size(); ++k) {
            const double orig = v[k];
            v[k] = orig + h;
            const double fp = f().value().item();
            v[k] = orig - h;
            const double fm = f().value().item();
            v[k] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace akd
