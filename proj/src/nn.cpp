#include "akd/nn.hpp"

#include <cmath>
#include <cstring>

#include "akd/errors.hpp"

namespace akd {

Tensor orthogonal_init(Index rows, Index cols, Rng& rng) {
    if (rows <= 0 || cols <= 0) throw ParamError("orthogonal_init: dimensions must be positive");
    const Index m = std::max(rows, cols);
    const Index n = std::min(rows, cols);
    // Thin QR of an m x n standard-normal matrix gives Q with orthonormal
    // columns; flipping each column by sign(R_jj) makes the factorization
    // unique so the draw is a deterministic function of the rng stream.
    MatrixRM a(m, n);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<MatrixRM> qr(a);
    MatrixRM q = qr.householderQ() * MatrixRM::Identity(m, n);
    Eigen::MatrixXd r = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
    for (Index j = 0; j < n; ++j) {
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    }
    Tensor w = Tensor::zeros({rows, cols});
    if (rows <= cols) {
        w.mat() = q.transpose();  // orthonormal rows
    } else {
        w.mat() = q;  // orthonormal columns
    }
    return w;
}

LinearLayer make_linear(Index out, Index in, bool with_bias, Rng& rng) {
    LinearLayer layer;
    layer.weight = parameter(orthogonal_init(out, in, rng));
    if (with_bias) layer.bias = parameter(Tensor::zeros({out}));
    return layer;
}

Var linear_forward(const LinearLayer& layer, const Var& x) {
    if (x.value().rank() != 2 || x.value().cols() != layer.weight.value().cols()) {
        throw ShapeError("linear_forward: input " + x.value().shape_string() + " does not match weight " +
                         layer.weight.value().shape_string());
    }
    Var out = matmul(x, transpose(layer.weight));
    if (layer.bias) out = add_rowvec(out, *layer.bias);
    return out;
}

BatchNormState make_batchnorm(Index d) {
    BatchNormState st;
    st.scale = parameter(Tensor::full({d}, 1.0));
    st.shift = parameter(Tensor::zeros({d}));
    st.running_mean = Tensor::zeros({d});
    st.running_var = Tensor::full({d}, 1.0);
    return st;
}

Var batchnorm_forward(const Var& x, BatchNormState& state, Mode mode) {
    if (x.value().rank() != 2) throw ShapeError("batchnorm: expected [B x d], got " + x.value().shape_string());
    const Index b = x.value().rows(), d = x.value().cols();
    if (d != state.scale.value().size()) {
        throw ShapeError("batchnorm: feature width " + x.value().shape_string() + " does not match state");
    }
    ConstMatMap X = x.value().mat();
    const Eigen::ArrayXd gamma = state.scale.value().array();
    const Eigen::ArrayXd beta = state.shift.value().array();

    if (mode == Mode::Train) {
        if (b < 2) throw ParamError("batchnorm: train mode needs a batch of at least 2");
        Eigen::ArrayXd mu = X.colwise().mean().transpose().array();
        Eigen::ArrayXd var(d);
        for (Index j = 0; j < d; ++j) {
            var[j] = (X.col(j).array() - mu[j]).square().mean();  // population variance
        }
        Eigen::ArrayXd inv_std = (var + state.eps).sqrt().inverse();
        MatrixRM xhat(b, d);
        for (Index j = 0; j < d; ++j) xhat.col(j) = (X.col(j).array() - mu[j]) * inv_std[j];

        state.running_mean.array() = (1.0 - state.momentum) * state.running_mean.array() + state.momentum * mu;
        state.running_var.array() = (1.0 - state.momentum) * state.running_var.array() + state.momentum * var;

        Tensor out = Tensor::zeros({b, d});
        for (Index j = 0; j < d; ++j) out.mat().col(j) = xhat.col(j).array() * gamma[j] + beta[j];

        auto xn = x.shared_node();
        auto node = std::make_shared<detail::Node>();
        node->value = std::move(out);
        node->requires_grad =
            xn->requires_grad || state.scale.node()->requires_grad || state.shift.node()->requires_grad;
        if (node->requires_grad) {
            node->parents = {xn, state.scale.shared_node(), state.shift.shared_node()};
            // fused batchnorm backward (population variance):
            //   dx = gamma * inv_std * (g - mean_b(g) - xhat * mean_b(g * xhat))
            //   dgamma = sum_b(g * xhat), dbeta = sum_b(g)
            node->backward = [inv_std = std::move(inv_std), xhat = std::move(xhat), gamma](
                                 const Tensor& g, const std::vector<Tensor*>& slots) {
                ConstMatMap G = g.mat();
                const Index bb = G.rows(), dd = G.cols();
                for (Index j = 0; j < dd; ++j) {
                    const Eigen::ArrayXd gj = G.col(j).array();
                    const Eigen::ArrayXd xh = xhat.col(j).array();
                    if (slots[0]) {
                        const double gm = gj.mean();
                        const double gxm = (gj * xh).mean();
                        MatMap GX(slots[0]->array().data(), bb, dd);
                        GX.col(j).array() += gamma[j] * inv_std[j] * (gj - gm - xh * gxm);
                    }
                    if (slots[1]) slots[1]->array()[j] += (gj * xh).sum();
                    if (slots[2]) slots[2]->array()[j] += gj.sum();
                }
            };
        }
        return Var::wrap(std::move(node));
    }

    // Eval mode: affine transform with frozen statistics.
    Eigen::ArrayXd inv_std = (state.running_var.array() + state.eps).sqrt().inverse();
    const Eigen::ArrayXd rm = state.running_mean.array();
    Tensor out = Tensor::zeros({b, d});
    MatrixRM xhat(b, d);
    for (Index j = 0; j < d; ++j) {
        xhat.col(j) = (X.col(j).array() - rm[j]) * inv_std[j];
        out.mat().col(j) = xhat.col(j).array() * gamma[j] + beta[j];
    }
    auto xn = x.shared_node();
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(out);
    node->requires_grad =
        xn->requires_grad || state.scale.node()->requires_grad || state.shift.node()->requires_grad;
    if (node->requires_grad) {
        node->parents = {xn, state.scale.shared_node(), state.shift.shared_node()};
        node->backward = [inv_std = std::move(inv_std), xhat = std::move(xhat), gamma](
                             const Tensor& g, const std::vector<Tensor*>& slots) {
            ConstMatMap G = g.mat();
            const Index bb = G.rows(), dd = G.cols();
            for (Index j = 0; j < dd; ++j) {
                const Eigen::ArrayXd gj = G.col(j).array();
                if (slots[0]) {
                    MatMap GX(slots[0]->array().data(), bb, dd);
                    GX.col(j).array() += gamma[j] * inv_std[j] * gj;
                }
                if (slots[1]) slots[1]->array()[j] += (gj * xhat.col(j).array()).sum();
                if (slots[2]) slots[2]->array()[j] += gj.sum();
            }
        };
    }
    return Var::wrap(std::move(node));
}

DropoutResult dropout_forward(const Var& x, double p, Rng& rng, Mode mode) {
    if (p < 0.0 || p >= 1.0) throw ParamError("dropout: p must lie in [0, 1)");
    const Index n = x.value().size();
    Tensor mask = Tensor::full(x.value().shape(), 1.0);
    if (mode == Mode::Eval || p == 0.0) {
        return {x, std::move(mask)};
    }
    for (Index i = 0; i < n; ++i) mask[i] = rng.uniform() < p ? 0.0 : 1.0;
    Tensor scaled(mask.shape(), mask.array() / (1.0 - p));
    Var out = mul(x, constant(std::move(scaled)));
    return {out, std::move(mask)};
}

// ---- bundles ----------------------------------------------------------------

namespace {

std::vector<LinearLayer> make_mlp(Index d_in, const std::vector<Index>& hidden, Index d_out, Rng& rng) {
    std::vector<LinearLayer> layers;
    Index prev = d_in;
    for (Index h : hidden) {
        layers.push_back(make_linear(h, prev, /*with_bias=*/true, rng));
        prev = h;
    }
    layers.push_back(make_linear(d_out, prev, /*with_bias=*/true, rng));
    return layers;
}

Var mlp_forward(const std::vector<LinearLayer>& layers, const Var& x) {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = linear_forward(layers[i], h);
        if (i + 1 < layers.size()) h = relu(h);  // linear output layer
    }
    return h;
}

void append_layer_params(std::vector<Var>& out, const LinearLayer& l) {
    out.push_back(l.weight);
    if (l.bias) out.push_back(*l.bias);
}

}  // namespace

TeacherBundle make_teacher(Index d_in, std::vector<Index> hidden, Index d_T, Index num_classes,
                           double logit_temperature, Rng& rng) {
    if (num_classes < 2) throw ParamError("make_teacher: need at least 2 classes");
    if (logit_temperature <= 0.0) throw ParamError("make_teacher: temperature must be positive");
    TeacherBundle t;
    t.extractor = make_mlp(d_in, hidden, d_T, rng);
    t.classifier = make_linear(num_classes, d_T, /*with_bias=*/true, rng);
    t.feature_dim = d_T;
    t.num_classes = num_classes;
    t.logit_temperature = logit_temperature;
    return t;
}

TeacherOutput teacher_forward(const TeacherBundle& teacher, const Tensor& x) {
    TeacherOutput out;
    out.features = mlp_forward(teacher.extractor, constant(x));
    out.raw_logits = linear_forward(teacher.classifier, out.features);
    out.logits = softmax_with_temperature(out.raw_logits, teacher.logit_temperature);
    return out;
}

StudentBundle make_student(Index d_in, std::vector<Index> hidden, Index d_S, Index d_T,
                           Index num_classes, Rng& rng) {
    if (num_classes < 2) throw ParamError("make_student: need at least 2 classes");
    StudentBundle s;
    s.extractor = make_mlp(d_in, hidden, d_S, rng);
    s.classifier = make_linear(num_classes, d_S, /*with_bias=*/true, rng);
    s.projection = make_linear(d_T, d_S, /*with_bias=*/false, rng);
    s.feature_dim = d_S;
    s.num_classes = num_classes;
    return s;
}

StudentOutput student_forward(const StudentBundle& student, const Tensor& x) {
    StudentOutput out;
    out.features = mlp_forward(student.extractor, constant(x));
    out.features_projected = linear_forward(student.projection, out.features);
    out.raw_logits = linear_forward(student.classifier, out.features);
    return out;
}

std::vector<Var> parameters(const TeacherBundle& t) {
    std::vector<Var> out;
    for (const auto& l : t.extractor) append_layer_params(out, l);
    append_layer_params(out, t.classifier);
    return out;
}

std::vector<Var> parameters(const StudentBundle& s) {
    std::vector<Var> out;
    for (const auto& l : s.extractor) append_layer_params(out, l);
    append_layer_params(out, s.classifier);
    append_layer_params(out, s.projection);
    return out;
}

std::uint64_t parameter_checksum(std::span<const Var> params) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const Var& p : params) {
        const Eigen::ArrayXd& a = p.value().array();
        for (Index i = 0; i < a.size(); ++i) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(double));
            std::memcpy(&bits, &a[i], sizeof(bits));
            for (int k = 0; k < 8; ++k) {
                h ^= (bits >> (8 * k)) & 0xFF;
                h *= 0x100000001B3ull;
            }
        }
    }
    return h;
}

}  // namespace akd
