#include "akd/augment.hpp"

#include "akd/errors.hpp"

namespace akd {

ViewHeadSet build_view_heads(int n, Index d_T, Index num_classes, const std::vector<double>& dropout_probs,
                             double logit_temperature, Rng& rng) {
    if (n < 0) throw ParamError("build_view_heads: negative head count");
    if (static_cast<int>(dropout_probs.size()) != n) {
        throw ParamError("build_view_heads: need one dropout probability per head");
    }
    for (double p : dropout_probs) {
        if (p < 0.0 || p >= 1.0) throw ParamError("build_view_heads: dropout probability outside [0, 1)");
    }
    if (logit_temperature <= 0.0) throw ParamError("build_view_heads: temperature must be positive");
    ViewHeadSet set;
    set.logit_temperature = logit_temperature;
    set.heads.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng hr = rng.fork("head-init").fork(static_cast<std::uint64_t>(i));
        ViewHead head;
        head.dropout_prob = dropout_probs[static_cast<std::size_t>(i)];
        head.feature_linear = make_linear(d_T, d_T, /*with_bias=*/false, hr);
        head.bn = make_batchnorm(d_T);
        head.logit_linear = make_linear(num_classes, d_T, /*with_bias=*/false, hr);
        head.index = i;
        set.heads.push_back(std::move(head));
    }
    return set;
}

AugmentedViews augment_views(ViewHeadSet& heads, const Tensor& F_T, Mode mode, const Rng& rng) {
    if (F_T.rank() != 2) throw ShapeError("augment_views: teacher features must be [B x d_T]");
    AugmentedViews out;
    Var f_t = constant(F_T);  // gradient stops at the teacher
    for (ViewHead& head : heads.heads) {
        if (F_T.cols() != head.feature_linear.weight.value().cols()) {
            throw ShapeError("augment_views: teacher width " + F_T.shape_string() + " does not match head");
        }
        Rng hr = rng.fork(static_cast<std::uint64_t>(head.index));
        DropoutResult dr = dropout_forward(f_t, head.dropout_prob, hr, mode);
        Var fa = batchnorm_forward(linear_forward(head.feature_linear, dr.out), head.bn, mode);
        Var za = softmax_with_temperature(linear_forward(head.logit_linear, fa), heads.logit_temperature);
        out.features.push_back(fa);
        out.logits.push_back(za);
        out.masks.push_back(std::move(dr.mask));
    }
    return out;
}

EnsembleOutput combine_ensemble(const Tensor& Z_T, const Tensor& F_T, const AugmentedViews& views,
                                std::vector<double> weights) {
    const std::size_t n = views.logits.size();
    if (views.features.size() != n) throw ParamError("combine_ensemble: feature/logit count mismatch");
    if (n == 0) {
        // no views: the ensemble is the teacher itself, whatever the weight vector
        // says (it was sized for a mode that produces views). Keeps the reduction
        // to plain distillation bit-exact.
        EnsembleOutput out;
        out.weights = {1.0};
        out.logit_ensemble = Z_T;
        out.feature_ensemble = F_T;
        return out;
    }
    if (weights.empty()) weights.assign(n + 1, 1.0);
    if (weights.size() != n + 1) {
        throw ParamError("combine_ensemble: need one weight per member (teacher + views)");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ParamError("combine_ensemble: weights must be nonnegative");
        total += w;
    }
    if (total <= 0.0) throw ParamError("combine_ensemble: weights sum to zero");
    for (double& w : weights) w /= total;

    EnsembleOutput out;
    out.weights = weights;
    Tensor z = Tensor::zeros(Z_T.shape());
    Tensor f = Tensor::zeros(F_T.shape());
    z.array() = weights[0] * Z_T.array();
    f.array() = weights[0] * F_T.array();
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor& zi = views.logits[i].value();
        const Tensor& fi = views.features[i].value();
        check_same_shape(Z_T, zi, "combine_ensemble");
        check_same_shape(F_T, fi, "combine_ensemble");
        z.array() += weights[i + 1] * zi.array();
        f.array() += weights[i + 1] * fi.array();
    }
    out.logit_ensemble = std::move(z);
    out.feature_ensemble = std::move(f);
    return out;
}

AugmentedViews noise_augment_baseline(const Tensor& F_T, const TeacherBundle& teacher, int n, double sigma,
                                      const Rng& rng) {
    if (n < 0) throw ParamError("noise_augment_baseline: negative view count");
    if (sigma < 0.0) throw ParamError("noise_augment_baseline: sigma must be nonnegative");
    if (F_T.rank() != 2 || F_T.cols() != teacher.feature_dim) {
        throw ShapeError("noise_augment_baseline: features " + F_T.shape_string() + " do not fit the teacher");
    }
    AugmentedViews out;
    for (int i = 0; i < n; ++i) {
        Rng vr = rng.fork(static_cast<std::uint64_t>(i));
        Tensor fa = F_T;
        if (sigma > 0.0) {
            Tensor eps = vr.normal_tensor(F_T.shape());
            fa.array() += sigma * eps.array();
        }
        Var fav = constant(std::move(fa));
        Var za = softmax_with_temperature(linear_forward(teacher.classifier, fav), teacher.logit_temperature);
        out.features.push_back(fav);
        out.logits.push_back(za);
        out.masks.push_back(Tensor::full(F_T.shape(), 1.0));
    }
    return out;
}

std::vector<Var> parameters(const ViewHeadSet& heads) {
    std::vector<Var> out;
    for (const ViewHead& h : heads.heads) {
        out.push_back(h.feature_linear.weight);
        out.push_back(h.bn.scale);
        out.push_back(h.bn.shift);
        out.push_back(h.logit_linear.weight);
    }
    return out;
}

}  // namespace akd
