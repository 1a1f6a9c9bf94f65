#include "akd/diversity.hpp"

#include <cmath>
#include <limits>

#include "akd/errors.hpp"

namespace akd {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_simplex_rows(const LogitSet& set, const char* where) {
    for (const Tensor& m : set.members) {
        for (Index r = 0; r < m.rows(); ++r) {
            double rowsum = 0.0;
            for (Index c = 0; c < m.cols(); ++c) {
                const double v = m(r, c);
                if (v < -1e-10) {
                    throw DomainError(std::string(where) + ": member entry below 0 at row " +
                                      std::to_string(r));
                }
                rowsum += v;
            }
            if (std::abs(rowsum - 1.0) > 1e-10) {
                throw DomainError(std::string(where) + ": member row " + std::to_string(r) +
                                  " sums to " + std::to_string(rowsum));
            }
        }
    }
}

double guarded_cosine(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
    const double na = std::sqrt(a.square().sum());
    const double nb = std::sqrt(b.square().sum());
    return (a * b).sum() / std::max(na * nb, 1e-300);
}

}  // namespace

void check_member_stack(const LogitSet& set, Index min_members, const char* where) {
    if (set.count() < min_members) {
        throw ParamError(std::string(where) + ": need at least " + std::to_string(min_members) +
                         " members, got " + std::to_string(set.count()));
    }
    const Tensor& first = set.members.front();
    if (first.rank() != 2 || first.rows() < 1 || first.cols() < 1) {
        throw ShapeError(std::string(where) + ": members must be [B x d], got " + first.shape_string());
    }
    for (const Tensor& m : set.members) check_same_shape(first, m, where);
}

double generalized_diversity(const LogitSet& set, double eps) {
    check_member_stack(set, 2, "generalized_diversity");
    check_simplex_rows(set, "generalized_diversity");
    const Index b = set.batch();
    const Index c = set.classes();
    const Index m = set.count();
    double acc = 0.0;
    for (Index r = 0; r < b; ++r) {
        for (Index k = 0; k < c; ++k) {
            double mx = 0.0;
            for (Index i = 0; i < m; ++i) mx = std::max(mx, set.members[static_cast<std::size_t>(i)](r, k));
            const double denom = std::max(mx, eps);
            double mean = 0.0, sq = 0.0;
            for (Index i = 0; i < m; ++i) {
                const double v = set.members[static_cast<std::size_t>(i)](r, k) / denom;
                mean += v;
                sq += v * v;
            }
            mean /= static_cast<double>(m);
            acc += sq / static_cast<double>(m) - mean * mean;  // population variance
        }
    }
    return acc / static_cast<double>(b);
}

double total_logit_variance(const LogitSet& set) {
    check_member_stack(set, 2, "total_logit_variance");
    const Index b = set.batch();
    const Index m = set.count();
    double acc = 0.0;
    for (Index r = 0; r < b; ++r) {
        Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(set.classes());
        double sq = 0.0;
        for (Index i = 0; i < m; ++i) {
            Eigen::ArrayXd z = set.members[static_cast<std::size_t>(i)].mat().row(r).transpose().array();
            sq += z.square().sum();
            mean += z;
        }
        mean /= static_cast<double>(m);
        acc += sq / static_cast<double>(m) - mean.square().sum();
    }
    return acc / static_cast<double>(b);
}

double diversity_inter_form(const LogitSet& set) {
    check_member_stack(set, 2, "diversity_inter_form");
    const Index b = set.batch();
    const Index m = set.count();
    double acc = 0.0;
    std::vector<Eigen::ArrayXd> rows(static_cast<std::size_t>(m));
    for (Index r = 0; r < b; ++r) {
        double sq = 0.0;
        for (Index i = 0; i < m; ++i) {
            rows[static_cast<std::size_t>(i)] = set.members[static_cast<std::size_t>(i)].mat().row(r).transpose().array();
            sq += rows[static_cast<std::size_t>(i)].square().sum();
        }
        double pair_sum = 0.0;  // all ordered pairs, diagonal included
        for (Index i = 0; i < m; ++i) {
            const Eigen::ArrayXd& zi = rows[static_cast<std::size_t>(i)];
            const double ni = std::sqrt(zi.square().sum());
            for (Index j = 0; j < m; ++j) {
                const Eigen::ArrayXd& zj = rows[static_cast<std::size_t>(j)];
                const double nj = std::sqrt(zj.square().sum());
                pair_sum += ni * nj * guarded_cosine(zi, zj);
            }
        }
        acc += sq / static_cast<double>(m) - pair_sum / static_cast<double>(m * m);
    }
    return acc / static_cast<double>(b);
}

double diversity_intra_form(const Tensor& teacher, const LogitSet& set) {
    check_member_stack(set, 2, "diversity_intra_form");
    check_same_shape(teacher, set.members.front(), "diversity_intra_form");
    const Index b = set.batch();
    const Index m = set.count();
    double acc = 0.0;
    std::vector<Eigen::ArrayXd> offs(static_cast<std::size_t>(m));
    for (Index r = 0; r < b; ++r) {
        for (Index i = 0; i < m; ++i) {
            offs[static_cast<std::size_t>(i)] = teacher.mat().row(r).transpose().array() -
                                                set.members[static_cast<std::size_t>(i)].mat().row(r).transpose().array();
        }
        double pair_sum = 0.0;  // off-diagonal ordered pairs
        for (Index i = 0; i < m; ++i) {
            const Eigen::ArrayXd& di = offs[static_cast<std::size_t>(i)];
            const double ni = std::sqrt(di.square().sum());
            for (Index j = 0; j < m; ++j) {
                if (i == j) continue;
                const Eigen::ArrayXd& dj = offs[static_cast<std::size_t>(j)];
                const double nj = std::sqrt(dj.square().sum());
                pair_sum += ni * nj * guarded_cosine(di, dj);
            }
        }
        acc += -pair_sum / static_cast<double>(m);
    }
    return acc / static_cast<double>(b);
}

KlBoundResult kl_bound_check(const Tensor& y, const LogitSet& set, double eps) {
    check_member_stack(set, 2, "kl_bound_check");
    check_same_shape(y, set.members.front(), "kl_bound_check");
    if (eps <= 0.0) throw ParamError("kl_bound_check: eps must be positive");
    const Index b = set.batch();
    const Index c = set.classes();
    const Index m = set.count();

    KlBoundResult out;
    out.min_sample_slack = std::numeric_limits<double>::infinity();
    double lhs_acc = 0.0, rhs_acc = 0.0;
    std::vector<double> z(static_cast<std::size_t>(m));
    for (Index r = 0; r < b; ++r) {
        double lhs = 0.0, cross = 0.0, credit = 0.0;
        for (Index k = 0; k < c; ++k) {
            double yv = y(r, k);
            if (yv < eps) {
                yv = eps;
                ++out.clamp_count;
            }
            double mean = 0.0, mx = 0.0;
            for (Index i = 0; i < m; ++i) {
                double v = set.members[static_cast<std::size_t>(i)](r, k);
                if (v < eps) {
                    v = eps;
                    ++out.clamp_count;
                }
                z[static_cast<std::size_t>(i)] = v;
                mean += v;
                mx = std::max(mx, v);
            }
            mean /= static_cast<double>(m);
            lhs += yv * std::log(yv / mean);
            double var = 0.0;
            for (Index i = 0; i < m; ++i) {
                const double v = z[static_cast<std::size_t>(i)];
                cross += yv * std::log(yv / v) / static_cast<double>(m);
                var += (v - mean) * (v - mean) / static_cast<double>(m);
            }
            credit += yv / (2.0 * mx * mx) * var;
        }
        const double rhs = cross - credit;
        lhs_acc += lhs;
        rhs_acc += rhs;
        out.min_sample_slack = std::min(out.min_sample_slack, rhs - lhs);
    }
    out.lhs = lhs_acc / static_cast<double>(b);
    out.rhs = rhs_acc / static_cast<double>(b);
    out.slack = out.rhs - out.lhs;
    return out;
}

AngleStats angle_stats(const Tensor& teacher, const LogitSet& set, double eps) {
    check_member_stack(set, 2, "angle_stats");
    check_same_shape(teacher, set.members.front(), "angle_stats");
    if (eps <= 0.0) throw ParamError("angle_stats: eps must be positive");
    const Index b = set.batch();
    const Index m = set.count();
    double inter_acc = 0.0;
    long inter_n = 0;
    double intra_acc = 0.0;
    long intra_n = 0;
    AngleStats out;
    for (Index r = 0; r < b; ++r) {
        std::vector<Eigen::ArrayXd> zs(static_cast<std::size_t>(m));
        std::vector<Eigen::ArrayXd> ds(static_cast<std::size_t>(m));
        std::vector<double> dn(static_cast<std::size_t>(m));
        for (Index i = 0; i < m; ++i) {
            zs[static_cast<std::size_t>(i)] = set.members[static_cast<std::size_t>(i)].mat().row(r).transpose().array();
            ds[static_cast<std::size_t>(i)] = teacher.mat().row(r).transpose().array() - zs[static_cast<std::size_t>(i)];
            dn[static_cast<std::size_t>(i)] = std::sqrt(ds[static_cast<std::size_t>(i)].square().sum());
        }
        for (Index i = 0; i < m; ++i) {
            for (Index j = i + 1; j < m; ++j) {
                const double ci =
                    std::clamp(guarded_cosine(zs[static_cast<std::size_t>(i)], zs[static_cast<std::size_t>(j)]),
                               -1.0, 1.0);
                inter_acc += std::acos(ci) * 180.0 / kPi;
                ++inter_n;
                if (dn[static_cast<std::size_t>(i)] < eps || dn[static_cast<std::size_t>(j)] < eps) {
                    ++out.intra_pairs_skipped;
                    continue;
                }
                const double cd =
                    std::clamp(guarded_cosine(ds[static_cast<std::size_t>(i)], ds[static_cast<std::size_t>(j)]),
                               -1.0, 1.0);
                intra_acc += std::acos(cd) * 180.0 / kPi;
                ++intra_n;
            }
        }
    }
    out.mean_inter_deg = inter_acc / static_cast<double>(inter_n);
    out.mean_intra_deg = intra_n > 0 ? intra_acc / static_cast<double>(intra_n)
                                     : std::numeric_limits<double>::quiet_NaN();
    return out;
}

DiversityReport compute_diversity_report(const Tensor& teacher_logits, const LogitSet& views,
                                         const Tensor& y_strictly_positive, double eps) {
    check_member_stack(views, 2, "compute_diversity_report");
    check_same_shape(teacher_logits, views.members.front(), "compute_diversity_report");

    LogitSet with_teacher;
    with_teacher.members.reserve(views.members.size() + 1);
    with_teacher.members.push_back(teacher_logits);
    for (const Tensor& v : views.members) with_teacher.members.push_back(v);

    DiversityReport rep;
    rep.diversity_direct = generalized_diversity(with_teacher, eps);
    rep.raw_variance = total_logit_variance(views);
    rep.inter_form = diversity_inter_form(views);
    rep.intra_form = diversity_intra_form(teacher_logits, views);
    AngleStats ang = angle_stats(teacher_logits, views, eps);
    rep.mean_inter_angle_deg = ang.mean_inter_deg;
    rep.mean_intra_angle_deg = ang.mean_intra_deg;
    KlBoundResult kb = kl_bound_check(y_strictly_positive, with_teacher, eps);
    rep.kl_bound_lhs = kb.lhs;
    rep.kl_bound_rhs = kb.rhs;
    rep.bound_slack = kb.slack;
    return rep;
}

}  // namespace akd
