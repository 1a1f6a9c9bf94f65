#pragma once

#include <vector>

#include "akd/tensor.hpp"

namespace akd {

// A stack of M member outputs over one batch: member i is a [B x d] matrix
// and all members share a shape. The diversity metrics average over the
// batch dimension. Members are usually class distributions (simplex rows);
// the operations that actually require distributions check that themselves.
struct LogitSet {
    std::vector<Tensor> members;

    Index count() const { return static_cast<Index>(members.size()); }
    Index batch() const { return members.empty() ? 0 : members.front().rows(); }
    Index classes() const { return members.empty() ? 0 : members.front().cols(); }
};

// Shape/width agreement across members; rank-2 only.
void check_member_stack(const LogitSet& set, Index min_members, const char* where);

// Mean over the batch of sum_c Var_i[ z_i^c / max_k z_k^c ], population
// variance over members, the per-class max guarded at eps. Members must be
// simplex rows (within 1e-10). Zero iff all members coincide per class.
double generalized_diversity(const LogitSet& set, double eps = 1e-12);

// Mean over the batch of E_i ||Z_i||^2 - ||E_i Z_i||^2 (population variance
// of the member vectors around their mean). Oracle quantity for the two
// pairwise formulations below.
double total_logit_variance(const LogitSet& set);

// Pairwise-cosine expansion of the member variance: mean over the batch of
// E_i ||Z_i||^2 - (1/N^2) sum_{i,j} ||Z_i|| ||Z_j|| cos(Z_i, Z_j), the pair
// sum running over all N^2 ordered pairs, diagonal included. Agrees with
// total_logit_variance identically (up to roundoff) for any member set.
double diversity_inter_form(const LogitSet& set);

// Offset-based expansion: with D_i = teacher - Z_i, mean over the batch of
// -(1/N) sum_{i != j} ||D_i|| ||D_j|| cos(D_i, D_j). Equals the member
// variance exactly when the offsets sum to zero (member mean == teacher);
// callers wanting the identity must recenter first.
double diversity_intra_form(const Tensor& teacher, const LogitSet& set);

struct KlBoundResult {
    double lhs = 0.0;               // KL(y || member mean), batch mean
    double rhs = 0.0;               // E_i KL(y || Z_i) minus the curvature credit, batch mean
    double slack = 0.0;             // rhs - lhs
    double min_sample_slack = 0.0;  // worst per-sample slack in the batch
    long clamp_count = 0;           // entries pulled up to eps
};

// Checks that averaging members can only lower the divergence to the target,
// with a second-order credit: rhs subtracts, per class, y_c / (2 max_k
// (z_k^c)^2) times the member variance of z^c. Holds with slack >= 0 in
// exact arithmetic for any strictly positive inputs; zero entries are pulled
// up to eps and counted.
KlBoundResult kl_bound_check(const Tensor& y, const LogitSet& set, double eps = 1e-12);

struct AngleStats {
    double mean_inter_deg = 0.0;  // mean pairwise angle between members
    double mean_intra_deg = 0.0;  // mean pairwise angle between offsets; NaN if no valid pair
    long intra_pairs_skipped = 0;
};

// Angles in degrees over unordered member pairs, pooled across the batch.
// Inter uses the members directly; intra uses offsets teacher - member and
// skips pairs where either offset norm falls below eps. With every intra
// pair skipped the intra mean is reported as NaN.
AngleStats angle_stats(const Tensor& teacher, const LogitSet& set, double eps = 1e-12);

struct DiversityReport {
    double diversity_direct = 0.0;     // generalized diversity, teacher included
    double inter_form = 0.0;           // views-only pairwise-cosine form
    double intra_form = 0.0;           // teacher-offset form
    double raw_variance = 0.0;         // views-only member variance
    double mean_inter_angle_deg = 0.0;
    double mean_intra_angle_deg = 0.0;
    double kl_bound_lhs = 0.0;
    double kl_bound_rhs = 0.0;
    double bound_slack = 0.0;
};

// Bundles the metrics the trainer logs: teacher-included generalized
// diversity and bound check, views-only variance forms, and the angle
// statistics of the view logits against the teacher.
DiversityReport compute_diversity_report(const Tensor& teacher_logits, const LogitSet& views,
                                         const Tensor& y_strictly_positive, double eps = 1e-12);

}  // namespace akd
