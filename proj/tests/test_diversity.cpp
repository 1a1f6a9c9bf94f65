#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "akd/diversity.hpp"
#include "akd/errors.hpp"
#include "akd/rng.hpp"

using namespace akd;

namespace {

Tensor simplex_rows(Rng& rng, Index b, Index c, double sharpen = 1.0) {
    Tensor t = Tensor::zeros({b, c});
    for (Index r = 0; r < b; ++r) {
        double sum = 0.0;
        for (Index k = 0; k < c; ++k) {
            // -log(U) per coordinate, normalized: uniform draw on the simplex
            double e = -std::log(std::max(rng.uniform(), 1e-300));
            e = std::pow(e, sharpen);
            t(r, k) = e;
            sum += e;
        }
        for (Index k = 0; k < c; ++k) t(r, k) /= sum;
    }
    return t;
}

LogitSet random_set(Rng& rng, Index m, Index b, Index c, bool simplex) {
    LogitSet s;
    for (Index i = 0; i < m; ++i) {
        s.members.push_back(simplex ? simplex_rows(rng, b, c) : rng.normal_tensor({b, c}));
    }
    return s;
}

LogitSet pair_set(std::initializer_list<double> a, std::initializer_list<double> b) {
    LogitSet s;
    s.members.push_back(Tensor::matrix(1, static_cast<Index>(a.size()), a));
    s.members.push_back(Tensor::matrix(1, static_cast<Index>(b.size()), b));
    return s;
}

}  // namespace

TEST_CASE("generalized diversity hand values") {
    LogitSet onehots = pair_set({1.0, 0.0}, {0.0, 1.0});
    CHECK(generalized_diversity(onehots) == doctest::Approx(0.5).epsilon(1e-12));

    LogitSet same = pair_set({0.3, 0.7}, {0.3, 0.7});
    CHECK(generalized_diversity(same) == 0.0);

    // a class where every member is zero exercises the eps guard
    LogitSet zero_class = pair_set({1.0, 0.0}, {1.0, 0.0});
    CHECK(generalized_diversity(zero_class) == 0.0);
}

TEST_CASE("generalized diversity is symmetric, nonnegative, and strict at zero") {
    Rng rng(41);
    for (int trial = 0; trial < 30; ++trial) {
        const Index m = 2 + static_cast<Index>(rng.uniform_index(5));
        const Index c = 2 + static_cast<Index>(rng.uniform_index(10));
        LogitSet s = random_set(rng, m, 3, c, /*simplex=*/true);
        const double d = generalized_diversity(s);
        CHECK(d >= 0.0);
        CHECK(d > 1e-12);  // independent draws never coincide
        LogitSet shuffled = s;
        std::reverse(shuffled.members.begin(), shuffled.members.end());
        CHECK(generalized_diversity(shuffled) == doctest::Approx(d).epsilon(1e-12));
    }
}

TEST_CASE("generalized diversity rejects bad member stacks") {
    LogitSet one;
    one.members.push_back(Tensor::matrix(1, 2, {0.5, 0.5}));
    CHECK_THROWS_AS(generalized_diversity(one), ParamError);
    LogitSet not_simplex = pair_set({0.5, 0.6}, {0.5, 0.5});
    CHECK_THROWS_AS(generalized_diversity(not_simplex), DomainError);
    LogitSet negative = pair_set({1.5, -0.5}, {0.5, 0.5});
    CHECK_THROWS_AS(generalized_diversity(negative), DomainError);
    LogitSet ragged;
    ragged.members.push_back(Tensor::matrix(1, 2, {0.5, 0.5}));
    ragged.members.push_back(Tensor::matrix(1, 3, {0.2, 0.3, 0.5}));
    CHECK_THROWS_AS(generalized_diversity(ragged), ShapeError);
}

TEST_CASE("member variance hand values and translation invariance") {
    CHECK(total_logit_variance(pair_set({1.0, 0.0}, {0.0, 1.0})) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(total_logit_variance(pair_set({0.3, 0.7}, {0.3, 0.7})) == 0.0);

    Rng rng(42);
    LogitSet s = random_set(rng, 4, 2, 5, /*simplex=*/false);
    const double base = total_logit_variance(s);
    LogitSet shifted = s;
    Tensor offset = rng.normal_tensor({2, 5});
    for (Tensor& m : shifted.members) m.array() += offset.array();
    CHECK(total_logit_variance(shifted) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("pairwise-cosine form equals the member variance for arbitrary sets") {
    CHECK(diversity_inter_form(pair_set({1.0, 0.0}, {0.0, 1.0})) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(43);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Index m = 2 + static_cast<Index>(rng.uniform_index(7));
        const Index c = 2 + static_cast<Index>(rng.uniform_index(19));
        const bool simplex = trial % 2 == 0;
        LogitSet s = random_set(rng, m, 2, c, simplex);
        worst = std::max(worst, std::abs(diversity_inter_form(s) - total_logit_variance(s)));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("offset form hand values and the recentred identity") {
    // teacher T, offsets [1,0] and [-1,0]: members are T minus each offset
    Tensor teacher = Tensor::matrix(1, 2, {0.4, 0.6});
    LogitSet s;
    s.members.push_back(Tensor::matrix(1, 2, {-0.6, 0.6}));  // offset [1, 0]
    s.members.push_back(Tensor::matrix(1, 2, {1.4, 0.6}));   // offset [-1, 0]
    CHECK(diversity_intra_form(teacher, s) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(total_logit_variance(s) == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(44);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const Index m = 2 + static_cast<Index>(rng.uniform_index(7));
        const Index c = 2 + static_cast<Index>(rng.uniform_index(19));
        LogitSet set = random_set(rng, m, 2, c, trial % 2 == 0);
        // recenter: the identity needs the member mean to equal the teacher
        Tensor mean = Tensor::zeros({2, c});
        for (const Tensor& mem : set.members) mean.array() += mem.array();
        mean.array() /= static_cast<double>(m);
        worst = std::max(worst,
                         std::abs(diversity_intra_form(mean, set) - total_logit_variance(set)));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("offset form flips sign when the offsets do not cancel") {
    // both offsets equal [1, 0]: the zero-sum precondition fails and the
    // formula returns minus the squared offset norm
    Tensor teacher = Tensor::matrix(1, 2, {0.5, 0.5});
    LogitSet s;
    s.members.push_back(Tensor::matrix(1, 2, {-0.5, 0.5}));
    s.members.push_back(Tensor::matrix(1, 2, {-0.5, 0.5}));
    CHECK(diversity_intra_form(teacher, s) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("kl bound holds with slack zero for coinciding members") {
    Rng rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor y = simplex_rows(rng, 1, 6);
        Tensor z = simplex_rows(rng, 1, 6);
        LogitSet s;
        for (int i = 0; i < 4; ++i) s.members.push_back(z);
        KlBoundResult r = kl_bound_check(y, s);
        CHECK(std::abs(r.slack) <= 1e-12);
        CHECK(r.slack == r.rhs - r.lhs);
    }
}

TEST_CASE("kl bound slack stays nonnegative over random draws") {
    Rng rng(46);
    double min_slack = 1e9;
    for (int trial = 0; trial < 300; ++trial) {
        const Index m = 2 + static_cast<Index>(rng.uniform_index(5));
        const Index c = 2 + static_cast<Index>(rng.uniform_index(19));
        // mix of flat targets, sharpened targets, and eps-smoothed one-hots
        Tensor y;
        if (trial % 3 == 0) {
            y = Tensor::full({1, c}, 1e-6);
            y(0, static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(c)))) =
                1.0 - 1e-6 * static_cast<double>(c - 1);
        } else {
            y = simplex_rows(rng, 1, c, trial % 3 == 1 ? 3.0 : 1.0);
        }
        LogitSet s = random_set(rng, m, 1, c, /*simplex=*/true);
        KlBoundResult r = kl_bound_check(y, s);
        min_slack = std::min(min_slack, r.min_sample_slack);
    }
    CHECK(min_slack >= -1e-12);
}

TEST_CASE("kl bound clamps zero entries and reports it") {
    Tensor y = Tensor::matrix(1, 2, {1.0, 0.0});  // hard one-hot: one zero entry
    LogitSet s = pair_set({1.0, 0.0}, {0.5, 0.5});
    KlBoundResult r = kl_bound_check(y, s);
    CHECK(r.clamp_count == 2);  // y zero + member zero
    CHECK(r.min_sample_slack >= -1e-12);
    CHECK_THROWS_AS(kl_bound_check(y, s, 0.0), ParamError);
}

TEST_CASE("angle statistics on known geometries") {
    Tensor teacher = Tensor::matrix(1, 2, {1.0, 1.0});

    LogitSet identical = pair_set({1.0, 0.0}, {1.0, 0.0});
    AngleStats a = angle_stats(teacher, identical);
    CHECK(a.mean_inter_deg == doctest::Approx(0.0).epsilon(1e-9));

    LogitSet orthogonal = pair_set({1.0, 0.0}, {0.0, 1.0});
    CHECK(angle_stats(teacher, orthogonal).mean_inter_deg == doctest::Approx(90.0).epsilon(1e-10));

    const double s96 = std::sqrt(1.0 - 0.96 * 0.96);
    LogitSet near = pair_set({1.0, 0.0}, {0.96, s96});
    CHECK(angle_stats(teacher, near).mean_inter_deg == doctest::Approx(16.2602).epsilon(1e-4));

    // offsets: teacher - member; [0,1] and [1,0] offsets are orthogonal
    CHECK(angle_stats(teacher, orthogonal).mean_intra_deg == doctest::Approx(90.0).epsilon(1e-10));
}

TEST_CASE("angle statistics skip vanishing offsets and can go undefined") {
    Tensor teacher = Tensor::matrix(1, 2, {1.0, 0.0});
    LogitSet one_zero = pair_set({1.0, 0.0}, {0.0, 1.0});  // first offset is exactly zero
    AngleStats a = angle_stats(teacher, one_zero);
    CHECK(a.intra_pairs_skipped == 1);
    CHECK(std::isnan(a.mean_intra_deg));
    CHECK(a.mean_inter_deg == doctest::Approx(90.0).epsilon(1e-10));

    LogitSet both_zero = pair_set({1.0, 0.0}, {1.0, 0.0});
    CHECK(std::isnan(angle_stats(teacher, both_zero).mean_intra_deg));
}

TEST_CASE("generalized diversity grows along zero-sum perturbation rays") {
    // members m + t*P_i with per-class zero sum over i and zero row sums:
    // rows stay on the simplex for t in [0, 0.25) and the per-class
    // normalized spread widens with t
    const double base = 0.25;
    const double P[3][4] = {{2, -1, -1, 0}, {-1, 2, -1, 0}, {-1, -1, 2, 0}};
    double prev = -1.0;
    for (int step = 0; step <= 20; ++step) {
        const double t = 0.24 * step / 20.0;
        LogitSet s;
        for (int i = 0; i < 3; ++i) {
            Tensor mem = Tensor::zeros({1, 4});
            for (Index k = 0; k < 4; ++k) mem(0, k) = base + t * P[i][k];
            s.members.push_back(mem);
        }
        const double d = generalized_diversity(s);
        CHECK(d >= prev - 1e-12);
        prev = d;
    }
    CHECK(prev > 0.0);
}

TEST_CASE("diversity report is consistent with its parts") {
    Rng rng(47);
    Tensor teacher = simplex_rows(rng, 4, 6);
    LogitSet views = random_set(rng, 3, 4, 6, /*simplex=*/true);
    Tensor y = simplex_rows(rng, 4, 6);

    DiversityReport rep = compute_diversity_report(teacher, views, y);
    CHECK(rep.bound_slack == rep.kl_bound_rhs - rep.kl_bound_lhs);
    CHECK(std::abs(rep.inter_form - rep.raw_variance) <= 1e-9);
    CHECK(rep.diversity_direct > 0.0);
    CHECK(rep.bound_slack >= -1e-12);

    AngleStats ang = angle_stats(teacher, views);
    CHECK(rep.mean_inter_angle_deg == ang.mean_inter_deg);
    CHECK(rep.mean_intra_angle_deg == ang.mean_intra_deg);

    LogitSet with_teacher = views;
    with_teacher.members.insert(with_teacher.members.begin(), teacher);
    CHECK(rep.diversity_direct ==
          doctest::Approx(generalized_diversity(with_teacher)).epsilon(1e-12));
}
