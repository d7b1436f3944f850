#include "doctest.h"

#include "otden/errors.hpp"
#include "otden/ot_core.hpp"
#include "otden/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace otden;

namespace {

EmpiricalMeasure random_measure(Rng& rng, std::size_t n, std::size_t d, bool uniform_weights) {
    std::uniform_real_distribution<double> coord(-2.0, 2.0);
    std::uniform_real_distribution<double> mass(0.05, 1.0);
    std::vector<double> pts(n * d);
    for (double& p : pts) p = coord(rng);
    if (uniform_weights) return EmpiricalMeasure::uniform(std::move(pts), d);
    std::vector<double> w(n);
    for (double& x : w) x = mass(rng);
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= s;
    // Renormalize the last weight so the sum is 1 to machine precision.
    w.back() = 1.0 - std::accumulate(w.begin(), w.end() - 1, 0.0);
    return EmpiricalMeasure(std::move(pts), d, std::move(w));
}

// Brute-force oracle: minimum average cost over all permutations.
double best_permutation_cost(const Matrix& c) {
    std::vector<std::size_t> perm(c.rows());
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < perm.size(); ++i) s += c(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(c.rows());
}

// Optimality certificate: dual feasibility plus zero duality gap.
void check_certificate(const LpSolution& sol, const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                       const Matrix& c) {
    double dual = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dual += a.weight(i) * sol.row_potential[i];
    for (std::size_t j = 0; j < b.size(); ++j) dual += b.weight(j) * sol.col_potential[j];
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j) {
            CHECK(sol.row_potential[i] + sol.col_potential[j] <= c(i, j) + 1e-9);
        }
    }
    CHECK(std::abs(dual - sol.value) <= 1e-9);
}

}  // namespace

TEST_CASE("ground cost matrix") {
    const CostSpec l1{1.0};
    const CostSpec sq{2.0};
    SUBCASE("self cost is zero") {
        const auto a = EmpiricalMeasure::uniform_1d({0.0});
        const Matrix c = ground_cost_matrix(a, a, l1);
        CHECK(c.rows() == 1);
        CHECK(c(0, 0) == 0.0);
    }
    SUBCASE("1-D distance") {
        const Matrix c = ground_cost_matrix(EmpiricalMeasure::uniform_1d({0.0}), EmpiricalMeasure::uniform_1d({3.0}), l1);
        CHECK(c(0, 0) == 3.0);
    }
    SUBCASE("squared Euclidean in 2-D") {
        const auto a = EmpiricalMeasure::uniform({0, 0, 1, 0}, 2);
        const auto b = EmpiricalMeasure::uniform({0, 1}, 2);
        const Matrix c = ground_cost_matrix(a, b, sq);
        CHECK(c(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(c(1, 0) == doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("symmetric when a == b") {
        Rng rng(7);
        const auto a = random_measure(rng, 5, 3, false);
        const Matrix c = ground_cost_matrix(a, a, CostSpec{1.5});
        for (std::size_t i = 0; i < 5; ++i) {
            for (std::size_t j = 0; j < 5; ++j) CHECK(c(i, j) == c(j, i));
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(ground_cost_matrix(EmpiricalMeasure::uniform_1d({0.0}), EmpiricalMeasure::uniform({0, 1}, 2), l1),
                        std::invalid_argument);
        CHECK_THROWS_AS(CostSpec{0.5}.validate(), std::invalid_argument);
    }
}

TEST_CASE("empirical measure invariants") {
    CHECK_THROWS_AS(EmpiricalMeasure({0.0, 1.0}, 1, {0.5, 0.6}), std::invalid_argument);
    CHECK_THROWS_AS(EmpiricalMeasure({0.0, 1.0}, 1, {1.5, -0.5}), std::invalid_argument);
    CHECK_THROWS_AS(EmpiricalMeasure({0.0, 1.0, 2.0}, 2, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(EmpiricalMeasure::uniform({}, 1), std::invalid_argument);
    CHECK(EmpiricalMeasure::uniform_1d({1, 2, 3}).is_uniform());
    CHECK_FALSE(EmpiricalMeasure({0.0, 1.0}, 1, {0.25, 0.75}).is_uniform());
}

TEST_CASE("kantorovich lp examples") {
    const CostSpec l1{1.0};
    SUBCASE("identical measures") {
        Rng rng(11);
        const auto a = random_measure(rng, 6, 2, false);
        const auto sol = kantorovich_lp(a, a, l1);
        CHECK(sol.value <= 1e-12);
        CHECK(sol.coupling.satisfies_marginals(a, a));
    }
    SUBCASE("uniform{0,2} vs uniform{1,3}") {
        const auto a = EmpiricalMeasure::uniform_1d({0.0, 2.0});
        const auto b = EmpiricalMeasure::uniform_1d({1.0, 3.0});
        const auto sol = kantorovich_lp(a, b, l1);
        CHECK(sol.value == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(sol.coupling.plan(0, 0) == doctest::Approx(0.5));
        CHECK(sol.coupling.plan(1, 1) == doctest::Approx(0.5));
    }
    SUBCASE("single arc") {
        const auto sol = kantorovich_lp(EmpiricalMeasure::dirac({0.0}), EmpiricalMeasure::dirac({1.0}), l1);
        CHECK(sol.value == 1.0);
    }
    SUBCASE("unbalanced marginals rejected") {
        Matrix c(1, 1, 0.0);
        const std::vector<double> s{1.0}, t{0.5};
        CHECK_THROWS_AS(solve_transport(s, t, c), std::invalid_argument);
    }
}

TEST_CASE("kantorovich lp carries an optimality certificate") {
    Rng rng(2024);
    std::uniform_int_distribution<std::size_t> size(1, 12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = size(rng), m = size(rng), d = 1 + trial % 3;
        const auto a = random_measure(rng, n, d, false);
        const auto b = random_measure(rng, m, d, false);
        const CostSpec cost{trial % 2 == 0 ? 1.0 : 2.0};
        const auto sol = kantorovich_lp(a, b, cost);
        CHECK(sol.coupling.satisfies_marginals(a, b));
        check_certificate(sol, a, b, ground_cost_matrix(a, b, cost));
    }
}

TEST_CASE("kantorovich lp matches permutation enumeration on uniform supports") {
    Rng rng(99);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + trial % 7, d = 1 + trial % 3;
        const auto a = random_measure(rng, n, d, true);
        const auto b = random_measure(rng, n, d, true);
        const CostSpec cost{1.0};
        CHECK(std::abs(kantorovich_lp(a, b, cost).value - best_permutation_cost(ground_cost_matrix(a, b, cost))) <=
              1e-9);
    }
}

TEST_CASE("W1 metric axioms on random instances") {
    Rng rng(5);
    std::uniform_int_distribution<std::size_t> size(1, 8);
    const CostSpec l1{1.0};
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 1 + trial % 3;
        const auto a = random_measure(rng, size(rng), d, trial % 2 == 0);
        const auto b = random_measure(rng, size(rng), d, false);
        const auto c = random_measure(rng, size(rng), d, true);
        const double ab = kantorovich_lp(a, b, l1).value;
        const double ba = kantorovich_lp(b, a, l1).value;
        const double bc = kantorovich_lp(b, c, l1).value;
        const double ac = kantorovich_lp(a, c, l1).value;
        CHECK(std::abs(ab - ba) <= 1e-9);
        CHECK(ac <= ab + bc + 1e-9);
        CHECK(kantorovich_lp(a, a, l1).value <= 1e-9);
    }
}

TEST_CASE("w1_1d") {
    SUBCASE("examples") {
        const auto a = EmpiricalMeasure::uniform_1d({0.3, -1.0, 2.0});
        CHECK(w1_1d(a, a) == 0.0);
        CHECK(w1_1d(EmpiricalMeasure::uniform_1d({0.0, 2.0}), EmpiricalMeasure::uniform_1d({1.0, 3.0})) ==
              doctest::Approx(1.0).epsilon(1e-15));
        CHECK(w1_1d(EmpiricalMeasure::dirac({0.0}), EmpiricalMeasure::uniform_1d({-1.0, 1.0})) ==
              doctest::Approx(1.0).epsilon(1e-15));
        CHECK_THROWS_AS(w1_1d(EmpiricalMeasure::uniform({0, 0}, 2), EmpiricalMeasure::uniform({0, 0}, 2)),
                        std::invalid_argument);
    }
    SUBCASE("equals the LP on 200 random instances") {
        Rng rng(31337);
        std::uniform_int_distribution<std::size_t> size(1, 10);
        for (int trial = 0; trial < 200; ++trial) {
            const auto a = random_measure(rng, size(rng), 1, trial % 3 == 0);
            const auto b = random_measure(rng, size(rng), 1, trial % 5 == 0);
            CHECK(std::abs(w1_1d(a, b) - kantorovich_lp(a, b, CostSpec{1.0}).value) <= 1e-9);
        }
    }
}

TEST_CASE("monge assignment") {
    const CostSpec l1{1.0};
    SUBCASE("identity") {
        const auto a = EmpiricalMeasure::uniform({0, 0, 1, 2, 3, -1}, 2);
        const auto sol = monge_assignment(a, a, l1);
        CHECK(sol.map.assignment == std::vector<std::size_t>{0, 1, 2});
        CHECK(sol.value == 0.0);
    }
    SUBCASE("crossed pair") {
        const auto sol =
            monge_assignment(EmpiricalMeasure::uniform_1d({0.0, 10.0}), EmpiricalMeasure::uniform_1d({11.0, 1.0}), l1);
        CHECK(sol.map.assignment == std::vector<std::size_t>{1, 0});
        CHECK(sol.value == doctest::Approx(1.0));
    }
    SUBCASE("lexicographically smallest among ties") {
        const auto a = EmpiricalMeasure::uniform_1d({0.0, 0.0, 5.0});
        const auto b = EmpiricalMeasure::uniform_1d({5.0, 0.0, 0.0});
        const auto sol = monge_assignment(a, b, l1);
        CHECK(sol.map.assignment == std::vector<std::size_t>{1, 2, 0});
        CHECK(sol.map.is_permutation());
    }
    SUBCASE("value equals LP on random instances") {
        Rng rng(6);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 1 + trial % 8;
            const auto a = random_measure(rng, n, 2, true);
            const auto b = random_measure(rng, n, 2, true);
            const auto sol = monge_assignment(a, b, l1);
            CHECK(sol.map.is_permutation());
            CHECK(std::abs(sol.value - kantorovich_lp(a, b, l1).value) <= 1e-9);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(monge_assignment(EmpiricalMeasure::uniform_1d({0, 1}), EmpiricalMeasure::uniform_1d({0}), l1),
                        std::invalid_argument);
        CHECK_THROWS_AS(monge_assignment(EmpiricalMeasure({0.0, 1.0}, 1, {0.3, 0.7}),
                                         EmpiricalMeasure::uniform_1d({0, 1}), l1),
                        std::invalid_argument);
    }
}

TEST_CASE("sinkhorn") {
    const CostSpec l1{1.0};
    SUBCASE("self transport bounded by epsilon log n") {
        Rng rng(3);
        const auto a = random_measure(rng, 6, 2, true);
        for (double eps : {1.0, 0.1, 0.01}) {
            const auto sol = sinkhorn(a, a, l1, {eps, 200000, 1e-10});
            CHECK(sol.value <= eps * std::log(6.0) + 1e-6);
            CHECK(sol.marginal_error <= 1e-10);
        }
    }
    SUBCASE("close to LP at small epsilon") {
        const auto a = EmpiricalMeasure::uniform_1d({0.0, 2.0});
        const auto b = EmpiricalMeasure::uniform_1d({1.0, 3.0});
        const auto sol = sinkhorn(a, b, l1, {1e-3, 2000000, 1e-6});
        CHECK(std::abs(sol.value - 1.0) <= 1e-2);
        CHECK(sol.coupling.satisfies_marginals(a, b, 1e-6));
    }
    SUBCASE("gap to LP shrinks as epsilon halves") {
        Rng rng(17);
        const auto a = random_measure(rng, 5, 2, false);
        const auto b = random_measure(rng, 6, 2, false);
        const double lp = kantorovich_lp(a, b, l1).value;
        double previous = std::numeric_limits<double>::infinity();
        for (double eps = 0.5; eps > 1e-3; eps /= 2) {
            const double gap = std::abs(sinkhorn(a, b, l1, {eps, 1000000, 1e-13}).value - lp);
            CHECK(gap <= previous + 1e-9);
            previous = gap;
        }
    }
    SUBCASE("errors") {
        const auto a = EmpiricalMeasure::uniform_1d({0.0, 2.0});
        const auto b = EmpiricalMeasure::uniform_1d({1.0, 3.0});
        CHECK_THROWS_AS(sinkhorn(a, b, l1, {0.0, 10, 1e-9}), std::invalid_argument);
        try {
            sinkhorn(a, b, l1, {1e-3, 1, 1e-15});
            FAIL("expected ConvergenceError");
        } catch (const ConvergenceError& e) {
            CHECK(e.achieved() > 1e-15);
        }
    }
}
