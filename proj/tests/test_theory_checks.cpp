#include "doctest.h"

#include "otden/errors.hpp"
#include "otden/theory_checks.hpp"

#include <array>
#include <cmath>

using namespace otden;

namespace {

RelaxedInstance two_point(double lambda) {
    return RelaxedInstance::make(EmpiricalMeasure::uniform_1d({0.0, 2.0}), EmpiricalMeasure::uniform_1d({1.0, 3.0}),
                                 lambda);
}

// Codomain-index map sending each source point to the given coordinates.
TransportMap map_to(const RelaxedInstance& inst, const std::vector<double>& outputs) {
    TransportMap m;
    for (double v : outputs) {
        std::size_t k = 0;
        while (inst.codomain_point(k)[0] != v) ++k;
        m.assignment.push_back(k);
    }
    return m;
}

}  // namespace

TEST_CASE("relaxed instance construction") {
    const auto inst = two_point(2.0);
    // {1,3} ∪ {0,2} ∪ midpoints {0.5, 2.5}
    CHECK(inst.codomain_size() == 6);
    CHECK(inst.target_indices() == std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(RelaxedInstance::make(EmpiricalMeasure::uniform_1d({0, 1}), EmpiricalMeasure::uniform_1d({0}), 2.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(RelaxedInstance::make(EmpiricalMeasure::uniform_1d({0, 1, 2, 3, 4, 5, 6}),
                                          EmpiricalMeasure::uniform_1d({0, 1, 2, 3, 4, 5, 6}), 2.0),
                    std::invalid_argument);
    RelaxedInstance bad = inst;
    bad.codomain = {0.0, 2.0};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("solve_constrained") {
    SUBCASE("source equals target") {
        const auto inst = RelaxedInstance::make(EmpiricalMeasure::uniform_1d({0.0, 1.0, 4.0}),
                                                EmpiricalMeasure::uniform_1d({0.0, 1.0, 4.0}), 2.0);
        const auto res = solve_constrained(inst);
        CHECK(res.value == 0.0);
        CHECK(res.argmin.count(map_to(inst, {0.0, 1.0, 4.0})) == 1);
    }
    SUBCASE("two-point sorted matching is the unique minimizer") {
        const auto inst = two_point(2.0);
        const auto res = solve_constrained(inst);
        CHECK(res.value == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(res.argmin == MapSet{map_to(inst, {1.0, 3.0})});
    }
    SUBCASE("value equals the LP on random instances") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto inst = random_instance(seed, 4, 2, 2.0);
            CHECK(std::abs(solve_constrained(inst).value - kantorovich_lp(inst.target, inst.source, CostSpec{1.0}).value) <=
                  1e-9);
        }
    }
}

TEST_CASE("solve_relaxed") {
    SUBCASE("lambda = 0 keeps the identity on the support") {
        const auto inst = two_point(0.0);
        const auto res = solve_relaxed(inst);
        CHECK(res.value == 0.0);
        CHECK(res.argmin.count(map_to(inst, {0.0, 2.0})) == 1);
    }
    SUBCASE("lambda = 2 recovers the constrained minimizer") {
        const auto inst = two_point(2.0);
        const auto res = solve_relaxed(inst);
        CHECK(res.value == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(res.argmin == MapSet{map_to(inst, {1.0, 3.0})});
    }
    SUBCASE("lambda = 0.25 leaves the target distribution") {
        const auto inst = two_point(0.25);
        const auto res = solve_relaxed(inst);
        // identity costs 0 + 0.25 * W1 = 0.25
        CHECK(res.value == doctest::Approx(0.25).epsilon(1e-12));
        const auto verdict = verify_theorem1(inst);
        CHECK(verdict.pushforward_violation);
        CHECK_FALSE(verdict.holds);
    }
    SUBCASE("budget") {
        const auto inst = random_instance(1, 4, 2, 2.0);
        CHECK_THROWS_AS(solve_relaxed(inst, 10), BudgetExceeded);
    }
}

TEST_CASE("theorem 1 holds for lambda > 1 on random instances") {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const std::size_t n = 2 + seed % 3;
        const std::size_t d = 1 + (seed / 3) % 2;
        const double lambda = std::array{1.5, 2.0, 10.0}[seed % 3];
        const auto verdict = verify_theorem1(random_instance(100 + seed, n, d, lambda));
        CHECK(verdict.holds);
        CHECK(std::abs(verdict.relaxed_min - verdict.w1_xy) <= 1e-9);
        CHECK_FALSE(verdict.pushforward_violation);
        ++checked;
    }
    CHECK(checked == 30);
}

TEST_CASE("lambda = 1 boundary") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto inst = random_instance(500 + seed, 3, 2, 1.0);
        const auto verdict = verify_theorem1(inst);
        CHECK(verdict.min_matches);
        // Identity attains the minimum at lambda = 1.
        TransportMap identity;
        for (std::size_t i = 0; i < inst.source.size(); ++i) {
            std::size_t k = 0;
            while (!std::equal(inst.codomain_point(k).begin(), inst.codomain_point(k).end(), inst.source.point(i).begin())) ++k;
            identity.assignment.push_back(k);
        }
        CHECK(verdict.relaxed_argmin_set.count(identity) == 1);
        CHECK(verdict.relaxed_argmin_set.size() >= verdict.constrained_argmin_set.size());
    }
}

TEST_CASE("degenerate p_X = p_Y") {
    const auto inst = RelaxedInstance::make(EmpiricalMeasure::uniform({0, 0, 1, 1, 2, 0}, 2),
                                            EmpiricalMeasure::uniform({0, 0, 1, 1, 2, 0}, 2), 2.0);
    const auto verdict = verify_theorem1(inst);
    CHECK(verdict.holds);
    CHECK(verdict.relaxed_min == 0.0);
    const TransportMap identity{{0, 1, 2}};
    CHECK(verdict.relaxed_argmin_set.count(identity) == 1);
    CHECK(verdict.constrained_argmin_set.count(identity) == 1);
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3}, {10, 20, 30}) == 1.0);
    CHECK(spearman({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 1, 2}, {1, 1, 2}) == doctest::Approx(1.0));
}

TEST_CASE("proposition 2 MSE identities") {
    const auto report = check_proposition2(0.5, 4, 100000, 42);
    REQUIRE(report.candidates.size() == 5);
    // Perfect reconstruction minimizes both objectives.
    for (std::size_t c = 1; c < 5; ++c) {
        CHECK(report.candidates[0].mse_to_clean < report.candidates[c].mse_to_clean);
        CHECK(report.candidates[0].mse_to_noisy < report.candidates[c].mse_to_noisy);
    }
    const auto& independent = report.candidates.back();
    CHECK(std::abs(independent.inner) <= 3.0 * independent.inner_se);
    CHECK(std::abs(independent.mse_to_clean - report.const_clean) <= 3.0 * independent.mse_to_clean_se);
    CHECK(std::abs(independent.mse_to_noisy - report.const_noisy) <= 3.0 * independent.mse_to_noisy_se);
    CHECK(report.spearman == 1.0);
    CHECK(report.gaps_within_3se);
    CHECK(report.passed());
    CHECK_THROWS_AS(check_proposition2(0.0, 4, 100, 1), std::invalid_argument);
}
