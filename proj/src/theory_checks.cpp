#include "otden/theory_checks.hpp"

#include "otden/errors.hpp"
#include "otden/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace otden {

namespace {

constexpr std::size_t kMaxInstanceSize = 6;

bool same_point(std::span<const double> a, std::span<const double> b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

// Appends `p` unless an identical point is already present.
void add_unique(std::vector<double>& pts, std::size_t dim, std::span<const double> p) {
    for (std::size_t k = 0; k * dim < pts.size(); ++k) {
        if (same_point({pts.data() + k * dim, dim}, p)) return;
    }
    pts.insert(pts.end(), p.begin(), p.end());
}

}  // namespace

RelaxedInstance RelaxedInstance::make(EmpiricalMeasure source, EmpiricalMeasure target, double lambda) {
    const std::size_t d = source.dim();
    std::vector<double> cod;
    for (std::size_t j = 0; j < target.size(); ++j) add_unique(cod, d, target.point(j));
    for (std::size_t i = 0; i < source.size(); ++i) add_unique(cod, d, source.point(i));
    if (source.size() == target.size() && source.dim() == target.dim() && source.is_uniform() &&
        target.is_uniform()) {
        const auto sigma = monge_assignment(source, target, CostSpec{1.0}).map.assignment;
        std::vector<double> mid(d);
        for (std::size_t i = 0; i < source.size(); ++i) {
            for (std::size_t k = 0; k < d; ++k) mid[k] = 0.5 * (source.point(i)[k] + target.point(sigma[i])[k]);
            add_unique(cod, d, mid);
        }
    }
    RelaxedInstance inst{std::move(source), std::move(target), lambda, std::move(cod)};
    inst.validate();
    return inst;
}

std::vector<std::size_t> RelaxedInstance::target_indices() const {
    std::vector<std::size_t> idx(target.size());
    for (std::size_t j = 0; j < target.size(); ++j) {
        std::size_t k = 0;
        while (k < codomain_size() && !same_point(codomain_point(k), target.point(j))) ++k;
        if (k == codomain_size()) throw std::invalid_argument("RelaxedInstance: codomain misses a target point");
        idx[j] = k;
    }
    return idx;
}

void RelaxedInstance::validate() const {
    if (source.dim() != target.dim()) throw std::invalid_argument("RelaxedInstance: dimension mismatch");
    if (source.size() != target.size()) throw std::invalid_argument("RelaxedInstance: sizes differ");
    if (source.size() > kMaxInstanceSize) throw std::invalid_argument("RelaxedInstance: n must be <= 6");
    if (!source.is_uniform() || !target.is_uniform()) throw std::invalid_argument("RelaxedInstance: weights must be uniform");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("RelaxedInstance: lambda must be >= 0");
    if (codomain.empty() || codomain.size() % source.dim() != 0) {
        throw std::invalid_argument("RelaxedInstance: malformed codomain");
    }
    (void)target_indices();
}

ArgminResult solve_constrained(const RelaxedInstance& inst) {
    inst.validate();
    const std::size_t n = inst.source.size();
    const auto to_codomain = inst.target_indices();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);

    std::vector<std::pair<double, std::vector<std::size_t>>> scored;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += euclidean_distance(inst.source.point(i), inst.target.point(perm[i]));
        scored.emplace_back(s / static_cast<double>(n), perm);
    } while (std::next_permutation(perm.begin(), perm.end()));

    ArgminResult out;
    out.value = std::numeric_limits<double>::infinity();
    for (const auto& [v, p] : scored) out.value = std::min(out.value, v);
    for (const auto& [v, p] : scored) {
        if (v > out.value + kArgminTolerance) continue;
        TransportMap m;
        for (std::size_t j : p) m.assignment.push_back(to_codomain[j]);
        out.argmin.insert(std::move(m));
    }
    return out;
}

namespace {

struct RelaxedEvaluator {
    explicit RelaxedEvaluator(const RelaxedInstance& inst)
        : inst(inst), n(inst.source.size()), k(inst.codomain_size()), fidelity(n, k), to_target(k, n) {
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < n; ++i) fidelity(i, c) = euclidean_distance(inst.source.point(i), inst.codomain_point(c));
            for (std::size_t j = 0; j < n; ++j) to_target(c, j) = euclidean_distance(inst.codomain_point(c), inst.target.point(j));
        }
    }

    // W1 between g#p_Y (atoms merged by codomain index) and p_X.
    double w1_pushforward(const std::vector<std::size_t>& map) const {
        std::vector<std::size_t> atoms(map);
        std::sort(atoms.begin(), atoms.end());
        atoms.erase(std::unique(atoms.begin(), atoms.end()), atoms.end());
        std::vector<double> mass(atoms.size(), 0.0);
        for (std::size_t c : map) {
            const auto it = std::lower_bound(atoms.begin(), atoms.end(), c);
            mass[static_cast<std::size_t>(it - atoms.begin())] += 1.0 / static_cast<double>(n);
        }
        Matrix cost(atoms.size(), n);
        for (std::size_t a = 0; a < atoms.size(); ++a) {
            for (std::size_t j = 0; j < n; ++j) cost(a, j) = to_target(atoms[a], j);
        }
        return solve_transport(mass, inst.target.weights(), cost).value;
    }

    double objective(const std::vector<std::size_t>& map) const {
        double fid = 0.0;
        for (std::size_t i = 0; i < n; ++i) fid += fidelity(i, map[i]);
        fid /= static_cast<double>(n);
        if (inst.lambda == 0.0) return fid;
        return fid + inst.lambda * w1_pushforward(map);
    }

    const RelaxedInstance& inst;
    std::size_t n;
    std::size_t k;
    Matrix fidelity;
    Matrix to_target;
};

}  // namespace

ArgminResult solve_relaxed(const RelaxedInstance& inst, std::size_t budget) {
    inst.validate();
    const std::size_t n = inst.source.size();
    const std::size_t k = inst.codomain_size();
    double count = 1.0;
    for (std::size_t i = 0; i < n; ++i) count *= static_cast<double>(k);
    if (count > static_cast<double>(budget)) {
        std::ostringstream os;
        os << "solve_relaxed: " << k << "^" << n << " maps exceed the enumeration budget of " << budget;
        throw BudgetExceeded(os.str());
    }

    const RelaxedEvaluator eval(inst);
    std::vector<std::pair<double, std::vector<std::size_t>>> scored;
    scored.reserve(static_cast<std::size_t>(count));
    std::vector<std::size_t> map(n, 0);
    for (;;) {
        scored.emplace_back(eval.objective(map), map);
        std::size_t pos = 0;
        while (pos < n && ++map[pos] == k) map[pos++] = 0;
        if (pos == n) break;
    }

    ArgminResult out;
    out.value = std::numeric_limits<double>::infinity();
    for (const auto& [v, m] : scored) out.value = std::min(out.value, v);
    for (auto& [v, m] : scored) {
        if (v <= out.value + kArgminTolerance) out.argmin.insert(TransportMap{std::move(m)});
    }
    return out;
}

TheoremVerdict verify_theorem1(const RelaxedInstance& inst, std::size_t budget) {
    TheoremVerdict verdict;
    const ArgminResult constrained = solve_constrained(inst);
    const ArgminResult relaxed = solve_relaxed(inst, budget);
    verdict.relaxed_min = relaxed.value;
    verdict.w1_xy = kantorovich_lp(inst.target, inst.source, CostSpec{1.0}).value;
    verdict.relaxed_argmin_set = relaxed.argmin;
    verdict.constrained_argmin_set = constrained.argmin;
    verdict.min_matches = std::abs(relaxed.value - verdict.w1_xy) <= kArgminTolerance;
    verdict.sets_equal = relaxed.argmin == constrained.argmin;

    std::vector<std::size_t> target_atoms = inst.target_indices();
    std::sort(target_atoms.begin(), target_atoms.end());
    for (const auto& m : relaxed.argmin) {
        std::vector<std::size_t> atoms = m.assignment;
        std::sort(atoms.begin(), atoms.end());
        if (atoms != target_atoms) verdict.pushforward_violation = true;
    }
    verdict.holds = verdict.min_matches && verdict.sets_equal;
    return verdict;
}

RelaxedInstance random_instance(std::uint64_t seed, std::size_t n, std::size_t dim, double lambda) {
    Rng rng(seed);
    std::uniform_real_distribution<double> coord(0.0, 1.0);
    std::vector<double> y(n * dim), x(n * dim);
    for (double& v : y) v = coord(rng);
    for (double& v : x) v = coord(rng);
    return RelaxedInstance::make(EmpiricalMeasure::uniform(std::move(y), dim),
                                 EmpiricalMeasure::uniform(std::move(x), dim), lambda);
}

// =============================================================================
// Proposition-2 style MSE identities
// =============================================================================

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (std::size_t s = 0; s < idx.size();) {
            std::size_t e = s;
            while (e + 1 < idx.size() && v[idx[e + 1]] == v[idx[s]]) ++e;
            for (std::size_t t = s; t <= e; ++t) r[idx[t]] = 0.5 * static_cast<double>(s + e) + 1.0;
            s = e + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

namespace {

// Running mean and standard error of the mean.
struct MeanAccumulator {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n = 0;
    void add(double x) {
        sum += x;
        sum_sq += x * x;
        ++n;
    }
    double mean() const { return sum / static_cast<double>(n); }
    double standard_error() const {
        const double m = mean();
        const double var = (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1);
        return std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
    }
};

}  // namespace

Prop2Report check_proposition2(double sigma_noise, std::size_t dim, std::size_t n_samples, std::uint64_t seed) {
    if (!(sigma_noise > 0.0)) throw std::invalid_argument("check_proposition2: sigma_noise must be > 0");
    if (dim == 0 || n_samples < 2) throw std::invalid_argument("check_proposition2: need dim >= 1 and n_samples >= 2");

    constexpr std::size_t kCandidates = 5;
    Prop2Report report;
    report.sigma_noise = sigma_noise;
    report.dim = dim;
    report.n_samples = n_samples;
    const double d = static_cast<double>(dim);
    // E||xhat||^2 + E||X||^2, plus E||N||^2 for the noisy target.
    report.const_clean = 2.0 * d;
    report.const_noisy = 2.0 * d + d * sigma_noise * sigma_noise;

    std::vector<double> angles(kCandidates);
    for (std::size_t c = 0; c < kCandidates; ++c) {
        angles[c] = 0.5 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(kCandidates - 1);
    }

    struct Acc {
        MeanAccumulator clean, noisy, inner, gap_clean, gap_noisy, xhat_noise, xhat_sq, noise_sq;
    };
    std::vector<Acc> acc(kCandidates);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(dim), xp(dim), noise(dim);
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t k = 0; k < dim; ++k) {
            x[k] = normal(rng);
            xp[k] = normal(rng);
            noise[k] = sigma_noise * normal(rng);
        }
        for (std::size_t c = 0; c < kCandidates; ++c) {
            const double ca = std::cos(angles[c]);
            const double sa = std::sin(angles[c]);
            double to_clean = 0.0, to_noisy = 0.0, inner = 0.0, xhat_n = 0.0, xhat_sq = 0.0, n_sq = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double xh = ca * x[k] + sa * xp[k];
                const double y = x[k] + noise[k];
                to_clean += (xh - x[k]) * (xh - x[k]);
                to_noisy += (xh - y) * (xh - y);
                inner += xh * x[k];
                xhat_n += xh * noise[k];
                xhat_sq += xh * xh;
                n_sq += noise[k] * noise[k];
            }
            Acc& a = acc[c];
            a.clean.add(to_clean);
            a.noisy.add(to_noisy);
            a.inner.add(inner);
            a.gap_clean.add(to_clean - report.const_clean + 2.0 * inner);
            a.gap_noisy.add(to_noisy - report.const_noisy + 2.0 * inner);
            a.xhat_noise.add(xhat_n);
            a.xhat_sq.add(xhat_sq);
            a.noise_sq.add(n_sq);
        }
    }

    std::vector<double> by_clean, by_noisy;
    report.gaps_within_3se = true;
    for (std::size_t c = 0; c < kCandidates; ++c) {
        const Acc& a = acc[c];
        Prop2Candidate cand;
        cand.angle = angles[c];
        cand.mse_to_clean = a.clean.mean();
        cand.mse_to_clean_se = a.clean.standard_error();
        cand.mse_to_noisy = a.noisy.mean();
        cand.mse_to_noisy_se = a.noisy.standard_error();
        cand.inner = a.inner.mean();
        cand.inner_se = a.inner.standard_error();
        cand.gap_clean = a.gap_clean.mean();
        cand.gap_clean_se = a.gap_clean.standard_error();
        cand.gap_noisy = a.gap_noisy.mean();
        cand.gap_noisy_se = a.gap_noisy.standard_error();
        cand.noise_correlation = a.xhat_noise.mean() / std::sqrt(a.xhat_sq.mean() * a.noise_sq.mean());
        if (std::abs(cand.gap_clean) > 3.0 * cand.gap_clean_se || std::abs(cand.gap_noisy) > 3.0 * cand.gap_noisy_se) {
            report.gaps_within_3se = false;
        }
        by_clean.push_back(cand.mse_to_clean);
        by_noisy.push_back(cand.mse_to_noisy);
        report.candidates.push_back(cand);
    }
    report.spearman = spearman(by_clean, by_noisy);
    report.ranking_agrees = report.spearman == 1.0;
    return report;
}

}  // namespace otden
