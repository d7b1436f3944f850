/**
 * @file ot_core.cpp
 * @brief Transportation simplex, Hungarian algorithm, 1-D quantile W1 and
 * log-domain Sinkhorn.
 */

#include "otden/ot_core.hpp"

#include "otden/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace otden {

// =============================================================================
// EmpiricalMeasure
// =============================================================================

EmpiricalMeasure::EmpiricalMeasure(std::vector<double> points, std::size_t dim, std::vector<double> weights)
    : points_(std::move(points)), dim_(dim), weights_(std::move(weights)) {
    if (dim_ == 0) throw std::invalid_argument("EmpiricalMeasure: dimension must be >= 1");
    if (weights_.empty()) throw std::invalid_argument("EmpiricalMeasure: empty support");
    if (points_.size() != weights_.size() * dim_) {
        throw std::invalid_argument("EmpiricalMeasure: points.size() != weights.size() * dim");
    }
    double total = 0.0;
    for (double w : weights_) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("EmpiricalMeasure: negative weight");
        total += w;
    }
    if (std::abs(total - 1.0) > kWeightTolerance) {
        std::ostringstream os;
        os << "EmpiricalMeasure: weights sum to " << total << ", expected 1";
        throw std::invalid_argument(os.str());
    }
    for (double p : points_) {
        if (!std::isfinite(p)) throw std::invalid_argument("EmpiricalMeasure: non-finite coordinate");
    }
}

EmpiricalMeasure EmpiricalMeasure::uniform(std::vector<double> points, std::size_t dim) {
    if (dim == 0 || points.empty() || points.size() % dim != 0) {
        throw std::invalid_argument("EmpiricalMeasure::uniform: bad point buffer");
    }
    const std::size_t n = points.size() / dim;
    return EmpiricalMeasure(std::move(points), dim, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

EmpiricalMeasure EmpiricalMeasure::uniform_1d(std::vector<double> values) {
    return uniform(std::move(values), 1);
}

EmpiricalMeasure EmpiricalMeasure::dirac(std::vector<double> point) {
    const std::size_t d = point.size();
    return EmpiricalMeasure(std::move(point), d, {1.0});
}

bool EmpiricalMeasure::is_uniform() const {
    const double w = 1.0 / static_cast<double>(size());
    return std::all_of(weights_.begin(), weights_.end(),
                       [w](double x) { return std::abs(x - w) <= kWeightTolerance; });
}

// =============================================================================
// Costs and couplings
// =============================================================================

void CostSpec::validate() const {
    if (!(beta >= 1.0) || !std::isfinite(beta)) throw std::invalid_argument("CostSpec: beta must be >= 1");
}

double euclidean_distance(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double d = x[k] - y[k];
        s += d * d;
    }
    return std::sqrt(s);
}

double CostSpec::operator()(std::span<const double> x, std::span<const double> y) const {
    const double r = euclidean_distance(x, y);
    if (beta == 1.0) return r;
    if (beta == 2.0) return r * r;
    return std::pow(r, beta);
}

double Coupling::marginal_error(const EmpiricalMeasure& source, const EmpiricalMeasure& target) const {
    double worst = 0.0;
    for (std::size_t i = 0; i < plan.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < plan.cols(); ++j) s += plan(i, j);
        worst = std::max(worst, std::abs(s - source.weight(i)));
    }
    for (std::size_t j = 0; j < plan.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < plan.rows(); ++i) s += plan(i, j);
        worst = std::max(worst, std::abs(s - target.weight(j)));
    }
    return worst;
}

bool Coupling::satisfies_marginals(const EmpiricalMeasure& source, const EmpiricalMeasure& target,
                                   double tol) const {
    if (plan.rows() != source.size() || plan.cols() != target.size()) return false;
    for (double x : plan.data()) {
        if (x < 0.0) return false;
    }
    return marginal_error(source, target) <= tol;
}

double Coupling::cost(const Matrix& ground_cost) const {
    double s = 0.0;
    for (std::size_t k = 0; k < plan.data().size(); ++k) s += plan.data()[k] * ground_cost.data()[k];
    return s;
}

bool TransportMap::is_permutation() const {
    std::vector<char> seen(assignment.size(), 0);
    for (std::size_t j : assignment) {
        if (j >= assignment.size() || seen[j]) return false;
        seen[j] = 1;
    }
    return true;
}

Matrix ground_cost_matrix(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost) {
    cost.validate();
    if (a.dim() != b.dim()) throw std::invalid_argument("ground_cost_matrix: dimension mismatch");
    Matrix c(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j) c(i, j) = cost(a.point(i), b.point(j));
    }
    return c;
}

// =============================================================================
// Transportation simplex
// =============================================================================

namespace {

struct Cell {
    std::size_t i;
    std::size_t j;
};

// Spanning-tree basis of the bipartite transportation graph. Row nodes are
// 0..n-1 and column nodes n..n+m-1; every basic cell is a tree edge.
class TransportSimplex {
public:
    TransportSimplex(std::span<const double> supply, std::span<const double> demand, const Matrix& cost)
        : n_(supply.size()), m_(demand.size()), cost_(cost), flow_(n_, m_), basic_(n_ * m_, 0),
          u_(n_), v_(m_) {
        north_west_corner(supply, demand);
        double scale = 1.0;
        for (double c : cost_.data()) scale = std::max(scale, std::abs(c));
        tol_ = 1e-13 * scale;
    }

    std::size_t run() {
        const std::size_t max_pivots = 64 * (n_ + m_) * std::max<std::size_t>(n_, m_) + 1000;
        std::size_t degenerate_run = 0;
        std::size_t pivots = 0;
        for (;;) {
            compute_potentials();
            const bool bland = degenerate_run > n_ + m_;
            const auto entering = select_entering(bland);
            if (!entering) break;
            if (++pivots > max_pivots) {
                throw ConvergenceError("transportation simplex: pivot limit reached", static_cast<double>(pivots));
            }
            const double theta = pivot(*entering, bland);
            degenerate_run = theta > 0.0 ? 0 : degenerate_run + 1;
        }
        compute_potentials();
        for (std::size_t k = 0; k < flow_.data().size(); ++k) {
            double& x = flow_(k / m_, k % m_);
            if (x < 0.0) x = 0.0;
        }
        return pivots;
    }

    const Matrix& flow() const { return flow_; }
    const std::vector<double>& u() const { return u_; }
    const std::vector<double>& v() const { return v_; }

private:
    void add_basic(std::size_t i, std::size_t j) {
        basic_[i * m_ + j] = 1;
        cells_.push_back({i, j});
    }

    void north_west_corner(std::span<const double> supply, std::span<const double> demand) {
        std::vector<double> ra(supply.begin(), supply.end());
        std::vector<double> rb(demand.begin(), demand.end());
        std::size_t i = 0;
        std::size_t j = 0;
        for (;;) {
            const double q = std::max(0.0, std::min(ra[i], rb[j]));
            flow_(i, j) = q;
            add_basic(i, j);
            ra[i] -= q;
            rb[j] -= q;
            if (i + 1 == n_ && j + 1 == m_) break;
            if (i + 1 == n_) {
                ++j;
            } else if (j + 1 == m_) {
                ++i;
            } else if (ra[i] <= rb[j]) {
                ++i;
            } else {
                ++j;
            }
        }
    }

    void build_adjacency() {
        adjacency_.assign(n_ + m_, {});
        for (std::size_t k = 0; k < cells_.size(); ++k) {
            adjacency_[cells_[k].i].push_back(k);
            adjacency_[n_ + cells_[k].j].push_back(k);
        }
    }

    void compute_potentials() {
        build_adjacency();
        std::vector<char> seen(n_ + m_, 0);
        std::vector<std::size_t> stack{0};
        seen[0] = 1;
        u_[0] = 0.0;
        while (!stack.empty()) {
            const std::size_t node = stack.back();
            stack.pop_back();
            for (std::size_t k : adjacency_[node]) {
                const Cell c = cells_[k];
                if (node < n_) {
                    if (!seen[n_ + c.j]) {
                        v_[c.j] = cost_(c.i, c.j) - u_[c.i];
                        seen[n_ + c.j] = 1;
                        stack.push_back(n_ + c.j);
                    }
                } else if (!seen[c.i]) {
                    u_[c.i] = cost_(c.i, c.j) - v_[c.j];
                    seen[c.i] = 1;
                    stack.push_back(c.i);
                }
            }
        }
    }

    std::optional<Cell> select_entering(bool bland) const {
        double best = -tol_;
        std::optional<Cell> entering;
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < m_; ++j) {
                if (basic_[i * m_ + j]) continue;
                const double r = cost_(i, j) - u_[i] - v_[j];
                if (r < best) {
                    entering = Cell{i, j};
                    if (bland) return entering;
                    best = r;
                }
            }
        }
        return entering;
    }

    // Tree path from column node of `entering` to its row node, as cell
    // indices in traversal order.
    std::vector<std::size_t> tree_path(const Cell& entering) const {
        const std::size_t start = n_ + entering.j;
        const std::size_t goal = entering.i;
        constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
        std::vector<std::size_t> via(n_ + m_, kNone);
        std::vector<char> seen(n_ + m_, 0);
        std::vector<std::size_t> stack{start};
        seen[start] = 1;
        while (!stack.empty() && !seen[goal]) {
            const std::size_t node = stack.back();
            stack.pop_back();
            for (std::size_t k : adjacency_[node]) {
                const Cell c = cells_[k];
                const std::size_t other = node < n_ ? n_ + c.j : c.i;
                if (seen[other]) continue;
                seen[other] = 1;
                via[other] = k;
                stack.push_back(other);
            }
        }
        std::vector<std::size_t> path;
        for (std::size_t node = goal; node != start;) {
            const std::size_t k = via[node];
            path.push_back(k);
            node = node < n_ ? n_ + cells_[k].j : cells_[k].i;
        }
        std::reverse(path.begin(), path.end());
        return path;
    }

    double pivot(const Cell& entering, bool bland) {
        const std::vector<std::size_t> path = tree_path(entering);
        // Path cells alternate -, +, -, ..., - starting from the entering column.
        double theta = std::numeric_limits<double>::infinity();
        std::size_t leaving = path.front();
        for (std::size_t p = 0; p < path.size(); p += 2) {
            const Cell c = cells_[path[p]];
            const double x = flow_(c.i, c.j);
            const bool better = x < theta ||
                                (bland && x == theta &&
                                 c.i * m_ + c.j < cells_[leaving].i * m_ + cells_[leaving].j);
            if (better) {
                theta = x;
                leaving = path[p];
            }
        }
        theta = std::max(theta, 0.0);
        for (std::size_t p = 0; p < path.size(); ++p) {
            const Cell c = cells_[path[p]];
            flow_(c.i, c.j) += (p % 2 == 0) ? -theta : theta;
        }
        const Cell out = cells_[leaving];
        flow_(out.i, out.j) = 0.0;
        basic_[out.i * m_ + out.j] = 0;
        cells_[leaving] = entering;
        basic_[entering.i * m_ + entering.j] = 1;
        flow_(entering.i, entering.j) = theta;
        return theta;
    }

    std::size_t n_;
    std::size_t m_;
    const Matrix& cost_;
    Matrix flow_;
    std::vector<char> basic_;
    std::vector<Cell> cells_;
    std::vector<std::vector<std::size_t>> adjacency_;
    std::vector<double> u_;
    std::vector<double> v_;
    double tol_ = 0.0;
};

void check_marginals(std::span<const double> w, const char* what) {
    if (w.empty()) throw std::invalid_argument(std::string(what) + ": empty");
    for (double x : w) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": negative mass");
    }
}

}  // namespace

LpSolution solve_transport(std::span<const double> supply, std::span<const double> demand, const Matrix& cost) {
    check_marginals(supply, "solve_transport supply");
    check_marginals(demand, "solve_transport demand");
    if (cost.rows() != supply.size() || cost.cols() != demand.size()) {
        throw std::invalid_argument("solve_transport: cost matrix shape does not match marginals");
    }
    const double sa = std::accumulate(supply.begin(), supply.end(), 0.0);
    const double sb = std::accumulate(demand.begin(), demand.end(), 0.0);
    if (std::abs(sa - sb) > 1e-9) throw std::invalid_argument("solve_transport: unbalanced marginals");

    TransportSimplex simplex(supply, demand, cost);
    LpSolution out;
    out.pivots = simplex.run();
    out.coupling.plan = simplex.flow();
    out.value = out.coupling.cost(cost);
    out.row_potential = simplex.u();
    out.col_potential = simplex.v();
    return out;
}

LpSolution kantorovich_lp(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost) {
    const Matrix c = ground_cost_matrix(a, b, cost);
    return solve_transport(a.weights(), b.weights(), c);
}

// =============================================================================
// 1-D fast path
// =============================================================================

double w1_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    if (a.dim() != 1 || b.dim() != 1) throw std::invalid_argument("w1_1d: measures must be one-dimensional");
    auto sorted = [](const EmpiricalMeasure& m) {
        std::vector<std::pair<double, double>> s(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) s[i] = {m.points()[i], m.weight(i)};
        std::sort(s.begin(), s.end());
        return s;
    };
    const auto sa = sorted(a);
    const auto sb = sorted(b);
    std::size_t i = 0;
    std::size_t j = 0;
    double ra = sa[0].second;
    double rb = sb[0].second;
    double total = 0.0;
    while (i < sa.size() && j < sb.size()) {
        const double q = std::min(ra, rb);
        total += q * std::abs(sa[i].first - sb[j].first);
        ra -= q;
        rb -= q;
        if (ra <= rb) {
            if (++i < sa.size()) ra += sa[i].second;
        } else if (++j < sb.size()) {
            rb += sb[j].second;
        }
    }
    return total;
}

// =============================================================================
// Assignment
// =============================================================================

AssignmentSolution hungarian(const Matrix& cost) {
    const std::size_t n = cost.rows();
    if (n != cost.cols()) throw std::invalid_argument("hungarian: cost matrix must be square");
    AssignmentSolution out;
    if (n == 0) return out;
    const double inf = std::numeric_limits<double>::infinity();
    // Potentials with 1-based rows/columns; column 0 is the virtual root.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    out.map.assignment.assign(n, 0);
    for (std::size_t j = 1; j <= n; ++j) out.map.assignment[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i) out.value += cost(i, out.map.assignment[i]);
    return out;
}

namespace {

Matrix submatrix(const Matrix& c, std::size_t first_row, const std::vector<std::size_t>& cols) {
    Matrix s(c.rows() - first_row, cols.size());
    for (std::size_t i = first_row; i < c.rows(); ++i) {
        for (std::size_t k = 0; k < cols.size(); ++k) s(i - first_row, k) = c(i, cols[k]);
    }
    return s;
}

}  // namespace

AssignmentSolution monge_assignment(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost) {
    if (a.size() != b.size()) throw std::invalid_argument("monge_assignment: measures differ in size");
    if (!a.is_uniform() || !b.is_uniform()) throw std::invalid_argument("monge_assignment: weights must be uniform");
    const Matrix c = ground_cost_matrix(a, b, cost);
    const std::size_t n = a.size();
    const double optimum = hungarian(c).value;
    const double tol = 1e-9 * static_cast<double>(n) * std::max(1.0, std::abs(optimum) / static_cast<double>(n));

    // Greedy row-by-row: fix the smallest column whose completion stays optimal.
    std::vector<std::size_t> free_cols(n);
    std::iota(free_cols.begin(), free_cols.end(), 0);
    AssignmentSolution out;
    out.map.assignment.assign(n, 0);
    double fixed = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        bool chosen = false;
        for (std::size_t k = 0; k < free_cols.size() && !chosen; ++k) {
            std::vector<std::size_t> rest = free_cols;
            rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(k));
            const double completion = rest.empty() ? 0.0 : hungarian(submatrix(c, i + 1, rest)).value;
            if (fixed + c(i, free_cols[k]) + completion <= optimum + tol) {
                out.map.assignment[i] = free_cols[k];
                fixed += c(i, free_cols[k]);
                free_cols = std::move(rest);
                chosen = true;
            }
        }
        if (!chosen) throw std::logic_error("monge_assignment: lexicographic completion failed");
    }
    out.value = fixed / static_cast<double>(n);
    return out;
}

// =============================================================================
// Sinkhorn
// =============================================================================

namespace {

double log_sum_exp(const std::vector<double>& x) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : x) hi = std::max(hi, v);
    if (!std::isfinite(hi)) return hi;
    double s = 0.0;
    for (double v : x) s += std::exp(v - hi);
    return hi + std::log(s);
}

}  // namespace

SinkhornSolution sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost,
                          const SinkhornOptions& options) {
    if (!(options.epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon must be > 0");
    const Matrix c = ground_cost_matrix(a, b, cost);
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    const double eps = options.epsilon;
    std::vector<double> log_a(n), log_b(m);
    for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a.weight(i));
    for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b.weight(j));

    std::vector<double> f(n, 0.0), g(m, 0.0), buf;
    SinkhornSolution out;
    out.coupling.plan = Matrix(n, m);
    auto log_plan = [&](std::size_t i, std::size_t j) { return log_a[i] + log_b[j] + (f[i] + g[j] - c(i, j)) / eps; };

    double err = std::numeric_limits<double>::infinity();
    std::size_t it = 0;
    while (it < options.max_iter) {
        ++it;
        buf.resize(m);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) buf[j] = log_b[j] + (g[j] - c(i, j)) / eps;
            f[i] = -eps * log_sum_exp(buf);
        }
        buf.resize(n);
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) buf[i] = log_a[i] + (f[i] - c(i, j)) / eps;
            g[j] = -eps * log_sum_exp(buf);
        }
        err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < m; ++j) row += std::exp(log_plan(i, j));
            err += std::abs(row - a.weight(i));
        }
        if (err <= options.tol) break;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out.coupling.plan(i, j) = std::exp(log_plan(i, j));
    }
    out.iterations = it;
    out.marginal_error = err;
    out.value = out.coupling.cost(c);
    if (!(err <= options.tol)) {
        std::ostringstream os;
        os << "sinkhorn: no convergence after " << it << " iterations, marginal error " << err;
        throw ConvergenceError(os.str(), err);
    }
    return out;
}

}  // namespace otden
