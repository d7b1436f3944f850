/**
 * @file ot_core.hpp
 * @brief Discrete optimal transport: exact transportation simplex, Monge
 * assignment, the 1-D quantile fast path and log-domain Sinkhorn.
 *
 * Every solver is a pure function of its inputs and is safe to call
 * concurrently.
 */
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace otden {

/// Dense row-major real matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
    const std::vector<double>& data() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Weighted point cloud on a finite support in R^d.
///
/// Weights are nonnegative and sum to one within 1e-12; the constructor
/// throws std::invalid_argument otherwise.
class EmpiricalMeasure {
public:
    static constexpr double kWeightTolerance = 1e-12;

    /// `points` is row-major, size() * dim entries.
    EmpiricalMeasure(std::vector<double> points, std::size_t dim, std::vector<double> weights);

    /// Uniform weights over the given points.
    static EmpiricalMeasure uniform(std::vector<double> points, std::size_t dim);
    /// Uniform 1-D measure, the common case in tests.
    static EmpiricalMeasure uniform_1d(std::vector<double> values);
    /// Dirac mass at one point.
    static EmpiricalMeasure dirac(std::vector<double> point);

    std::size_t size() const { return weights_.size(); }
    std::size_t dim() const { return dim_; }
    std::span<const double> point(std::size_t i) const { return {points_.data() + i * dim_, dim_}; }
    const std::vector<double>& points() const { return points_; }
    const std::vector<double>& weights() const { return weights_; }
    double weight(std::size_t i) const { return weights_[i]; }
    /// True when all weights equal 1/n within kWeightTolerance.
    bool is_uniform() const;

private:
    std::vector<double> points_;
    std::size_t dim_;
    std::vector<double> weights_;
};

/// Ground cost ||x - y||^beta with the Euclidean norm.
struct CostSpec {
    double beta = 1.0;

    /// Throws std::invalid_argument unless beta >= 1.
    void validate() const;
    double operator()(std::span<const double> x, std::span<const double> y) const;
};

double euclidean_distance(std::span<const double> x, std::span<const double> y);

/// Kantorovich plan between two measures with n x m entries.
struct Coupling {
    static constexpr double kMarginalTolerance = 1e-9;

    Matrix plan;

    /// Largest absolute violation of either marginal constraint.
    double marginal_error(const EmpiricalMeasure& source, const EmpiricalMeasure& target) const;
    /// Row and column sums within kMarginalTolerance and no negative entries.
    bool satisfies_marginals(const EmpiricalMeasure& source, const EmpiricalMeasure& target,
                             double tol = kMarginalTolerance) const;
    double cost(const Matrix& ground_cost) const;
};

/// Source point i is sent to target point assignment[i].
struct TransportMap {
    std::vector<std::size_t> assignment;

    bool is_permutation() const;
    friend bool operator==(const TransportMap&, const TransportMap&) = default;
    friend auto operator<=>(const TransportMap&, const TransportMap&) = default;
};

struct LpSolution {
    Coupling coupling;
    double value = 0.0;
    /// Optimal dual potentials: u_i + v_j <= C_ij with equality on the support
    /// of the plan, and sum a_i u_i + sum b_j v_j == value.
    std::vector<double> row_potential;
    std::vector<double> col_potential;
    std::size_t pivots = 0;
};

struct AssignmentSolution {
    TransportMap map;
    double value = 0.0;
};

struct SinkhornOptions {
    double epsilon = 1e-2;
    std::size_t max_iter = 100000;
    /// Target L1 violation of the row marginal after each column update.
    double tol = 1e-9;
};

struct SinkhornSolution {
    Coupling coupling;
    /// Transport cost <plan, C>, without the entropy term.
    double value = 0.0;
    double marginal_error = 0.0;
    std::size_t iterations = 0;
};

/// Entry (i, j) = ||a_i - b_j||^beta. Throws on dimension mismatch.
Matrix ground_cost_matrix(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost);

/// Exact transportation problem on an explicit cost matrix.
LpSolution solve_transport(std::span<const double> supply, std::span<const double> demand,
                           const Matrix& cost);

/// Minimum of sum pi_ij C_ij over couplings of a and b (transportation simplex).
LpSolution kantorovich_lp(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost);

/// W1 between 1-D measures by quantile-function matching.
double w1_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

/// Hungarian algorithm on a square cost matrix; returns one optimal
/// permutation and its total (not averaged) cost.
AssignmentSolution hungarian(const Matrix& cost);

/// Optimal permutation between equal-size uniform measures. Among optimal
/// permutations the lexicographically smallest is returned; value is the
/// averaged cost (1/n) sum cost(a_i, b_sigma(i)).
AssignmentSolution monge_assignment(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                                    const CostSpec& cost);

/// Log-domain entropic OT. Throws ConvergenceError carrying the achieved
/// marginal error when max_iter is reached.
SinkhornSolution sinkhorn(const EmpiricalMeasure& a, const EmpiricalMeasure& b, const CostSpec& cost,
                          const SinkhornOptions& options);

}  // namespace otden
