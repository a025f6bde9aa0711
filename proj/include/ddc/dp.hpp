#pragma once

// Dynamic-programming operators and fixed-point solvers for discounted
// infinite-horizon problems with logit shocks.
//
// Shapes: values are length-X vectors, policies and utilities are X x A
// matrices (column a is action a), transitions are row-stochastic X x X.

#include "ddc/choice.hpp"

#include <Eigen/Sparse>

#include <functional>
#include <vector>

namespace ddc {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Row-stochastic matrix stored dense or sparse. The storage is picked at
/// construction: sparse when fewer than a quarter of the entries are nonzero.
class MarkovMatrix {
 public:
  static constexpr double sparse_density_threshold = 0.25;

  MarkovMatrix() = default;
  explicit MarkovMatrix(const Matrix& dense, bool validate = true);
  explicit MarkovMatrix(const SparseMatrix& sparse, bool validate = true);

  int size() const { return size_; }
  bool is_sparse() const { return sparse_storage_; }
  double density() const { return density_; }

  Vector apply(const Eigen::Ref<const Vector>& v) const;            // F v
  Vector apply_transpose(const Eigen::Ref<const Vector>& v) const;  // F' v
  Matrix apply_block(const Matrix& m) const;                        // F M
  Matrix apply_transpose_block(const Matrix& m) const;              // F' M
  double entry(int row, int col) const;
  /// Column indices of the positive entries of each row.
  std::vector<std::vector<int>> adjacency() const;
  Matrix to_dense() const;

  /// Largest deviation of a row sum from one.
  double row_sum_error() const;

  /// sum_a diag(P_a) F_a. Storage follows the density of the result.
  static MarkovMatrix mixture(const std::vector<MarkovMatrix>& parts, const Matrix& weights);

 private:
  void finalize(bool validate);

  int size_ = 0;
  bool sparse_storage_ = false;
  double density_ = 1.0;
  Matrix dense_;
  SparseMatrix sparse_;
};

struct TransitionKernel {
  TransitionKernel() = default;
  explicit TransitionKernel(std::vector<MarkovMatrix> matrices);

  int state_count() const { return per_action.empty() ? 0 : per_action.front().size(); }
  int action_count() const { return static_cast<int>(per_action.size()); }

  std::vector<MarkovMatrix> per_action;
};

struct ModelSpec {
  ModelSpec(TransitionKernel kernel, double discount);

  int state_count;
  int action_count;
  double discount;
  TransitionKernel kernel;
  ChoiceKernel choice;
};

/// Counts fixed points solved (workload) and sequential batches (span).
struct FixedPointLedger {
  long workload = 0;
  long span = 0;

  void record_batch(long solves) {
    if (solves <= 0) return;
    workload += solves;
    span += 1;
  }
  void absorb(const FixedPointLedger& other) {
    workload += other.workload;
    span += other.span;
  }
};

struct LinearSolve {
  Vector value;
  long iterations = 0;
  double residual = 0.0;
};

struct PolicyAggregate {
  MarkovMatrix transition;  // F_P
  Vector utility;           // U_P
};

/// Residual threshold used by every solver: tol * (1 - beta), floored at a few
/// ulps of the iterate so that beta close to one stays attainable.
double stopping_threshold(double tol, double beta, double scale);

PolicyAggregate policy_aggregate(const Matrix& P, const TransitionKernel& kernel,
                                 const Matrix& U, const Vector& entropy);

/// Convenience form that computes E(P) itself.
PolicyAggregate policy_aggregate(const ModelSpec& model, const Matrix& P, const Matrix& U);

/// V = r + beta F V by successive approximation from zero.
LinearSolve solve_linear_value(const MarkovMatrix& F, double beta, const Vector& r,
                               double tol = 1e-10, long max_iter = 10'000'000);

/// Same fixed point written as V = h + c 1 with h mean-zero. Only h is
/// iterated, which converges at the chain's mixing rate instead of beta.
struct RelativeSolve {
  Vector relative;  // h
  double offset = 0.0;  // c
  long iterations = 0;
  double residual = 0.0;

  Vector full() const { return (relative.array() + offset).matrix(); }
};
RelativeSolve solve_linear_value_relative(const MarkovMatrix& F, double beta, const Vector& r,
                                          double tol = 1e-10, long max_iter = 1'000'000,
                                          const Vector* warm_start = nullptr);

LinearSolve evaluate_policy(const ModelSpec& model, const Matrix& P, const Matrix& U,
                            double tol = 1e-10, long max_iter = 10'000'000);

Matrix choice_specific_values(const ModelSpec& model, const Vector& V, const Matrix& U);
Matrix improve_policy(const ModelSpec& model, const Vector& V, const Matrix& U);
Vector bellman_step(const ModelSpec& model, const Vector& V, const Matrix& U);

struct OptimalSolveOptions {
  double tol = 1e-10;
  long max_iter = 100'000;
  double switch_threshold = 1.0;
  long max_policy_iterations = 200;
};

struct OptimalSolve {
  Vector value;       // V*
  Vector relative;    // centered part of V*
  double offset = 0.0;
  Matrix policy;      // P*
  long value_iterations = 0;
  long policy_iterations = 0;
  long inner_iterations = 0;
  double residual = 0.0;
  std::vector<double> policy_residuals;

  long iterations() const { return value_iterations + policy_iterations; }
};

OptimalSolve solve_optimal(const ModelSpec& model, const Matrix& U,
                           const OptimalSolveOptions& options = {});

/// lambda = w + beta F' lambda by successive approximation from lambda = w.
LinearSolve solve_dual(const MarkovMatrix& F, double beta, const Vector& w, double tol = 1e-10,
                       long max_iter = 10'000'000);

/// Centered policy value Psi V_P.
LinearSolve solve_centered(const MarkovMatrix& F, double beta, const Vector& U_P,
                           double tol = 1e-10, long max_iter = 1'000'000);

struct DiscountSeries {
  std::vector<Vector> terms;
  double truncation_norm = 1e-9;
};

DiscountSeries discount_series(const MarkovMatrix& F, const Vector& w, double stop_norm = 1e-9,
                               long max_terms = 200'000);
Vector assemble_dual(const DiscountSeries& series, double beta);

Vector stationary_distribution(const MarkovMatrix& F, double tol = 1e-12,
                               long max_iter = 10'000'000);

/// Runs task(i) for i in [0, count) on up to `threads` workers. Results are
/// written by the task into caller-owned slots so ordering is deterministic.
/// The first exception (lowest index) is rethrown after all workers stop.
void parallel_for(long count, int threads, const std::function<void(long)>& task);

/// Default worker count (hardware concurrency, at least 1).
int default_thread_count();

std::vector<LinearSolve> solve_duals_batch(const MarkovMatrix& F, double beta,
                                           const std::vector<Vector>& weights, double tol,
                                           int threads, FixedPointLedger* ledger = nullptr);

/// Batch of V = r_k + beta F V solves in offset form; returns full vectors.
std::vector<RelativeSolve> solve_values_batch(const MarkovMatrix& F, double beta,
                                              const std::vector<Vector>& rhs, double tol,
                                              int threads, FixedPointLedger* ledger = nullptr);

}  // namespace ddc
