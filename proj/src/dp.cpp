#include "ddc/dp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

namespace ddc {

namespace {

constexpr double kRowSumTolerance = 1e-10;

double sup_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

}  // namespace

// ---------------------------------------------------------------------------
// MarkovMatrix

MarkovMatrix::MarkovMatrix(const Matrix& dense, bool validate) {
  require(dense.rows() == dense.cols(), "MarkovMatrix: matrix must be square");
  size_ = static_cast<int>(dense.rows());
  const double nnz = static_cast<double>((dense.array() != 0.0).count());
  density_ = size_ == 0 ? 1.0 : nnz / (static_cast<double>(size_) * size_);
  if (density_ < sparse_density_threshold) {
    sparse_storage_ = true;
    sparse_ = dense.sparseView();
    sparse_.makeCompressed();
  } else {
    dense_ = dense;
  }
  finalize(validate);
}

MarkovMatrix::MarkovMatrix(const SparseMatrix& sparse, bool validate) {
  require(sparse.rows() == sparse.cols(), "MarkovMatrix: matrix must be square");
  size_ = static_cast<int>(sparse.rows());
  density_ = size_ == 0 ? 1.0
                        : static_cast<double>(sparse.nonZeros()) /
                              (static_cast<double>(size_) * size_);
  if (density_ < sparse_density_threshold) {
    sparse_storage_ = true;
    sparse_ = sparse;
    sparse_.makeCompressed();
  } else {
    dense_ = Matrix(sparse);
  }
  finalize(validate);
}

void MarkovMatrix::finalize(bool validate) {
  if (!validate) return;
  bool negative = false;
  if (sparse_storage_) {
    for (int k = 0; k < sparse_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sparse_, k); it; ++it) {
        if (!(it.value() >= 0.0)) negative = true;
      }
    }
  } else {
    negative = !(dense_.array() >= 0.0).all();
  }
  if (negative) throw InvalidArgument("MarkovMatrix: negative or non-finite entry");
  if (row_sum_error() > kRowSumTolerance) {
    throw InvalidArgument("MarkovMatrix: rows do not sum to one");
  }
}

Vector MarkovMatrix::apply(const Eigen::Ref<const Vector>& v) const {
  return sparse_storage_ ? Vector(sparse_ * v) : Vector(dense_ * v);
}

Vector MarkovMatrix::apply_transpose(const Eigen::Ref<const Vector>& v) const {
  return sparse_storage_ ? Vector(sparse_.transpose() * v) : Vector(dense_.transpose() * v);
}

Matrix MarkovMatrix::apply_block(const Matrix& m) const {
  return sparse_storage_ ? Matrix(sparse_ * m) : Matrix(dense_ * m);
}

Matrix MarkovMatrix::apply_transpose_block(const Matrix& m) const {
  return sparse_storage_ ? Matrix(sparse_.transpose() * m) : Matrix(dense_.transpose() * m);
}

double MarkovMatrix::entry(int row, int col) const {
  return sparse_storage_ ? sparse_.coeff(row, col) : dense_(row, col);
}

std::vector<std::vector<int>> MarkovMatrix::adjacency() const {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(size_));
  if (sparse_storage_) {
    for (int k = 0; k < sparse_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(sparse_, k); it; ++it) {
        if (it.value() > 0.0) adj[static_cast<std::size_t>(it.row())].push_back(static_cast<int>(it.col()));
      }
    }
  } else {
    for (int x = 0; x < size_; ++x) {
      for (int y = 0; y < size_; ++y) {
        if (dense_(x, y) > 0.0) adj[static_cast<std::size_t>(x)].push_back(y);
      }
    }
  }
  return adj;
}

Matrix MarkovMatrix::to_dense() const { return sparse_storage_ ? Matrix(sparse_) : dense_; }

double MarkovMatrix::row_sum_error() const {
  if (size_ == 0) return 0.0;
  const Vector sums = sparse_storage_ ? Vector(sparse_ * Vector::Ones(size_))
                                      : Vector(dense_.rowwise().sum());
  return (sums.array() - 1.0).abs().maxCoeff();
}

MarkovMatrix MarkovMatrix::mixture(const std::vector<MarkovMatrix>& parts,
                                   const Matrix& weights) {
  require(!parts.empty(), "MarkovMatrix::mixture: no parts");
  require(weights.cols() == static_cast<Eigen::Index>(parts.size()),
          "MarkovMatrix::mixture: weight columns must match part count");
  const int n = parts.front().size();
  require(weights.rows() == n, "MarkovMatrix::mixture: weight rows must match size");
  const bool all_sparse = std::all_of(parts.begin(), parts.end(),
                                      [](const MarkovMatrix& m) { return m.is_sparse(); });
  if (all_sparse) {
    SparseMatrix out(n, n);
    for (std::size_t a = 0; a < parts.size(); ++a) {
      require(parts[a].size() == n, "MarkovMatrix::mixture: size mismatch");
      out += weights.col(static_cast<Eigen::Index>(a)).asDiagonal() * parts[a].sparse_;
    }
    out.prune(0.0);
    return MarkovMatrix(out, false);
  }
  Matrix out = Matrix::Zero(n, n);
  for (std::size_t a = 0; a < parts.size(); ++a) {
    require(parts[a].size() == n, "MarkovMatrix::mixture: size mismatch");
    const auto w = weights.col(static_cast<Eigen::Index>(a));
    if (parts[a].is_sparse()) {
      const SparseMatrix& s = parts[a].sparse_;
      for (int k = 0; k < s.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator it(s, k); it; ++it) {
          out(it.row(), it.col()) += w[it.row()] * it.value();
        }
      }
    } else {
      out.noalias() += w.asDiagonal() * parts[a].dense_;
    }
  }
  return MarkovMatrix(out, false);
}

// ---------------------------------------------------------------------------
// Model containers

TransitionKernel::TransitionKernel(std::vector<MarkovMatrix> matrices)
    : per_action(std::move(matrices)) {
  require(!per_action.empty(), "TransitionKernel: at least one action required");
  const int n = per_action.front().size();
  for (const auto& m : per_action) {
    require(m.size() == n, "TransitionKernel: all matrices must share a size");
  }
}

ModelSpec::ModelSpec(TransitionKernel k, double beta)
    : state_count(k.state_count()),
      action_count(k.action_count()),
      discount(beta),
      kernel(std::move(k)),
      choice(action_count) {
  require(beta >= 0.0 && beta < 1.0, "ModelSpec: discount must lie in [0, 1)");
  require(state_count >= 1, "ModelSpec: empty state space");
}

// ---------------------------------------------------------------------------
// Operators

double stopping_threshold(double tol, double beta, double scale) {
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, scale);
  return std::max(tol * (1.0 - beta), floor);
}

PolicyAggregate policy_aggregate(const Matrix& P, const TransitionKernel& kernel,
                                 const Matrix& U, const Vector& entropy) {
  const int X = kernel.state_count();
  const int A = kernel.action_count();
  require(P.rows() == X && P.cols() == A, "policy_aggregate: policy shape mismatch");
  require(U.rows() == X && U.cols() == A, "policy_aggregate: utility shape mismatch");
  require(entropy.size() == X, "policy_aggregate: entropy length mismatch");
  PolicyAggregate out;
  out.transition = MarkovMatrix::mixture(kernel.per_action, P);
  out.utility = entropy + P.cwiseProduct(U).rowwise().sum();
  return out;
}

PolicyAggregate policy_aggregate(const ModelSpec& model, const Matrix& P, const Matrix& U) {
  return policy_aggregate(P, model.kernel, U, entropy_rows(model.choice, P));
}

LinearSolve solve_linear_value(const MarkovMatrix& F, double beta, const Vector& r, double tol,
                               long max_iter) {
  require(tol > 0.0, "solve_linear_value: tol must be positive");
  require(r.size() == F.size(), "solve_linear_value: length mismatch");
  Vector V = Vector::Zero(r.size());
  double residual = std::numeric_limits<double>::infinity();
  for (long k = 1; k <= max_iter; ++k) {
    Vector next = r + beta * F.apply(V);
    residual = sup_norm(V - next);
    if (residual <= stopping_threshold(tol, beta, sup_norm(next))) {
      return {std::move(V), k, residual};
    }
    V = std::move(next);
  }
  throw ConvergenceError("solve_linear_value: iteration limit reached", max_iter, residual);
}

RelativeSolve solve_linear_value_relative(const MarkovMatrix& F, double beta, const Vector& r,
                                          double tol, long max_iter, const Vector* warm_start) {
  require(tol > 0.0, "solve_linear_value_relative: tol must be positive");
  require(r.size() == F.size(), "solve_linear_value_relative: length mismatch");
  Vector h = warm_start ? center(*warm_start) : Vector::Zero(r.size());
  require(h.size() == r.size(), "solve_linear_value_relative: warm start length mismatch");
  double residual = std::numeric_limits<double>::infinity();
  for (long k = 1; k <= max_iter; ++k) {
    const Vector y = r + beta * F.apply(h);
    const double mean = y.mean();
    Vector next = (y.array() - mean).matrix();
    residual = sup_norm(h - next);
    if (residual <= stopping_threshold(tol, beta, sup_norm(y))) {
      RelativeSolve out;
      out.relative = std::move(h);
      out.offset = mean / (1.0 - beta);
      out.iterations = k;
      out.residual = residual;
      return out;
    }
    h = std::move(next);
  }
  throw ConvergenceError("solve_linear_value_relative: iteration limit reached", max_iter,
                         residual);
}

LinearSolve evaluate_policy(const ModelSpec& model, const Matrix& P, const Matrix& U, double tol,
                            long max_iter) {
  const PolicyAggregate agg = policy_aggregate(model, P, U);
  return solve_linear_value(agg.transition, model.discount, agg.utility, tol, max_iter);
}

Matrix choice_specific_values(const ModelSpec& model, const Vector& V, const Matrix& U) {
  require(V.size() == model.state_count, "choice_specific_values: value length mismatch");
  require(U.rows() == model.state_count && U.cols() == model.action_count,
          "choice_specific_values: utility shape mismatch");
  Matrix C(U.rows(), U.cols());
  for (int a = 0; a < model.action_count; ++a) {
    C.col(a) = U.col(a) + model.discount * model.kernel.per_action[a].apply(V);
  }
  return C;
}

Matrix improve_policy(const ModelSpec& model, const Vector& V, const Matrix& U) {
  return choice_probabilities_rows(model.choice,
                                   difference_rows(choice_specific_values(model, V, U)));
}

Vector bellman_step(const ModelSpec& model, const Vector& V, const Matrix& U) {
  return social_surplus_rows(model.choice, choice_specific_values(model, V, U));
}

OptimalSolve solve_optimal(const ModelSpec& model, const Matrix& U,
                           const OptimalSolveOptions& options) {
  require(options.tol > 0.0, "solve_optimal: tol must be positive");
  const double beta = model.discount;
  OptimalSolve out;
  // V = h + c 1 with h centered. T(h + c 1) = T(h) + beta c, so the Bellman
  // residual is h - T(h) + (1 - beta) c. During value iteration c is set to
  // the value that makes the residual mean-zero.
  Vector h = Vector::Zero(model.state_count);
  double c = 0.0;
  double residual = std::numeric_limits<double>::infinity();
  bool done = false;
  while (true) {
    const Vector y = bellman_step(model, h, U);
    const Vector gap = h - y;
    const double mean_gap = gap.mean();
    residual = sup_norm((gap.array() - mean_gap).matrix());
    c = -mean_gap / (1.0 - beta);
    if (residual <= stopping_threshold(options.tol, beta, sup_norm(y))) {
      done = true;
      break;
    }
    if (residual < options.switch_threshold) break;
    if (out.value_iterations >= options.max_iter) {
      throw ConvergenceError("solve_optimal: value iteration limit reached",
                             out.value_iterations, residual);
    }
    h = center(y);
    ++out.value_iterations;
  }
  while (!done) {
    if (out.policy_iterations >= options.max_policy_iterations) {
      throw ConvergenceError("solve_optimal: policy iteration limit reached",
                             out.policy_iterations, residual);
    }
    const Matrix P = improve_policy(model, h, U);
    const PolicyAggregate agg = policy_aggregate(model, P, U);
    const RelativeSolve eval = solve_linear_value_relative(agg.transition, beta, agg.utility,
                                                           options.tol, options.max_iter, &h);
    out.inner_iterations += eval.iterations;
    ++out.policy_iterations;
    h = eval.relative;
    c = eval.offset;
    const Vector y = bellman_step(model, h, U);
    residual = sup_norm((h - y).array() + (1.0 - beta) * c);
    const double threshold = stopping_threshold(options.tol, beta, sup_norm(y));
    // Near the rounding floor Newton steps stop contracting; accept once the
    // residual is within 1e3 of the floor and no longer halving.
    const bool stalled = !out.policy_residuals.empty() &&
                         residual > 0.5 * out.policy_residuals.back() &&
                         residual <= 1e3 * stopping_threshold(0.0, beta, sup_norm(y));
    out.policy_residuals.push_back(residual);
    if (residual <= threshold || stalled) done = true;
  }
  out.relative = h;
  out.offset = c;
  out.value = (h.array() + c).matrix();
  out.policy = improve_policy(model, h, U);
  out.residual = residual;
  return out;
}

LinearSolve solve_dual(const MarkovMatrix& F, double beta, const Vector& w, double tol,
                       long max_iter) {
  require(tol > 0.0, "solve_dual: tol must be positive");
  require(w.size() == F.size(), "solve_dual: length mismatch");
  Vector lambda = w;
  double residual = std::numeric_limits<double>::infinity();
  for (long k = 1; k <= max_iter; ++k) {
    Vector next = w + beta * F.apply_transpose(lambda);
    residual = sup_norm(lambda - next);
    if (residual <= stopping_threshold(tol, beta, sup_norm(next))) {
      return {std::move(lambda), k, residual};
    }
    lambda = std::move(next);
  }
  throw ConvergenceError("solve_dual: iteration limit reached", max_iter, residual);
}

LinearSolve solve_centered(const MarkovMatrix& F, double beta, const Vector& U_P, double tol,
                           long max_iter) {
  RelativeSolve rel = solve_linear_value_relative(F, beta, U_P, tol, max_iter);
  return {std::move(rel.relative), rel.iterations, rel.residual};
}

DiscountSeries discount_series(const MarkovMatrix& F, const Vector& w, double stop_norm,
                               long max_terms) {
  require(stop_norm > 0.0, "discount_series: stop_norm must be positive");
  require(w.size() == F.size(), "discount_series: length mismatch");
  DiscountSeries series;
  series.truncation_norm = stop_norm;
  series.terms.push_back(w);
  while (sup_norm(series.terms.back()) >= stop_norm) {
    if (static_cast<long>(series.terms.size()) >= max_terms) {
      throw ConvergenceError("discount_series: term cap reached (chain may not be ergodic)",
                             max_terms, sup_norm(series.terms.back()));
    }
    series.terms.push_back(F.apply_transpose(series.terms.back()));
  }
  return series;
}

Vector assemble_dual(const DiscountSeries& series, double beta) {
  require(!series.terms.empty(), "assemble_dual: empty series");
  Vector acc = series.terms.back();
  for (auto it = series.terms.rbegin() + 1; it != series.terms.rend(); ++it) {
    acc = *it + beta * acc;
  }
  return acc;
}

namespace {

// Number of strongly connected components with no outgoing edge.
int closed_class_count(const MarkovMatrix& F) {
  const int n = F.size();
  const std::vector<std::vector<int>> adj = F.adjacency();
  // Iterative Tarjan.
  std::vector<int> index(n, -1), low(n, 0), comp(n, -1), stack;
  std::vector<char> on_stack(n, 0);
  std::vector<std::pair<int, std::size_t>> call;
  int counter = 0;
  int components = 0;
  for (int root = 0; root < n; ++root) {
    if (index[root] >= 0) continue;
    call.emplace_back(root, 0);
    while (!call.empty()) {
      auto& [v, next] = call.back();
      if (next == 0 && index[v] < 0) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = 1;
      }
      if (next < adj[v].size()) {
        const int u = adj[v][next++];
        if (index[u] < 0) {
          call.emplace_back(u, 0);
        } else if (on_stack[u]) {
          low[v] = std::min(low[v], index[u]);
        }
        continue;
      }
      if (low[v] == index[v]) {
        int u;
        do {
          u = stack.back();
          stack.pop_back();
          on_stack[u] = 0;
          comp[u] = components;
        } while (u != v);
        ++components;
      }
      const int finished = v;
      call.pop_back();
      if (!call.empty()) {
        const int parent = call.back().first;
        low[parent] = std::min(low[parent], low[finished]);
      }
    }
  }
  std::vector<char> leaves(components, 0);
  for (int x = 0; x < n; ++x) {
    for (int y : adj[x]) {
      if (comp[x] != comp[y]) leaves[comp[x]] = 1;
    }
  }
  return static_cast<int>(std::count(leaves.begin(), leaves.end(), 0));
}

}  // namespace

Vector stationary_distribution(const MarkovMatrix& F, double tol, long max_iter) {
  require(tol > 0.0, "stationary_distribution: tol must be positive");
  const int closed = closed_class_count(F);
  if (closed != 1) {
    throw DomainError("stationary_distribution: chain has " + std::to_string(closed) +
                      " closed classes; it is not ergodic");
  }
  const int n = F.size();
  Vector pi = Vector::Constant(n, 1.0 / n);
  double residual = std::numeric_limits<double>::infinity();
  // The lazy chain (I + F) / 2 shares the stationary law and is aperiodic.
  for (long k = 0; k < max_iter; ++k) {
    const Vector step = F.apply_transpose(pi);
    residual = sup_norm(step - pi);
    if (residual <= tol) return pi / pi.sum();
    pi = 0.5 * (pi + step);
    pi /= pi.sum();
  }
  throw ConvergenceError("stationary_distribution: no convergence (chain may not be ergodic)",
                         max_iter, residual);
}

// ---------------------------------------------------------------------------
// Batches

int default_thread_count() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(long count, int threads, const std::function<void(long)>& task) {
  if (count <= 0) return;
  const long workers = std::min<long>(std::max(1, threads), count);
  if (workers <= 1) {
    for (long i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<long> next{0};
  std::mutex error_mutex;
  long error_index = count;
  std::exception_ptr error;
  auto worker = [&] {
    while (true) {
      const long i = next.fetch_add(1);
      if (i >= count) return;
      try {
        task(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (long t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<LinearSolve> solve_duals_batch(const MarkovMatrix& F, double beta,
                                           const std::vector<Vector>& weights, double tol,
                                           int threads, FixedPointLedger* ledger) {
  std::vector<LinearSolve> out(weights.size());
  parallel_for(static_cast<long>(weights.size()), threads, [&](long i) {
    try {
      out[static_cast<std::size_t>(i)] = solve_dual(F, beta, weights[static_cast<std::size_t>(i)], tol);
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("dual solve " + std::to_string(i) + " failed", e.iterations(),
                             e.residual());
    }
  });
  if (ledger) ledger->record_batch(static_cast<long>(weights.size()));
  return out;
}

std::vector<RelativeSolve> solve_values_batch(const MarkovMatrix& F, double beta,
                                              const std::vector<Vector>& rhs, double tol,
                                              int threads, FixedPointLedger* ledger) {
  std::vector<RelativeSolve> out(rhs.size());
  parallel_for(static_cast<long>(rhs.size()), threads, [&](long i) {
    try {
      out[static_cast<std::size_t>(i)] =
          solve_linear_value_relative(F, beta, rhs[static_cast<std::size_t>(i)], tol);
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("value solve " + std::to_string(i) + " failed", e.iterations(),
                             e.residual());
    }
  });
  if (ledger) ledger->record_batch(static_cast<long>(rhs.size()));
  return out;
}

}  // namespace ddc
