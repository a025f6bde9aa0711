#include "ddc/estimators.hpp"

#include <cmath>
#include <limits>

namespace ddc {

namespace {

Vector policy_utility(const Matrix& P, const Matrix& U, const Vector& E) {
  return E + P.cwiseProduct(U).rowwise().sum();
}

void check_counts(const ModelSpec& model, const SampleCounts& counts) {
  require(counts.state_count() == model.state_count && counts.action_count() == model.action_count,
          "counts: shape does not match the model");
}

void check_policy(const ModelSpec& model, const Matrix& phat) {
  require(phat.rows() == model.state_count && phat.cols() == model.action_count,
          "phat: shape does not match the model");
}

// Row-wise log-softmax of choice-specific values.
Matrix log_choice_probabilities(const Matrix& C) {
  Matrix out(C.rows(), C.cols());
  for (Eigen::Index x = 0; x < C.rows(); ++x) {
    const double mx = C.row(x).maxCoeff();
    const double lse = mx + std::log((C.row(x).array() - mx).exp().sum());
    out.row(x) = C.row(x).array() - lse;
  }
  return out;
}

double weighted_loglik(const Matrix& n, const Matrix& logP) {
  double L = 0.0;
  for (Eigen::Index x = 0; x < n.rows(); ++x) {
    for (Eigen::Index a = 0; a < n.cols(); ++a) {
      if (n(x, a) != 0) L += n(x, a) * logP(x, a);
    }
  }
  return L;
}

// w = beta sum_{j<A} (F_j - F_A)' y_j for an X x (A-1) matrix y.
Vector differenced_adjoint(const ModelSpec& model, const Matrix& y) {
  const int A = model.action_count;
  const auto& F = model.kernel.per_action;
  Vector w = -F[A - 1].apply_transpose(y.rowwise().sum());
  for (int j = 0; j < A - 1; ++j) w += F[j].apply_transpose(y.col(j));
  return model.discount * w;
}

// Per state (A-1) x t matrices of d/dtheta (C_j - C_A).
std::vector<Matrix> differenced_derivatives(const ModelSpec& model, const std::vector<Matrix>& dU,
                                            const std::vector<Vector>& dV) {
  const int X = model.state_count;
  const int A = model.action_count;
  const int t = static_cast<int>(dU.size());
  const auto& F = model.kernel.per_action;
  std::vector<Matrix> out(static_cast<std::size_t>(X), Matrix(A - 1, t));
  for (int k = 0; k < t; ++k) {
    const Vector ref = dU[k].col(A - 1) + model.discount * F[A - 1].apply(dV[k]);
    for (int j = 0; j < A - 1; ++j) {
      const Vector col = dU[k].col(j) + model.discount * F[j].apply(dV[k]) - ref;
      for (int x = 0; x < X; ++x) out[x](j, k) = col[x];
    }
  }
  return out;
}

std::vector<Vector> jacobian_rhs(const Matrix& P, const std::vector<Matrix>& dU) {
  std::vector<Vector> rhs;
  rhs.reserve(dU.size());
  for (const auto& J : dU) rhs.push_back(P.cwiseProduct(J).rowwise().sum());
  return rhs;
}

struct ValueRoute {
  const MarkovMatrix* F_phat = nullptr;
  const Matrix* phat = nullptr;
  const Vector* entropy = nullptr;
};

LikelihoodResult likelihood(LikelihoodKind kind, const ModelSpec& model,
                            const UtilityModel& utility, const Vector& theta,
                            const SampleCounts& counts, const ValueRoute& route, Order order,
                            const EstimatorOptions& options, FixedPointLedger* ledger) {
  check_counts(model, counts);
  require(utility.state_count() == model.state_count &&
              utility.action_count() == model.action_count,
          "utility: shape does not match the model");
  const int X = model.state_count;
  const int A = model.action_count;
  const double beta = model.discount;
  FixedPointLedger local;
  FixedPointLedger& book = ledger ? *ledger : local;

  LikelihoodResult out;
  const Matrix U = utility.values(theta);
  Vector V;
  if (kind == LikelihoodKind::nfxp) {
    auto opt = options.optimal;
    opt.tol = options.tol;
    const OptimalSolve sol = solve_optimal(model, U, opt);
    V = sol.value;
    out.inner_iterations = sol.value_iterations + sol.inner_iterations;
    // The warmup counts as one fixed point and each policy evaluation as another.
    const long solves = std::max<long>(1, (sol.value_iterations > 0 ? 1 : 0) + sol.policy_iterations);
    book.workload += solves;
    book.span += solves;
  } else {
    const Vector Up = policy_utility(*route.phat, U, *route.entropy);
    const LinearSolve ls = kind == LikelihoodKind::ccp
                               ? solve_linear_value(*route.F_phat, beta, Up, options.tol)
                               : solve_centered(*route.F_phat, beta, Up, options.tol);
    V = ls.value;
    out.inner_iterations = ls.iterations;
    book.record_batch(1);
  }
  const Matrix C = choice_specific_values(model, V, U);
  const Matrix logP = log_choice_probabilities(C);
  out.policy = logP.array().exp().matrix();
  out.value = weighted_loglik(counts.counts, logP);
  if (order == Order::value) return out;

  const Matrix& P = out.policy;
  Matrix g(X, A - 1);
  for (int j = 0; j < A - 1; ++j) {
    g.col(j) = counts.counts.col(j) - counts.state_totals.cwiseProduct(P.col(j));
  }
  const Vector w = differenced_adjoint(model, g);

  MarkovMatrix F_policy;
  const MarkovMatrix* F = route.F_phat;
  const Matrix* P_eval = route.phat;
  if (kind == LikelihoodKind::nfxp) {
    F_policy = MarkovMatrix::mixture(model.kernel.per_action, P);
    F = &F_policy;
    P_eval = &P;
  }

  const int t = utility.parameter_count();
  Vector lambda;
  std::vector<Matrix> dU;
  std::vector<Vector> dV;
  if (order == Order::gradient) {
    lambda = solve_dual(*F, beta, w, options.tol).value;
    book.record_batch(1);
  } else {
    // The dual and the t Jacobian fixed points are independent: one batch.
    dU = utility.jacobian(theta);
    const std::vector<Vector> rhs = jacobian_rhs(*P_eval, dU);
    dV.resize(static_cast<std::size_t>(t));
    parallel_for(t + 1, options.threads, [&](long k) {
      if (k == 0) {
        lambda = solve_dual(*F, beta, w, options.tol).value;
      } else if (kind == LikelihoodKind::ccp) {
        dV[k - 1] = solve_linear_value(*F, beta, rhs[k - 1], options.tol).value;
      } else {
        dV[k - 1] = solve_linear_value_relative(*F, beta, rhs[k - 1], options.tol).full();
      }
    });
    book.record_batch(t + 1);
  }

  Matrix G = P_eval->array().colwise() * lambda.array();
  G.leftCols(A - 1) += g;
  G.col(A - 1) -= g.rowwise().sum();
  out.gradient = utility.pullback(theta, G);
  if (order == Order::gradient) return out;

  const std::vector<Matrix> dD = differenced_derivatives(model, dU, dV);
  Matrix H = utility.weighted_hessian(theta, G);
  for (int x = 0; x < X; ++x) {
    const double coef =
        (kind == LikelihoodKind::nfxp ? lambda[x] : 0.0) - counts.state_totals[x];
    if (coef == 0) continue;
    const Vector p = P.row(x).head(A - 1).transpose();
    const Matrix S = Matrix(p.asDiagonal()) - p * p.transpose();
    H += coef * dD[x].transpose() * S * dD[x];
  }
  out.hessian = 0.5 * (H + H.transpose());
  return out;
}

struct PhatCache {
  MarkovMatrix F;
  Vector entropy;
};

PhatCache cache_phat(const ModelSpec& model, const Matrix& phat) {
  check_policy(model, phat);
  return {MarkovMatrix::mixture(model.kernel.per_action, phat), entropy_rows(model.choice, phat)};
}

LikelihoodResult two_step(LikelihoodKind kind, const ModelSpec& model,
                          const UtilityModel& utility, const Vector& theta,
                          const SampleCounts& counts, const Matrix& phat, Order order,
                          const EstimatorOptions& options, FixedPointLedger* ledger) {
  const PhatCache cache = cache_phat(model, phat);
  return likelihood(kind, model, utility, theta, counts, {&cache.F, &phat, &cache.entropy}, order,
                    options, ledger);
}

}  // namespace

// ---------------------------------------------------------------------------

SampleCounts SampleCounts::from_counts(const Matrix& counts) {
  require(counts.size() > 0, "counts: empty matrix");
  require((counts.array() >= 0).all() && counts.allFinite(), "counts: entries must be >= 0");
  require((counts.array() == counts.array().round()).all(), "counts: entries must be integers");
  SampleCounts out;
  out.counts = counts;
  out.state_totals = counts.rowwise().sum();
  out.total = out.state_totals.sum();
  require(out.total > 0, "counts: no observations");
  out.shares = out.state_totals / out.total;
  return out;
}

std::vector<bool> SampleCounts::zero_share_mask() const {
  std::vector<bool> mask(static_cast<std::size_t>(state_count()));
  for (int x = 0; x < state_count(); ++x) mask[x] = state_totals[x] == 0;
  return mask;
}

LikelihoodResult nfxp_loglik(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta, const SampleCounts& counts, Order order,
                             const EstimatorOptions& options, FixedPointLedger* ledger) {
  return likelihood(LikelihoodKind::nfxp, model, utility, theta, counts, {}, order, options,
                    ledger);
}

LikelihoodResult ccp_loglik(const ModelSpec& model, const UtilityModel& utility,
                            const Vector& theta, const SampleCounts& counts, const Matrix& phat,
                            Order order, const EstimatorOptions& options,
                            FixedPointLedger* ledger) {
  return two_step(LikelihoodKind::ccp, model, utility, theta, counts, phat, order, options,
                  ledger);
}

LikelihoodResult sc_loglik(const ModelSpec& model, const UtilityModel& utility,
                           const Vector& theta, const SampleCounts& counts, const Matrix& phat,
                           Order order, const EstimatorOptions& options,
                           FixedPointLedger* ledger) {
  return two_step(LikelihoodKind::sc, model, utility, theta, counts, phat, order, options,
                  ledger);
}

ObjectiveFn likelihood_objective(LikelihoodKind kind, const ModelSpec& model,
                                 const UtilityModel& utility, const SampleCounts& counts,
                                 const Matrix& phat, const EstimatorOptions& options) {
  auto cache = std::make_shared<PhatCache>();
  auto phat_copy = std::make_shared<Matrix>(phat);
  if (kind != LikelihoodKind::nfxp) *cache = cache_phat(model, phat);
  return [kind, &model, &utility, counts, options, cache, phat_copy](
             const Vector& theta, Vector* gradient, Matrix* hessian, FixedPointLedger& ledger) {
    const Order order = hessian ? Order::hessian : gradient ? Order::gradient : Order::value;
    ValueRoute route;
    if (kind != LikelihoodKind::nfxp) route = {&cache->F, phat_copy.get(), &cache->entropy};
    const LikelihoodResult r =
        likelihood(kind, model, utility, theta, counts, route, order, options, &ledger);
    if (gradient) *gradient = -r.gradient;
    if (hessian) *hessian = -r.hessian;
    return -r.value;
  };
}

LinearValueDecomposition linear_value_decomposition(const ModelSpec& model,
                                                    const LinearUtility& utility,
                                                    const Matrix& phat,
                                                    const EstimatorOptions& options,
                                                    FixedPointLedger* ledger) {
  const PhatCache cache = cache_phat(model, phat);
  const int t = utility.parameter_count();
  std::vector<Vector> rhs{cache.entropy};
  for (int k = 0; k < t; ++k) {
    Vector r = Vector::Zero(model.state_count);
    for (int a = 0; a < model.action_count; ++a) {
      r += phat.col(a).cwiseProduct(utility.design()[a].col(k));
    }
    rhs.push_back(r);
  }
  const auto sols =
      solve_values_batch(cache.F, model.discount, rhs, options.tol, options.threads, ledger);
  LinearValueDecomposition out;
  out.entropy_part = sols[0].full();
  out.design_part.resize(model.state_count, t);
  for (int k = 0; k < t; ++k) out.design_part.col(k) = sols[k + 1].full();
  return out;
}

double ccp_loglik_linear(const ModelSpec& model, const LinearUtility& utility,
                         const LinearValueDecomposition& decomposition, const Vector& theta,
                         const SampleCounts& counts) {
  check_counts(model, counts);
  const Vector V = decomposition.entropy_part + decomposition.design_part * theta;
  const Matrix C = choice_specific_values(model, V, utility.values(theta));
  return weighted_loglik(counts.counts, log_choice_probabilities(C));
}

// ---------------------------------------------------------------------------

ProjectionSet make_projection_set(const ModelSpec& model, std::vector<Matrix> Z,
                                  std::vector<bool> row_mask) {
  const int X = model.state_count;
  const int A = model.action_count;
  require(!Z.empty(), "projections: need at least one matrix");
  if (row_mask.empty()) row_mask.assign(static_cast<std::size_t>(X), false);
  require(static_cast<int>(row_mask.size()) == X, "projections: row mask length");
  ProjectionSet out;
  out.m = static_cast<int>(Z.size());
  for (auto& z : Z) {
    require(z.rows() == X && z.cols() == A - 1, "projections: each Z must be X x (A-1)");
    for (int x = 0; x < X; ++x) {
      if (row_mask[x]) z.row(x).setZero();
    }
    out.weights.push_back(-differenced_adjoint(model, z));
  }
  out.Z = std::move(Z);
  out.row_mask = std::move(row_mask);
  return out;
}

ProjectionSet draw_projections(const ModelSpec& model, const SampleCounts& counts, int m,
                               int parameter_count, std::uint64_t seed, ProjectionScheme scheme,
                               const std::vector<bool>* row_mask) {
  check_counts(model, counts);
  if (m <= parameter_count) {
    throw InvalidArgument("draw_projections: need m > t (m=" + std::to_string(m) +
                          ", t=" + std::to_string(parameter_count) + ")");
  }
  const int X = model.state_count;
  const int A = model.action_count;
  Matrix scale = Matrix::Ones(X, A - 1);
  if (scheme == ProjectionScheme::count_weighted) {
    for (int x = 0; x < X; ++x) {
      const double n0 = counts.counts(x, A - 1);
      for (int a = 0; a < A - 1; ++a) {
        const double nq = counts.counts(x, a);
        scale(x, a) = nq + n0 > 0 ? std::sqrt(nq * n0 / (nq + n0)) : 0.0;
      }
    }
  }
  Rng rng(seed);
  std::vector<Matrix> Z(static_cast<std::size_t>(m), Matrix(X, A - 1));
  for (auto& z : Z) {
    for (int x = 0; x < X; ++x) {
      for (int a = 0; a < A - 1; ++a) z(x, a) = scale(x, a) * rng.normal();
    }
  }
  ProjectionSet out = make_projection_set(
      model, std::move(Z), row_mask ? *row_mask : counts.zero_share_mask());
  out.scheme = scheme;
  return out;
}

void precompute_duals(const ModelSpec& model, const Matrix& phat, ProjectionSet& projections,
                      const EstimatorOptions& options) {
  check_policy(model, phat);
  require(static_cast<int>(projections.weights.size()) == projections.m,
          "precompute_duals: projection weights missing");
  const MarkovMatrix F = MarkovMatrix::mixture(model.kernel.per_action, phat);
  const auto sols = solve_duals_batch(F, model.discount, projections.weights, options.tol,
                                      options.threads, &projections.ledger);
  projections.duals.clear();
  for (const auto& s : sols) projections.duals.push_back(s.value);
}

UfxpProblem::UfxpProblem(const ModelSpec& model, const UtilityModel& utility, const Matrix& phat,
                         ProjectionSet projections)
    : model_(model), utility_(utility), phat_(phat), projections_(std::move(projections)) {
  check_policy(model, phat_);
  if (!projections_.has_duals()) throw StateError("UfxpProblem: duals not precomputed");
  const int A = model.action_count;
  const Vector E = entropy_rows(model.choice, phat_);
  const Matrix inv = inverse_choice_rows(model.choice, phat_);
  c_.resize(projections_.m);
  for (int i = 0; i < projections_.m; ++i) {
    const Vector& lambda = projections_.duals[i];
    const Matrix& Z = projections_.Z[i];
    Matrix M = phat_.array().colwise() * lambda.array();
    M.leftCols(A - 1) -= Z;
    M.col(A - 1) += Z.rowwise().sum();
    M_.push_back(std::move(M));
    c_[i] = lambda.dot(E) + Z.cwiseProduct(inv).sum();
  }
}

Vector UfxpProblem::residuals(const Vector& theta) const {
  const Matrix U = utility_.values(theta);
  Vector r(projections_.m);
  for (int i = 0; i < projections_.m; ++i) r[i] = c_[i] + M_[i].cwiseProduct(U).sum();
  return r;
}

double UfxpProblem::objective(const Vector& theta, Vector* gradient, Matrix* hessian) const {
  const Vector r = residuals(theta);
  if (!gradient && !hessian) return r.squaredNorm();
  Matrix G = Matrix::Zero(model_.state_count, model_.action_count);
  for (int i = 0; i < projections_.m; ++i) G += (2.0 * r[i]) * M_[i];
  if (gradient) *gradient = utility_.pullback(theta, G);
  if (hessian) {
    const auto dU = utility_.jacobian(theta);
    const int t = utility_.parameter_count();
    Matrix J(projections_.m, t);
    for (int i = 0; i < projections_.m; ++i) {
      for (int k = 0; k < t; ++k) J(i, k) = M_[i].cwiseProduct(dU[k]).sum();
    }
    Matrix H = 2.0 * J.transpose() * J + utility_.weighted_hessian(theta, G);
    *hessian = 0.5 * (H + H.transpose());
  }
  return r.squaredNorm();
}

ObjectiveFn UfxpProblem::as_objective() const {
  return [this](const Vector& theta, Vector* gradient, Matrix* hessian, FixedPointLedger&) {
    return objective(theta, gradient, hessian);
  };
}

double ufxp_objective_nested(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta, const Matrix& phat,
                             const ProjectionSet& projections, const EstimatorOptions& options) {
  const PhatCache cache = cache_phat(model, phat);
  const Matrix U = utility.values(theta);
  const Vector V = solve_linear_value_relative(cache.F, model.discount,
                                               policy_utility(phat, U, cache.entropy),
                                               options.tol)
                       .full();
  const Matrix gap =
      inverse_choice_rows(model.choice, phat) - difference_rows(choice_specific_values(model, V, U));
  double Q = 0.0;
  for (const auto& Z : projections.Z) {
    const double tr = Z.cwiseProduct(gap).sum();
    Q += tr * tr;
  }
  return Q;
}

MultistartReport ufxp_estimate(const UfxpProblem& problem, const OptimizerConfig& config,
                               int starts, std::uint64_t seed_base, int threads, InitScheme init) {
  const UtilityModel& utility = problem.utility();
  StartFn start = [&utility, init](std::uint64_t seed) { return init_params(utility, seed, init); };
  return multistart(problem.as_objective(), start, starts, seed_base, config, threads,
                    problem.projections().ledger);
}

// ---------------------------------------------------------------------------

std::vector<Vector> value_jacobian(const ModelSpec& model, const UtilityModel& utility,
                                   const Vector& theta, const Matrix& phat,
                                   const EstimatorOptions& options, FixedPointLedger* ledger) {
  check_policy(model, phat);
  const MarkovMatrix F = MarkovMatrix::mixture(model.kernel.per_action, phat);
  const auto sols = solve_values_batch(F, model.discount, jacobian_rhs(phat, utility.jacobian(theta)),
                                       options.tol, options.threads, ledger);
  std::vector<Vector> out;
  out.reserve(sols.size());
  for (const auto& s : sols) out.push_back(s.full());
  return out;
}

OptimalWeights oufxp_weights(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta_first, const Matrix& phat,
                             const SampleCounts& counts, const EstimatorOptions& options) {
  check_counts(model, counts);
  const int X = model.state_count;
  const int A = model.action_count;
  const int t = utility.parameter_count();
  OptimalWeights out;
  out.jacobian_values = value_jacobian(model, utility, theta_first, phat, options, &out.ledger);
  const auto dD = differenced_derivatives(model, utility.jacobian(theta_first), out.jacobian_values);
  std::vector<Matrix> Z(static_cast<std::size_t>(t), Matrix::Zero(X, A - 1));
  out.per_state.assign(static_cast<std::size_t>(X), Matrix::Zero(A - 1, t));
  for (int x = 0; x < X; ++x) {
    if (counts.shares[x] == 0) continue;
    const Vector p = phat.row(x).transpose();
    const Matrix Gam = inverse_choice_jacobian(p);
    const Matrix S = Gam * choice_covariance(p) * Gam.transpose();
    const Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success || !S.allFinite()) {
      throw DomainError("oufxp_weights: singular weighting matrix at state " + std::to_string(x));
    }
    out.per_state[x] = counts.shares[x] * llt.solve(dD[x]);
    for (int k = 0; k < t; ++k) Z[k].row(x) = out.per_state[x].col(k).transpose();
  }
  out.second_stage = make_projection_set(model, std::move(Z), counts.zero_share_mask());
  precompute_duals(model, phat, out.second_stage, options);
  out.ledger.absorb(out.second_stage.ledger);
  return out;
}

OufxpResult oufxp_estimate(const ModelSpec& model, const UtilityModel& utility,
                           const Matrix& phat, const SampleCounts& counts,
                           const Vector& theta_first, const FixedPointLedger& first_stage,
                           const OptimizerConfig& config, const EstimatorOptions& options) {
  OufxpResult out;
  out.weights = oufxp_weights(model, utility, theta_first, phat, counts, options);
  const UfxpProblem problem(model, utility, phat, out.weights.second_stage);
  out.run = minimize(problem.as_objective(), theta_first, config);
  out.diagnostics = out.run.diagnostics;
  out.diagnostics.workload += first_stage.workload + out.weights.ledger.workload;
  out.diagnostics.span += first_stage.span + out.weights.ledger.span;
  return out;
}

Vector oufxp_linear_closed_form(const ModelSpec& model, const LinearUtility& utility,
                                const Matrix& phat, const OptimalWeights& weights) {
  check_policy(model, phat);
  const ProjectionSet& second = weights.second_stage;
  if (!second.has_duals()) throw StateError("oufxp_linear_closed_form: duals not precomputed");
  const int X = model.state_count;
  const int A = model.action_count;
  const int t = utility.parameter_count();
  require(second.m == t, "oufxp_linear_closed_form: weights do not match the utility");
  const auto& W = utility.design();
  const Matrix inv = inverse_choice_rows(model.choice, phat);
  const Vector E = entropy_rows(model.choice, phat);

  Matrix lhs = Matrix::Zero(t, t);
  Vector rhs = Vector::Zero(t);
  Matrix dW(A - 1, t);
  for (int x = 0; x < X; ++x) {
    const Matrix& z = weights.per_state[x];
    for (int a = 0; a < A - 1; ++a) dW.row(a) = W[a].row(x) - W[A - 1].row(x);
    lhs += z.transpose() * dW;
    rhs += z.transpose() * inv.row(x).transpose();
  }
  Matrix PW = Matrix::Zero(X, t);
  for (int a = 0; a < A; ++a) PW += phat.col(a).asDiagonal() * W[a];
  Matrix Lambda(t, X);
  for (int k = 0; k < t; ++k) Lambda.row(k) = second.duals[k].transpose();
  lhs -= Lambda * PW;
  rhs += Lambda * E;
  const Eigen::FullPivLU<Matrix> lu(lhs);
  if (lu.rank() < t) {
    throw RankDeficiency("oufxp_linear_closed_form: singular system (rank " +
                         std::to_string(lu.rank()) + " < " + std::to_string(t) + ")");
  }
  return lu.solve(rhs);
}

CovarianceReport ufxp_covariance(const ModelSpec& model, const UtilityModel& utility,
                                 const Vector& theta, const Matrix& phat,
                                 const SampleCounts& counts, const ProjectionSet& projections,
                                 const EstimatorOptions& options) {
  check_counts(model, counts);
  const int X = model.state_count;
  const int A = model.action_count;
  const int t = utility.parameter_count();
  const int m = projections.m;
  const auto dV = value_jacobian(model, utility, theta, phat, options);
  const auto dD = differenced_derivatives(model, utility.jacobian(theta), dV);

  CovarianceReport out;
  out.d_matrix = Matrix::Zero(m, t);
  Matrix omega = Matrix::Zero(m, m);
  Matrix z(A - 1, m);
  for (int x = 0; x < X; ++x) {
    const Vector p = phat.row(x).transpose();
    out.per_state_sigma.push_back(choice_covariance(p));
    out.per_state_gamma.push_back(inverse_choice_jacobian(p));
    for (int i = 0; i < m; ++i) z.col(i) = projections.Z[i].row(x).transpose();
    if (z.isZero(0)) continue;
    if (counts.shares[x] == 0) {
      throw DomainError("ufxp_covariance: state " + std::to_string(x) +
                        " has no observations but nonzero projection rows; mask it");
    }
    const Matrix& Gam = out.per_state_gamma.back();
    out.d_matrix += z.transpose() * dD[x];
    omega += z.transpose() * Gam * out.per_state_sigma.back() * Gam.transpose() * z /
             counts.shares[x];
  }
  const Matrix DtD = out.d_matrix.transpose() * out.d_matrix;
  const Eigen::FullPivLU<Matrix> lu(DtD);
  if (lu.rank() < t) throw RankDeficiency("ufxp_covariance: D'D is singular");
  const Matrix B = lu.solve(out.d_matrix.transpose());
  const Matrix S = B * omega * B.transpose();
  out.sigma_ufxp = 0.5 * (S + S.transpose());
  return out;
}

ProjectionScheme parse_projection_scheme(const std::string& name) {
  if (name == "standard_normal") return ProjectionScheme::standard_normal;
  if (name == "count_weighted") return ProjectionScheme::count_weighted;
  throw InvalidArgument("unknown projection scheme: " + name);
}

std::string to_string(ProjectionScheme scheme) {
  return scheme == ProjectionScheme::standard_normal ? "standard_normal" : "count_weighted";
}

LikelihoodKind parse_likelihood_kind(const std::string& name) {
  if (name == "nfxp") return LikelihoodKind::nfxp;
  if (name == "ccp") return LikelihoodKind::ccp;
  if (name == "sc") return LikelihoodKind::sc;
  throw InvalidArgument("unknown likelihood estimator: " + name);
}

}  // namespace ddc
