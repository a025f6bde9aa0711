#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ddc/estimators.hpp"
#include "ddc/synthetic.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>

using namespace ddc;

namespace {

EstimatorOptions tight() {
  EstimatorOptions o;
  o.tol = 1e-13;
  return o;
}

Matrix optimal_policy(const SyntheticModel& s, const Vector& theta) {
  OptimalSolveOptions opt;
  opt.tol = 1e-13;
  return solve_optimal(s.model, s.utility->values(theta), opt).policy;
}

SampleCounts simulated_counts(const SyntheticModel& s, long N, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix P = optimal_policy(s, s.theta);
  const Vector shares = Vector::Constant(s.model.state_count, 1.0 / s.model.state_count);
  return SampleCounts::from_counts(multinomial_counts(shares, P, N, rng));
}

// Interior policy near P but not equal to it.
Matrix perturbed(const Matrix& P, Rng& rng) {
  Matrix Q = P;
  for (Eigen::Index x = 0; x < Q.rows(); ++x) {
    for (Eigen::Index a = 0; a < Q.cols(); ++a) Q(x, a) *= std::exp(0.3 * rng.normal());
    Q.row(x) /= Q.row(x).sum();
  }
  return Q;
}

Vector perturb_theta(const Vector& theta, Rng& rng, double scale = 0.2) {
  Vector t = theta;
  for (Eigen::Index k = 0; k < t.size(); ++k) t[k] += scale * rng.normal();
  return t;
}

// Gradient of the log-likelihood built from the t Jacobian fixed points of
// V under P, solved densely, with no dual.
Vector direct_nfxp_gradient(const SyntheticModel& s, const Vector& theta,
                            const SampleCounts& counts) {
  const auto& model = s.model;
  const int X = model.state_count;
  const int A = model.action_count;
  const Matrix P = optimal_policy(s, theta);
  Matrix FP = Matrix::Zero(X, X);
  for (int a = 0; a < A; ++a) FP += P.col(a).asDiagonal() * model.kernel.per_action[a].to_dense();
  const auto dU = s.utility->jacobian(theta);
  Vector grad(dU.size());
  for (std::size_t k = 0; k < dU.size(); ++k) {
    const Vector dV = oracle::dense_value(FP, model.discount, P.cwiseProduct(dU[k]).rowwise().sum());
    double gk = 0;
    const Vector ref = dU[k].col(A - 1) + model.discount * model.kernel.per_action[A - 1].to_dense() * dV;
    for (int j = 0; j < A - 1; ++j) {
      const Vector dD = dU[k].col(j) + model.discount * model.kernel.per_action[j].to_dense() * dV - ref;
      for (int x = 0; x < X; ++x) {
        gk += (counts.counts(x, j) - counts.state_totals[x] * P(x, j)) * dD[x];
      }
    }
    grad[k] = gk;
  }
  return grad;
}

// Q evaluated from a dense solve of V_phat and the explicit traces.
double dense_nested_q(const SyntheticModel& s, const Vector& theta, const Matrix& phat,
                      const ProjectionSet& proj) {
  const auto& model = s.model;
  const int X = model.state_count;
  const int A = model.action_count;
  const Matrix U = s.utility->values(theta);
  Matrix F = Matrix::Zero(X, X);
  Vector Up(X);
  for (int x = 0; x < X; ++x) {
    double e = ChoiceKernel::euler_gamma;
    for (int a = 0; a < A; ++a) e -= phat(x, a) * std::log(phat(x, a));
    Up[x] = e + phat.row(x).dot(U.row(x));
  }
  for (int a = 0; a < A; ++a) F += phat.col(a).asDiagonal() * model.kernel.per_action[a].to_dense();
  const Vector V = oracle::dense_value(F, model.discount, Up);
  double Q = 0;
  for (const auto& Z : proj.Z) {
    double tr = 0;
    const Vector cA = U.col(A - 1) + model.discount * model.kernel.per_action[A - 1].to_dense() * V;
    for (int a = 0; a < A - 1; ++a) {
      const Vector ca = U.col(a) + model.discount * model.kernel.per_action[a].to_dense() * V;
      for (int x = 0; x < X; ++x) {
        tr += Z(x, a) * (std::log(phat(x, a) / phat(x, A - 1)) - (ca[x] - cA[x]));
      }
    }
    Q += tr * tr;
  }
  return Q;
}

void check_derivatives(const std::function<LikelihoodResult(const Vector&, Order)>& f,
                       const Vector& theta, double tol = 1e-4) {
  const LikelihoodResult r = f(theta, Order::hessian);
  const Vector fd = oracle::fd_gradient([&](const Vector& th) { return f(th, Order::value).value; },
                                        theta);
  CHECK(oracle::relative_error(r.gradient, fd) < tol);
  const Matrix fdH = oracle::fd_jacobian(
      [&](const Vector& th) { return f(th, Order::gradient).gradient; }, theta);
  CHECK(oracle::relative_error(r.hessian, fdH) < tol);
  CHECK(oracle::relative_error(f(theta, Order::gradient).gradient, r.gradient) < 1e-12);
}

}  // namespace

TEST_CASE("sample counts") {
  Matrix n(3, 2);
  n << 1, 3, 0, 0, 2, 2;
  const auto c = SampleCounts::from_counts(n);
  CHECK(c.total == 8);
  CHECK(c.state_totals[1] == 0);
  CHECK(c.shares.sum() == doctest::Approx(1.0));
  CHECK(c.zero_share_mask() == std::vector<bool>{false, true, false});
  n(0, 0) = -1;
  CHECK_THROWS_AS(SampleCounts::from_counts(n), InvalidArgument);
  n(0, 0) = 0.5;
  CHECK_THROWS_AS(SampleCounts::from_counts(n), InvalidArgument);
  CHECK_THROWS_AS(SampleCounts::from_counts(Matrix::Zero(2, 2)), InvalidArgument);
}

TEST_CASE("nfxp derivatives match finite differences") {
  SUBCASE("softplus mlp, t = 12") {
    const auto s = small_mlp_model(0.9, 11);
    REQUIRE(s.utility->parameter_count() == 12);
    const auto counts = simulated_counts(s, 3000, 1);
    Rng rng(3);
    for (int rep = 0; rep < 3; ++rep) {
      const Vector th = perturb_theta(s.theta, rng);
      check_derivatives([&](const Vector& x, Order o) {
        return nfxp_loglik(s.model, *s.utility, x, counts, o, tight());
      }, th);
    }
  }
  SUBCASE("linear, 4 states, t = 3") {
    const auto s = random_linear_model(4, 3, 3, 0.95, 5);
    const auto counts = simulated_counts(s, 2000, 2);
    check_derivatives([&](const Vector& x, Order o) {
      return nfxp_loglik(s.model, *s.utility, x, counts, o, tight());
    }, s.theta);
  }
}

TEST_CASE("dual gradient equals the direct fixed-point route") {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const auto s = small_mlp_model(0.95, seed);
    const auto counts = simulated_counts(s, 5000, seed);
    Rng rng(seed);
    const Vector th = perturb_theta(s.theta, rng);
    const Vector dual = nfxp_loglik(s.model, *s.utility, th, counts, Order::gradient, tight()).gradient;
    const Vector direct = direct_nfxp_gradient(s, th, counts);
    CHECK(oracle::relative_error(dual, direct) < 1e-8);
  }
}

TEST_CASE("nfxp score at the truth is small for a large sample") {
  const auto s = random_linear_model(5, 2, 2, 0.9, 8);
  const long N = 1'000'000;
  const auto counts = simulated_counts(s, N, 4);
  const Vector g = nfxp_loglik(s.model, *s.utility, s.theta, counts, Order::gradient).gradient;
  CHECK(g.norm() <= 0.01 * N);
  CHECK(g.norm() <= 20 * std::sqrt(static_cast<double>(N)));
}

TEST_CASE("symmetric design gives a symmetric nfxp gradient") {
  // Two parameters entering symmetrically: swapping them is a model symmetry.
  const int X = 4;
  Rng rng(9);
  const Matrix F = oracle::random_stochastic(X, rng);
  std::vector<MarkovMatrix> parts{MarkovMatrix(F), MarkovMatrix(F)};
  ModelSpec model(TransitionKernel(std::move(parts)), 0.9);
  Matrix W0 = Matrix::Zero(X, 2), W1 = Matrix::Zero(X, 2);
  W0.col(0).setOnes();
  W0.col(1).setOnes();
  LinearUtility u({W0, W1});
  const auto counts = SampleCounts::from_counts(Matrix::Constant(X, 2, 10));
  Vector th(2);
  th << 0.3, 0.3;
  const Vector g = nfxp_loglik(model, u, th, counts, Order::gradient).gradient;
  CHECK(g[0] == doctest::Approx(g[1]).epsilon(1e-12));
}

TEST_CASE("ccp and sc likelihoods") {
  const auto s = small_mlp_model(0.9, 31);
  const auto counts = simulated_counts(s, 3000, 5);
  Rng rng(6);
  const Vector th = perturb_theta(s.theta, rng);

  SUBCASE("consistency with nfxp at phat = P(theta)") {
    const Matrix P = optimal_policy(s, th);
    const double ccp = ccp_loglik(s.model, *s.utility, th, counts, P, Order::value, tight()).value;
    const double nfxp = nfxp_loglik(s.model, *s.utility, th, counts, Order::value, tight()).value;
    CHECK(std::abs(ccp - nfxp) <= 1e-9 * (1 + std::abs(nfxp)));
  }
  SUBCASE("derivatives") {
    const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
    check_derivatives([&](const Vector& x, Order o) {
      return ccp_loglik(s.model, *s.utility, x, counts, phat, o, tight());
    }, th);
    check_derivatives([&](const Vector& x, Order o) {
      return sc_loglik(s.model, *s.utility, x, counts, phat, o, tight());
    }, th);
  }
  SUBCASE("sc equals ccp and converges no slower") {
    for (int rep = 0; rep < 10; ++rep) {
      const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
      const Vector x = perturb_theta(s.theta, rng, 0.5);
      const auto c = ccp_loglik(s.model, *s.utility, x, counts, phat);
      const auto sc = sc_loglik(s.model, *s.utility, x, counts, phat);
      CHECK(std::abs(sc.value - c.value) <= 1e-9 * (1 + std::abs(c.value)));
      CHECK(sc.inner_iterations <= c.inner_iterations);
    }
  }
}

TEST_CASE("beta = 0 reduces to the static logit likelihood") {
  auto s = random_linear_model(5, 3, 2, 0.0, 12);
  const auto counts = simulated_counts(s, 500, 7);
  Rng rng(1);
  const Matrix phat = oracle::random_policy(5, 3, rng);
  const Matrix U = s.utility->values(s.theta);
  double L = 0;
  for (int x = 0; x < 5; ++x) {
    const double lse = std::log(U.row(x).array().exp().sum());
    for (int a = 0; a < 3; ++a) L += counts.counts(x, a) * (U(x, a) - lse);
  }
  CHECK(sc_loglik(s.model, *s.utility, s.theta, counts, phat).value == doctest::Approx(L).epsilon(1e-12));
  CHECK(nfxp_loglik(s.model, *s.utility, s.theta, counts).value == doctest::Approx(L).epsilon(1e-12));
}

TEST_CASE("linear ccp from the value decomposition") {
  const auto s = random_linear_model(8, 3, 4, 0.95, 13);
  const auto& lin = dynamic_cast<const LinearUtility&>(*s.utility);
  const auto counts = simulated_counts(s, 2000, 8);
  Rng rng(2);
  const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
  FixedPointLedger ledger;
  const auto dec = linear_value_decomposition(s.model, lin, phat, tight(), &ledger);
  CHECK(ledger.workload == 5);
  CHECK(ledger.span == 1);
  for (int rep = 0; rep < 5; ++rep) {
    const Vector th = perturb_theta(s.theta, rng, 1.0);
    const double nested = ccp_loglik(s.model, lin, th, counts, phat, Order::value, tight()).value;
    const double pre = ccp_loglik_linear(s.model, lin, dec, th, counts);
    CHECK(std::abs(nested - pre) <= 1e-10 * (1 + std::abs(nested)));
  }
}

TEST_CASE("fixed-point accounting of likelihood calls") {
  const auto s = small_mlp_model(0.9, 41);
  const auto counts = simulated_counts(s, 1000, 9);
  Rng rng(3);
  const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
  const int t = s.utility->parameter_count();
  FixedPointLedger l;
  ccp_loglik(s.model, *s.utility, s.theta, counts, phat, Order::value, {}, &l);
  CHECK(l.workload == 1);
  ccp_loglik(s.model, *s.utility, s.theta, counts, phat, Order::gradient, {}, &l);
  CHECK(l.workload == 3);
  ccp_loglik(s.model, *s.utility, s.theta, counts, phat, Order::hessian, {}, &l);
  CHECK(l.workload == 4 + t + 1);
  CHECK(l.span == 5);
  FixedPointLedger n;
  nfxp_loglik(s.model, *s.utility, s.theta, counts, Order::value, {}, &n);
  CHECK(n.workload >= 1);
}

TEST_CASE("projection draws") {
  const auto s = random_linear_model(3, 2, 2, 0.9, 14);
  const auto counts = SampleCounts::from_counts(Matrix::Constant(3, 2, 4));
  const auto p = draw_projections(s.model, counts, 4, 2, 99);
  CHECK(p.m == 4);
  REQUIRE(p.Z.size() == 4);
  CHECK(p.Z[0].rows() == 3);
  CHECK(p.Z[0].cols() == 1);
  CHECK_FALSE(p.has_duals());
  CHECK_THROWS_AS(draw_projections(s.model, counts, 2, 2, 1), InvalidArgument);

  // Sampler sanity on a larger draw.
  const auto big = draw_projections(s.model, counts, 20000, 2, 5);
  double sum = 0, sq = 0;
  for (const auto& Z : big.Z) {
    sum += Z.sum();
    sq += Z.squaredNorm();
  }
  const double n = 3.0 * 20000;
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02).scale(1));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.03));

  // Same seed, same draw.
  const auto again = draw_projections(s.model, counts, 4, 2, 99);
  CHECK(again.Z[3] == p.Z[3]);
  CHECK(again.weights[2] == p.weights[2]);
}

TEST_CASE("count-weighted variance and masking") {
  const auto s = random_linear_model(3, 2, 1, 0.9, 15);
  Matrix n(3, 2);
  n << 6, 6, 0, 0, 3, 0;
  const auto counts = SampleCounts::from_counts(n);
  const auto p = draw_projections(s.model, counts, 30000, 1, 7, ProjectionScheme::count_weighted);
  double v0 = 0;
  for (const auto& Z : p.Z) {
    v0 += Z(0, 0) * Z(0, 0);
    CHECK(Z(1, 0) == 0.0);  // zero-share state is masked
    CHECK(Z(2, 0) == 0.0);  // harmonic weight is 0 when n_ref = 0
  }
  CHECK(v0 / p.m == doctest::Approx(3.0).epsilon(0.05));  // 2k = 6 -> k = 3
  CHECK(p.row_mask == std::vector<bool>{false, true, false});
}

TEST_CASE("beta = 0 gives zero weights and duals") {
  const auto s = random_linear_model(4, 3, 2, 0.0, 16);
  const auto counts = SampleCounts::from_counts(Matrix::Constant(4, 3, 2));
  auto p = draw_projections(s.model, counts, 5, 2, 3);
  for (const auto& w : p.weights) CHECK(w.isZero(0));
  Rng rng(4);
  precompute_duals(s.model, oracle::random_policy(4, 3, rng), p);
  for (const auto& l : p.duals) CHECK(l.isZero(0));
}

TEST_CASE("precomputed duals satisfy strong duality") {
  const auto s = random_linear_model(30, 3, 2, 0.99, 17);
  const auto counts = SampleCounts::from_counts(Matrix::Constant(30, 3, 1));
  auto p = draw_projections(s.model, counts, 7, 2, 8);
  Rng rng(5);
  const Matrix phat = oracle::random_policy(30, 3, rng);
  precompute_duals(s.model, phat, p, tight());
  CHECK(p.ledger.workload == 7);
  CHECK(p.ledger.span == 1);
  Matrix F = Matrix::Zero(30, 30);
  for (int a = 0; a < 3; ++a) F += phat.col(a).asDiagonal() * s.model.kernel.per_action[a].to_dense();
  const Vector U = oracle::random_vector(30, rng);
  const Vector V = oracle::dense_value(F, 0.99, U);
  for (int i = 0; i < p.m; ++i) {
    CHECK(oracle::relative_error(p.duals[i], oracle::dense_dual(F, 0.99, p.weights[i])) < 1e-9);
    const double primal = p.weights[i].dot(V);
    CHECK(std::abs(primal - p.duals[i].dot(U)) <= 1e-8 * (1 + std::abs(primal)));
  }
}

TEST_CASE("ufxp objective") {
  const auto s = small_mlp_model(0.95, 51);
  const int t = s.utility->parameter_count();
  const auto counts = simulated_counts(s, 5000, 10);
  const int m = 20;

  SUBCASE("zero at the exact choice probabilities") {
    const Matrix P = optimal_policy(s, s.theta);
    auto p = draw_projections(s.model, counts, m, t, 1);
    precompute_duals(s.model, P, p, tight());
    const UfxpProblem prob(s.model, *s.utility, P, p);
    CHECK(prob.objective(s.theta) <= 1e-12);
  }
  SUBCASE("dual form equals nested form") {
    Rng rng(12);
    for (int rep = 0; rep < 5; ++rep) {
      const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
      auto p = draw_projections(s.model, counts, m, t, 100 + rep);
      precompute_duals(s.model, phat, p, tight());
      const UfxpProblem prob(s.model, *s.utility, phat, p);
      for (int k = 0; k < 10; ++k) {
        const Vector th = perturb_theta(s.theta, rng, 0.5);
        const double dual = prob.objective(th);
        const double dense = dense_nested_q(s, th, phat, p);
        const double nested = ufxp_objective_nested(s.model, *s.utility, th, phat, p, tight());
        CHECK(std::abs(dual - dense) <= 1e-8 * std::max(1.0, dense));
        CHECK(std::abs(nested - dense) <= 1e-8 * std::max(1.0, dense));
      }
    }
  }
  SUBCASE("derivatives and zero fixed points") {
    Rng rng(13);
    const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
    auto p = draw_projections(s.model, counts, m, t, 2);
    precompute_duals(s.model, phat, p, tight());
    const UfxpProblem prob(s.model, *s.utility, phat, p);
    const ObjectiveFn f = prob.as_objective();
    FixedPointLedger ledger;
    for (int rep = 0; rep < 3; ++rep) {
      const Vector th = perturb_theta(s.theta, rng);
      Vector g;
      Matrix H;
      f(th, &g, &H, ledger);
      const Vector fd = oracle::fd_gradient([&](const Vector& x) { return prob.objective(x); }, th);
      CHECK(oracle::relative_error(g, fd) < 1e-4);
      const Matrix fdH = oracle::fd_jacobian([&](const Vector& x) {
        Vector gx;
        prob.objective(x, &gx);
        return gx;
      }, th);
      CHECK(oracle::relative_error(H, fdH) < 1e-4);
    }
    CHECK(ledger.workload == 0);
    CHECK(ledger.span == 0);
  }
  SUBCASE("missing duals") {
    const auto p = draw_projections(s.model, counts, m, t, 3);
    CHECK_THROWS_AS(UfxpProblem(s.model, *s.utility, optimal_policy(s, s.theta), p), StateError);
  }
}

TEST_CASE("ufxp and oufxp recover the truth without noise") {
  const auto s = toy_model();
  const auto& lin = dynamic_cast<const LinearUtility&>(*s.utility);
  const Matrix P = optimal_policy(s, s.theta);
  const auto counts = simulated_counts(s, 20000, 11);
  const int m = 5;
  auto p = draw_projections(s.model, counts, m, 2, 4);
  precompute_duals(s.model, P, p, tight());
  const UfxpProblem prob(s.model, lin, P, p);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::trust_newton;
  const auto report = ufxp_estimate(prob, cfg, 3, 10);
  REQUIRE(report.best_index >= 0);
  const RunRecord& best = report.runs[report.best_index];
  CHECK(best.converged);
  CHECK(best.gradient_norm <= 1e-6);
  CHECK((best.theta_final - s.theta).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(report.totals.workload == m);
  CHECK(report.totals.span == 1);

  const auto again = ufxp_estimate(prob, cfg, 3, 10);
  CHECK(again.runs[again.best_index].theta_final == best.theta_final);

  const auto ou = oufxp_estimate(s.model, lin, P, counts, best.theta_final, p.ledger, cfg, tight());
  CHECK(ou.diagnostics.span == 3);
  CHECK(ou.diagnostics.workload == m + 2 + 2);
  const Vector closed = oufxp_linear_closed_form(s.model, lin, P, ou.weights);
  CHECK((closed - s.theta).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((closed - ou.run.theta_final).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("oufxp weights") {
  const auto s = random_linear_model(10, 3, 3, 0.95, 18);
  const auto& lin = dynamic_cast<const LinearUtility&>(*s.utility);
  Rng rng(14);
  const Matrix phat = perturbed(optimal_policy(s, s.theta), rng);
  Matrix n = Matrix::Constant(10, 3, 5);
  n.row(4).setZero();
  const auto counts = SampleCounts::from_counts(n);
  const auto w = oufxp_weights(s.model, lin, s.theta, phat, counts, tight());
  REQUIRE(w.per_state.size() == 10);
  CHECK(w.per_state[0].rows() == 2);
  CHECK(w.per_state[0].cols() == 3);
  CHECK(w.per_state[4].isZero(0));
  CHECK(w.second_stage.m == 3);
  CHECK(w.second_stage.has_duals());
  CHECK(w.ledger.workload == 6);
  CHECK(w.ledger.span == 2);

  const auto dec = linear_value_decomposition(s.model, lin, phat, tight());
  for (int k = 0; k < 3; ++k) {
    CHECK(oracle::relative_error(w.jacobian_values[k], dec.design_part.col(k)) < 1e-8);
  }

  // Closed form against the iterative second stage on noisy inputs.
  const UfxpProblem second(s.model, lin, phat, w.second_stage);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::trust_newton;
  const RunRecord r = minimize(second.as_objective(), s.theta, cfg);
  const Vector closed = oufxp_linear_closed_form(s.model, lin, phat, w);
  CHECK((closed - r.theta_final).cwiseAbs().maxCoeff() < 1e-8);

  Matrix boundary = phat;
  boundary.row(0) << 1.0, 0.0, 0.0;
  CHECK_THROWS(oufxp_weights(s.model, lin, s.theta, boundary, counts));
}

TEST_CASE("scalar closed form") {
  // One parameter: the closed form is the ratio of two scalars.
  const auto base = toy_model(0.9);
  std::vector<Matrix> design;
  const auto& lin2 = dynamic_cast<const LinearUtility&>(*base.utility);
  for (const auto& W : lin2.design()) design.push_back(W.col(1));
  const LinearUtility lin(design);
  Vector theta(1);
  theta << 2.0;
  const Matrix P = solve_optimal(base.model, lin.values(theta)).policy;
  const auto counts = SampleCounts::from_counts(Matrix::Constant(6, 2, 3));
  const auto w = oufxp_weights(base.model, lin, theta, P, counts, tight());
  const Vector est = oufxp_linear_closed_form(base.model, lin, P, w);

  const Vector E = entropy_rows(base.model.choice, P);
  double num = 0, den = 0;
  for (int x = 0; x < 6; ++x) {
    const double z = w.per_state[x](0, 0);
    num += z * std::log(P(x, 0) / P(x, 1)) + w.second_stage.duals[0][x] * E[x];
    den += z * (design[0](x, 0) - design[1](x, 0)) -
           w.second_stage.duals[0][x] * (P(x, 0) * design[0](x, 0) + P(x, 1) * design[1](x, 0));
  }
  CHECK(est[0] == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(est[0] == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("covariance report") {
  const auto s = toy_model();
  const Matrix P = optimal_policy(s, s.theta);
  const auto counts = simulated_counts(s, 10000, 12);
  auto p = draw_projections(s.model, counts, 5, 2, 6);
  const auto cov = ufxp_covariance(s.model, *s.utility, s.theta, P, counts, p);
  CHECK(cov.d_matrix.rows() == 5);
  CHECK(cov.d_matrix.cols() == 2);
  CHECK((cov.sigma_ufxp - cov.sigma_ufxp.transpose()).norm() == 0.0);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(cov.sigma_ufxp);
  CHECK(eig.eigenvalues().minCoeff() >= -1e-8);
  REQUIRE(cov.per_state_gamma.size() == 6);
  CHECK(cov.per_state_gamma[0].rows() == 1);
  CHECK(cov.per_state_sigma[0].rows() == 2);

  Vector half(2);
  half << 0.5, 0.5;
  const Matrix S = choice_covariance(half);
  CHECK(S(0, 0) == 0.25);
  CHECK(S(0, 1) == -0.25);

  Matrix n = counts.counts;
  n.row(2).setZero();
  const auto holes = SampleCounts::from_counts(n);
  const std::vector<bool> none(6, false);
  auto unmasked = draw_projections(s.model, holes, 5, 2, 6, ProjectionScheme::standard_normal, &none);
  CHECK_THROWS_AS(ufxp_covariance(s.model, *s.utility, s.theta, P, holes, unmasked), DomainError);
  auto masked = draw_projections(s.model, holes, 5, 2, 6);
  CHECK_NOTHROW(ufxp_covariance(s.model, *s.utility, s.theta, P, holes, masked));
}

TEST_CASE("covariance calibrates the monte carlo spread") {
  const auto s = toy_model();
  const Matrix P = optimal_policy(s, s.theta);
  const Vector shares = stationary_distribution(MarkovMatrix::mixture(s.model.kernel.per_action, P));
  const long N = 20000;
  // Projections fixed across replications; covariance at the population.
  const auto unit = SampleCounts::from_counts(Matrix::Ones(6, 2));
  const auto proto = draw_projections(s.model, unit, 5, 2, 77);
  Matrix pop_counts = shares.asDiagonal() * P;
  SampleCounts population;
  population.counts = pop_counts;
  population.state_totals = shares;
  population.total = 1.0;
  population.shares = shares;
  const auto cov = ufxp_covariance(s.model, *s.utility, s.theta, P, population, proto);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(cov.sigma_ufxp);
  const Matrix inv_root = eig.operatorInverseSqrt();

  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::trust_newton;
  Rng rng(2024);
  const int reps = 200;
  Matrix errs(reps, 2);
  int used = 0;
  for (int r = 0; r < reps; ++r) {
    const Matrix n = multinomial_counts(shares, P, N, rng);
    if ((n.array() == 0).any()) continue;
    const auto counts = SampleCounts::from_counts(n);
    const Matrix phat = counts.state_totals.cwiseInverse().asDiagonal() * n;
    ProjectionSet p = make_projection_set(s.model, proto.Z);
    precompute_duals(s.model, phat, p);
    const UfxpProblem prob(s.model, *s.utility, phat, p);
    const RunRecord run = minimize(prob.as_objective(), s.theta, cfg);
    errs.row(used++) = (inv_root * (run.theta_final - s.theta) * std::sqrt(double(N))).transpose();
  }
  REQUIRE(used >= 180);
  const Matrix e = errs.topRows(used);
  for (int k = 0; k < 2; ++k) {
    const double mean = e.col(k).mean();
    const double var = (e.col(k).array() - mean).square().sum() / (used - 1);
    CAPTURE(k);
    CHECK(std::abs(mean) < 0.3);
    CHECK(var >= 0.7);
    CHECK(var <= 1.3);
  }
}
