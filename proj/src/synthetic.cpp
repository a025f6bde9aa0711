#include "ddc/synthetic.hpp"

#include <algorithm>
#include <vector>

namespace ddc {

namespace {

constexpr int toy_states = 6;

TransitionKernel toy_kernel() {
  const int X = toy_states;
  Matrix reset = Matrix::Zero(X, X);
  Matrix drift = Matrix::Zero(X, X);
  for (int x = 0; x < X; ++x) {
    reset(x, 0) = 0.7;
    reset(x, 1) = 0.3;
    drift(x, x) += 0.3;
    drift(x, std::min(x + 1, X - 1)) += 0.6;
    drift(x, std::min(x + 2, X - 1)) += 0.1;
  }
  return TransitionKernel({MarkovMatrix(reset), MarkovMatrix(drift)});
}

std::vector<double> cumulative(const Eigen::Ref<const Vector>& p) {
  std::vector<double> cdf(static_cast<std::size_t>(p.size()));
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) cdf[k] = s += p[k];
  return cdf;
}

}  // namespace

SyntheticModel toy_model(double beta) {
  const int X = toy_states;
  Matrix W_reset = Matrix::Zero(X, 2);
  Matrix W_drift = Matrix::Zero(X, 2);
  for (int x = 0; x < X; ++x) {
    W_reset(x, 1) = -1.0;
    W_drift(x, 0) = -static_cast<double>(x);
  }
  Vector theta(2);
  theta << 0.5, 3.0;
  return {ModelSpec(toy_kernel(), beta),
          std::make_shared<LinearUtility>(std::vector<Matrix>{W_reset, W_drift}), theta};
}

SyntheticModel random_linear_model(int states, int actions, int parameters, double beta,
                                   std::uint64_t seed) {
  require(states >= 1 && actions >= 2 && parameters >= 1, "random_linear_model: bad sizes");
  Rng rng(seed);
  std::vector<MarkovMatrix> parts;
  for (int a = 0; a < actions; ++a) {
    Matrix F(states, states);
    for (int i = 0; i < states; ++i) {
      for (int j = 0; j < states; ++j) {
        F(i, j) = (i == j || rng.uniform() < 0.3) ? rng.uniform(0.05, 1.0) : 0.0;
      }
      F.row(i) /= F.row(i).sum();
    }
    parts.emplace_back(F);
  }
  std::vector<Matrix> design;
  for (int a = 0; a < actions; ++a) {
    Matrix W(states, parameters);
    for (int x = 0; x < states; ++x) {
      for (int k = 0; k < parameters; ++k) W(x, k) = rng.normal();
    }
    design.push_back(W);
  }
  Vector theta(parameters);
  for (int k = 0; k < parameters; ++k) theta[k] = rng.uniform(-1.0, 1.0);
  return {ModelSpec(TransitionKernel(std::move(parts)), beta),
          std::make_shared<LinearUtility>(std::move(design)), theta};
}

SyntheticModel small_mlp_model(double beta, std::uint64_t seed) {
  const int X = toy_states;
  Matrix features(X, 1);
  for (int x = 0; x < X; ++x) features(x, 0) = x / 5.0;
  auto shape = std::make_shared<MlpShape>(Mlp({1, 3, 1}, Activation::softplus), features,
                                          OutputTransform::identity);
  Vector coef(2);
  coef << 0.0, -1.0;
  Matrix fixed = Matrix::Zero(X, 2);
  Matrix slope = Matrix::Zero(X, 2);
  for (int x = 0; x < X; ++x) {
    fixed(x, 0) = -1.0;
    slope(x, 0) = x / 5.0;
  }
  auto utility = std::make_shared<MlpUtility>(shape, coef, std::vector<Matrix>{fixed, slope},
                                              std::vector<std::string>{"fixed", "slope"}, 0.0,
                                              2.0);
  Vector theta = init_params(*utility, seed);
  return {ModelSpec(toy_kernel(), beta), utility, theta};
}

Matrix multinomial_counts(const Vector& shares, const Matrix& P, long N, Rng& rng) {
  require(shares.size() == P.rows(), "multinomial_counts: shares and policy disagree");
  require(N >= 0, "multinomial_counts: negative sample size");
  const auto state_cdf = cumulative(shares);
  std::vector<std::vector<double>> action_cdf;
  for (Eigen::Index x = 0; x < P.rows(); ++x) action_cdf.push_back(cumulative(P.row(x).transpose()));
  Matrix counts = Matrix::Zero(P.rows(), P.cols());
  for (long n = 0; n < N; ++n) {
    const int x = rng.categorical_cdf(state_cdf);
    const int a = rng.categorical_cdf(action_cdf[x]);
    counts(x, a) += 1.0;
  }
  return counts;
}

}  // namespace ddc
