#include "ddc/utility.hpp"

#include <algorithm>

namespace ddc {

std::size_t UtilityEvaluation::pair_index(int i, int j, int t) {
  if (i > j) std::swap(i, j);
  return static_cast<std::size_t>(i * t - i * (i - 1) / 2 + (j - i));
}

void UtilityModel::check_theta(const Vector& theta) const {
  require(theta.size() == parameter_count(), "utility: theta length mismatch");
}

UtilityEvaluation UtilityModel::evaluate(const Vector& theta, Order order) const {
  UtilityEvaluation out;
  out.values = values(theta);
  if (order == Order::value) return out;
  out.jacobian = jacobian(theta);
  if (order == Order::gradient) return out;
  const int t = parameter_count();
  const int X = state_count();
  const int A = action_count();
  out.hessian.assign(static_cast<std::size_t>(t * (t + 1) / 2), Matrix::Zero(X, A));
  if (is_linear()) return out;
  Matrix indicator = Matrix::Zero(X, A);
  for (int x = 0; x < X; ++x) {
    for (int a = 0; a < A; ++a) {
      indicator(x, a) = 1.0;
      const Matrix H = weighted_hessian(theta, indicator);
      indicator(x, a) = 0.0;
      for (int i = 0; i < t; ++i) {
        for (int j = i; j < t; ++j) out.hessian[UtilityEvaluation::pair_index(i, j, t)](x, a) = H(i, j);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// LinearUtility

LinearUtility::LinearUtility(std::vector<Matrix> design, double init_low, double init_high)
    : design_(std::move(design)), init_low_(init_low), init_high_(init_high) {
  require(!design_.empty(), "LinearUtility: need at least one action");
  const auto rows = design_.front().rows();
  const auto cols = design_.front().cols();
  require(cols >= 1, "LinearUtility: need at least one parameter");
  for (const auto& W : design_) {
    require(W.rows() == rows && W.cols() == cols, "LinearUtility: inconsistent design shapes");
  }
}

Matrix LinearUtility::values(const Vector& theta) const {
  check_theta(theta);
  Matrix U(state_count(), action_count());
  for (int a = 0; a < action_count(); ++a) U.col(a) = design_[a] * theta;
  return U;
}

std::vector<Matrix> LinearUtility::jacobian(const Vector& theta) const {
  check_theta(theta);
  std::vector<Matrix> J(static_cast<std::size_t>(parameter_count()),
                        Matrix(state_count(), action_count()));
  for (int k = 0; k < parameter_count(); ++k) {
    for (int a = 0; a < action_count(); ++a) J[k].col(a) = design_[a].col(k);
  }
  return J;
}

Vector LinearUtility::pullback(const Vector& theta, const Matrix& G) const {
  check_theta(theta);
  require(G.rows() == state_count() && G.cols() == action_count(), "pullback: shape mismatch");
  Vector g = Vector::Zero(parameter_count());
  for (int a = 0; a < action_count(); ++a) g += design_[a].transpose() * G.col(a);
  return g;
}

Matrix LinearUtility::weighted_hessian(const Vector& theta, const Matrix&) const {
  check_theta(theta);
  return Matrix::Zero(parameter_count(), parameter_count());
}

Vector LinearUtility::init_params(Rng& rng) const {
  Vector theta(parameter_count());
  for (int k = 0; k < parameter_count(); ++k) theta[k] = rng.uniform(init_low_, init_high_);
  return theta;
}

// ---------------------------------------------------------------------------
// MlpUtility

MlpUtility::MlpUtility(std::shared_ptr<const ShapeFunction> shape, Vector action_coef,
                       std::vector<Matrix> extras_basis, std::vector<std::string> extras_names,
                       double extras_low, double extras_high)
    : shape_(std::move(shape)),
      coef_(std::move(action_coef)),
      extras_(std::move(extras_basis)),
      names_(std::move(extras_names)),
      extras_low_(extras_low),
      extras_high_(extras_high) {
  require(shape_ != nullptr, "MlpUtility: missing shape");
  require(coef_.size() >= 1, "MlpUtility: need at least one action");
  for (const auto& B : extras_) {
    require(B.rows() == shape_->state_count() && B.cols() == coef_.size(),
            "MlpUtility: extras basis shape mismatch");
  }
  if (names_.empty()) {
    for (int e = 0; e < extras_count(); ++e) names_.push_back("extra" + std::to_string(e));
  }
  require(static_cast<int>(names_.size()) == extras_count(), "MlpUtility: extras name count");
}

Vector MlpUtility::shape_values(const Vector& theta) const {
  check_theta(theta);
  return shape_->values(theta.head(shape_->parameter_count()));
}

Matrix MlpUtility::values(const Vector& theta) const {
  const Vector h = shape_values(theta);
  Matrix U = h * coef_.transpose();
  const int p = shape_->parameter_count();
  for (int e = 0; e < extras_count(); ++e) U += theta[p + e] * extras_[e];
  return U;
}

std::vector<Matrix> MlpUtility::jacobian(const Vector& theta) const {
  check_theta(theta);
  const int p = shape_->parameter_count();
  const Matrix Jh = shape_->jacobian(theta.head(p));
  std::vector<Matrix> J;
  J.reserve(static_cast<std::size_t>(parameter_count()));
  for (int k = 0; k < p; ++k) J.push_back(Jh.col(k) * coef_.transpose());
  for (int e = 0; e < extras_count(); ++e) J.push_back(extras_[e]);
  return J;
}

Vector MlpUtility::pullback(const Vector& theta, const Matrix& G) const {
  check_theta(theta);
  require(G.rows() == state_count() && G.cols() == action_count(), "pullback: shape mismatch");
  const int p = shape_->parameter_count();
  Vector g(parameter_count());
  g.head(p) = shape_->pullback(theta.head(p), G * coef_);
  for (int e = 0; e < extras_count(); ++e) g[p + e] = G.cwiseProduct(extras_[e]).sum();
  return g;
}

Matrix MlpUtility::weighted_hessian(const Vector& theta, const Matrix& G) const {
  check_theta(theta);
  require(G.rows() == state_count() && G.cols() == action_count(),
          "weighted_hessian: shape mismatch");
  const int p = shape_->parameter_count();
  Matrix H = Matrix::Zero(parameter_count(), parameter_count());
  H.topLeftCorner(p, p) = shape_->weighted_hessian(theta.head(p), G * coef_);
  return H;
}

Vector MlpUtility::init_params(Rng& rng) const {
  Vector theta(parameter_count());
  const int p = shape_->parameter_count();
  theta.head(p) = shape_->init(rng);
  for (int e = 0; e < extras_count(); ++e) theta[p + e] = rng.uniform(extras_low_, extras_high_);
  return theta;
}

// ---------------------------------------------------------------------------

Vector init_params(const UtilityModel& utility, std::uint64_t seed, InitScheme scheme) {
  if (scheme == InitScheme::zeros) return Vector::Zero(utility.parameter_count());
  Rng rng(seed);
  return utility.init_params(rng);
}

Vector inventory_feature_map(int r, int o, int i) {
  Vector f(6);
  f << r, o, i, r * o, r * i, o * i;
  return f;
}

double apply_output_transform(OutputTransform transform, double n, double n0) {
  if (transform == OutputTransform::identity) return n;
  return std::max(n - n0, 0.0);
}

}  // namespace ddc
