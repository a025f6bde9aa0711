#pragma once

// Per-period utilities U_a^theta(x) with exact parameter derivatives.

#include "ddc/mlp.hpp"

#include <memory>
#include <string>
#include <vector>

namespace ddc {

struct UtilityEvaluation {
  Matrix values;                 // X x A
  std::vector<Matrix> jacobian;  // t slices, X x A
  std::vector<Matrix> hessian;   // upper triangle (i <= j), X x A each

  /// Index of slice (i, j) in `hessian` for i <= j < t.
  static std::size_t pair_index(int i, int j, int t);
};

class UtilityModel {
 public:
  virtual ~UtilityModel() = default;

  virtual int parameter_count() const = 0;
  virtual int state_count() const = 0;
  virtual int action_count() const = 0;

  virtual Matrix values(const Vector& theta) const = 0;
  virtual std::vector<Matrix> jacobian(const Vector& theta) const = 0;

  /// sum_{x,a} G(x,a) dU_a(x)/dtheta.
  virtual Vector pullback(const Vector& theta, const Matrix& G) const = 0;

  /// sum_{x,a} G(x,a) d^2 U_a(x)/dtheta dtheta'.
  virtual Matrix weighted_hessian(const Vector& theta, const Matrix& G) const = 0;

  virtual Vector init_params(Rng& rng) const = 0;

  virtual bool is_linear() const { return false; }

  /// Values and derivatives up to `order`. The Hessian route evaluates one
  /// weighted Hessian per (x, a) cell and is meant for small problems.
  UtilityEvaluation evaluate(const Vector& theta, Order order = Order::value) const;

 protected:
  void check_theta(const Vector& theta) const;
};

/// U_a = W_a theta.
class LinearUtility : public UtilityModel {
 public:
  explicit LinearUtility(std::vector<Matrix> design, double init_low = 0.0,
                         double init_high = 10.0);

  int parameter_count() const override { return static_cast<int>(design_.front().cols()); }
  int state_count() const override { return static_cast<int>(design_.front().rows()); }
  int action_count() const override { return static_cast<int>(design_.size()); }

  Matrix values(const Vector& theta) const override;
  std::vector<Matrix> jacobian(const Vector& theta) const override;
  Vector pullback(const Vector& theta, const Matrix& G) const override;
  Matrix weighted_hessian(const Vector& theta, const Matrix& G) const override;
  Vector init_params(Rng& rng) const override;
  bool is_linear() const override { return true; }

  const std::vector<Matrix>& design() const { return design_; }

 private:
  std::vector<Matrix> design_;
  double init_low_;
  double init_high_;
};

/// U_a(x) = coef_a h(x) + sum_e theta_e B_e(x, a), where h is a learned shape
/// and B_e are fixed basis columns for the scalar extras. theta holds the
/// shape parameters followed by the extras.
class MlpUtility : public UtilityModel {
 public:
  MlpUtility(std::shared_ptr<const ShapeFunction> shape, Vector action_coef,
             std::vector<Matrix> extras_basis, std::vector<std::string> extras_names = {},
             double extras_low = 0.0, double extras_high = 10.0);

  int parameter_count() const override { return shape_->parameter_count() + extras_count(); }
  int state_count() const override { return shape_->state_count(); }
  int action_count() const override { return static_cast<int>(coef_.size()); }
  int shape_parameter_count() const { return shape_->parameter_count(); }
  int extras_count() const { return static_cast<int>(extras_.size()); }
  const std::vector<std::string>& extras_names() const { return names_; }

  Vector shape_values(const Vector& theta) const;

  Matrix values(const Vector& theta) const override;
  std::vector<Matrix> jacobian(const Vector& theta) const override;
  Vector pullback(const Vector& theta, const Matrix& G) const override;
  Matrix weighted_hessian(const Vector& theta, const Matrix& G) const override;
  Vector init_params(Rng& rng) const override;

  const ShapeFunction& shape() const { return *shape_; }

 private:
  std::shared_ptr<const ShapeFunction> shape_;
  Vector coef_;
  std::vector<Matrix> extras_;
  std::vector<std::string> names_;
  double extras_low_;
  double extras_high_;
};

enum class InitScheme { kaiming_uniform, zeros };

/// Seeded parameter draw; `zeros` returns the all-zero vector.
Vector init_params(const UtilityModel& utility, std::uint64_t seed,
                   InitScheme scheme = InitScheme::kaiming_uniform);

/// (r, o, i, r*o, r*i, o*i) on raw integer state values.
Vector inventory_feature_map(int r, int o, int i);

/// Scalar form of the output transforms: n for identity, ReLU(n - n0) for
/// the nonnegative transform.
double apply_output_transform(OutputTransform transform, double n, double n0);

}  // namespace ddc
