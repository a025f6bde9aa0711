#pragma once

// Small fully connected networks with exact first and second derivatives in
// their parameters, evaluated over a fixed batch of inputs.
//
// Parameter layout: every weight matrix in layer order (row-major, out x in),
// followed by every bias vector in layer order. Hidden layers use the chosen
// activation; the single output unit is linear.

#include "ddc/common.hpp"
#include "ddc/random.hpp"

#include <memory>
#include <vector>

namespace ddc {

enum class Activation { relu, softplus };

class Mlp {
 public:
  /// `layers` lists widths from input to output, e.g. {6, 4, 4, 4, 4, 1}.
  Mlp(std::vector<int> layers, Activation activation);

  /// Convenience: `depth` hidden layers of `width` units and one output.
  static Mlp with_hidden(int inputs, int depth, int width, Activation activation);

  int input_dim() const { return layers_.front(); }
  int parameter_count() const { return parameter_count_; }
  int weight_count() const { return weight_count_; }
  int layer_count() const { return static_cast<int>(layers_.size()) - 1; }
  const std::vector<int>& layers() const { return layers_; }
  Activation activation() const { return activation_; }

  /// Offsets of layer l (1-based) weight and bias blocks in the flat vector.
  int weight_offset(int layer) const { return weight_offsets_[layer - 1]; }
  int bias_offset(int layer) const { return bias_offsets_[layer - 1]; }

  Vector forward(const Eigen::Ref<const Vector>& params, const Matrix& inputs) const;

  /// N x p matrix of output derivatives, one row per input.
  Matrix jacobian(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                  Vector* outputs = nullptr) const;

  /// sum_n seeds_n d out_n / d params.
  Vector pullback(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                  const Vector& seeds) const;

  /// sum_n seeds_n d^2 out_n / d params^2 (ReLU curvature is zero).
  Matrix weighted_hessian(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                          const Vector& seeds) const;

  /// Kaiming-uniform weights in +-sqrt(6 / fan_in); biases in +-1/sqrt(fan_in).
  Vector init(Rng& rng) const;

 private:
  struct Pass {
    std::vector<Matrix> z;  // pre-activations, layers 1..L
    std::vector<Matrix> a;  // activations, layers 0..L
  };

  Matrix weight(const Eigen::Ref<const Vector>& params, int layer) const;
  RowVector bias(const Eigen::Ref<const Vector>& params, int layer) const;
  Pass run(const Eigen::Ref<const Vector>& params, const Matrix& inputs) const;
  Matrix act(const Matrix& z) const;
  Matrix act_d1(const Matrix& z) const;
  Matrix act_d2(const Matrix& z) const;

  std::vector<int> layers_;
  Activation activation_;
  std::vector<int> weight_offsets_;
  std::vector<int> bias_offsets_;
  int weight_count_ = 0;
  int parameter_count_ = 0;
};

/// A scalar function of the state with parameter derivatives; the learned
/// part of a network-backed utility.
class ShapeFunction {
 public:
  virtual ~ShapeFunction() = default;
  virtual int parameter_count() const = 0;
  virtual int state_count() const = 0;
  virtual Vector values(const Eigen::Ref<const Vector>& params) const = 0;
  virtual Matrix jacobian(const Eigen::Ref<const Vector>& params) const = 0;  // X x p
  virtual Vector pullback(const Eigen::Ref<const Vector>& params, const Vector& seeds) const = 0;
  virtual Matrix weighted_hessian(const Eigen::Ref<const Vector>& params,
                                  const Vector& seeds) const = 0;
  virtual Vector init(Rng& rng) const = 0;
};

enum class OutputTransform { identity, nonneg_zero_at_origin };

/// h(x) = n(features(x)), or ReLU(n(x) - n(origin(x))) for the nonnegative
/// transform. `origin[x]` indexes the reference state of x.
class MlpShape : public ShapeFunction {
 public:
  MlpShape(Mlp net, Matrix features, OutputTransform transform, std::vector<int> origin = {});

  int parameter_count() const override { return net_.parameter_count(); }
  int state_count() const override { return static_cast<int>(features_.rows()); }
  Vector values(const Eigen::Ref<const Vector>& params) const override;
  Matrix jacobian(const Eigen::Ref<const Vector>& params) const override;
  Vector pullback(const Eigen::Ref<const Vector>& params, const Vector& seeds) const override;
  Matrix weighted_hessian(const Eigen::Ref<const Vector>& params,
                          const Vector& seeds) const override;
  Vector init(Rng& rng) const override { return net_.init(rng); }

  const Mlp& network() const { return net_; }
  OutputTransform transform() const { return transform_; }

 private:
  Vector network_seeds(const Vector& raw, const Vector& seeds) const;

  Mlp net_;
  Matrix features_;
  OutputTransform transform_;
  std::vector<int> origin_;
};

/// h(x) = H1(x) * (1 + H2(x)) with
///   H1(x) = sum over (row j, weight w) in terms1[x] of w * n1(inputs1_j)^2
///   H2(x) = sum over row k in terms2[x] of n2(inputs2_k)^2.
/// Parameters are those of n1 followed by those of n2.
class ComposedShape : public ShapeFunction {
 public:
  struct Term {
    int row;
    double weight;
  };

  ComposedShape(Mlp first, Matrix inputs1, std::vector<std::vector<Term>> terms1, Mlp second,
                Matrix inputs2, std::vector<std::vector<int>> terms2);

  int parameter_count() const override {
    return first_.parameter_count() + second_.parameter_count();
  }
  int state_count() const override { return static_cast<int>(terms1_.size()); }
  Vector values(const Eigen::Ref<const Vector>& params) const override;
  Matrix jacobian(const Eigen::Ref<const Vector>& params) const override;
  Vector pullback(const Eigen::Ref<const Vector>& params, const Vector& seeds) const override;
  Matrix weighted_hessian(const Eigen::Ref<const Vector>& params,
                          const Vector& seeds) const override;
  Vector init(Rng& rng) const override;

 private:
  struct Parts {
    Vector n1, n2;  // network outputs per input row
    Matrix j1, j2;  // network Jacobians (only when requested)
    Vector h1, h2;  // per state
    Matrix g1, g2;  // per-state gradients of H1 and H2 (only when requested)
  };
  Parts evaluate(const Eigen::Ref<const Vector>& params, bool derivatives) const;

  Mlp first_;
  Matrix inputs1_;
  std::vector<std::vector<Term>> terms1_;
  Mlp second_;
  Matrix inputs2_;
  std::vector<std::vector<int>> terms2_;
};

}  // namespace ddc
