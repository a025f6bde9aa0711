#pragma once

// Discrete-choice primitives for additive i.i.d. Gumbel shocks.
//
// Conventions: the reference action is the last index (A - 1 in code). A
// "differenced" vector has length A - 1 and holds c_a - c_ref.

#include "ddc/common.hpp"

#include <cstdint>

namespace ddc {

enum class ErrorFamily { gumbel };

struct ChoiceKernel {
  static constexpr double euler_gamma = 0.57721566490153286061;

  explicit ChoiceKernel(int actions, ErrorFamily family = ErrorFamily::gumbel);

  int action_count;
  ErrorFamily error_family;
};

/// Expected maximum utility  gamma + log(sum exp(c_a)).
double social_surplus(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& c);

/// gamma - sum p_a log p_a. Requires a strictly interior p.
double entropy_term(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& p);

/// Softmax over the lifted vector (dv, 0).
Vector choice_probabilities(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& dv);

/// Log-odds against the reference action.
Vector inverse_choice(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& p);

// Row-wise versions over an X x (A-1) or X x A matrix.
Matrix choice_probabilities_rows(const ChoiceKernel& kernel, const Matrix& dv);
Matrix inverse_choice_rows(const ChoiceKernel& kernel, const Matrix& p);
Vector social_surplus_rows(const ChoiceKernel& kernel, const Matrix& c);
Vector entropy_rows(const ChoiceKernel& kernel, const Matrix& p);

// Normalizing operators.
Vector difference(const Eigen::Ref<const Vector>& v);  // A -> A-1
Vector lift(const Eigen::Ref<const Vector>& v);        // A-1 -> A
Vector center(const Eigen::Ref<const Vector>& v);      // mean removal
Matrix difference_rows(const Matrix& c);               // X x A -> X x (A-1)

/// d rho / d v, an A x (A-1) matrix evaluated at probabilities p.
Matrix choice_jacobian(const Eigen::Ref<const Vector>& p);

/// d rho^{-1} / d p, an (A-1) x A matrix evaluated at interior p.
Matrix inverse_choice_jacobian(const Eigen::Ref<const Vector>& p);

/// diag(p) - p p'.
Matrix choice_covariance(const Eigen::Ref<const Vector>& p);

struct MonteCarloSurplus {
  double surplus;
  double standard_error;
  Vector probs;
};

/// Sample mean of max_a (e_a + c_a) and argmax frequencies over Gumbel draws.
MonteCarloSurplus monte_carlo_surplus(const ChoiceKernel& kernel,
                                      const Eigen::Ref<const Vector>& c, long draw_count,
                                      std::uint64_t seed);

}  // namespace ddc
