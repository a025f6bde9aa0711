#pragma once

// Small synthetic models with known truth, used by tests, the acceptance
// harness and the toy variant of the command-line tool.

#include "ddc/dp.hpp"
#include "ddc/random.hpp"
#include "ddc/utility.hpp"

#include <memory>

namespace ddc {

struct SyntheticModel {
  ModelSpec model;
  std::shared_ptr<const UtilityModel> utility;
  Vector theta;  // truth
};

/// Six-state replacement problem. Action 0 resets the state (cost theta_1),
/// action 1 lets it drift up (cost theta_0 per unit of state). Linear, t = 2.
SyntheticModel toy_model(double beta = 0.95);

/// Random sparse kernel, Gaussian design columns and truth.
SyntheticModel random_linear_model(int states, int actions, int parameters, double beta,
                                   std::uint64_t seed);

/// The toy kernel with a softplus 1 -> 3 -> 1 shape on the current state plus
/// two scalar extras on action 0 (t = 12). Truth drawn from the seed.
SyntheticModel small_mlp_model(double beta, std::uint64_t seed);

/// N observations: state from `shares`, action from P(x).
Matrix multinomial_counts(const Vector& shares, const Matrix& P, long N, Rng& rng);

}  // namespace ddc
