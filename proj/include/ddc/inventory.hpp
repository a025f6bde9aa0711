#pragma once

// Grocery-store inventory benchmark: states (r, o, i), order quantities q,
// Poisson demand, an irregular holding cost h(r, o, i), simulation from the
// optimal policy, pre-estimation of CCPs and transitions, recovery metrics.
//
// Code conventions: r in 1..R, o in 1..O, i in 0..I-1, state index
// ((r-1) O + (o-1)) I + i. Action index a maps to q = orders[(a + 1) % A] so
// that q = 0 is the last (reference) action.

#include "ddc/dp.hpp"
#include "ddc/estimators.hpp"
#include "ddc/utility.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace ddc {

struct InventoryParams {
  int demand_levels = 6;
  int congestion_levels = 3;
  int inventory_levels = 30;
  std::vector<int> orders{0, 6, 12, 18};  // ascending, orders[0] = 0
  double discount = 0.9997;
  Vector mu;                  // Poisson demand mean per r
  Vector tau1, k1, omega;     // per r
  Vector tau2, k2, nu, psi;   // per o
  double c = 0.005;
  double delta = 0.15;
  double alpha = 2e-5;
  double p_o = 0.9;
  Matrix pi_low;   // demand chain when i < threshold
  Matrix pi_high;  // demand chain when i >= threshold
  int threshold = 14;
  double pmf_floor = 1e-15;  // inventory-transition entries below this are dropped

  static InventoryParams variant540();
  static InventoryParams variant5400();

  int state_count() const { return demand_levels * congestion_levels * inventory_levels; }
  int action_count() const { return static_cast<int>(orders.size()); }
  int max_inventory() const { return inventory_levels - 1; }
  /// Order quantity of code action a.
  int order_quantity(int a) const;
  int state_index(int r, int o, int i) const;
  struct State {
    int r, o, i;
  };
  State state_of(int x) const;
  /// FNV-1a over the numeric fields.
  std::uint64_t hash() const;
  void validate() const;
};

double holding_cost(const InventoryParams& params, int r, int o, int i);

/// E[(d - i)^+] with d ~ Poisson(mean).
double expected_shortage(double mean, int i);
double expected_shortage(const InventoryParams& params, int r, int i);

/// Transition primitives: demand means, the two demand chains and the
/// congestion chain. The true ones come from the parameters; estimated ones
/// from a panel.
struct InventoryPrimitives {
  Vector mu;
  Matrix pi_low;
  Matrix pi_high;
  Matrix f_o;
};

InventoryPrimitives true_primitives(const InventoryParams& params);

/// F_a for every code action under the given primitives.
TransitionKernel inventory_kernel(const InventoryParams& params, const InventoryPrimitives& prim);

struct InventoryModel {
  InventoryParams params;
  ModelSpec model;
  Vector holding;   // h(x)
  Vector shortage;  // E[(d - i)^+ | r] under the model's demand means
  Matrix utility;   // U_a(x) at the truth; empty for estimated models
};

/// U_a = -h - eta * shortage - kappa * 1{q > 0}.
InventoryModel build_true_model(const InventoryParams& params, double eta = 2.0,
                                double kappa = 5.0);

/// Model for estimation built on pre-estimated primitives.
InventoryModel build_estimated_model(const InventoryParams& params,
                                     const InventoryPrimitives& prim);

/// -h_theta - eta * shortage - kappa * 1{q > 0} with h a network over the six
/// raw features, zeroed at i = 0 and clamped at 0. theta = (network, eta, kappa).
std::shared_ptr<MlpUtility> inventory_mlp_utility(
    const InventoryModel& model, int depth, int width, Activation activation,
    OutputTransform transform = OutputTransform::nonneg_zero_at_origin);

struct PanelObservation {
  std::uint32_t state;
  std::uint32_t action;
  std::uint32_t demand;
};

struct SimulatedPanel {
  std::vector<PanelObservation> observations;
  std::uint32_t final_state = 0;  // state after the last recorded transition
  std::uint64_t seed = 0;
  std::uint64_t burn_in = 0;
  std::uint64_t params_hash = 0;
  int state_count = 0;
  int action_count = 0;

  Matrix count_matrix() const;
  SampleCounts counts() const { return SampleCounts::from_counts(count_matrix()); }
};

/// One trajectory from a uniform initial state; `burn_in` transitions are
/// discarded before N are recorded.
SimulatedPanel simulate_panel(const InventoryModel& model, const Matrix& policy, long N,
                              std::uint64_t seed, long burn_in = 10'000);

struct CcpSmoothing {
  double laplace = 0.1;
  double bandwidth = 1.0;
  double shrink = 2500.0;
};

/// Laplace-smoothed frequencies blended with a count-weighted Gaussian kernel
/// along i by n_x / (n_x + s).
Matrix preestimate_ccp(const InventoryParams& params, const Matrix& counts,
                       const CcpSmoothing& smoothing = {});

struct TransitionEstimates {
  InventoryPrimitives primitives;
  std::vector<std::string> flags;  // empty conditional cells that used the prior
};

/// Poisson MLE of mu per r, empirical demand chains per (r, regime) and the
/// empirical congestion chain.
TransitionEstimates preestimate_transitions(const InventoryParams& params,
                                            const SimulatedPanel& panel);

struct RecoveryMetrics {
  double l1 = 0.0;  // mean |h_hat - h|
  double functional_r2 = 0.0;
};

RecoveryMetrics recovery_metrics(const Vector& h_hat, const Vector& h_true);

/// Binary layout, little-endian: "DDCPANEL", u32 version, u64 params hash,
/// u64 seed, u64 burn-in, u32 states, u32 actions, u64 count, u32 final
/// state, then count records of (u32 state, u32 action, u32 demand).
void write_panel(std::ostream& out, const SimulatedPanel& panel);
SimulatedPanel read_panel(std::istream& in);
void write_panel_file(const std::string& path, const SimulatedPanel& panel);
SimulatedPanel read_panel_file(const std::string& path);

}  // namespace ddc
