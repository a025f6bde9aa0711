#pragma once

// Smooth unconstrained minimizers with box projection, and a multistart
// harness that keeps per-run fixed-point ledgers.

#include "ddc/dp.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ddc {

struct EstimatorDiagnostics {
  long workload = 0;
  long span = 0;
  double wall_time = 0.0;
  long objective_evals = 0;
  long gradient_evals = 0;
  long hessian_evals = 0;
};

/// Returns f(theta); fills the gradient / Hessian when the pointers are set.
/// Fixed points solved during the call are recorded in `ledger`.
using ObjectiveFn = std::function<double(const Vector& theta, Vector* gradient, Matrix* hessian,
                                         FixedPointLedger& ledger)>;

enum class OptimizerKind { adam, lbfgs, trust_newton };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::lbfgs;
  long max_iterations = 0;  // 0 picks the per-kind default (1e4 Adam, 1e3 otherwise)
  double gradient_tolerance = 1e-6;
  double step_tolerance = 1e-10;
  double bound = 1e3;          // box |theta_k| <= bound
  double time_budget = 0.0;    // seconds per run, 0 = unlimited

  // Adam
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // L-BFGS
  int memory = 10;
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search = 40;

  // Trust region
  double initial_radius = 1.0;
  double max_radius = 1e3;
  double accept_ratio = 1e-4;   // eta_1
  double expand_ratio = 0.75;   // eta_2
  double shrink_ratio = 0.25;

  long iteration_cap() const;
};

struct RunRecord {
  std::uint64_t start_seed = 0;
  Vector theta_initial;
  Vector theta_final;
  double objective_final = 0.0;
  double gradient_norm = 0.0;
  bool converged = false;
  bool truncated = false;  // time budget hit
  long iterations = 0;
  std::string reason;
  EstimatorDiagnostics diagnostics;
};

RunRecord minimize(const ObjectiveFn& objective, const Vector& theta0,
                   const OptimizerConfig& config);

struct MultistartReport {
  std::vector<RunRecord> runs;
  int best_index = -1;
  bool best_converged = false;  // false when no run met the gradient test
  EstimatorDiagnostics totals;  // sum over runs plus shared precomputation
};

/// Draws the start for a seed.
using StartFn = std::function<Vector(std::uint64_t seed)>;

/// R runs with seeds seed_base, ..., seed_base + R - 1. `shared` holds fixed
/// points solved once for the whole batch and is added to the totals once.
MultistartReport multistart(const ObjectiveFn& objective, const StartFn& start, int R,
                            std::uint64_t seed_base, const OptimizerConfig& config,
                            int threads = 1, const FixedPointLedger& shared = {});

/// Lowest objective among converged runs, ties to the lowest seed. Falls back
/// to all finite runs when none converged. Returns -1 when every run failed.
int select_best(const std::vector<RunRecord>& runs, bool* converged_only = nullptr);

/// errors[k] >= factor * min(errors) flags run k as inadequate.
std::vector<bool> inadequacy_flags(const std::vector<double>& errors, double factor = 1.5);

/// ceil(log(0.01) / log(inadequate_rate)): starts needed for a 99% chance of
/// at least one adequate run.
int recommended_starts(double inadequate_rate, double miss_probability = 0.01);

/// R * bench / (fxp + R * opt).
double speedup_ratio(double bench_avg_time, double ufxp_fxp_time, double ufxp_avg_opt_time,
                     int R);

/// (fxp + R * opt) / (fxp + opt): cost of R starts relative to one.
double multistart_factor(double fxp_time, double avg_opt_time, int R);

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

}  // namespace ddc
