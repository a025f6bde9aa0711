#pragma once

// Estimators for the structural utility parameters: full-solution and
// two-step likelihoods (nfxp, ccp, sc), projection estimators (ufxp, oufxp)
// and the projection-estimator covariance.
//
// Likelihood routes return the log-likelihood (to be maximized); the
// ObjectiveFn adapters return the quantity to minimize.

#include "ddc/dp.hpp"
#include "ddc/optim.hpp"
#include "ddc/utility.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ddc {

struct SampleCounts {
  Matrix counts;       // n_a(x), X x A, integer valued
  Vector state_totals;  // N(x)
  double total = 0.0;   // N
  Vector shares;        // N(x) / N

  static SampleCounts from_counts(const Matrix& counts);
  int state_count() const { return static_cast<int>(counts.rows()); }
  int action_count() const { return static_cast<int>(counts.cols()); }
  /// States with no observations.
  std::vector<bool> zero_share_mask() const;
};

struct EstimatorOptions {
  double tol = 1e-10;
  int threads = 1;
  OptimalSolveOptions optimal;
};

enum class LikelihoodKind { nfxp, ccp, sc };

struct LikelihoodResult {
  double value = 0.0;
  Vector gradient;  // filled for Order::gradient and above
  Matrix hessian;   // filled for Order::hessian
  long inner_iterations = 0;  // iterations of the value fixed point
  Matrix policy;    // model choice probabilities at theta
};

LikelihoodResult nfxp_loglik(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta, const SampleCounts& counts,
                             Order order = Order::value, const EstimatorOptions& options = {},
                             FixedPointLedger* ledger = nullptr);

LikelihoodResult ccp_loglik(const ModelSpec& model, const UtilityModel& utility,
                            const Vector& theta, const SampleCounts& counts, const Matrix& phat,
                            Order order = Order::value, const EstimatorOptions& options = {},
                            FixedPointLedger* ledger = nullptr);

/// Same likelihood as ccp_loglik through the centered value fixed point.
LikelihoodResult sc_loglik(const ModelSpec& model, const UtilityModel& utility,
                           const Vector& theta, const SampleCounts& counts, const Matrix& phat,
                           Order order = Order::value, const EstimatorOptions& options = {},
                           FixedPointLedger* ledger = nullptr);

/// Negative log-likelihood adapter. `model` and `utility` must outlive the
/// returned function; counts and phat are copied. phat is ignored for nfxp.
ObjectiveFn likelihood_objective(LikelihoodKind kind, const ModelSpec& model,
                                 const UtilityModel& utility, const SampleCounts& counts,
                                 const Matrix& phat = {}, const EstimatorOptions& options = {});

/// V_P = V^E + V^W theta for a linear utility under a fixed policy.
struct LinearValueDecomposition {
  Vector entropy_part;  // V^E, X
  Matrix design_part;   // V^W, X x t
};

LinearValueDecomposition linear_value_decomposition(const ModelSpec& model,
                                                    const LinearUtility& utility,
                                                    const Matrix& phat,
                                                    const EstimatorOptions& options = {},
                                                    FixedPointLedger* ledger = nullptr);

/// ccp log-likelihood from a precomputed decomposition; solves no fixed point.
double ccp_loglik_linear(const ModelSpec& model, const LinearUtility& utility,
                         const LinearValueDecomposition& decomposition, const Vector& theta,
                         const SampleCounts& counts);

// ---------------------------------------------------------------------------
// Projection estimators

enum class ProjectionScheme { standard_normal, count_weighted };

struct ProjectionSet {
  int m = 0;
  std::vector<Matrix> Z;        // X x (A-1) each
  std::vector<Vector> weights;  // w_i = -beta sum_a (F_a - F_A)' Z_ia
  std::vector<Vector> duals;    // lambda_i, empty until precomputed
  ProjectionScheme scheme = ProjectionScheme::standard_normal;
  std::vector<bool> row_mask;   // true = row zeroed in every Z_i
  FixedPointLedger ledger;      // cost of the dual precomputation

  bool has_duals() const { return m > 0 && static_cast<int>(duals.size()) == m; }
};

/// Builds weights for given projection matrices (no draw, no m > t check).
ProjectionSet make_projection_set(const ModelSpec& model, std::vector<Matrix> Z,
                                  std::vector<bool> row_mask = {});

/// Draws m matrices. `row_mask` defaults to the zero-share states of counts.
/// Requires m > parameter_count.
ProjectionSet draw_projections(const ModelSpec& model, const SampleCounts& counts, int m,
                               int parameter_count, std::uint64_t seed,
                               ProjectionScheme scheme = ProjectionScheme::standard_normal,
                               const std::vector<bool>* row_mask = nullptr);

/// Solves the m duals under F_phat as one batch.
void precompute_duals(const ModelSpec& model, const Matrix& phat, ProjectionSet& projections,
                      const EstimatorOptions& options = {});

/// Objective sum_i r_i^2 with r_i = c_i + <M_i, U^theta>. The set must hold
/// duals. `model` and `utility` must outlive the problem.
class UfxpProblem {
 public:
  UfxpProblem(const ModelSpec& model, const UtilityModel& utility, const Matrix& phat,
              ProjectionSet projections);

  double objective(const Vector& theta, Vector* gradient = nullptr,
                   Matrix* hessian = nullptr) const;
  Vector residuals(const Vector& theta) const;
  ObjectiveFn as_objective() const;

  const ProjectionSet& projections() const { return projections_; }
  const UtilityModel& utility() const { return utility_; }
  const ModelSpec& model() const { return model_; }
  const Matrix& phat() const { return phat_; }

 private:
  const ModelSpec& model_;
  const UtilityModel& utility_;
  Matrix phat_;
  ProjectionSet projections_;
  std::vector<Matrix> M_;  // X x A
  Vector c_;               // m
};

/// Nested form of the same objective: solve V_phat, form the traces.
double ufxp_objective_nested(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta, const Matrix& phat,
                             const ProjectionSet& projections, const EstimatorOptions& options = {});

MultistartReport ufxp_estimate(const UfxpProblem& problem, const OptimizerConfig& config,
                               int starts, std::uint64_t seed_base, int threads = 1,
                               InitScheme init = InitScheme::kaiming_uniform);

struct OptimalWeights {
  std::vector<Matrix> per_state;        // z(x), (A-1) x t
  std::vector<Vector> jacobian_values;  // dV_phat / dtheta_k
  ProjectionSet second_stage;          // Z_k(x, a) = z(x)(a, k), duals filled
  FixedPointLedger ledger;             // Jacobian batch plus second-stage duals
};

/// Optimal second-stage weights at a first-stage estimate. Solves t Jacobian
/// fixed points and t second-stage duals, each as one batch.
OptimalWeights oufxp_weights(const ModelSpec& model, const UtilityModel& utility,
                             const Vector& theta_first, const Matrix& phat,
                             const SampleCounts& counts, const EstimatorOptions& options = {});

struct OufxpResult {
  RunRecord run;
  OptimalWeights weights;
  EstimatorDiagnostics diagnostics;  // includes the first-stage precomputation
};

OufxpResult oufxp_estimate(const ModelSpec& model, const UtilityModel& utility,
                           const Matrix& phat, const SampleCounts& counts,
                           const Vector& theta_first, const FixedPointLedger& first_stage,
                           const OptimizerConfig& config, const EstimatorOptions& options = {});

/// Direct solve for a linear utility.
Vector oufxp_linear_closed_form(const ModelSpec& model, const LinearUtility& utility,
                                const Matrix& phat, const OptimalWeights& weights);

struct CovarianceReport {
  Matrix sigma_ufxp;                // t x t, for sqrt(N)(theta_hat - theta)
  Matrix d_matrix;                  // m x t
  std::vector<Matrix> per_state_sigma;  // A x A
  std::vector<Matrix> per_state_gamma;  // (A-1) x A
};

CovarianceReport ufxp_covariance(const ModelSpec& model, const UtilityModel& utility,
                                 const Vector& theta, const Matrix& phat,
                                 const SampleCounts& counts, const ProjectionSet& projections,
                                 const EstimatorOptions& options = {});

/// dV_phat / dtheta_k for every k, solved as one batch.
std::vector<Vector> value_jacobian(const ModelSpec& model, const UtilityModel& utility,
                                   const Vector& theta, const Matrix& phat,
                                   const EstimatorOptions& options = {},
                                   FixedPointLedger* ledger = nullptr);

ProjectionScheme parse_projection_scheme(const std::string& name);
std::string to_string(ProjectionScheme scheme);
LikelihoodKind parse_likelihood_kind(const std::string& name);

}  // namespace ddc
