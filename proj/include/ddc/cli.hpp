#pragma once

// Experiment configuration, the simulate / estimate / report / profile-beta
// pipeline and the delimited tables it emits.

#include "ddc/estimators.hpp"
#include "ddc/inventory.hpp"
#include "ddc/optim.hpp"

#include <json.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ddc::cli {

/// Invalid configuration or inputs that do not fit together. Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_all_failed = 3, exit_io = 4 };

struct ModelSection {
  std::string variant = "540";  // "toy", "540" or "5400"
  std::optional<double> discount;
  long panel_size = 1'073'679;
  long burn_in = 10'000;
  std::uint64_t panel_seed = 1;
  double eta = 2.0;
  double kappa = 5.0;
  nlohmann::json overrides = nlohmann::json::object();
};

struct UtilitySection {
  std::string kind = "mlp";  // "linear" (toy) or "mlp" (inventory)
  int depth = 4;
  int width = 4;
  Activation activation = Activation::softplus;
  OutputTransform transform = OutputTransform::nonneg_zero_at_origin;
};

struct EstimatorSection {
  std::string kind = "ufxp";  // ufxp, oufxp, nfxp, ccp, sc
  int projections = 100;
  ProjectionScheme scheme = ProjectionScheme::count_weighted;
  bool mask_zero_share = true;
  double tol = 1e-10;
  std::uint64_t projection_seed = 1;
  int threads = 1;
  CcpSmoothing smoothing;
};

struct OptimizerSection {
  OptimizerConfig config;
  int starts = 1;
  std::uint64_t seed_base = 1;
  InitScheme init = InitScheme::kaiming_uniform;
};

struct OutputSection {
  std::string directory = "out";
  char delimiter = ',';
};

struct ExperimentConfig {
  ModelSection model;
  UtilitySection utility;
  EstimatorSection estimator;
  OptimizerSection optimizer;
  OutputSection output;
  nlohmann::json document;  // normalized input, overrides applied
  std::uint64_t hash = 0;   // FNV-1a of document.dump()

  bool is_toy() const { return model.variant == "toy"; }
  std::string hash_hex() const;
  /// Inventory parameters with overrides applied. Throws for the toy variant.
  InventoryParams inventory_params() const;
  std::string network_label() const;
};

/// Parses and validates. Unknown keys, wrong types and bad values raise
/// ConfigError naming the field (and line and column for syntax errors).
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig parse_config(const nlohmann::json& document);
ExperimentConfig load_config(const std::string& path);

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> starts;
  std::optional<double> time_budget;
};

/// Applies command-line overrides to the document and reparses, so the hash
/// covers them. The seed sets both the panel seed and the start seed base.
ExperimentConfig with_overrides(const ExperimentConfig& config, const CliOverrides& overrides);

std::string hex64(std::uint64_t v);

/// Grid fingerprint that panels and bundles carry.
std::uint64_t grid_hash(const ExperimentConfig& config);

struct SimulateResult {
  std::string panel_path;
  std::string truth_path;
  long records = 0;
};

/// Writes panel.bin and truth.json (V*, P*, true h or theta) into out_dir.
SimulateResult cmd_simulate(const ExperimentConfig& config, const std::string& out_dir);

struct EstimateResult {
  nlohmann::json bundle;
  std::string path;
  bool all_failed = false;
};

/// Reads out_dir/panel.bin, pre-estimates, runs the configured estimator and
/// writes result-<estimator>-<optimizer>.json.
EstimateResult cmd_estimate(const ExperimentConfig& config, const std::string& out_dir);

struct Table {
  std::string name;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Speedup at R in {1, 21}, workload / span, error CDF, h curves and the
/// inadequacy summary. Bundles from different grids are rejected.
std::vector<Table> build_report(const std::vector<nlohmann::json>& bundles);
std::string format_table(const Table& table, char delimiter);
void write_tables(const std::vector<Table>& tables, const std::string& out_dir, char delimiter);

struct BetaProfilePoint {
  double beta = 0.0;
  double objective = 0.0;
  bool converged = false;
  Vector theta;
};

/// Minimized UFXP objective over an evenly spaced discount grid. The duals for
/// every grid point come from one discount series per projection.
std::vector<BetaProfilePoint> cmd_profile_beta(const ExperimentConfig& config,
                                               const std::string& out_dir, double beta_min,
                                               double beta_max, int steps);

/// Full command line: verb and flags. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ddc::cli
