#include "ddc/cli.hpp"

#include "ddc/synthetic.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace ddc::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Config parsing

[[noreturn]] void fail(const std::string& field, const std::string& what) {
  throw ConfigError("config: " + field + ": " + what);
}

void check_keys(const json& section, const std::string& name,
                const std::set<std::string>& allowed) {
  if (!section.is_object()) fail(name, "expected an object");
  for (const auto& [key, value] : section.items()) {
    if (!allowed.count(key)) fail(name + "." + key, "unknown key");
  }
}

const json* find(const json& section, const std::string& key) {
  auto it = section.find(key);
  return it == section.end() ? nullptr : &*it;
}

double get_number(const json& s, const std::string& sec, const std::string& key, double def) {
  const json* v = find(s, key);
  if (!v) return def;
  if (!v->is_number()) fail(sec + "." + key, "expected a number");
  return v->get<double>();
}

long get_integer(const json& s, const std::string& sec, const std::string& key, long def) {
  const json* v = find(s, key);
  if (!v) return def;
  if (!v->is_number_integer()) fail(sec + "." + key, "expected an integer");
  return v->get<long>();
}

std::uint64_t get_seed(const json& s, const std::string& sec, const std::string& key,
                       std::uint64_t def) {
  const json* v = find(s, key);
  if (!v) return def;
  if (!v->is_number_integer() || v->get<long long>() < 0) {
    fail(sec + "." + key, "expected a nonnegative integer");
  }
  return v->get<std::uint64_t>();
}

bool get_bool(const json& s, const std::string& sec, const std::string& key, bool def) {
  const json* v = find(s, key);
  if (!v) return def;
  if (!v->is_boolean()) fail(sec + "." + key, "expected true or false");
  return v->get<bool>();
}

std::string get_string(const json& s, const std::string& sec, const std::string& key,
                       const std::string& def) {
  const json* v = find(s, key);
  if (!v) return def;
  if (!v->is_string()) fail(sec + "." + key, "expected a string");
  return v->get<std::string>();
}

template <class F>
auto parse_tag(const std::string& field, const std::string& value, F parse) {
  try {
    return parse(value);
  } catch (const InvalidArgument&) {
    fail(field, "unrecognized value '" + value + "'");
  }
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  throw InvalidArgument("unknown activation");
}

OutputTransform parse_transform(const std::string& name) {
  if (name == "identity") return OutputTransform::identity;
  if (name == "nonneg_zero_at_origin") return OutputTransform::nonneg_zero_at_origin;
  throw InvalidArgument("unknown transform");
}

InitScheme parse_init(const std::string& name) {
  if (name == "kaiming_uniform") return InitScheme::kaiming_uniform;
  if (name == "zeros") return InitScheme::zeros;
  throw InvalidArgument("unknown init");
}

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "softplus"; }

const std::set<std::string> estimator_kinds{"ufxp", "oufxp", "nfxp", "ccp", "sc"};

Vector json_vector(const json& v, const std::string& field, Eigen::Index size) {
  if (!v.is_array() || static_cast<Eigen::Index>(v.size()) != size) {
    fail(field, "expected an array of " + std::to_string(size) + " numbers");
  }
  Vector out(size);
  for (Eigen::Index k = 0; k < size; ++k) {
    if (!v[k].is_number()) fail(field, "expected numbers");
    out[k] = v[k].get<double>();
  }
  return out;
}

Matrix json_matrix(const json& v, const std::string& field, Eigen::Index n) {
  if (!v.is_array() || static_cast<Eigen::Index>(v.size()) != n) {
    fail(field, "expected " + std::to_string(n) + " rows");
  }
  Matrix out(n, n);
  for (Eigen::Index k = 0; k < n; ++k) out.row(k) = json_vector(v[k], field, n).transpose();
  return out;
}

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json to_json(const Matrix& M) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) rows.push_back(to_json(Vector(M.row(i).transpose())));
  return rows;
}

Vector from_json(const json& v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t k = 0; k < v.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[k].get<double>();
  return out;
}

json ledger_json(long workload, long span) { return {{"workload", workload}, {"span", span}}; }

// ---------------------------------------------------------------------------
// Shared experiment state

struct Truth {
  ModelSpec model;
  Matrix utility;                   // true U
  std::shared_ptr<const UtilityModel> toy_utility;  // toy only
  Vector theta;                     // toy only
  std::optional<InventoryModel> inventory;
};

Truth build_truth(const ExperimentConfig& cfg) {
  if (cfg.is_toy()) {
    SyntheticModel toy = toy_model(cfg.model.discount.value_or(0.95));
    Matrix U = toy.utility->values(toy.theta);
    return {toy.model, U, toy.utility, toy.theta, std::nullopt};
  }
  InventoryModel inv = build_true_model(cfg.inventory_params(), cfg.model.eta, cfg.model.kappa);
  return {inv.model, inv.utility, nullptr, Vector(), inv};
}

// Trajectory from a uniform initial state for any small model (dense rows).
SimulatedPanel simulate_chain(const ModelSpec& model, const Matrix& policy, long N,
                              std::uint64_t seed, long burn_in) {
  const int X = model.state_count;
  const int A = model.action_count;
  std::vector<std::vector<double>> next(static_cast<std::size_t>(X * A));
  for (int a = 0; a < A; ++a) {
    const Matrix F = model.kernel.per_action[a].to_dense();
    for (int x = 0; x < X; ++x) {
      auto& cdf = next[x * A + a];
      double s = 0.0;
      for (int y = 0; y < X; ++y) cdf.push_back(s += F(x, y));
    }
  }
  std::vector<std::vector<double>> act(static_cast<std::size_t>(X));
  for (int x = 0; x < X; ++x) {
    double s = 0.0;
    for (int a = 0; a < A; ++a) act[x].push_back(s += policy(x, a));
  }
  SimulatedPanel panel;
  panel.seed = seed;
  panel.burn_in = static_cast<std::uint64_t>(burn_in);
  panel.state_count = X;
  panel.action_count = A;
  Rng rng(seed);
  int x = rng.uniform_int(X);
  for (long step = 0; step < burn_in + N; ++step) {
    const int a = rng.categorical_cdf(act[x]);
    if (step >= burn_in) {
      panel.observations.push_back({static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(a), 0});
    }
    x = rng.categorical_cdf(next[x * A + a]);
  }
  panel.final_state = static_cast<std::uint32_t>(x);
  return panel;
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError("cannot parse " + path + ": " + e.what());
  }
}

OptimalSolve solve_truth(const Truth& truth, double tol) {
  OptimalSolveOptions opts;
  opts.tol = tol;
  return solve_optimal(truth.model, truth.utility, opts);
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string ExperimentConfig::hash_hex() const { return hex64(hash); }

std::string ExperimentConfig::network_label() const {
  if (utility.kind == "linear") return "linear";
  return std::string(activation_name(utility.activation)) + "-" + std::to_string(utility.depth) +
         "x" + std::to_string(utility.width);
}

InventoryParams ExperimentConfig::inventory_params() const {
  if (is_toy()) throw ConfigError("config: model.variant: toy has no inventory parameters");
  InventoryParams p = model.variant == "5400" ? InventoryParams::variant5400()
                                              : InventoryParams::variant540();
  if (model.discount) p.discount = *model.discount;
  const json& o = model.overrides;
  const std::string sec = "model.overrides";
  p.c = get_number(o, sec, "c", p.c);
  p.delta = get_number(o, sec, "delta", p.delta);
  p.alpha = get_number(o, sec, "alpha", p.alpha);
  p.p_o = get_number(o, sec, "p_o", p.p_o);
  p.threshold = static_cast<int>(get_integer(o, sec, "threshold", p.threshold));
  const std::pair<const char*, Vector*> per_r[] = {
      {"mu", &p.mu}, {"tau1", &p.tau1}, {"k1", &p.k1}, {"omega", &p.omega}};
  for (const auto& [key, v] : per_r) {
    if (const json* j = find(o, key)) *v = json_vector(*j, sec + "." + key, p.demand_levels);
  }
  const std::pair<const char*, Vector*> per_o[] = {
      {"tau2", &p.tau2}, {"k2", &p.k2}, {"nu", &p.nu}, {"psi", &p.psi}};
  for (const auto& [key, v] : per_o) {
    if (const json* j = find(o, key)) *v = json_vector(*j, sec + "." + key, p.congestion_levels);
  }
  if (const json* j = find(o, "pi_low")) p.pi_low = json_matrix(*j, sec + ".pi_low", p.demand_levels);
  if (const json* j = find(o, "pi_high")) p.pi_high = json_matrix(*j, sec + ".pi_high", p.demand_levels);
  try {
    p.validate();
  } catch (const InvalidArgument& e) {
    fail(sec, e.what());
  }
  return p;
}

ExperimentConfig parse_config(const json& doc) {
  check_keys(doc, "config", {"model", "utility", "estimator", "optimizer", "output"});
  const json empty = json::object();
  auto section = [&](const char* name) -> const json& {
    const json* s = find(doc, name);
    return s ? *s : empty;
  };
  ExperimentConfig cfg;
  cfg.document = doc;
  cfg.hash = fnv1a64(doc.dump());

  const json& m = section("model");
  check_keys(m, "model",
             {"variant", "discount", "panel_size", "burn_in", "panel_seed", "eta", "kappa",
              "overrides"});
  auto& ms = cfg.model;
  ms.variant = get_string(m, "model", "variant", ms.variant);
  if (ms.variant != "toy" && ms.variant != "540" && ms.variant != "5400") {
    fail("model.variant", "expected \"toy\", \"540\" or \"5400\"");
  }
  if (find(m, "discount")) {
    ms.discount = get_number(m, "model", "discount", 0.0);
    if (!(*ms.discount >= 0.0 && *ms.discount < 1.0)) fail("model.discount", "must be in [0, 1)");
  }
  ms.panel_size = get_integer(m, "model", "panel_size", cfg.is_toy() ? 100'000 : ms.panel_size);
  ms.burn_in = get_integer(m, "model", "burn_in", ms.burn_in);
  if (ms.panel_size < 1) fail("model.panel_size", "must be positive");
  if (ms.burn_in < 0) fail("model.burn_in", "must be nonnegative");
  ms.panel_seed = get_seed(m, "model", "panel_seed", ms.panel_seed);
  ms.eta = get_number(m, "model", "eta", ms.eta);
  ms.kappa = get_number(m, "model", "kappa", ms.kappa);
  if (const json* o = find(m, "overrides")) {
    check_keys(*o, "model.overrides",
               {"c", "delta", "alpha", "p_o", "threshold", "mu", "tau1", "k1", "omega", "tau2",
                "k2", "nu", "psi", "pi_low", "pi_high"});
    if (cfg.is_toy()) fail("model.overrides", "not available for the toy variant");
    ms.overrides = *o;
  }

  const json& u = section("utility");
  check_keys(u, "utility", {"kind", "depth", "width", "activation", "transform"});
  auto& us = cfg.utility;
  us.kind = get_string(u, "utility", "kind", cfg.is_toy() ? "linear" : "mlp");
  if (us.kind != "linear" && us.kind != "mlp") fail("utility.kind", "expected \"linear\" or \"mlp\"");
  if (cfg.is_toy() && us.kind != "linear") fail("utility.kind", "the toy variant is linear");
  if (!cfg.is_toy() && us.kind != "mlp") fail("utility.kind", "inventory variants use \"mlp\"");
  us.depth = static_cast<int>(get_integer(u, "utility", "depth", us.depth));
  us.width = static_cast<int>(get_integer(u, "utility", "width", us.width));
  if (us.depth < 1 || us.width < 1) fail("utility", "depth and width must be positive");
  us.activation = parse_tag("utility.activation", get_string(u, "utility", "activation", "softplus"),
                            parse_activation);
  us.transform = parse_tag("utility.transform",
                           get_string(u, "utility", "transform", "nonneg_zero_at_origin"),
                           parse_transform);

  const json& e = section("estimator");
  check_keys(e, "estimator",
             {"kind", "projections", "scheme", "mask_zero_share", "tol", "projection_seed",
              "threads", "laplace", "bandwidth", "shrink"});
  auto& es = cfg.estimator;
  es.kind = get_string(e, "estimator", "kind", es.kind);
  if (!estimator_kinds.count(es.kind)) fail("estimator.kind", "unrecognized value '" + es.kind + "'");
  es.projections = static_cast<int>(get_integer(e, "estimator", "projections", es.projections));
  if (es.projections < 1) fail("estimator.projections", "must be positive");
  es.scheme = parse_tag("estimator.scheme", get_string(e, "estimator", "scheme", "count_weighted"),
                        parse_projection_scheme);
  es.mask_zero_share = get_bool(e, "estimator", "mask_zero_share", es.mask_zero_share);
  es.tol = get_number(e, "estimator", "tol", es.tol);
  if (!(es.tol > 0)) fail("estimator.tol", "must be positive");
  es.projection_seed = get_seed(e, "estimator", "projection_seed", es.projection_seed);
  es.threads = static_cast<int>(get_integer(e, "estimator", "threads", es.threads));
  if (es.threads < 1) fail("estimator.threads", "must be positive");
  es.smoothing.laplace = get_number(e, "estimator", "laplace", es.smoothing.laplace);
  es.smoothing.bandwidth = get_number(e, "estimator", "bandwidth", es.smoothing.bandwidth);
  es.smoothing.shrink = get_number(e, "estimator", "shrink", es.smoothing.shrink);
  if (!(es.smoothing.laplace > 0 && es.smoothing.bandwidth > 0 && es.smoothing.shrink >= 0)) {
    fail("estimator", "laplace and bandwidth must be positive, shrink nonnegative");
  }

  const json& o = section("optimizer");
  check_keys(o, "optimizer",
             {"kind", "starts", "seed_base", "init", "max_iterations", "gradient_tolerance",
              "step_tolerance", "bound", "time_budget", "learning_rate", "memory",
              "initial_radius"});
  auto& os = cfg.optimizer;
  auto& oc = os.config;
  oc.kind = parse_tag("optimizer.kind", get_string(o, "optimizer", "kind", "lbfgs"),
                      parse_optimizer_kind);
  os.starts = static_cast<int>(get_integer(o, "optimizer", "starts", os.starts));
  if (os.starts < 1) fail("optimizer.starts", "must be positive");
  os.seed_base = get_seed(o, "optimizer", "seed_base", os.seed_base);
  os.init = parse_tag("optimizer.init", get_string(o, "optimizer", "init", "kaiming_uniform"),
                      parse_init);
  oc.max_iterations = get_integer(o, "optimizer", "max_iterations", oc.max_iterations);
  oc.gradient_tolerance = get_number(o, "optimizer", "gradient_tolerance", oc.gradient_tolerance);
  oc.step_tolerance = get_number(o, "optimizer", "step_tolerance", oc.step_tolerance);
  oc.bound = get_number(o, "optimizer", "bound", oc.bound);
  oc.time_budget = get_number(o, "optimizer", "time_budget", oc.time_budget);
  oc.learning_rate = get_number(o, "optimizer", "learning_rate", oc.learning_rate);
  oc.memory = static_cast<int>(get_integer(o, "optimizer", "memory", oc.memory));
  oc.initial_radius = get_number(o, "optimizer", "initial_radius", oc.initial_radius);
  if (oc.max_iterations < 0 || !(oc.gradient_tolerance > 0) || oc.step_tolerance < 0 ||
      !(oc.bound > 0) || oc.time_budget < 0 || !(oc.learning_rate > 0) || oc.memory < 1 ||
      !(oc.initial_radius > 0)) {
    fail("optimizer", "knobs out of range");
  }

  const json& out = section("output");
  check_keys(out, "output", {"directory", "format"});
  cfg.output.directory = get_string(out, "output", "directory", cfg.output.directory);
  const std::string format = get_string(out, "output", "format", "csv");
  if (format == "csv") {
    cfg.output.delimiter = ',';
  } else if (format == "tsv") {
    cfg.output.delimiter = '\t';
  } else {
    fail("output.format", "expected \"csv\" or \"tsv\"");
  }

  if (!cfg.is_toy()) cfg.inventory_params();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t at = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const long line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(at), '\n');
    const auto nl = text.rfind('\n', at == 0 ? 0 : at - 1);
    const long col = static_cast<long>(at - (nl == std::string::npos ? 0 : nl + 1)) + 1;
    throw ConfigError("config: syntax error at line " + std::to_string(line) + ", column " +
                      std::to_string(col));
  }
  return parse_config(doc);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

ExperimentConfig with_overrides(const ExperimentConfig& config, const CliOverrides& o) {
  json doc = config.document;
  if (o.seed) {
    doc["model"]["panel_seed"] = *o.seed;
    doc["optimizer"]["seed_base"] = *o.seed;
  }
  if (o.starts) doc["optimizer"]["starts"] = *o.starts;
  if (o.time_budget) doc["optimizer"]["time_budget"] = *o.time_budget;
  return parse_config(doc);
}

std::uint64_t grid_hash(const ExperimentConfig& cfg) {
  if (!cfg.is_toy()) return cfg.inventory_params().hash();
  return fnv1a64("toy:" + fmt(cfg.model.discount.value_or(0.95)));
}

// ---------------------------------------------------------------------------

SimulateResult cmd_simulate(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_directory(out_dir);
  const Truth truth = build_truth(cfg);
  const OptimalSolve opt = solve_truth(truth, cfg.estimator.tol);
  SimulatedPanel panel =
      truth.inventory ? simulate_panel(*truth.inventory, opt.policy, cfg.model.panel_size,
                                       cfg.model.panel_seed, cfg.model.burn_in)
                      : simulate_chain(truth.model, opt.policy, cfg.model.panel_size,
                                       cfg.model.panel_seed, cfg.model.burn_in);
  panel.params_hash = grid_hash(cfg);

  SimulateResult res;
  res.panel_path = (fs::path(out_dir) / "panel.bin").string();
  res.truth_path = (fs::path(out_dir) / "truth.json").string();
  res.records = static_cast<long>(panel.observations.size());
  write_panel_file(res.panel_path, panel);

  json t;
  t["config_hash"] = cfg.hash_hex();
  t["grid_hash"] = hex64(panel.params_hash);
  t["variant"] = cfg.model.variant;
  t["states"] = truth.model.state_count;
  t["actions"] = truth.model.action_count;
  t["discount"] = truth.model.discount;
  t["panel"] = {{"records", res.records}, {"seed", panel.seed}, {"burn_in", panel.burn_in}};
  t["value"] = to_json(opt.value);
  t["policy"] = to_json(opt.policy);
  if (truth.inventory) {
    t["h_true"] = to_json(truth.inventory->holding);
    t["eta"] = cfg.model.eta;
    t["kappa"] = cfg.model.kappa;
  } else {
    t["theta_true"] = to_json(truth.theta);
  }
  write_text(res.truth_path, t.dump(1));
  return res;
}

namespace {

json run_json(const RunRecord& r) {
  return {{"start_seed", r.start_seed},
          {"converged", r.converged},
          {"truncated", r.truncated},
          {"iterations", r.iterations},
          {"reason", r.reason},
          {"objective", std::isfinite(r.objective_final) ? json(r.objective_final) : json(nullptr)},
          {"gradient_norm", std::isfinite(r.gradient_norm) ? json(r.gradient_norm) : json(nullptr)},
          {"workload", r.diagnostics.workload},
          {"span", r.diagnostics.span},
          {"wall_time", r.diagnostics.wall_time},
          {"theta", to_json(r.theta_final)}};
}

double mean_wall_time(const std::vector<RunRecord>& runs) {
  if (runs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : runs) s += r.diagnostics.wall_time;
  return s / static_cast<double>(runs.size());
}

Matrix frequency_ccp(const Matrix& counts, double laplace) {
  Matrix P = (counts.array() + laplace).matrix();
  for (Eigen::Index x = 0; x < P.rows(); ++x) P.row(x) /= P.row(x).sum();
  return P;
}

struct Prepared {
  Truth truth;
  ModelSpec model;  // estimation model
  std::shared_ptr<const UtilityModel> utility;
  Matrix phat;
  SampleCounts counts;
  std::vector<std::string> flags;
};

Prepared prepare(const ExperimentConfig& cfg, const std::string& out_dir) {
  Truth truth = build_truth(cfg);
  const std::string path = (fs::path(out_dir) / "panel.bin").string();
  const SimulatedPanel panel = read_panel_file(path);
  if (panel.params_hash != grid_hash(cfg) || panel.state_count != truth.model.state_count ||
      panel.action_count != truth.model.action_count) {
    throw ConfigError("panel " + path + " was simulated for a different model");
  }
  if (panel.observations.empty()) throw ConfigError("panel " + path + " is empty");
  const Matrix n = panel.count_matrix();
  if (truth.inventory) {
    const auto& params = truth.inventory->params;
    TransitionEstimates est = preestimate_transitions(params, panel);
    InventoryModel model = build_estimated_model(params, est.primitives);
    auto utility = inventory_mlp_utility(model, cfg.utility.depth, cfg.utility.width,
                                         cfg.utility.activation, cfg.utility.transform);
    Matrix phat = preestimate_ccp(params, n, cfg.estimator.smoothing);
    ModelSpec spec = model.model;
    return {std::move(truth), std::move(spec), utility, std::move(phat),
            SampleCounts::from_counts(n), std::move(est.flags)};
  }
  ModelSpec spec = truth.model;
  auto utility = truth.toy_utility;
  return {std::move(truth), std::move(spec), utility,
          frequency_ccp(n, cfg.estimator.smoothing.laplace), SampleCounts::from_counts(n), {}};
}

ProjectionSet projections_for(const ExperimentConfig& cfg, const ModelSpec& model,
                              const Prepared& p) {
  const int t = p.utility->parameter_count();
  if (cfg.estimator.projections <= t) {
    throw ConfigError("config: estimator.projections must exceed the parameter count (" +
                      std::to_string(t) + ")");
  }
  std::vector<bool> keep_all(static_cast<std::size_t>(model.state_count), false);
  return draw_projections(model, p.counts, cfg.estimator.projections, t,
                          cfg.estimator.projection_seed, cfg.estimator.scheme,
                          cfg.estimator.mask_zero_share ? nullptr : &keep_all);
}

// Error of one estimate: mean |h_hat - h| for inventory, mean |theta - theta0| for the toy.
struct Scored {
  double error = std::numeric_limits<double>::infinity();
  std::optional<RecoveryMetrics> metrics;
};

Scored score(const Prepared& p, const RunRecord& r) {
  Scored s;
  if (!std::isfinite(r.objective_final)) return s;
  if (p.truth.inventory) {
    const auto& mlp = static_cast<const MlpUtility&>(*p.utility);
    s.metrics = recovery_metrics(mlp.shape_values(r.theta_final), p.truth.inventory->holding);
    s.error = s.metrics->l1;
  } else {
    s.error = (r.theta_final - p.truth.theta).cwiseAbs().mean();
  }
  return s;
}

}  // namespace

EstimateResult cmd_estimate(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_directory(out_dir);
  const auto t_total = Clock::now();
  const Prepared p = prepare(cfg, out_dir);
  EstimatorOptions eopts;
  eopts.tol = cfg.estimator.tol;
  eopts.threads = cfg.estimator.threads;
  const auto& ocfg = cfg.optimizer.config;
  const int R = cfg.optimizer.starts;
  const std::string kind = cfg.estimator.kind;

  std::vector<RunRecord> runs;
  std::vector<RunRecord> first_stage;
  EstimatorDiagnostics totals;
  FixedPointLedger precompute;
  double fxp_time = 0.0;
  double opt_time = 0.0;
  int best = -1;

  if (kind == "ufxp" || kind == "oufxp") {
    auto t0 = Clock::now();
    ProjectionSet set = projections_for(cfg, p.model, p);
    precompute_duals(p.model, p.phat, set, eopts);
    fxp_time = seconds_since(t0);
    precompute = set.ledger;
    const UfxpProblem problem(p.model, *p.utility, p.phat, std::move(set));
    MultistartReport rep = ufxp_estimate(problem, ocfg, R, cfg.optimizer.seed_base,
                                         eopts.threads, cfg.optimizer.init);
    opt_time = mean_wall_time(rep.runs);
    if (kind == "ufxp") {
      runs = std::move(rep.runs);
      totals = rep.totals;
      best = rep.best_index;
    } else {
      first_stage = std::move(rep.runs);
      if (rep.best_index < 0) {
        totals = rep.totals;
      } else {
        t0 = Clock::now();
        OufxpResult res = oufxp_estimate(p.model, *p.utility, p.phat, p.counts,
                                         first_stage[rep.best_index].theta_final, precompute,
                                         ocfg, eopts);
        const double second = seconds_since(t0);
        fxp_time += second - res.run.diagnostics.wall_time;
        opt_time += res.run.diagnostics.wall_time;
        precompute.absorb(res.weights.ledger);
        totals = res.diagnostics;
        // First-stage optimizations are part of the OUFXP cost.
        totals.wall_time = rep.totals.wall_time + second;
        runs.push_back(std::move(res.run));
        best = std::isfinite(runs[0].objective_final) ? 0 : -1;
      }
    }
  } else {
    const ObjectiveFn obj = likelihood_objective(parse_likelihood_kind(kind), p.model, *p.utility,
                                                 p.counts, p.phat, eopts);
    const auto& u = *p.utility;
    const InitScheme init = cfg.optimizer.init;
    StartFn start = [&u, init](std::uint64_t seed) { return init_params(u, seed, init); };
    MultistartReport rep = multistart(obj, start, R, cfg.optimizer.seed_base, ocfg, 1);
    runs = std::move(rep.runs);
    totals = rep.totals;
    best = rep.best_index;
    opt_time = mean_wall_time(runs);
  }

  EstimateResult result;
  json& b = result.bundle;
  b["config_hash"] = cfg.hash_hex();
  b["grid"] = {{"variant", cfg.model.variant},
               {"states", p.model.state_count},
               {"actions", p.model.action_count},
               {"hash", hex64(grid_hash(cfg))}};
  if (p.truth.inventory) {
    const auto& ip = p.truth.inventory->params;
    b["grid"]["demand_levels"] = ip.demand_levels;
    b["grid"]["congestion_levels"] = ip.congestion_levels;
    b["grid"]["inventory_levels"] = ip.inventory_levels;
  }
  b["estimator"] = kind;
  b["optimizer"] = to_string(ocfg.kind);
  b["network"] = cfg.network_label();
  b["starts"] = R;
  b["projections"] = (kind == "ufxp" || kind == "oufxp") ? cfg.estimator.projections : 0;
  b["panel_records"] = static_cast<long>(p.counts.total);
  b["preestimation_flags"] = p.flags;
  b["ledger"] = ledger_json(totals.workload, totals.span);
  b["precompute_ledger"] = ledger_json(precompute.workload, precompute.span);
  b["timing"] = {{"fxp_seconds", fxp_time},
                 {"avg_opt_seconds", opt_time},
                 {"estimate_seconds", totals.wall_time},
                 {"total_seconds", seconds_since(t_total)}};

  json jr = json::array();
  int best_error = -1;
  double best_err_value = std::numeric_limits<double>::infinity();
  bool any_ok = false;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    json r = run_json(runs[k]);
    const Scored s = score(p, runs[k]);
    any_ok = any_ok || std::isfinite(runs[k].objective_final);
    r["error"] = std::isfinite(s.error) ? json(s.error) : json(nullptr);
    if (s.metrics) r["functional_r2"] = s.metrics->functional_r2;
    if (s.error < best_err_value) {
      best_err_value = s.error;
      best_error = static_cast<int>(k);
    }
    jr.push_back(std::move(r));
  }
  b["runs"] = std::move(jr);
  if (!first_stage.empty()) {
    json fs_runs = json::array();
    for (const auto& r : first_stage) fs_runs.push_back(run_json(r));
    b["first_stage_runs"] = std::move(fs_runs);
  }
  b["best_index"] = best;
  b["best_by_error_index"] = best_error;
  if (p.truth.inventory) {
    b["h_true"] = to_json(p.truth.inventory->holding);
    const auto& mlp = static_cast<const MlpUtility&>(*p.utility);
    if (best >= 0) b["h_best"] = to_json(mlp.shape_values(runs[best].theta_final));
    if (best_error >= 0) b["h_best_by_error"] = to_json(mlp.shape_values(runs[best_error].theta_final));
  } else {
    b["theta_true"] = to_json(p.truth.theta);
  }

  result.all_failed = !any_ok;
  result.path = (fs::path(out_dir) / ("result-" + kind + "-" + to_string(ocfg.kind) + ".json")).string();
  write_text(result.path, b.dump(1));
  return result;
}

// ---------------------------------------------------------------------------

namespace {

std::string label(const json& b) {
  return b.at("estimator").get<std::string>() + "/" + b.at("optimizer").get<std::string>() + "/" +
         b.at("network").get<std::string>();
}

bool unnested(const json& b) {
  const auto k = b.at("estimator").get<std::string>();
  return k == "ufxp" || k == "oufxp";
}

std::vector<double> run_errors(const json& b) {
  std::vector<double> out;
  for (const auto& r : b.at("runs")) {
    out.push_back(r.at("error").is_null() ? std::numeric_limits<double>::infinity()
                                          : r.at("error").get<double>());
  }
  return out;
}

double mean_run_field(const json& b, const char* key) {
  const auto& runs = b.at("runs");
  if (runs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : runs) s += r.at(key).get<double>();
  return s / static_cast<double>(runs.size());
}

}  // namespace

std::vector<Table> build_report(const std::vector<json>& bundles) {
  require(!bundles.empty(), "report: at least one bundle is required");
  try {
    const json& g0 = bundles.front().at("grid");
    for (const auto& b : bundles) {
      const json& g = b.at("grid");
      if (g.at("hash") != g0.at("hash") || g.at("states") != g0.at("states")) {
        throw ConfigError("report: bundles come from different grids");
      }
    }

    Table speed{"speedup",
                {"benchmark", "unnested", "R", "ratio"},
                {}};
    for (const auto& u : bundles) {
      if (!unnested(u)) continue;
      const double fxp = u.at("timing").at("fxp_seconds").get<double>();
      const double opt = u.at("timing").at("avg_opt_seconds").get<double>();
      for (const auto& n : bundles) {
        if (unnested(n)) continue;
        const double bench = n.at("timing").at("avg_opt_seconds").get<double>();
        for (int R : {1, 21}) {
          speed.rows.push_back({label(n), label(u), std::to_string(R),
                                fmt(speedup_ratio(bench, fxp, opt, R))});
        }
      }
    }

    Table work{"workload_span",
               {"estimator", "runs", "mean_run_workload", "mean_run_span", "precompute_workload",
                "precompute_span", "total_workload", "total_span"},
               {}};
    for (const auto& b : bundles) {
      const auto& led = b.at("ledger");
      const auto& pre = b.at("precompute_ledger");
      work.rows.push_back({label(b), std::to_string(b.at("runs").size()),
                           fmt(mean_run_field(b, "workload")), fmt(mean_run_field(b, "span")),
                           std::to_string(pre.at("workload").get<long>()),
                           std::to_string(pre.at("span").get<long>()),
                           std::to_string(led.at("workload").get<long>()),
                           std::to_string(led.at("span").get<long>())});
    }

    Table cdf{"error_cdf", {"estimator", "error", "cdf"}, {}};
    Table inad{"inadequacy",
               {"estimator", "runs", "min_error", "inadequate", "rate", "recommended_starts"},
               {}};
    for (const auto& b : bundles) {
      std::vector<double> e = run_errors(b);
      std::vector<double> finite;
      for (double v : e) {
        if (std::isfinite(v)) finite.push_back(v);
      }
      std::sort(finite.begin(), finite.end());
      for (std::size_t k = 0; k < finite.size(); ++k) {
        cdf.rows.push_back({label(b), fmt(finite[k]),
                            fmt(static_cast<double>(k + 1) / static_cast<double>(e.size()))});
      }
      if (e.empty()) continue;
      const auto flags = inadequacy_flags(e);
      const long bad = std::count(flags.begin(), flags.end(), true);
      const double rate = static_cast<double>(bad) / static_cast<double>(e.size());
      std::string rec = "1";
      if (rate >= 1.0) {
        rec = "inf";
      } else if (rate > 0.0) {
        rec = std::to_string(recommended_starts(rate));
      }
      inad.rows.push_back({label(b), std::to_string(e.size()),
                           finite.empty() ? "nan" : fmt(finite.front()), std::to_string(bad),
                           fmt(rate), rec});
    }

    Table curves{"h_curves", {"estimator", "r", "o", "i", "h_true", "h_hat"}, {}};
    for (const auto& b : bundles) {
      if (!b.contains("h_best")) continue;
      const json& g = b.at("grid");
      const int O = g.at("congestion_levels").get<int>();
      const int I = g.at("inventory_levels").get<int>();
      const Vector h = from_json(b.at("h_true"));
      const Vector hh = from_json(b.at("h_best"));
      for (Eigen::Index x = 0; x < h.size(); ++x) {
        const int i = static_cast<int>(x % I);
        const int ro = static_cast<int>(x / I);
        curves.rows.push_back({label(b), std::to_string(ro / O + 1), std::to_string(ro % O + 1),
                               std::to_string(i), fmt(h[x]), fmt(hh[x])});
      }
    }
    return {speed, work, cdf, inad, curves};
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report: malformed bundle: ") + e.what());
  }
}

std::string format_table(const Table& t, char delimiter) {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) out += delimiter;
      out += cells[k];
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

void write_tables(const std::vector<Table>& tables, const std::string& out_dir, char delimiter) {
  ensure_directory(out_dir);
  const std::string ext = delimiter == '\t' ? ".tsv" : ".csv";
  for (const auto& t : tables) {
    write_text((fs::path(out_dir) / (t.name + ext)).string(), format_table(t, delimiter));
  }
}

// ---------------------------------------------------------------------------

std::vector<BetaProfilePoint> cmd_profile_beta(const ExperimentConfig& cfg,
                                               const std::string& out_dir, double beta_min,
                                               double beta_max, int steps) {
  if (!(beta_min >= 0 && beta_max < 1 && beta_min <= beta_max) || steps < 1 ||
      (steps == 1) != (beta_min == beta_max)) {
    throw ConfigError("profile-beta: need 0 <= beta-min <= beta-max < 1 and steps >= 1");
  }
  ensure_directory(out_dir);
  const Prepared p = prepare(cfg, out_dir);
  EstimatorOptions eopts;
  eopts.tol = cfg.estimator.tol;

  // Projections and unit-discount weights do not depend on beta: w(beta) = beta * w1.
  const ModelSpec half(p.model.kernel, 0.5);
  const ProjectionSet base = projections_for(cfg, half, p);
  const MarkovMatrix F = MarkovMatrix::mixture(p.model.kernel.per_action, p.phat);
  std::vector<DiscountSeries> series;
  for (const auto& w : base.weights) series.push_back(discount_series(F, (w / 0.5).eval(), 1e-9));

  std::vector<BetaProfilePoint> out;
  json rows = json::array();
  for (int k = 0; k < steps; ++k) {
    const double beta = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * k / (steps - 1);
    const ModelSpec model(p.model.kernel, beta);
    ProjectionSet set = base;
    set.duals.clear();
    for (std::size_t i = 0; i < series.size(); ++i) {
      set.weights[i] = base.weights[i] / 0.5 * beta;
      set.duals.push_back(beta * assemble_dual(series[i], beta));
    }
    set.ledger = {};
    set.ledger.record_batch(set.m);
    const UfxpProblem problem(model, *p.utility, p.phat, std::move(set));
    const MultistartReport rep = ufxp_estimate(problem, cfg.optimizer.config, cfg.optimizer.starts,
                                               cfg.optimizer.seed_base, 1, cfg.optimizer.init);
    BetaProfilePoint pt;
    pt.beta = beta;
    if (rep.best_index >= 0) {
      const auto& r = rep.runs[rep.best_index];
      pt.objective = r.objective_final;
      pt.converged = r.converged;
      pt.theta = r.theta_final;
    } else {
      pt.objective = std::numeric_limits<double>::infinity();
    }
    out.push_back(pt);
  }

  Table t{"profile_beta", {"beta", "objective", "converged"}, {}};
  for (const auto& pt : out) t.rows.push_back({fmt(pt.beta), fmt(pt.objective), pt.converged ? "1" : "0"});
  write_tables({t}, out_dir, cfg.output.delimiter);
  return out;
}

// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic discrete choice estimation experiments", "ddcest"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> starts;
  std::optional<double> budget;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", config_path, "Experiment config (JSON)");
    if (config_required) c->required();
    sub->add_option("--out", out_dir, "Output directory (default: output.directory)");
    sub->add_option("--seed", seed, "Panel seed and start seed base");
    sub->add_option("--starts", starts, "Number of optimizer starts");
    sub->add_option("--time-budget", budget, "Seconds per optimizer run");
  };
  auto* sim = app.add_subcommand("simulate", "Simulate a panel from the true model");
  add_common(sim, true);
  auto* est = app.add_subcommand("estimate", "Pre-estimate and run the configured estimator");
  add_common(est, true);
  auto* rep = app.add_subcommand("report", "Tables and figure data from result bundles");
  add_common(rep, false);
  std::vector<std::string> bundle_paths;
  rep->add_option("bundles", bundle_paths, "Result bundle files")->required();
  auto* prof = app.add_subcommand("profile-beta", "UFXP objective over a discount grid");
  add_common(prof, true);
  double beta_min = 0.0, beta_max = 0.0;
  int beta_steps = 11;
  prof->add_option("--beta-min", beta_min)->required();
  prof->add_option("--beta-max", beta_max)->required();
  prof->add_option("--beta-steps", beta_steps);

  std::vector<const char*> argv{"ddcest"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    std::optional<ExperimentConfig> cfg;
    if (!config_path.empty()) {
      cfg = with_overrides(load_config(config_path), {seed, starts, budget});
    }
    const std::string dir = !out_dir.empty() ? out_dir : cfg ? cfg->output.directory : ".";
    if (*sim) {
      const auto res = cmd_simulate(*cfg, dir);
      out << "simulate: " << res.records << " records -> " << res.panel_path << "\n";
      out << "config " << cfg->hash_hex() << "\n";
      return exit_ok;
    }
    if (*est) {
      const auto res = cmd_estimate(*cfg, dir);
      const auto& b = res.bundle;
      out << "estimate: " << b["estimator"].get<std::string>() << " with "
          << b["runs"].size() << " run(s) -> " << res.path << "\n";
      out << "workload " << b["ledger"]["workload"] << " span " << b["ledger"]["span"] << "\n";
      if (b["best_index"].get<int>() >= 0) {
        const auto& r = b["runs"][b["best_index"].get<std::size_t>()];
        out << "best objective " << r["objective"] << " error " << r["error"];
        if (r.contains("functional_r2")) out << " r2 " << r["functional_r2"];
        out << "\n";
      }
      if (res.all_failed) {
        err << "estimate: all runs failed\n";
        return exit_all_failed;
      }
      return exit_ok;
    }
    if (*rep) {
      std::vector<json> bundles;
      for (const auto& pth : bundle_paths) bundles.push_back(read_json_file(pth));
      const auto tables = build_report(bundles);
      const char delim = cfg ? cfg->output.delimiter : ',';
      write_tables(tables, dir, delim);
      for (const auto& t : tables) {
        if (t.name == "h_curves" || t.name == "error_cdf") {
          out << "# " << t.name << ": " << t.rows.size() << " rows\n";
        } else {
          out << "# " << t.name << "\n" << format_table(t, delim);
        }
      }
      return exit_ok;
    }
    if (*prof) {
      const auto pts = cmd_profile_beta(*cfg, dir, beta_min, beta_max, beta_steps);
      for (const auto& pt : pts) out << fmt(pt.beta) << " " << fmt(pt.objective) << "\n";
      return exit_ok;
    }
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return exit_config;
  } catch (const InvalidArgument& e) {
    err << e.what() << "\n";
    return exit_config;
  } catch (const IoError& e) {
    err << e.what() << "\n";
    return exit_io;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_failure;
}

}  // namespace ddc::cli
