#include "ddc/inventory.hpp"

#include "ddc/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ddc {

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out[k++] = x;
  return out;
}

double poisson_pmf(double mean, int d) {
  if (mean == 0) return d == 0 ? 1.0 : 0.0;
  return std::exp(d * std::log(mean) - mean - std::lgamma(d + 1.0));
}

// Distribution of (i - d)^+ for d ~ Poisson(mean): entry k is P((i - d)^+ = k).
Vector depletion_distribution(double mean, int i) {
  Vector p = Vector::Zero(i + 1);
  double below = 0.0;
  for (int d = 0; d < i; ++d) {
    const double pd = poisson_pmf(mean, d);
    p[i - d] = pd;
    below += pd;
  }
  p[0] = std::max(0.0, 1.0 - below);
  return p;
}

void check_chain(const Matrix& M, int n, const char* what) {
  require(M.rows() == n && M.cols() == n, std::string("inventory: ") + what + " has wrong shape");
  require((M.array() >= 0).all(), std::string("inventory: ") + what + " has negative entries");
  for (int k = 0; k < n; ++k) {
    require(std::abs(M.row(k).sum() - 1.0) <= 1e-10,
            std::string("inventory: ") + what + " rows must sum to one");
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("panel: truncated file");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("panel: truncated file");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

constexpr char panel_magic[8] = {'D', 'D', 'C', 'P', 'A', 'N', 'E', 'L'};
constexpr std::uint32_t panel_version = 1;

std::vector<double> cumulative(const Eigen::Ref<const Vector>& p) {
  std::vector<double> cdf(static_cast<std::size_t>(p.size()));
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) cdf[k] = s += p[k];
  return cdf;
}

}  // namespace

// ---------------------------------------------------------------------------

InventoryParams InventoryParams::variant540() {
  InventoryParams p;
  p.mu = vec({4.5, 6, 7.5, 9, 10.5, 12});
  p.tau1 = vec({0, 1, 2, 3, 4, 5});
  p.k1 = vec({0, 0.05, 0.10, 0.15, 0.20, 0.25});
  p.omega = vec({1.0, 0.8, 0.6, 0.4, 0.2, 0.0});
  p.tau2 = vec({14, 9, 4});
  p.k2 = vec({0.4, 0.7, 1.0});
  p.nu = vec({1.3, 1.1, 0.9});
  p.psi = vec({7.5e-4, 2.5e-4, 1e-4});
  p.pi_low.resize(6, 6);
  p.pi_low << 0.95, 0.05, 0, 0, 0, 0,
              0.25, 0.70, 0.05, 0, 0, 0,
              0, 0.25, 0.70, 0.05, 0, 0,
              0, 0, 0.05, 0.70, 0.25, 0,
              0, 0, 0, 0.05, 0.70, 0.25,
              0, 0, 0, 0, 0.05, 0.95;
  p.pi_high.resize(6, 6);
  p.pi_high << 0.90, 0.10, 0, 0, 0, 0,
               0.25, 0.65, 0.10, 0, 0, 0,
               0, 0.25, 0.65, 0.10, 0, 0,
               0, 0, 0.05, 0.65, 0.30, 0,
               0, 0, 0, 0.05, 0.65, 0.30,
               0, 0, 0, 0, 0.05, 0.95;
  return p;
}

InventoryParams InventoryParams::variant5400() {
  InventoryParams p = variant540();
  p.inventory_levels = 300;
  p.orders = {0, 60, 120, 180};
  p.mu *= 10;
  p.tau1 *= 10;
  p.tau2 *= 10;
  p.c /= 10;
  p.delta /= 10;
  p.alpha /= 10;
  p.psi /= 1000;
  p.threshold = 149;
  return p;
}

int InventoryParams::order_quantity(int a) const {
  require(a >= 0 && a < action_count(), "inventory: action out of range");
  return orders[(a + 1) % action_count()];
}

int InventoryParams::state_index(int r, int o, int i) const {
  require(r >= 1 && r <= demand_levels && o >= 1 && o <= congestion_levels && i >= 0 &&
              i < inventory_levels,
          "inventory: state out of range");
  return ((r - 1) * congestion_levels + (o - 1)) * inventory_levels + i;
}

InventoryParams::State InventoryParams::state_of(int x) const {
  require(x >= 0 && x < state_count(), "inventory: state index out of range");
  const int i = x % inventory_levels;
  const int ro = x / inventory_levels;
  return {ro / congestion_levels + 1, ro % congestion_levels + 1, i};
}

std::uint64_t InventoryParams::hash() const {
  std::string bytes;
  auto add = [&bytes](double v) { bytes.append(reinterpret_cast<const char*>(&v), sizeof v); };
  for (int v : {demand_levels, congestion_levels, inventory_levels, threshold}) add(v);
  for (int q : orders) add(q);
  for (double v : {discount, c, delta, alpha, p_o, pmf_floor}) add(v);
  for (const Vector* v : {&mu, &tau1, &k1, &omega, &tau2, &k2, &nu, &psi}) {
    for (Eigen::Index k = 0; k < v->size(); ++k) add((*v)[k]);
  }
  for (const Matrix* M : {&pi_low, &pi_high}) {
    for (Eigen::Index k = 0; k < M->size(); ++k) add(M->data()[k]);
  }
  return fnv1a64(bytes);
}

void InventoryParams::validate() const {
  require(demand_levels >= 1 && congestion_levels >= 1 && inventory_levels >= 1,
          "inventory: grid sizes must be positive");
  require(orders.size() >= 2 && orders.front() == 0 && std::is_sorted(orders.begin(), orders.end()),
          "inventory: orders must be ascending and start at 0");
  require(discount >= 0 && discount < 1, "inventory: discount must be in [0, 1)");
  for (const Vector* v : {&mu, &tau1, &k1, &omega}) {
    require(v->size() == demand_levels, "inventory: per-r vector has wrong length");
  }
  for (const Vector* v : {&tau2, &k2, &nu, &psi}) {
    require(v->size() == congestion_levels, "inventory: per-o vector has wrong length");
  }
  require((mu.array() >= 0).all(), "inventory: demand means must be nonnegative");
  require(p_o >= 0 && p_o <= 1, "inventory: p_o must be in [0, 1]");
  check_chain(pi_low, demand_levels, "pi_low");
  check_chain(pi_high, demand_levels, "pi_high");
}

double holding_cost(const InventoryParams& p, int r, int o, int i) {
  require(r >= 1 && r <= p.demand_levels && o >= 1 && o <= p.congestion_levels && i >= 0 &&
              i < p.inventory_levels,
          "holding_cost: state out of range");
  const double T = p.tau1[r - 1] + p.tau2[o - 1];
  const double e = std::max(0.0, i - T);
  const double w = p.omega[r - 1];
  return p.c * i + (p.k1[r - 1] + p.k2[o - 1]) * (i >= T ? 1.0 : 0.0) +
         w * p.nu[o - 1] * (1.0 - std::exp(-p.delta * e)) +
         (1.0 - w) * (p.alpha * e + p.psi[o - 1] * e * e * e);
}

double expected_shortage(double mean, int i) {
  require(mean >= 0 && i >= 0, "expected_shortage: bad arguments");
  if (i == 0) return mean;
  double total = 0.0;
  double tail = 1.0;
  for (int d = 0; d <= i; ++d) tail -= poisson_pmf(mean, d);
  for (int d = i + 1; tail > 1e-12 || d <= mean; ++d) {
    const double pd = poisson_pmf(mean, d);
    total += (d - i) * pd;
    tail -= pd;
    if (d > i + 100 && pd < 1e-300) break;
  }
  return total;
}

double expected_shortage(const InventoryParams& params, int r, int i) {
  require(r >= 1 && r <= params.demand_levels, "expected_shortage: r out of range");
  return expected_shortage(params.mu[r - 1], i);
}

InventoryPrimitives true_primitives(const InventoryParams& params) {
  const int O = params.congestion_levels;
  Matrix f_o = Matrix::Constant(O, O, (1.0 - params.p_o) / O);
  f_o.diagonal().array() += params.p_o;
  return {params.mu, params.pi_low, params.pi_high, f_o};
}

TransitionKernel inventory_kernel(const InventoryParams& params, const InventoryPrimitives& prim) {
  params.validate();
  const int R = params.demand_levels;
  const int O = params.congestion_levels;
  const int I = params.inventory_levels;
  const int X = params.state_count();
  const int A = params.action_count();
  require(prim.mu.size() == R, "inventory_kernel: mu has wrong length");
  check_chain(prim.pi_low, R, "estimated pi_low");
  check_chain(prim.pi_high, R, "estimated pi_high");
  check_chain(prim.f_o, O, "estimated f_o");

  // Inventory law per (r, i, action), floored and renormalized.
  std::vector<std::vector<Vector>> next_i(static_cast<std::size_t>(R * I));
  for (int r = 1; r <= R; ++r) {
    for (int i = 0; i < I; ++i) {
      const Vector dep = depletion_distribution(prim.mu[r - 1], i);
      auto& per_action = next_i[(r - 1) * I + i];
      for (int a = 0; a < A; ++a) {
        const int q = params.order_quantity(a);
        Vector p = Vector::Zero(I);
        for (int k = 0; k <= i; ++k) p[std::min(params.max_inventory(), k + q)] += dep[k];
        for (int k = 0; k < I; ++k) {
          if (p[k] < params.pmf_floor) p[k] = 0.0;
        }
        per_action.push_back(p / p.sum());
      }
    }
  }

  std::vector<MarkovMatrix> parts;
  for (int a = 0; a < A; ++a) {
    std::vector<Eigen::Triplet<double>> trip;
    for (int x = 0; x < X; ++x) {
      const auto s = params.state_of(x);
      const Matrix& pi = s.i < params.threshold ? prim.pi_low : prim.pi_high;
      const Vector& pi_i = next_i[(s.r - 1) * I + s.i][a];
      for (int r2 = 1; r2 <= R; ++r2) {
        const double pr = pi(s.r - 1, r2 - 1);
        if (pr == 0) continue;
        for (int o2 = 1; o2 <= O; ++o2) {
          const double po = prim.f_o(s.o - 1, o2 - 1);
          if (po == 0) continue;
          for (int i2 = 0; i2 < I; ++i2) {
            if (pi_i[i2] == 0) continue;
            trip.emplace_back(x, params.state_index(r2, o2, i2), pr * po * pi_i[i2]);
          }
        }
      }
    }
    SparseMatrix F(X, X);
    F.setFromTriplets(trip.begin(), trip.end());
    parts.emplace_back(F);
  }
  return TransitionKernel(std::move(parts));
}

namespace {

InventoryModel assemble(const InventoryParams& params, const InventoryPrimitives& prim) {
  InventoryModel out{params, ModelSpec(inventory_kernel(params, prim), params.discount), {}, {}, {}};
  const int X = params.state_count();
  out.holding.resize(X);
  out.shortage.resize(X);
  for (int x = 0; x < X; ++x) {
    const auto s = params.state_of(x);
    out.holding[x] = holding_cost(params, s.r, s.o, s.i);
    out.shortage[x] = expected_shortage(prim.mu[s.r - 1], s.i);
  }
  return out;
}

}  // namespace

InventoryModel build_true_model(const InventoryParams& params, double eta, double kappa) {
  InventoryModel out = assemble(params, true_primitives(params));
  const int A = params.action_count();
  out.utility.resize(params.state_count(), A);
  for (int a = 0; a < A; ++a) {
    const double ship = params.order_quantity(a) > 0 ? kappa : 0.0;
    out.utility.col(a) = -out.holding - eta * out.shortage - Vector::Constant(params.state_count(), ship);
  }
  return out;
}

InventoryModel build_estimated_model(const InventoryParams& params,
                                     const InventoryPrimitives& prim) {
  return assemble(params, prim);
}

std::shared_ptr<MlpUtility> inventory_mlp_utility(const InventoryModel& model, int depth,
                                                  int width, Activation activation,
                                                  OutputTransform transform) {
  const auto& p = model.params;
  const int X = p.state_count();
  const int A = p.action_count();
  Matrix features(X, 6);
  std::vector<int> origin(static_cast<std::size_t>(X));
  for (int x = 0; x < X; ++x) {
    const auto s = p.state_of(x);
    features.row(x) = inventory_feature_map(s.r, s.o, s.i).transpose();
    origin[x] = p.state_index(s.r, s.o, 0);
  }
  auto shape = std::make_shared<MlpShape>(Mlp::with_hidden(6, depth, width, activation), features,
                                          transform, origin);
  Matrix shortage = -model.shortage * RowVector::Ones(A);
  Matrix shipping = Matrix::Zero(X, A);
  for (int a = 0; a < A; ++a) {
    if (p.order_quantity(a) > 0) shipping.col(a).setConstant(-1.0);
  }
  return std::make_shared<MlpUtility>(shape, Vector::Constant(A, -1.0),
                                      std::vector<Matrix>{shortage, shipping},
                                      std::vector<std::string>{"eta", "kappa"});
}

// ---------------------------------------------------------------------------

Matrix SimulatedPanel::count_matrix() const {
  Matrix n = Matrix::Zero(state_count, action_count);
  for (const auto& ob : observations) n(ob.state, ob.action) += 1.0;
  return n;
}

SimulatedPanel simulate_panel(const InventoryModel& model, const Matrix& policy, long N,
                              std::uint64_t seed, long burn_in) {
  const auto& p = model.params;
  const int X = p.state_count();
  const int A = p.action_count();
  require(policy.rows() == X && policy.cols() == A, "simulate_panel: policy shape mismatch");
  require(N >= 0 && burn_in >= 0, "simulate_panel: negative length");
  const auto prim = true_primitives(p);

  std::vector<std::vector<double>> action_cdf, demand_cdf, low_cdf, high_cdf, o_cdf;
  for (int x = 0; x < X; ++x) action_cdf.push_back(cumulative(policy.row(x).transpose()));
  for (int r = 0; r < p.demand_levels; ++r) {
    std::vector<double> cdf;
    double s = 0.0;
    for (int d = 0; s < 1.0 - 1e-16 && d < 100000; ++d) cdf.push_back(s += poisson_pmf(p.mu[r], d));
    demand_cdf.push_back(std::move(cdf));
    low_cdf.push_back(cumulative(prim.pi_low.row(r).transpose()));
    high_cdf.push_back(cumulative(prim.pi_high.row(r).transpose()));
  }
  for (int o = 0; o < p.congestion_levels; ++o) o_cdf.push_back(cumulative(prim.f_o.row(o).transpose()));

  SimulatedPanel panel;
  panel.seed = seed;
  panel.burn_in = static_cast<std::uint64_t>(burn_in);
  panel.params_hash = p.hash();
  panel.state_count = X;
  panel.action_count = A;
  panel.observations.reserve(static_cast<std::size_t>(N));

  Rng rng(seed);
  int x = rng.uniform_int(X);
  for (long step = 0; step < burn_in + N; ++step) {
    const auto s = p.state_of(x);
    const int a = rng.categorical_cdf(action_cdf[x]);
    const int d = rng.categorical_cdf(demand_cdf[s.r - 1]);
    const auto& rc = s.i < p.threshold ? low_cdf[s.r - 1] : high_cdf[s.r - 1];
    const int r2 = rng.categorical_cdf(rc) + 1;
    const int o2 = rng.categorical_cdf(o_cdf[s.o - 1]) + 1;
    const int i2 = std::min(p.max_inventory(), std::max(0, s.i - d) + p.order_quantity(a));
    if (step >= burn_in) {
      panel.observations.push_back({static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(a),
                                    static_cast<std::uint32_t>(d)});
    }
    x = p.state_index(r2, o2, i2);
  }
  panel.final_state = static_cast<std::uint32_t>(x);
  return panel;
}

Matrix preestimate_ccp(const InventoryParams& params, const Matrix& counts,
                       const CcpSmoothing& smoothing) {
  const int X = params.state_count();
  const int A = params.action_count();
  const int I = params.inventory_levels;
  require(counts.rows() == X && counts.cols() == A, "preestimate_ccp: counts shape mismatch");
  require(smoothing.laplace > 0 && smoothing.bandwidth > 0 && smoothing.shrink >= 0,
          "preestimate_ccp: smoothing constants must be positive");
  const Vector n = counts.rowwise().sum();
  Matrix freq = (counts.array() + smoothing.laplace).matrix();
  for (int x = 0; x < X; ++x) freq.row(x) /= n[x] + smoothing.laplace * A;

  Matrix out(X, A);
  for (int line = 0; line < X / I; ++line) {
    const int base = line * I;
    for (int i = 0; i < I; ++i) {
      RowVector kern = RowVector::Zero(A);
      double wsum = 0.0;
      for (int k = 0; k < I; ++k) {
        const double z = (i - k) / smoothing.bandwidth;
        const double w = n[base + k] * std::exp(-0.5 * z * z);
        kern += w * freq.row(base + k);
        wsum += w;
      }
      kern = wsum > 0 ? RowVector(kern / wsum) : RowVector(freq.row(base + i));
      const double nx = n[base + i];
      const double lam = nx + smoothing.shrink > 0 ? nx / (nx + smoothing.shrink) : 1.0;
      out.row(base + i) = lam * freq.row(base + i) + (1 - lam) * kern;
    }
  }
  return out;
}

TransitionEstimates preestimate_transitions(const InventoryParams& params,
                                            const SimulatedPanel& panel) {
  require(!panel.observations.empty(), "preestimate_transitions: empty panel");
  require(panel.state_count == params.state_count(), "preestimate_transitions: grid mismatch");
  const int R = params.demand_levels;
  const int O = params.congestion_levels;
  const auto truth = true_primitives(params);
  Vector dsum = Vector::Zero(R), dcount = Vector::Zero(R);
  Matrix low = Matrix::Zero(R, R), high = Matrix::Zero(R, R), fo = Matrix::Zero(O, O);
  const auto& obs = panel.observations;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const auto s = params.state_of(static_cast<int>(obs[k].state));
    dsum[s.r - 1] += obs[k].demand;
    dcount[s.r - 1] += 1;
    const std::uint32_t next = k + 1 < obs.size() ? obs[k + 1].state : panel.final_state;
    const auto s2 = params.state_of(static_cast<int>(next));
    (s.i < params.threshold ? low : high)(s.r - 1, s2.r - 1) += 1;
    fo(s.o - 1, s2.o - 1) += 1;
  }

  TransitionEstimates out;
  auto& prim = out.primitives;
  prim.mu.resize(R);
  for (int r = 0; r < R; ++r) {
    if (dcount[r] > 0) {
      prim.mu[r] = dsum[r] / dcount[r];
    } else {
      prim.mu[r] = truth.mu[r];
      out.flags.push_back("mu[r=" + std::to_string(r + 1) + "]: no demand draws, kept prior");
    }
  }
  auto normalize = [&out](Matrix& M, const char* name, bool adjacent) {
    const int n = static_cast<int>(M.rows());
    for (int k = 0; k < n; ++k) {
      const double s = M.row(k).sum();
      if (s > 0) {
        M.row(k) /= s;
        continue;
      }
      M.row(k).setZero();
      for (int j = 0; j < n; ++j) {
        if (!adjacent || std::abs(j - k) <= 1) M(k, j) = 1.0;
      }
      M.row(k) /= M.row(k).sum();
      out.flags.push_back(std::string(name) + "[" + std::to_string(k + 1) +
                          "]: empty row, uniform over reachable states");
    }
  };
  normalize(low, "pi_low", true);
  normalize(high, "pi_high", true);
  normalize(fo, "f_o", false);
  prim.pi_low = low;
  prim.pi_high = high;
  prim.f_o = fo;
  return out;
}

RecoveryMetrics recovery_metrics(const Vector& h_hat, const Vector& h_true) {
  require(h_hat.size() == h_true.size() && h_true.size() > 0, "recovery_metrics: grid mismatch");
  const double mean = h_true.mean();
  const double sst = (h_true.array() - mean).square().sum();
  if (sst == 0) throw DomainError("recovery_metrics: constant h, R^2 undefined");
  const Vector diff = h_hat - h_true;
  return {diff.cwiseAbs().mean(), 1.0 - diff.squaredNorm() / sst};
}

// ---------------------------------------------------------------------------

void write_panel(std::ostream& out, const SimulatedPanel& panel) {
  out.write(panel_magic, sizeof panel_magic);
  put_u32(out, panel_version);
  put_u64(out, panel.params_hash);
  put_u64(out, panel.seed);
  put_u64(out, panel.burn_in);
  put_u32(out, static_cast<std::uint32_t>(panel.state_count));
  put_u32(out, static_cast<std::uint32_t>(panel.action_count));
  put_u64(out, panel.observations.size());
  put_u32(out, panel.final_state);
  for (const auto& ob : panel.observations) {
    put_u32(out, ob.state);
    put_u32(out, ob.action);
    put_u32(out, ob.demand);
  }
  if (!out) throw IoError("panel: write failed");
}

SimulatedPanel read_panel(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, panel_magic, 8) != 0) {
    throw IoError("panel: not a panel file");
  }
  if (get_u32(in) != panel_version) throw IoError("panel: unsupported version");
  SimulatedPanel p;
  p.params_hash = get_u64(in);
  p.seed = get_u64(in);
  p.burn_in = get_u64(in);
  p.state_count = static_cast<int>(get_u32(in));
  p.action_count = static_cast<int>(get_u32(in));
  const std::uint64_t count = get_u64(in);
  p.final_state = get_u32(in);
  p.observations.resize(static_cast<std::size_t>(count));
  for (auto& ob : p.observations) {
    ob.state = get_u32(in);
    ob.action = get_u32(in);
    ob.demand = get_u32(in);
    if (ob.state >= static_cast<std::uint32_t>(p.state_count) ||
        ob.action >= static_cast<std::uint32_t>(p.action_count)) {
      throw IoError("panel: record out of range");
    }
  }
  return p;
}

void write_panel_file(const std::string& path, const SimulatedPanel& panel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("panel: cannot open " + path + " for writing");
  write_panel(out, panel);
}

SimulatedPanel read_panel_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("panel: cannot open " + path);
  return read_panel(in);
}

}  // namespace ddc
