#include "ddc/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

namespace ddc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double sup_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

// Shared bookkeeping for one run: counted evaluations, box projection,
// stopping tests and the time budget.
class Run {
 public:
  Run(const ObjectiveFn& objective, const OptimizerConfig& config)
      : objective_(objective), config_(config), started_(Clock::now()) {}

  double eval(const Vector& x, Vector* g, Matrix* H) {
    ++diag_.objective_evals;
    if (g) ++diag_.gradient_evals;
    if (H) ++diag_.hessian_evals;
    return objective_(x, g, H, ledger_);
  }

  Vector project(const Vector& x) const {
    return x.cwiseMax(-config_.bound).cwiseMin(config_.bound);
  }

  // Gradient with components pointing out of the box at an active bound removed.
  Vector projected_gradient(const Vector& x, const Vector& g) const {
    Vector pg = g;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      if ((x[k] >= config_.bound && g[k] < 0) || (x[k] <= -config_.bound && g[k] > 0)) pg[k] = 0;
    }
    return pg;
  }

  bool small_step(const Vector& step, const Vector& x) const {
    return step.norm() <= config_.step_tolerance * std::max(1.0, x.norm());
  }

  bool out_of_time() const {
    return config_.time_budget > 0 && seconds_since(started_) >= config_.time_budget;
  }

  void finish(RunRecord& rec, const Vector& x, double f, const Vector& g) {
    rec.theta_final = x;
    rec.objective_final = f;
    rec.gradient_norm = sup_norm(projected_gradient(x, g));
    if (!std::isfinite(f)) rec.converged = false;
    else if (rec.gradient_norm <= config_.gradient_tolerance) rec.converged = true;
    diag_.workload = ledger_.workload;
    diag_.span = ledger_.span;
    diag_.wall_time = seconds_since(started_);
    rec.diagnostics = diag_;
  }

  const OptimizerConfig& config() const { return config_; }

 private:
  const ObjectiveFn& objective_;
  const OptimizerConfig& config_;
  Clock::time_point started_;
  FixedPointLedger ledger_;
  EstimatorDiagnostics diag_;
};

// ---------------------------------------------------------------------------

void run_adam(Run& run, RunRecord& rec, Vector x) {
  const auto& cfg = run.config();
  Vector g;
  double f = run.eval(x, &g, nullptr);
  if (!std::isfinite(f) || !g.allFinite()) {
    rec.reason = "non-finite objective at start";
    run.finish(rec, x, f, g.size() ? g : Vector::Zero(x.size()));
    return;
  }
  Vector m = Vector::Zero(x.size());
  Vector v = Vector::Zero(x.size());
  double b1t = 1.0;
  double b2t = 1.0;
  const long cap = cfg.iteration_cap();
  rec.reason = "iteration cap";
  for (long it = 0; it < cap; ++it) {
    if (sup_norm(run.projected_gradient(x, g)) <= cfg.gradient_tolerance) {
      rec.reason = "gradient tolerance";
      break;
    }
    if (run.out_of_time()) {
      rec.truncated = true;
      rec.reason = "time budget";
      break;
    }
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g.cwiseAbs2();
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const Vector mhat = m / (1 - b1t);
    const Vector vhat = v / (1 - b2t);
    const Vector step = -cfg.learning_rate * mhat.array() / (vhat.array().sqrt() + cfg.epsilon);
    const Vector xn = run.project(x + step);
    const Vector taken = xn - x;
    Vector gn;
    const double fn = run.eval(xn, &gn, nullptr);
    rec.iterations = it + 1;
    if (!std::isfinite(fn) || !gn.allFinite()) {
      rec.reason = "non-finite objective";
      break;
    }
    x = xn;
    f = fn;
    g = gn;
    if (run.small_step(taken, x)) {
      rec.reason = "step tolerance";
      break;
    }
  }
  run.finish(rec, x, f, g);
}

// ---------------------------------------------------------------------------

struct LinePoint {
  double alpha;
  double f;
  double dphi;
  Vector x;
  Vector g;
};

// Strong-Wolfe line search along the projected path x + alpha d.
bool wolfe_search(Run& run, const Vector& x, double f0, const Vector& g0, const Vector& d,
                  double alpha0, LinePoint& out) {
  const auto& cfg = run.config();
  const double dphi0 = g0.dot(d);
  auto probe = [&](double alpha) {
    LinePoint p;
    p.alpha = alpha;
    p.x = run.project(x + alpha * d);
    p.f = run.eval(p.x, &p.g, nullptr);
    p.dphi = std::isfinite(p.f) && p.g.allFinite() ? p.g.dot(d)
                                                   : std::numeric_limits<double>::quiet_NaN();
    return p;
  };
  auto sufficient = [&](const LinePoint& p) {
    return std::isfinite(p.f) && p.f <= f0 + cfg.wolfe_c1 * p.alpha * dphi0;
  };
  auto curvature = [&](const LinePoint& p) { return std::abs(p.dphi) <= -cfg.wolfe_c2 * dphi0; };

  auto zoom = [&](LinePoint lo, LinePoint hi, int budget) {
    for (int i = 0; i < budget; ++i) {
      double a;
      // Cubic interpolation when both ends are usable, safeguarded to the interior.
      const double d1 = lo.dphi + hi.dphi - 3 * (lo.f - hi.f) / (lo.alpha - hi.alpha);
      const double disc = d1 * d1 - lo.dphi * hi.dphi;
      const double left = std::min(lo.alpha, hi.alpha);
      const double right = std::max(lo.alpha, hi.alpha);
      if (std::isfinite(hi.f) && std::isfinite(hi.dphi) && disc >= 0) {
        const double d2 = std::copysign(std::sqrt(disc), hi.alpha - lo.alpha);
        a = hi.alpha - (hi.alpha - lo.alpha) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2 * d2);
      } else {
        a = 0.5 * (lo.alpha + hi.alpha);
      }
      const double margin = 0.1 * (right - left);
      if (!std::isfinite(a) || a < left + margin || a > right - margin) a = 0.5 * (left + right);
      LinePoint p = probe(a);
      if (!sufficient(p) || p.f >= lo.f) {
        hi = std::move(p);
      } else {
        if (curvature(p)) {
          out = std::move(p);
          return true;
        }
        if (p.dphi * (hi.alpha - lo.alpha) >= 0) hi = lo;
        lo = std::move(p);
      }
      if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, lo.alpha)) break;
    }
    // Accept the best sufficient-decrease point found.
    if (lo.alpha > 0) {
      out = std::move(lo);
      return true;
    }
    return false;
  };

  LinePoint prev{0.0, f0, dphi0, x, g0};
  double alpha = alpha0;
  for (int i = 0; i < cfg.max_line_search; ++i) {
    LinePoint p = probe(alpha);
    if (!sufficient(p) || (i > 0 && p.f >= prev.f)) {
      return zoom(std::move(prev), std::move(p), cfg.max_line_search);
    }
    if (curvature(p)) {
      out = std::move(p);
      return true;
    }
    if (p.dphi >= 0) return zoom(std::move(p), std::move(prev), cfg.max_line_search);
    prev = std::move(p);
    alpha *= 2.0;
  }
  out = std::move(prev);
  return out.alpha > 0;
}

void run_lbfgs(Run& run, RunRecord& rec, Vector x) {
  const auto& cfg = run.config();
  Vector g;
  double f = run.eval(x, &g, nullptr);
  if (!std::isfinite(f) || !g.allFinite()) {
    rec.reason = "non-finite objective at start";
    run.finish(rec, x, f, g.size() ? g : Vector::Zero(x.size()));
    return;
  }
  std::deque<Vector> S, Y;
  std::deque<double> rho;
  const long cap = cfg.iteration_cap();
  rec.reason = "iteration cap";
  for (long it = 0; it < cap; ++it) {
    if (sup_norm(run.projected_gradient(x, g)) <= cfg.gradient_tolerance) {
      rec.reason = "gradient tolerance";
      break;
    }
    if (run.out_of_time()) {
      rec.truncated = true;
      rec.reason = "time budget";
      break;
    }
    // Two-loop recursion.
    Vector q = g;
    std::vector<double> alpha(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      alpha[i] = rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    double gamma = 1.0;
    if (!S.empty()) gamma = S.back().dot(Y.back()) / Y.back().squaredNorm();
    Vector d = gamma * q;
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double b = rho[i] * Y[i].dot(d);
      d += (alpha[i] - b) * S[i];
    }
    d = -d;
    if (g.dot(d) >= 0) {
      // Not a descent direction; restart from steepest descent.
      S.clear();
      Y.clear();
      rho.clear();
      d = -g;
    }
    const double alpha0 = S.empty() ? std::min(1.0, 1.0 / std::max(sup_norm(g), 1e-300)) : 1.0;
    LinePoint p;
    if (!wolfe_search(run, x, f, g, d, alpha0, p) || !(p.f <= f)) {
      if (!S.empty()) {
        S.clear();
        Y.clear();
        rho.clear();
        continue;
      }
      rec.reason = "line search failed";
      break;
    }
    rec.iterations = it + 1;
    const Vector s = p.x - x;
    const Vector y = p.g - g;
    x = p.x;
    f = p.f;
    g = p.g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      S.push_back(s);
      Y.push_back(y);
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > cfg.memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
    if (run.small_step(s, x)) {
      // A tiny quasi-Newton step can come from stale curvature pairs after a
      // kink; retry from steepest descent before stopping.
      if (S.size() > 1) {
        S.clear();
        Y.clear();
        rho.clear();
        continue;
      }
      rec.reason = "step tolerance";
      break;
    }
  }
  run.finish(rec, x, f, g);
}

// ---------------------------------------------------------------------------

// Steihaug conjugate gradient on min g'p + p'Hp/2 subject to |p| <= radius.
Vector steihaug(const Matrix& H, const Vector& g, double radius, bool* hit_boundary) {
  const Eigen::Index n = g.size();
  Vector p = Vector::Zero(n);
  Vector r = g;
  Vector d = -r;
  *hit_boundary = false;
  const double tol = std::min(0.5, std::sqrt(g.norm())) * g.norm();
  auto to_boundary = [&](const Vector& base, const Vector& dir) {
    const double a = dir.squaredNorm();
    const double b = 2 * base.dot(dir);
    const double c = base.squaredNorm() - radius * radius;
    const double tau = (-b + std::sqrt(std::max(0.0, b * b - 4 * a * c))) / (2 * a);
    return Vector(base + tau * dir);
  };
  if (g.norm() == 0) return p;
  for (Eigen::Index k = 0; k < 2 * n + 10; ++k) {
    const Vector Hd = H * d;
    const double curv = d.dot(Hd);
    if (curv <= 0) {
      *hit_boundary = true;
      return to_boundary(p, d);
    }
    const double alpha = r.squaredNorm() / curv;
    const Vector pn = p + alpha * d;
    if (pn.norm() >= radius) {
      *hit_boundary = true;
      return to_boundary(p, d);
    }
    const Vector rn = r + alpha * Hd;
    p = pn;
    if (rn.norm() <= tol) return p;
    const double beta = rn.squaredNorm() / r.squaredNorm();
    r = rn;
    d = -r + beta * d;
  }
  return p;
}

void run_trust(Run& run, RunRecord& rec, Vector x) {
  const auto& cfg = run.config();
  Vector g;
  Matrix H;
  double f = run.eval(x, &g, &H);
  if (!std::isfinite(f) || !g.allFinite() || !H.allFinite()) {
    rec.reason = "non-finite objective at start";
    run.finish(rec, x, f, g.size() ? g : Vector::Zero(x.size()));
    return;
  }
  double radius = cfg.initial_radius;
  const long cap = cfg.iteration_cap();
  rec.reason = "iteration cap";
  for (long it = 0; it < cap; ++it) {
    if (sup_norm(run.projected_gradient(x, g)) <= cfg.gradient_tolerance) {
      rec.reason = "gradient tolerance";
      break;
    }
    if (run.out_of_time()) {
      rec.truncated = true;
      rec.reason = "time budget";
      break;
    }
    rec.iterations = it + 1;
    bool boundary = false;
    const Vector p = steihaug(H, g, radius, &boundary);
    const double predicted = -(g.dot(p) + 0.5 * p.dot(H * p));
    const Vector xn = run.project(x + p);
    const Vector taken = xn - x;
    Vector gn;
    Matrix Hn;
    const double fn = run.eval(xn, &gn, &Hn);
    const double actual = f - fn;
    const double ratio = predicted > 0 ? actual / predicted : -1.0;
    if (!std::isfinite(fn) || !gn.allFinite() || !Hn.allFinite() || ratio < cfg.shrink_ratio) {
      radius *= 0.25;
    } else if (ratio > cfg.expand_ratio && boundary) {
      radius = std::min(2 * radius, cfg.max_radius);
    }
    if (std::isfinite(fn) && ratio > cfg.accept_ratio && actual > 0) {
      x = xn;
      f = fn;
      g = gn;
      H = Hn;
      if (run.small_step(taken, x)) {
        rec.reason = "step tolerance";
        break;
      }
    } else if (radius < cfg.step_tolerance * std::max(1.0, x.norm())) {
      rec.reason = "trust radius collapsed";
      break;
    }
  }
  run.finish(rec, x, f, g);
}

}  // namespace

long OptimizerConfig::iteration_cap() const {
  if (max_iterations > 0) return max_iterations;
  return kind == OptimizerKind::adam ? 10'000 : 1'000;
}

RunRecord minimize(const ObjectiveFn& objective, const Vector& theta0,
                   const OptimizerConfig& config) {
  require(config.gradient_tolerance > 0 && config.step_tolerance >= 0,
          "optimizer: tolerances must be positive");
  RunRecord rec;
  rec.theta_initial = theta0;
  Run run(objective, config);
  const Vector x0 = run.project(theta0);
  try {
    switch (config.kind) {
      case OptimizerKind::adam: run_adam(run, rec, x0); break;
      case OptimizerKind::lbfgs: run_lbfgs(run, rec, x0); break;
      case OptimizerKind::trust_newton: run_trust(run, rec, x0); break;
    }
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception& e) {
    // Numerical failures inside the objective end this run only.
    rec.reason = e.what();
    rec.converged = false;
    if (rec.theta_final.size() == 0) {
      rec.theta_final = x0;
      rec.objective_final = std::numeric_limits<double>::infinity();
      rec.gradient_norm = std::numeric_limits<double>::infinity();
    }
  }
  return rec;
}

int select_best(const std::vector<RunRecord>& runs, bool* converged_only) {
  auto pick = [&](bool need_converged) {
    int best = -1;
    for (int k = 0; k < static_cast<int>(runs.size()); ++k) {
      const auto& r = runs[k];
      if (!std::isfinite(r.objective_final)) continue;
      if (need_converged && !r.converged) continue;
      if (best < 0 || r.objective_final < runs[best].objective_final ||
          (r.objective_final == runs[best].objective_final &&
           r.start_seed < runs[best].start_seed)) {
        best = k;
      }
    }
    return best;
  };
  int best = pick(true);
  if (converged_only) *converged_only = best >= 0;
  if (best < 0) best = pick(false);
  return best;
}

MultistartReport multistart(const ObjectiveFn& objective, const StartFn& start, int R,
                            std::uint64_t seed_base, const OptimizerConfig& config, int threads,
                            const FixedPointLedger& shared) {
  require(R >= 1, "multistart: need at least one start");
  MultistartReport report;
  report.runs.resize(static_cast<std::size_t>(R));
  const auto t0 = Clock::now();
  parallel_for(R, threads, [&](long k) {
    const std::uint64_t seed = seed_base + static_cast<std::uint64_t>(k);
    RunRecord rec = minimize(objective, start(seed), config);
    rec.start_seed = seed;
    report.runs[static_cast<std::size_t>(k)] = std::move(rec);
  });
  report.best_index = select_best(report.runs, &report.best_converged);
  auto& tot = report.totals;
  tot.workload = shared.workload;
  tot.span = shared.span;
  long run_span = 0;
  for (const auto& r : report.runs) {
    tot.workload += r.diagnostics.workload;
    tot.objective_evals += r.diagnostics.objective_evals;
    tot.gradient_evals += r.diagnostics.gradient_evals;
    tot.hessian_evals += r.diagnostics.hessian_evals;
    run_span = std::max(run_span, r.diagnostics.span);
  }
  // Runs are independent, so their fixed points overlap in time.
  tot.span += run_span;
  tot.wall_time = seconds_since(t0);
  return report;
}

std::vector<bool> inadequacy_flags(const std::vector<double>& errors, double factor) {
  std::vector<bool> flags(errors.size(), false);
  if (errors.empty()) return flags;
  double best = std::numeric_limits<double>::infinity();
  for (double e : errors) {
    if (std::isfinite(e)) best = std::min(best, e);
  }
  for (std::size_t k = 0; k < errors.size(); ++k) {
    flags[k] = !std::isfinite(errors[k]) || errors[k] >= factor * best;
  }
  // The best run is adequate by definition, including the all-zero case.
  for (std::size_t k = 0; k < errors.size(); ++k) {
    if (errors[k] == best) flags[k] = false;
  }
  return flags;
}

int recommended_starts(double inadequate_rate, double miss_probability) {
  require(miss_probability > 0 && miss_probability < 1, "recommended_starts: bad miss probability");
  require(inadequate_rate >= 0 && inadequate_rate <= 1, "recommended_starts: rate outside [0, 1]");
  if (inadequate_rate <= 0) return 1;
  if (inadequate_rate >= 1) throw DomainError("recommended_starts: no adequate run observed");
  return std::max(1, static_cast<int>(std::ceil(std::log(miss_probability) /
                                                std::log(inadequate_rate) - 1e-12)));
}

double speedup_ratio(double bench_avg_time, double ufxp_fxp_time, double ufxp_avg_opt_time,
                     int R) {
  const double denom = ufxp_fxp_time + R * ufxp_avg_opt_time;
  require(denom > 0, "speedup_ratio: zero UFXP time");
  return R * bench_avg_time / denom;
}

double multistart_factor(double fxp_time, double avg_opt_time, int R) {
  const double denom = fxp_time + avg_opt_time;
  require(denom > 0, "multistart_factor: zero time");
  return (fxp_time + R * avg_opt_time) / denom;
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "lbfgs") return OptimizerKind::lbfgs;
  if (name == "trust_newton" || name == "newton") return OptimizerKind::trust_newton;
  throw InvalidArgument("unknown optimizer: " + name);
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::lbfgs: return "lbfgs";
    case OptimizerKind::trust_newton: return "trust_newton";
  }
  return "?";
}

}  // namespace ddc
