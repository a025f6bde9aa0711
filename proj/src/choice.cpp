#include "ddc/choice.hpp"

#include "ddc/random.hpp"

#include <cmath>
#include <limits>

namespace ddc {

namespace {

void require_finite(const Eigen::Ref<const Vector>& v, const char* what) {
  if (!v.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite input");
}

void require_interior(const Eigen::Ref<const Vector>& p, const char* what) {
  for (Eigen::Index a = 0; a < p.size(); ++a) {
    if (!(p[a] > 0.0 && p[a] < 1.0) && !(p.size() == 1 && p[a] == 1.0)) {
      throw DomainError(std::string(what) + ": probability vector is not strictly interior");
    }
  }
}

}  // namespace

ChoiceKernel::ChoiceKernel(int actions, ErrorFamily family)
    : action_count(actions), error_family(family) {
  require(actions >= 1, "ChoiceKernel: action_count must be positive");
}

double social_surplus(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& c) {
  require(c.size() == kernel.action_count, "social_surplus: length mismatch");
  require_finite(c, "social_surplus");
  const double shift = c.maxCoeff();
  return ChoiceKernel::euler_gamma + shift + std::log((c.array() - shift).exp().sum());
}

double entropy_term(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& p) {
  require(p.size() == kernel.action_count, "entropy_term: length mismatch");
  require_interior(p, "entropy_term");
  return ChoiceKernel::euler_gamma - (p.array() * p.array().log()).sum();
}

Vector choice_probabilities(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& dv) {
  require(dv.size() == kernel.action_count - 1, "choice_probabilities: length mismatch");
  require_finite(dv, "choice_probabilities");
  Vector c = lift(dv);
  const double shift = c.maxCoeff();
  c = (c.array() - shift).exp();
  return c / c.sum();
}

Vector inverse_choice(const ChoiceKernel& kernel, const Eigen::Ref<const Vector>& p) {
  require(p.size() == kernel.action_count, "inverse_choice: length mismatch");
  require_interior(p, "inverse_choice");
  const Eigen::Index a_ref = p.size() - 1;
  return (p.head(a_ref).array().log() - std::log(p[a_ref])).matrix();
}

Matrix choice_probabilities_rows(const ChoiceKernel& kernel, const Matrix& dv) {
  require(dv.cols() == kernel.action_count - 1, "choice_probabilities_rows: column mismatch");
  if (!dv.allFinite()) throw InvalidArgument("choice_probabilities_rows: non-finite input");
  const Eigen::Index rows = dv.rows();
  const Eigen::Index A = kernel.action_count;
  Matrix p(rows, A);
  for (Eigen::Index x = 0; x < rows; ++x) {
    double shift = 0.0;
    for (Eigen::Index a = 0; a + 1 < A; ++a) shift = std::max(shift, dv(x, a));
    double total = 0.0;
    for (Eigen::Index a = 0; a + 1 < A; ++a) {
      p(x, a) = std::exp(dv(x, a) - shift);
      total += p(x, a);
    }
    p(x, A - 1) = std::exp(-shift);
    total += p(x, A - 1);
    p.row(x) /= total;
  }
  return p;
}

Matrix inverse_choice_rows(const ChoiceKernel& kernel, const Matrix& p) {
  require(p.cols() == kernel.action_count, "inverse_choice_rows: column mismatch");
  const Eigen::Index A = kernel.action_count;
  Matrix dv(p.rows(), A - 1);
  for (Eigen::Index x = 0; x < p.rows(); ++x) {
    const Vector row = p.row(x).transpose();
    require_interior(row, "inverse_choice_rows");
    const double log_ref = std::log(p(x, A - 1));
    for (Eigen::Index a = 0; a + 1 < A; ++a) dv(x, a) = std::log(p(x, a)) - log_ref;
  }
  return dv;
}

Vector social_surplus_rows(const ChoiceKernel& kernel, const Matrix& c) {
  require(c.cols() == kernel.action_count, "social_surplus_rows: column mismatch");
  if (!c.allFinite()) throw InvalidArgument("social_surplus_rows: non-finite input");
  Vector out(c.rows());
  for (Eigen::Index x = 0; x < c.rows(); ++x) {
    const double shift = c.row(x).maxCoeff();
    out[x] = ChoiceKernel::euler_gamma + shift + std::log((c.row(x).array() - shift).exp().sum());
  }
  return out;
}

Vector entropy_rows(const ChoiceKernel& kernel, const Matrix& p) {
  require(p.cols() == kernel.action_count, "entropy_rows: column mismatch");
  Vector out(p.rows());
  for (Eigen::Index x = 0; x < p.rows(); ++x) {
    const Vector row = p.row(x).transpose();
    require_interior(row, "entropy_rows");
    out[x] = ChoiceKernel::euler_gamma - (row.array() * row.array().log()).sum();
  }
  return out;
}

Vector difference(const Eigen::Ref<const Vector>& v) {
  require(v.size() >= 1, "difference: empty vector");
  const Eigen::Index n = v.size() - 1;
  return (v.head(n).array() - v[n]).matrix();
}

Vector lift(const Eigen::Ref<const Vector>& v) {
  Vector out(v.size() + 1);
  out.head(v.size()) = v;
  out[v.size()] = 0.0;
  return out;
}

Vector center(const Eigen::Ref<const Vector>& v) {
  require(v.size() >= 1, "center: empty vector");
  return (v.array() - v.mean()).matrix();
}

Matrix difference_rows(const Matrix& c) {
  require(c.cols() >= 1, "difference_rows: no columns");
  const Eigen::Index n = c.cols() - 1;
  return c.leftCols(n).colwise() - c.col(n);
}

Matrix choice_jacobian(const Eigen::Ref<const Vector>& p) {
  const Eigen::Index A = p.size();
  Matrix J(A, A - 1);
  for (Eigen::Index j = 0; j < A; ++j) {
    for (Eigen::Index k = 0; k + 1 < A; ++k) {
      J(j, k) = p[j] * ((j == k ? 1.0 : 0.0) - p[k]);
    }
  }
  return J;
}

Matrix inverse_choice_jacobian(const Eigen::Ref<const Vector>& p) {
  require_interior(p, "inverse_choice_jacobian");
  const Eigen::Index A = p.size();
  Matrix G = Matrix::Zero(A - 1, A);
  for (Eigen::Index a = 0; a + 1 < A; ++a) {
    G(a, a) = 1.0 / p[a];
    G(a, A - 1) = -1.0 / p[A - 1];
  }
  return G;
}

Matrix choice_covariance(const Eigen::Ref<const Vector>& p) {
  Matrix S = -p * p.transpose();
  S.diagonal() += p;
  return S;
}

MonteCarloSurplus monte_carlo_surplus(const ChoiceKernel& kernel,
                                      const Eigen::Ref<const Vector>& c, long draw_count,
                                      std::uint64_t seed) {
  require(draw_count >= 1, "monte_carlo_surplus: draw_count must be >= 1");
  require(c.size() == kernel.action_count, "monte_carlo_surplus: length mismatch");
  Rng rng(seed);
  const Eigen::Index A = c.size();
  Vector wins = Vector::Zero(A);
  // Welford accumulation of the realized maxima.
  double mean = 0.0;
  double m2 = 0.0;
  for (long n = 1; n <= draw_count; ++n) {
    double best = -std::numeric_limits<double>::infinity();
    Eigen::Index arg = 0;
    for (Eigen::Index a = 0; a < A; ++a) {
      const double u = c[a] + rng.gumbel();
      if (u > best) {
        best = u;
        arg = a;
      }
    }
    wins[arg] += 1.0;
    const double delta = best - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (best - mean);
  }
  const double variance = draw_count > 1 ? m2 / static_cast<double>(draw_count - 1) : 0.0;
  return {mean, std::sqrt(variance / static_cast<double>(draw_count)),
          wins / static_cast<double>(draw_count)};
}

}  // namespace ddc
