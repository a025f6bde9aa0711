#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ddc/choice.hpp"
#include "ddc/random.hpp"

#include <cmath>
#include <limits>

using namespace ddc;

namespace {

constexpr double kGamma = ChoiceKernel::euler_gamma;

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Vector random_interior(int A, Rng& rng) {
  Vector p(A);
  for (int a = 0; a < A; ++a) p[a] = -std::log(1.0 - rng.uniform()) + 1e-6;
  return p / p.sum();
}

}  // namespace

TEST_CASE("social surplus closed form") {
  const ChoiceKernel k2(2);
  CHECK(social_surplus(k2, vec({0, 0})) == doctest::Approx(kGamma + std::log(2.0)).epsilon(1e-15));
  const ChoiceKernel k1(1);
  CHECK(social_surplus(k1, vec({0})) == doctest::Approx(kGamma).epsilon(1e-15));
  CHECK_THROWS_AS(social_surplus(k2, vec({0, std::nan("")})), InvalidArgument);
  CHECK_THROWS_AS(social_surplus(k2, vec({0, 1, 2})), InvalidArgument);
}

TEST_CASE("social surplus is the maximum of entropy plus expected value on a grid") {
  const ChoiceKernel k(2);
  const Vector c = vec({1, 0});
  double best = -std::numeric_limits<double>::infinity();
  for (int s = 1; s < 10000; ++s) {
    const double p1 = s * 1e-4;
    const Vector p = vec({p1, 1.0 - p1});
    best = std::max(best, entropy_term(k, p) + p.dot(c));
  }
  CHECK(std::abs(best - social_surplus(k, c)) < 1e-6);
}

TEST_CASE("shift invariance") {
  const ChoiceKernel k(4);
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    Vector c(4);
    for (int a = 0; a < 4; ++a) c[a] = 3.0 * rng.normal();
    const double shift = rng.uniform(-10.0, 10.0);
    const double lhs = social_surplus(k, (c.array() + shift).matrix()) - social_surplus(k, c);
    CHECK(std::abs(lhs - shift) < 1e-12);
  }
}

TEST_CASE("entropy term") {
  CHECK(entropy_term(ChoiceKernel(2), vec({0.5, 0.5})) ==
        doctest::Approx(kGamma + std::log(2.0)).epsilon(1e-15));
  CHECK(entropy_term(ChoiceKernel(3), vec({1.0 / 3, 1.0 / 3, 1.0 / 3})) ==
        doctest::Approx(kGamma + std::log(3.0)).epsilon(1e-14));
  const ChoiceKernel k(2);
  const Vector p = vec({0.7311, 0.2689});
  const Vector c = vec({1, 0});
  CHECK(std::abs(entropy_term(k, p) - (social_surplus(k, c) - p.dot(c))) < 1e-4);
  CHECK_THROWS_AS(entropy_term(k, vec({1.0, 0.0})), DomainError);
}

TEST_CASE("conjugate inequality and equality at the choice probabilities") {
  Rng rng(5);
  const ChoiceKernel k(3);
  for (int rep = 0; rep < 5; ++rep) {
    Vector c(3);
    for (int a = 0; a < 3; ++a) c[a] = rng.normal();
    const double nu = social_surplus(k, c);
    for (int i = 0; i < 1000; ++i) {
      const Vector p = random_interior(3, rng);
      CHECK(entropy_term(k, p) + p.dot(c) <= nu + 1e-12);
    }
    const Vector star = choice_probabilities(k, difference(c));
    CHECK(std::abs(entropy_term(k, star) + star.dot(c) - nu) < 1e-8);
  }
}

TEST_CASE("choice probabilities") {
  const Vector u = choice_probabilities(ChoiceKernel(3), vec({0, 0}));
  for (int a = 0; a < 3; ++a) CHECK(u[a] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const Vector p = choice_probabilities(ChoiceKernel(2), vec({1}));
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / (1 + std::exp(1.0))).epsilon(1e-15));
  CHECK(std::abs(p[0] - 0.7311) < 1e-4);
  const Vector sat = choice_probabilities(ChoiceKernel(2), vec({700}));
  CHECK(std::isfinite(sat[0]));
  CHECK(sat[1] < 1e-300);
  CHECK(sat[1] >= 0.0);
  CHECK(sat[0] == 1.0);
}

TEST_CASE("Williams-Daly-Zachary gradient") {
  Rng rng(17);
  for (int A : {2, 3, 5}) {
    const ChoiceKernel k(A);
    for (int rep = 0; rep < 20; ++rep) {
      Vector c(A);
      for (int a = 0; a < A; ++a) c[a] = 2.0 * rng.normal();
      const Vector p = choice_probabilities(k, difference(c));
      for (int a = 0; a < A; ++a) {
        const double h = 1e-5;
        Vector cp = c, cm = c;
        cp[a] += h;
        cm[a] -= h;
        const double fd = (social_surplus(k, cp) - social_surplus(k, cm)) / (2 * h);
        CHECK(std::abs(fd - p[a]) < 1e-6);
      }
    }
  }
}

TEST_CASE("inverse choice") {
  const ChoiceKernel k(2);
  CHECK(inverse_choice(k, vec({0.5, 0.5}))[0] == 0.0);
  const double e = std::exp(1.0);
  CHECK(std::abs(inverse_choice(k, vec({e / (1 + e), 1 / (1 + e)}))[0] - 1.0) < 1e-12);
  // The four-digit rounding of the same point is only good to about 2e-4.
  CHECK(std::abs(inverse_choice(k, vec({0.7311, 0.2689}))[0] - 1.0) < 1e-3);
  CHECK_THROWS_AS(inverse_choice(k, vec({0.0, 1.0})), DomainError);

  Rng rng(99);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int A = 2 + static_cast<int>(i % 4);
    const ChoiceKernel kk(A);
    const Vector p = random_interior(A, rng);
    const Vector back = choice_probabilities(kk, inverse_choice(kk, p));
    worst = std::max(worst, (back - p).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("row-wise forms agree with vector forms") {
  Rng rng(3);
  const ChoiceKernel k(3);
  Matrix C(7, 3);
  for (int x = 0; x < 7; ++x)
    for (int a = 0; a < 3; ++a) C(x, a) = rng.normal();
  const Matrix P = choice_probabilities_rows(k, difference_rows(C));
  const Matrix D = inverse_choice_rows(k, P);
  const Vector S = social_surplus_rows(k, C);
  const Vector E = entropy_rows(k, P);
  for (int x = 0; x < 7; ++x) {
    const Vector c = C.row(x).transpose();
    const Vector p = choice_probabilities(k, difference(c));
    CHECK((P.row(x).transpose() - p).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((D.row(x).transpose() - difference(c)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(S[x] - social_surplus(k, c)) < 1e-14);
    CHECK(std::abs(E[x] - entropy_term(k, p)) < 1e-14);
  }
}

TEST_CASE("normalizing operators") {
  const Vector c = center(vec({1, 2, 3}));
  CHECK(c[0] == -1.0);
  CHECK(c[1] == 0.0);
  CHECK(c[2] == 1.0);
  const Vector d = difference(vec({5, 4, 3}));
  CHECK(d.size() == 2);
  CHECK(d[0] == 2.0);
  CHECK(d[1] == 1.0);
  const Vector l = lift(vec({2, 1}));
  CHECK(l.size() == 3);
  CHECK(l[2] == 0.0);
  Rng rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    Vector x(4);
    for (int i = 0; i < 4; ++i) x[i] = rng.normal();
    CHECK((difference(lift(x)) - x).cwiseAbs().maxCoeff() == 0.0);
    const Vector cx = center(x);
    CHECK(std::abs(cx.sum()) < 1e-14);
    CHECK((center(cx) - cx).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK_THROWS_AS(center(Vector()), InvalidArgument);
  CHECK_THROWS_AS(difference(Vector()), InvalidArgument);
}

TEST_CASE("Jacobian identities") {
  Rng rng(8);
  for (int A : {2, 3, 5}) {
    for (int rep = 0; rep < 100; ++rep) {
      const Vector p = random_interior(A, rng);
      const Matrix I = inverse_choice_jacobian(p) * choice_jacobian(p);
      CHECK((I - Matrix::Identity(A - 1, A - 1)).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  const Vector half = vec({0.5, 0.5});
  const Matrix S = choice_covariance(half);
  CHECK(S(0, 0) == 0.25);
  CHECK(S(0, 1) == -0.25);
  const Matrix G = inverse_choice_jacobian(half);
  CHECK(G(0, 0) == 2.0);
  CHECK(G(0, 1) == -2.0);
  CHECK((G * S * G.transpose())(0, 0) == doctest::Approx(4.0));
  // Finite-difference check of the choice Jacobian.
  const ChoiceKernel k(3);
  const Vector dv = vec({0.3, -0.7});
  const Matrix J = choice_jacobian(choice_probabilities(k, dv));
  for (int j = 0; j < 2; ++j) {
    Vector up = dv, dn = dv;
    up[j] += 1e-6;
    dn[j] -= 1e-6;
    const Vector fd = (choice_probabilities(k, up) - choice_probabilities(k, dn)) / 2e-6;
    CHECK((fd - J.col(j)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("Monte Carlo oracle") {
  const ChoiceKernel k(2);
  const auto mc = monte_carlo_surplus(k, vec({0, 0}), 1'000'000, 2024);
  CHECK(std::abs(mc.surplus - (kGamma + std::log(2.0))) < 3.0 * mc.standard_error);
  const auto mc2 = monte_carlo_surplus(k, vec({1, 0}), 1'000'000, 77);
  CHECK(std::abs(mc2.probs[0] - 0.7311) < 0.002);
  CHECK(std::abs(mc2.probs[1] - 0.2689) < 0.002);
  const auto one = monte_carlo_surplus(k, vec({0, 0}), 1, 5);
  CHECK(std::isfinite(one.surplus));
  CHECK(one.standard_error == 0.0);
  CHECK(one.probs.sum() == 1.0);
  const auto again = monte_carlo_surplus(k, vec({0, 0}), 1, 5);
  CHECK(again.surplus == one.surplus);
  CHECK_THROWS_AS(monte_carlo_surplus(k, vec({0, 0}), 0, 5), InvalidArgument);
}
