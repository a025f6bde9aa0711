#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ddc/utility.hpp"
#include "oracles.hpp"

#include <cmath>
#include <set>

using namespace ddc;

namespace {

struct Grid {
  Matrix features;
  std::vector<int> origin;
};

// Inventory-like grid (r, o, i) with the reference state (r, o, 0).
Grid inventory_grid(int R, int O, int I, int stride = 1) {
  Grid g;
  std::vector<Vector> rows;
  for (int r = 1; r <= R; ++r) {
    for (int o = 1; o <= O; ++o) {
      const int base = static_cast<int>(rows.size());
      for (int i = 0; i < I; i += stride) {
        rows.push_back(inventory_feature_map(r, o, i));
        g.origin.push_back(base);
      }
    }
  }
  g.features.resize(static_cast<Eigen::Index>(rows.size()), 6);
  for (std::size_t k = 0; k < rows.size(); ++k) g.features.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
  return g;
}

MlpUtility make_utility(int depth, int width, Activation act, const Grid& grid,
                        OutputTransform transform = OutputTransform::nonneg_zero_at_origin) {
  auto shape = std::make_shared<MlpShape>(Mlp::with_hidden(6, depth, width, act), grid.features,
                                          transform, grid.origin);
  const int X = static_cast<int>(grid.features.rows());
  Vector coef = -Vector::Ones(3);
  Rng rng(404);
  Matrix shortage(X, 3), order(X, 3);
  for (int x = 0; x < X; ++x) {
    const double s = rng.uniform();
    shortage.row(x).setConstant(-s);
    order.row(x) << -1.0, -1.0, 0.0;
  }
  return MlpUtility(shape, coef, {shortage, order}, {"eta", "kappa"});
}

}  // namespace

TEST_CASE("linear utility") {
  const int X = 4;
  std::vector<Matrix> W(2, Matrix::Identity(X, X));
  const LinearUtility u(W);
  const Vector ones = Vector::Ones(X);
  const Matrix U = u.values(ones);
  CHECK((U.array() - 1.0).abs().maxCoeff() == 0.0);
  Rng rng(1);
  const Vector t1 = oracle::random_vector(X, rng), t2 = oracle::random_vector(X, rng);
  const auto J1 = u.jacobian(t1), J2 = u.jacobian(t2);
  for (int k = 0; k < X; ++k) {
    CHECK((J1[k] - J2[k]).cwiseAbs().maxCoeff() == 0.0);
    CHECK(J1[k].col(0) == W[0].col(k));
  }
  const Matrix G = oracle::random_matrix(X, 2, rng);
  CHECK(u.weighted_hessian(t1, G).cwiseAbs().maxCoeff() == 0.0);
  const auto full = u.evaluate(t1, Order::hessian);
  for (const auto& h : full.hessian) CHECK(h.cwiseAbs().maxCoeff() == 0.0);
  CHECK(u.is_linear());
  CHECK_THROWS_AS(u.values(Vector::Ones(3)), InvalidArgument);
}

TEST_CASE("parameter counts and layout") {
  const Mlp wide = Mlp::with_hidden(6, 2, 6, Activation::relu);
  const Mlp balanced = Mlp::with_hidden(6, 4, 4, Activation::relu);
  const Mlp deep = Mlp::with_hidden(6, 6, 3, Activation::relu);
  CHECK(wide.parameter_count() == 91);
  CHECK(wide.weight_count() == 78);
  CHECK(balanced.parameter_count() == 93);
  CHECK(deep.parameter_count() == 85);
  CHECK(wide.bias_offset(1) == 78);
  CHECK(wide.weight_offset(2) == 36);
  // A hand-built net: out = w2 * relu(w1 x + b1) + b2 with layout (w1, w2, b1, b2).
  const Mlp tiny({1, 1, 1}, Activation::relu);
  Vector p(4);
  p << 2.0, 3.0, -1.0, 0.5;
  Matrix x(2, 1);
  x << 1.0, 0.25;
  const Vector out = tiny.forward(p, x);
  CHECK(out[0] == doctest::Approx(3.0 * 1.0 + 0.5));
  CHECK(out[1] == doctest::Approx(0.5));
}

TEST_CASE("zero network under the nonnegative transform") {
  const Grid grid = inventory_grid(6, 3, 30);
  const auto u = make_utility(4, 4, Activation::relu, grid);
  Vector theta = Vector::Zero(u.parameter_count());
  CHECK(u.shape_values(theta).cwiseAbs().maxCoeff() == 0.0);
  // At the kink every subgradient is taken as zero.
  const auto J = u.jacobian(theta);
  for (int k = 0; k < u.shape_parameter_count(); ++k) CHECK(J[k].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("values at the origin vanish and h is nonnegative") {
  const Grid grid = inventory_grid(6, 3, 30);
  const auto u = make_utility(2, 6, Activation::softplus, grid);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Vector theta = init_params(u, seed);
    const Vector h = u.shape_values(theta);
    CHECK(h.minCoeff() >= 0.0);
    for (std::size_t x = 0; x < grid.origin.size(); ++x) {
      if (grid.origin[x] == static_cast<int>(x)) CHECK(h[static_cast<Eigen::Index>(x)] == 0.0);
    }
  }
}

TEST_CASE("jacobian matches finite differences for every architecture") {
  const Grid grid = inventory_grid(6, 3, 30, 3);
  const int shapes[3][2] = {{2, 6}, {4, 4}, {6, 3}};
  for (auto act : {Activation::softplus, Activation::relu}) {
    for (const auto& s : shapes) {
      const auto u = make_utility(s[0], s[1], act, grid);
      long checked = 0, kinked = 0;
      double worst = 0.0;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Vector theta = init_params(u, 1000 + seed);
        const auto J = u.jacobian(theta);
        for (int k = 0; k < u.parameter_count(); ++k) {
          const double h = 1e-5 * std::max(1.0, std::abs(theta[k]));
          auto diff = [&](double step) {
            Vector tp = theta, tm = theta;
            tp[k] += step;
            tm[k] -= step;
            return Matrix((u.values(tp) - u.values(tm)) / (2 * step));
          };
          const Matrix fd = diff(h);
          {
            // The output ReLU (and ReLU hidden units) are kinked; a step that
            // crosses a kink shows up as disagreement between two step sizes.
            const Matrix fd_small = diff(0.1 * h);
            const Matrix bad = ((fd - fd_small).array().abs() > 1e-6 * fd_small.array().abs().max(1.0)).cast<double>();
            for (Eigen::Index x = 0; x < bad.rows(); ++x) {
              for (Eigen::Index a = 0; a < bad.cols(); ++a) {
                ++checked;
                if (bad(x, a) > 0) {
                  ++kinked;
                  continue;
                }
                worst = std::max(worst, std::abs(fd(x, a) - J[k](x, a)) / std::max(1.0, std::abs(fd(x, a))));
              }
            }
          }
        }
      }
      CAPTURE(static_cast<int>(act));
      CAPTURE(s[0]);
      CAPTURE(s[1]);
      CHECK(worst <= 1e-5);
      CHECK(static_cast<double>(kinked) <= 1e-3 * static_cast<double>(checked));
    }
  }
}

TEST_CASE("pullback agrees with the jacobian") {
  const Grid grid = inventory_grid(3, 2, 10);
  const auto u = make_utility(2, 6, Activation::softplus, grid);
  Rng rng(3);
  const Vector theta = init_params(u, 9);
  const Matrix G = oracle::random_matrix(u.state_count(), u.action_count(), rng);
  const auto J = u.jacobian(theta);
  const Vector g = u.pullback(theta, G);
  for (int k = 0; k < u.parameter_count(); ++k) {
    CHECK(std::abs(g[k] - J[k].cwiseProduct(G).sum()) < 1e-9 * std::max(1.0, std::abs(g[k])));
  }
}

TEST_CASE("weighted Hessian matches finite differences of the gradient") {
  const Grid grid = inventory_grid(6, 3, 30, 5);
  Rng rng(4);
  const int shapes[3][2] = {{2, 6}, {4, 4}, {6, 3}};
  for (const auto& s : shapes) {
    const auto u = make_utility(s[0], s[1], Activation::softplus, grid);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Vector theta = init_params(u, 50 + seed);
      const Matrix G = oracle::random_matrix(u.state_count(), u.action_count(), rng);
      const Matrix H = u.weighted_hessian(theta, G);
      const Matrix fd = oracle::fd_jacobian([&](const Vector& th) { return u.pullback(th, G); },
                                            theta);
      CHECK((H - H.transpose()).cwiseAbs().maxCoeff() == 0.0);
      CHECK(oracle::relative_error(H, fd) <= 1e-4);
    }
  }
}

TEST_CASE("full Hessian slices are symmetric and match the weighted form") {
  const Grid grid = inventory_grid(2, 2, 4);
  const auto u = make_utility(1, 3, Activation::softplus, grid);
  const Vector theta = init_params(u, 77);
  const auto ev = u.evaluate(theta, Order::hessian);
  const int t = u.parameter_count();
  CHECK(ev.hessian.size() == static_cast<std::size_t>(t * (t + 1) / 2));
  Rng rng(5);
  const Matrix G = oracle::random_matrix(u.state_count(), u.action_count(), rng);
  const Matrix H = u.weighted_hessian(theta, G);
  for (int i = 0; i < t; ++i) {
    for (int j = i; j < t; ++j) {
      const double s = ev.hessian[UtilityEvaluation::pair_index(i, j, t)].cwiseProduct(G).sum();
      CHECK(std::abs(s - H(i, j)) < 1e-9 * std::max(1.0, std::abs(H(i, j))));
    }
  }
}

TEST_CASE("single-neuron closed form") {
  const Mlp net({1, 1, 1}, Activation::softplus);
  Vector p(4);
  p << 0.7, 1.0, -0.2, 0.0;  // w1, w2, b1, b2
  Matrix x(1, 1);
  x << 1.5;
  Vector seed = Vector::Ones(1);
  const Matrix H = net.weighted_hessian(p, x, seed);
  const double z = 0.7 * 1.5 - 0.2;
  const double s = 1.0 / (1.0 + std::exp(-z));
  CHECK(H(0, 0) == doctest::Approx(s * (1 - s) * 1.5 * 1.5).epsilon(1e-12));
  CHECK(H(2, 2) == doctest::Approx(s * (1 - s)).epsilon(1e-12));
  CHECK(H(0, 1) == doctest::Approx(s * 1.5).epsilon(1e-12));
  CHECK(H(3, 3) == 0.0);
}

TEST_CASE("initialization") {
  const Grid grid = inventory_grid(2, 2, 3);
  const auto u = make_utility(2, 6, Activation::relu, grid);
  CHECK(init_params(u, 5) == init_params(u, 5));
  CHECK(init_params(u, 5) != init_params(u, 6));
  CHECK(init_params(u, 5, InitScheme::zeros).cwiseAbs().maxCoeff() == 0.0);
  const Mlp& net = dynamic_cast<const MlpShape&>(u.shape()).network();
  long draws = 0;
  double max_first = 0.0;
  for (std::uint64_t seed = 0; draws < 10000; ++seed) {
    const Vector theta = init_params(u, seed);
    max_first = std::max(max_first, theta.head(36).cwiseAbs().maxCoeff());
    draws += 36;
    // Biases of the first layer: +-1/sqrt(6).
    CHECK(theta.segment(net.bias_offset(1), 6).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(6.0));
    const Vector extras = theta.tail(2);
    CHECK(extras.minCoeff() >= 0.0);
    CHECK(extras.maxCoeff() <= 10.0);
  }
  CHECK(max_first <= 1.0);
  CHECK(max_first > 0.99);
}

TEST_CASE("inventory features") {
  CHECK(inventory_feature_map(1, 1, 0) == (Vector(6) << 1, 1, 0, 1, 0, 0).finished());
  CHECK(inventory_feature_map(2, 3, 5) == (Vector(6) << 2, 3, 5, 6, 10, 15).finished());
  std::set<std::vector<double>> seen;
  for (int r = 1; r <= 6; ++r)
    for (int o = 1; o <= 3; ++o)
      for (int i = 0; i < 30; ++i) {
        const Vector f = inventory_feature_map(r, o, i);
        seen.insert(std::vector<double>(f.data(), f.data() + 6));
      }
  CHECK(seen.size() == 540);
}

TEST_CASE("output transform") {
  CHECK(apply_output_transform(OutputTransform::nonneg_zero_at_origin, 3.2, 1.0) ==
        doctest::Approx(2.2));
  CHECK(apply_output_transform(OutputTransform::nonneg_zero_at_origin, -1.0, 0.5) == 0.0);
  CHECK(apply_output_transform(OutputTransform::nonneg_zero_at_origin, 0.4, 0.4) == 0.0);
  CHECK(apply_output_transform(OutputTransform::identity, -1.0, 0.5) == -1.0);
}

TEST_CASE("composed multiplicative shape") {
  // States (r, o, i) on a 2 x 3 x 4 grid. First net on (r, j, r j), second on
  // (r, k, r k); H1(r, i) = sum_{j <= i} n1(r, j)^2 / levels and
  // H2(r, o) = sum_{2 <= k <= o} n2(r, k)^2.
  const int R = 2, O = 3, I = 4;
  Matrix in1(R * I, 3), in2(R * O, 3);
  for (int r = 1; r <= R; ++r) {
    for (int j = 0; j < I; ++j) in1.row((r - 1) * I + j) << r, j, r * j;
    for (int k = 1; k <= O; ++k) in2.row((r - 1) * O + (k - 1)) << r, k, r * k;
  }
  std::vector<std::vector<ComposedShape::Term>> t1;
  std::vector<std::vector<int>> t2;
  for (int r = 1; r <= R; ++r)
    for (int o = 1; o <= O; ++o)
      for (int i = 0; i < I; ++i) {
        std::vector<ComposedShape::Term> a;
        for (int j = 0; j <= i; ++j) a.push_back({(r - 1) * I + j, 1.0 / I});
        std::vector<int> b;
        for (int k = 2; k <= o; ++k) b.push_back((r - 1) * O + (k - 1));
        t1.push_back(a);
        t2.push_back(b);
      }
  const Mlp n1({3, 11, 1}, Activation::softplus);
  const Mlp n2({3, 4, 1}, Activation::softplus);
  CHECK(n1.parameter_count() + n2.parameter_count() == 77);
  const ComposedShape shape(n1, in1, t1, n2, in2, t2);
  Rng rng(6);
  const Vector theta = shape.init(rng);
  const Vector h = shape.values(theta);
  CHECK(h.minCoeff() >= 0.0);
  const Matrix J = shape.jacobian(theta);
  const Matrix fdJ = oracle::fd_jacobian([&](const Vector& th) { return shape.values(th); }, theta);
  CHECK(oracle::relative_error(J, fdJ) <= 1e-5);
  const Vector seeds = oracle::random_vector(shape.state_count(), rng);
  const Vector g = shape.pullback(theta, seeds);
  CHECK((g - J.transpose() * seeds).cwiseAbs().maxCoeff() < 1e-9 * std::max(1.0, g.cwiseAbs().maxCoeff()));
  const Matrix H = shape.weighted_hessian(theta, seeds);
  const Matrix fdH = oracle::fd_jacobian([&](const Vector& th) { return shape.pullback(th, seeds); }, theta);
  CHECK(oracle::relative_error(H, fdH) <= 1e-4);
}
