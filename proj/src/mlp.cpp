#include "ddc/mlp.hpp"

#include <cmath>

namespace ddc {

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::vector<int> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  require(layers_.size() >= 2, "Mlp: need at least an input and an output width");
  require(layers_.back() == 1, "Mlp: output width must be 1");
  for (int w : layers_) require(w >= 1, "Mlp: layer widths must be positive");
  const int L = layer_count();
  int offset = 0;
  for (int l = 1; l <= L; ++l) {
    weight_offsets_.push_back(offset);
    offset += layers_[l] * layers_[l - 1];
  }
  weight_count_ = offset;
  for (int l = 1; l <= L; ++l) {
    bias_offsets_.push_back(offset);
    offset += layers_[l];
  }
  parameter_count_ = offset;
}

Mlp Mlp::with_hidden(int inputs, int depth, int width, Activation activation) {
  std::vector<int> layers{inputs};
  for (int d = 0; d < depth; ++d) layers.push_back(width);
  layers.push_back(1);
  return Mlp(std::move(layers), activation);
}

Matrix Mlp::weight(const Eigen::Ref<const Vector>& params, int layer) const {
  const int out = layers_[layer];
  const int in = layers_[layer - 1];
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      params.data() + weight_offset(layer), out, in);
}

RowVector Mlp::bias(const Eigen::Ref<const Vector>& params, int layer) const {
  return params.segment(bias_offset(layer), layers_[layer]).transpose();
}

Matrix Mlp::act(const Matrix& z) const {
  if (activation_ == Activation::relu) return z.cwiseMax(0.0);
  return z.unaryExpr([](double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
}

Matrix Mlp::act_d1(const Matrix& z) const {
  if (activation_ == Activation::relu) {
    return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
  }
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Matrix Mlp::act_d2(const Matrix& z) const {
  if (activation_ == Activation::relu) return Matrix::Zero(z.rows(), z.cols());
  return z.unaryExpr([](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return s * (1.0 - s);
  });
}

Mlp::Pass Mlp::run(const Eigen::Ref<const Vector>& params, const Matrix& inputs) const {
  require(params.size() == parameter_count_, "Mlp: parameter length mismatch");
  require(inputs.cols() == input_dim(), "Mlp: input width mismatch");
  const int L = layer_count();
  Pass pass;
  pass.a.push_back(inputs);
  for (int l = 1; l <= L; ++l) {
    Matrix z = pass.a.back() * weight(params, l).transpose();
    z.rowwise() += bias(params, l);
    pass.a.push_back(l < L ? act(z) : z);
    pass.z.push_back(std::move(z));
  }
  return pass;
}

Vector Mlp::forward(const Eigen::Ref<const Vector>& params, const Matrix& inputs) const {
  return run(params, inputs).a.back().col(0);
}

Matrix Mlp::jacobian(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                     Vector* outputs) const {
  const Pass pass = run(params, inputs);
  if (outputs) *outputs = pass.a.back().col(0);
  const Eigen::Index N = inputs.rows();
  const int L = layer_count();
  Matrix J(N, parameter_count_);
  Matrix delta = Matrix::Ones(N, 1);
  for (int l = L; l >= 1; --l) {
    const Matrix& A = pass.a[l - 1];
    const int in = layers_[l - 1];
    for (int o = 0; o < layers_[l]; ++o) {
      J.block(0, weight_offset(l) + o * in, N, in) = A.array().colwise() * delta.col(o).array();
    }
    J.block(0, bias_offset(l), N, layers_[l]) = delta;
    if (l > 1) {
      delta = (delta * weight(params, l)).cwiseProduct(act_d1(pass.z[l - 2]));
    }
  }
  return J;
}

Vector Mlp::pullback(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                     const Vector& seeds) const {
  require(seeds.size() == inputs.rows(), "Mlp::pullback: seed length mismatch");
  const Pass pass = run(params, inputs);
  const int L = layer_count();
  Vector g(parameter_count_);
  Matrix delta = seeds;
  for (int l = L; l >= 1; --l) {
    const Matrix gw = delta.transpose() * pass.a[l - 1];
    const int in = layers_[l - 1];
    for (int o = 0; o < layers_[l]; ++o) {
      g.segment(weight_offset(l) + o * in, in) = gw.row(o).transpose();
    }
    g.segment(bias_offset(l), layers_[l]) = delta.colwise().sum().transpose();
    if (l > 1) {
      delta = (delta * weight(params, l)).cwiseProduct(act_d1(pass.z[l - 2]));
    }
  }
  return g;
}

Matrix Mlp::weighted_hessian(const Eigen::Ref<const Vector>& params, const Matrix& inputs,
                             const Vector& seeds) const {
  require(seeds.size() == inputs.rows(), "Mlp::weighted_hessian: seed length mismatch");
  const Pass pass = run(params, inputs);
  const int L = layer_count();
  const Eigen::Index N = inputs.rows();
  std::vector<Matrix> W(L + 1), d1(L + 1), d2(L + 1), delta(L + 1);
  for (int l = 1; l <= L; ++l) W[l] = weight(params, l);
  for (int l = 1; l < L; ++l) {
    d1[l] = act_d1(pass.z[l - 1]);
    d2[l] = act_d2(pass.z[l - 1]);
  }
  delta[L] = seeds;
  for (int l = L; l > 1; --l) delta[l - 1] = (delta[l] * W[l]).cwiseProduct(d1[l - 1]);

  // Pearlmutter's R-operator, one pass per unit direction.
  const int p = parameter_count_;
  Matrix H(p, p);
  Vector dir = Vector::Zero(p);
  std::vector<Matrix> rz(L + 1), ra(L + 1);
  for (int k = 0; k < p; ++k) {
    dir.setZero();
    dir[k] = 1.0;
    ra[0] = Matrix::Zero(N, layers_[0]);
    for (int l = 1; l <= L; ++l) {
      Matrix r = ra[l - 1] * W[l].transpose() + pass.a[l - 1] * weight(dir, l).transpose();
      r.rowwise() += bias(dir, l);
      if (l < L) ra[l] = d1[l].cwiseProduct(r);
      rz[l] = std::move(r);
    }
    Vector col(p);
    Matrix rdelta = Matrix::Zero(N, 1);
    for (int l = L; l >= 1; --l) {
      const Matrix hw = rdelta.transpose() * pass.a[l - 1] + delta[l].transpose() * ra[l - 1];
      const int in = layers_[l - 1];
      for (int o = 0; o < layers_[l]; ++o) {
        col.segment(weight_offset(l) + o * in, in) = hw.row(o).transpose();
      }
      col.segment(bias_offset(l), layers_[l]) = rdelta.colwise().sum().transpose();
      if (l > 1) {
        const Matrix da = delta[l] * W[l];
        const Matrix rda = rdelta * W[l] + delta[l] * weight(dir, l);
        rdelta = rda.cwiseProduct(d1[l - 1]) + da.cwiseProduct(d2[l - 1]).cwiseProduct(rz[l - 1]);
      }
    }
    H.col(k) = col;
  }
  return 0.5 * (H + H.transpose());
}

Vector Mlp::init(Rng& rng) const {
  Vector params(parameter_count_);
  const int L = layer_count();
  for (int l = 1; l <= L; ++l) {
    const double bound = std::sqrt(6.0 / layers_[l - 1]);
    const int n = layers_[l] * layers_[l - 1];
    for (int k = 0; k < n; ++k) params[weight_offset(l) + k] = rng.uniform(-bound, bound);
  }
  for (int l = 1; l <= L; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layers_[l - 1]));
    for (int k = 0; k < layers_[l]; ++k) params[bias_offset(l) + k] = rng.uniform(-bound, bound);
  }
  return params;
}

// ---------------------------------------------------------------------------
// MlpShape

MlpShape::MlpShape(Mlp net, Matrix features, OutputTransform transform, std::vector<int> origin)
    : net_(std::move(net)),
      features_(std::move(features)),
      transform_(transform),
      origin_(std::move(origin)) {
  require(features_.cols() == net_.input_dim(), "MlpShape: feature width mismatch");
  if (transform_ == OutputTransform::nonneg_zero_at_origin) {
    require(static_cast<Eigen::Index>(origin_.size()) == features_.rows(),
            "MlpShape: origin map must cover every state");
    for (int o : origin_) {
      require(o >= 0 && o < features_.rows(), "MlpShape: origin index out of range");
    }
  }
}

Vector MlpShape::values(const Eigen::Ref<const Vector>& params) const {
  const Vector raw = net_.forward(params, features_);
  if (transform_ == OutputTransform::identity) return raw;
  Vector h(raw.size());
  for (Eigen::Index x = 0; x < raw.size(); ++x) {
    h[x] = std::max(raw[x] - raw[origin_[x]], 0.0);
  }
  return h;
}

Matrix MlpShape::jacobian(const Eigen::Ref<const Vector>& params) const {
  Vector raw;
  Matrix J = net_.jacobian(params, features_, &raw);
  if (transform_ == OutputTransform::identity) return J;
  Matrix out = Matrix::Zero(J.rows(), J.cols());
  for (Eigen::Index x = 0; x < raw.size(); ++x) {
    const int o = origin_[x];
    if (raw[x] - raw[o] > 0.0) out.row(x) = J.row(x) - J.row(o);
  }
  return out;
}

Vector MlpShape::network_seeds(const Vector& raw, const Vector& seeds) const {
  require(seeds.size() == raw.size(), "MlpShape: seed length mismatch");
  if (transform_ == OutputTransform::identity) return seeds;
  Vector s = Vector::Zero(raw.size());
  for (Eigen::Index x = 0; x < raw.size(); ++x) {
    const int o = origin_[x];
    if (raw[x] - raw[o] > 0.0) {
      s[x] += seeds[x];
      s[o] -= seeds[x];
    }
  }
  return s;
}

Vector MlpShape::pullback(const Eigen::Ref<const Vector>& params, const Vector& seeds) const {
  const Vector raw = transform_ == OutputTransform::identity ? Vector() : net_.forward(params, features_);
  const Vector s = transform_ == OutputTransform::identity ? seeds : network_seeds(raw, seeds);
  return net_.pullback(params, features_, s);
}

Matrix MlpShape::weighted_hessian(const Eigen::Ref<const Vector>& params,
                                  const Vector& seeds) const {
  const Vector raw = transform_ == OutputTransform::identity ? Vector() : net_.forward(params, features_);
  const Vector s = transform_ == OutputTransform::identity ? seeds : network_seeds(raw, seeds);
  return net_.weighted_hessian(params, features_, s);
}

// ---------------------------------------------------------------------------
// ComposedShape

ComposedShape::ComposedShape(Mlp first, Matrix inputs1, std::vector<std::vector<Term>> terms1,
                             Mlp second, Matrix inputs2, std::vector<std::vector<int>> terms2)
    : first_(std::move(first)),
      inputs1_(std::move(inputs1)),
      terms1_(std::move(terms1)),
      second_(std::move(second)),
      inputs2_(std::move(inputs2)),
      terms2_(std::move(terms2)) {
  require(terms1_.size() == terms2_.size(), "ComposedShape: term lists must cover the same states");
  require(inputs1_.cols() == first_.input_dim(), "ComposedShape: first input width mismatch");
  require(inputs2_.cols() == second_.input_dim(), "ComposedShape: second input width mismatch");
  for (const auto& list : terms1_) {
    for (const auto& t : list) {
      require(t.row >= 0 && t.row < inputs1_.rows(), "ComposedShape: first term out of range");
    }
  }
  for (const auto& list : terms2_) {
    for (int k : list) {
      require(k >= 0 && k < inputs2_.rows(), "ComposedShape: second term out of range");
    }
  }
}

ComposedShape::Parts ComposedShape::evaluate(const Eigen::Ref<const Vector>& params,
                                             bool derivatives) const {
  require(params.size() == parameter_count(), "ComposedShape: parameter length mismatch");
  const int p1 = first_.parameter_count();
  const int p2 = second_.parameter_count();
  const auto th1 = params.head(p1);
  const auto th2 = params.tail(p2);
  Parts parts;
  if (derivatives) {
    parts.j1 = first_.jacobian(th1, inputs1_, &parts.n1);
    parts.j2 = second_.jacobian(th2, inputs2_, &parts.n2);
  } else {
    parts.n1 = first_.forward(th1, inputs1_);
    parts.n2 = second_.forward(th2, inputs2_);
  }
  const int X = state_count();
  parts.h1 = Vector::Zero(X);
  parts.h2 = Vector::Zero(X);
  if (derivatives) {
    parts.g1 = Matrix::Zero(X, p1);
    parts.g2 = Matrix::Zero(X, p2);
  }
  for (int x = 0; x < X; ++x) {
    for (const auto& t : terms1_[x]) {
      const double n = parts.n1[t.row];
      parts.h1[x] += t.weight * n * n;
      if (derivatives) parts.g1.row(x) += 2.0 * t.weight * n * parts.j1.row(t.row);
    }
    for (int k : terms2_[x]) {
      const double n = parts.n2[k];
      parts.h2[x] += n * n;
      if (derivatives) parts.g2.row(x) += 2.0 * n * parts.j2.row(k);
    }
  }
  return parts;
}

Vector ComposedShape::values(const Eigen::Ref<const Vector>& params) const {
  const Parts parts = evaluate(params, false);
  return parts.h1.cwiseProduct((parts.h2.array() + 1.0).matrix());
}

Matrix ComposedShape::jacobian(const Eigen::Ref<const Vector>& params) const {
  const Parts parts = evaluate(params, true);
  Matrix J(state_count(), parameter_count());
  J.leftCols(first_.parameter_count()) = (parts.h2.array() + 1.0).matrix().asDiagonal() * parts.g1;
  J.rightCols(second_.parameter_count()) = parts.h1.asDiagonal() * parts.g2;
  return J;
}

Vector ComposedShape::pullback(const Eigen::Ref<const Vector>& params, const Vector& seeds) const {
  require(seeds.size() == state_count(), "ComposedShape: seed length mismatch");
  const Parts parts = evaluate(params, false);
  Vector s1 = Vector::Zero(inputs1_.rows());
  Vector s2 = Vector::Zero(inputs2_.rows());
  for (int x = 0; x < state_count(); ++x) {
    const double a = seeds[x] * (1.0 + parts.h2[x]);
    for (const auto& t : terms1_[x]) s1[t.row] += a * 2.0 * t.weight * parts.n1[t.row];
    const double b = seeds[x] * parts.h1[x];
    for (int k : terms2_[x]) s2[k] += b * 2.0 * parts.n2[k];
  }
  Vector g(parameter_count());
  g.head(first_.parameter_count()) =
      first_.pullback(params.head(first_.parameter_count()), inputs1_, s1);
  g.tail(second_.parameter_count()) =
      second_.pullback(params.tail(second_.parameter_count()), inputs2_, s2);
  return g;
}

Matrix ComposedShape::weighted_hessian(const Eigen::Ref<const Vector>& params,
                                       const Vector& seeds) const {
  require(seeds.size() == state_count(), "ComposedShape: seed length mismatch");
  const Parts parts = evaluate(params, true);
  const int p1 = first_.parameter_count();
  const int p2 = second_.parameter_count();
  Vector s1 = Vector::Zero(inputs1_.rows()), c1 = Vector::Zero(inputs1_.rows());
  Vector s2 = Vector::Zero(inputs2_.rows()), c2 = Vector::Zero(inputs2_.rows());
  for (int x = 0; x < state_count(); ++x) {
    const double a = seeds[x] * (1.0 + parts.h2[x]);
    for (const auto& t : terms1_[x]) {
      s1[t.row] += a * 2.0 * t.weight * parts.n1[t.row];
      c1[t.row] += a * 2.0 * t.weight;
    }
    const double b = seeds[x] * parts.h1[x];
    for (int k : terms2_[x]) {
      s2[k] += b * 2.0 * parts.n2[k];
      c2[k] += b * 2.0;
    }
  }
  Matrix H(p1 + p2, p1 + p2);
  H.topLeftCorner(p1, p1) = parts.j1.transpose() * c1.asDiagonal() * parts.j1 +
                            first_.weighted_hessian(params.head(p1), inputs1_, s1);
  H.bottomRightCorner(p2, p2) = parts.j2.transpose() * c2.asDiagonal() * parts.j2 +
                                second_.weighted_hessian(params.tail(p2), inputs2_, s2);
  const Matrix cross = parts.g1.transpose() * seeds.asDiagonal() * parts.g2;
  H.topRightCorner(p1, p2) = cross;
  H.bottomLeftCorner(p2, p1) = cross.transpose();
  return H;
}

Vector ComposedShape::init(Rng& rng) const {
  Vector params(parameter_count());
  params.head(first_.parameter_count()) = first_.init(rng);
  params.tail(second_.parameter_count()) = second_.init(rng);
  return params;
}

}  // namespace ddc
