#pragma once

// Deep linear network W_N ... W_1 trained on the square loss
// 1/2 ||Y - W_N ... W_1 X||_F^2, with its analytic gradient and the
// analytic Hessian quadratic form.

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"

namespace dlnet {

// Ordered layers [W_1, ..., W_N]; W_j has shape d_j x d_{j-1}.
class NetworkTuple {
 public:
  NetworkTuple() = default;

  explicit NetworkTuple(std::vector<Matrix> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DimensionError("a network needs at least one layer");
    dims_.push_back(static_cast<int>(layers_.front().cols()));
    for (std::size_t j = 0; j < layers_.size(); ++j) {
      const Matrix& w = layers_[j];
      if (w.size() == 0) throw DimensionError("layer " + std::to_string(j + 1) + " is empty");
      if (w.cols() != dims_.back())
        throw DimensionError("layer " + std::to_string(j + 1) + " has shape " + shape_str(w) + " but the previous layer outputs " +
                             std::to_string(dims_.back()));
      require_finite(w, "layer");
      dims_.push_back(static_cast<int>(w.rows()));
    }
  }

  std::size_t depth() const noexcept { return layers_.size(); }
  const std::vector<int>& dims() const noexcept { return dims_; }
  const std::vector<Matrix>& layers() const& noexcept { return layers_; }
  std::vector<Matrix> layers() && noexcept { return std::move(layers_); }
  // 0-based: layer(0) is W_1.
  const Matrix& layer(std::size_t j) const { return layers_.at(j); }

  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }

 private:
  std::vector<Matrix> layers_;
  std::vector<int> dims_;
};

// Tuple of per-layer matrices shaped like a network (gradients, directions).
struct Perturbation {
  std::vector<Matrix> deltas;

  static Perturbation zeros_like(const NetworkTuple& net) {
    Perturbation p;
    for (const auto& w : net.layers()) p.deltas.push_back(Matrix::Zero(w.rows(), w.cols()));
    return p;
  }

  std::size_t size() const noexcept { return deltas.size(); }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& d : deltas) s += d.squaredNorm();
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }
};

inline void require_compatible(const NetworkTuple& net, const Perturbation& p) {
  if (p.size() != net.depth())
    throw DimensionError("perturbation has " + std::to_string(p.size()) + " blocks, network has " + std::to_string(net.depth()));
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p.deltas[j].rows() != net.layer(j).rows() || p.deltas[j].cols() != net.layer(j).cols())
      throw DimensionError("perturbation block " + std::to_string(j + 1) + " has shape " + shape_str(p.deltas[j]) +
                           ", layer is " + shape_str(net.layer(j)));
}

inline double inner(const Perturbation& a, const Perturbation& b) {
  if (a.size() != b.size()) throw DimensionError("perturbations differ in length");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a.deltas[j].rows() != b.deltas[j].rows() || a.deltas[j].cols() != b.deltas[j].cols())
      throw DimensionError("perturbation blocks differ in shape");
    s += a.deltas[j].cwiseProduct(b.deltas[j]).sum();
  }
  return s;
}

// net + scale * delta, layer by layer.
inline NetworkTuple shifted(const NetworkTuple& net, const Perturbation& delta, double scale) {
  require_compatible(net, delta);
  std::vector<Matrix> out;
  out.reserve(net.depth());
  for (std::size_t j = 0; j < net.depth(); ++j) out.push_back(net.layer(j) + scale * delta.deltas[j]);
  return NetworkTuple(std::move(out));
}

// Training data. Columns of x are samples. Caches the norms the step-size
// bounds need together with the Gram products XX^T and YX^T.
class Dataset {
 public:
  Dataset() = default;

  Dataset(Matrix x, Matrix y) : x_(std::move(x)), y_(std::move(y)) {
    if (x_.size() == 0 || y_.size() == 0) throw DimensionError("dataset matrices must be nonempty");
    if (x_.cols() != y_.cols())
      throw DimensionError("X has " + std::to_string(x_.cols()) + " samples, Y has " + std::to_string(y_.cols()));
    require_finite(x_, "X");
    require_finite(y_, "Y");
    xxt_ = x_ * x_.transpose();
    yxt_ = y_ * x_.transpose();
    const Vector sx = singular_values(x_);
    spec_norm_x_ = sx(0);
    // sigma_min(X) in the sense of XX^T: the d_x-th singular value, zero
    // when there are fewer samples than features.
    sigma_min_x_ = x_.rows() <= x_.cols() ? sx(sx.size() - 1) : 0.0;
    if (sigma_min_x_ <= 1e-14 * spec_norm_x_) sigma_min_x_ = 0.0;
    spec_norm_y_ = spectral_norm(y_);
    spec_norm_xyt_ = spectral_norm(yxt_);  // ||XY^T|| = ||YX^T||
  }

  const Matrix& x() const noexcept { return x_; }
  const Matrix& y() const noexcept { return y_; }
  const Matrix& xxt() const noexcept { return xxt_; }
  const Matrix& yxt() const noexcept { return yxt_; }
  int input_dim() const { return static_cast<int>(x_.rows()); }
  int output_dim() const { return static_cast<int>(y_.rows()); }
  int samples() const { return static_cast<int>(x_.cols()); }

  double sigma_min_x() const noexcept { return sigma_min_x_; }
  double spec_norm_x() const noexcept { return spec_norm_x_; }
  double spec_norm_y() const noexcept { return spec_norm_y_; }
  double spec_norm_xyt() const noexcept { return spec_norm_xyt_; }
  bool full_rank() const noexcept { return sigma_min_x_ > 0.0; }

  void require_full_rank() const {
    if (!full_rank()) throw HypothesisError("XX^T is not of full rank (sigma_min(X) = 0)");
  }

 private:
  Matrix x_, y_, xxt_, yxt_;
  double sigma_min_x_ = 0.0;
  double spec_norm_x_ = 0.0;
  double spec_norm_y_ = 0.0;
  double spec_norm_xyt_ = 0.0;
};

inline void require_fits(const NetworkTuple& net, const Dataset& data) {
  if (net.input_dim() != data.input_dim() || net.output_dim() != data.output_dim())
    throw DimensionError("network maps " + std::to_string(net.input_dim()) + " -> " + std::to_string(net.output_dim()) +
                         " but data is " + std::to_string(data.input_dim()) + " -> " + std::to_string(data.output_dim()));
}

inline Matrix product(const NetworkTuple& net) {
  if (net.depth() == 0) throw DimensionError("product of an empty network");
  Matrix w = net.layer(0);
  for (std::size_t j = 1; j < net.depth(); ++j) w = net.layer(j) * w;
  return w;
}

inline double loss1(const Matrix& w, const Dataset& data) {
  if (w.rows() != data.output_dim() || w.cols() != data.input_dim())
    throw DimensionError("end-to-end matrix is " + shape_str(w) + ", data needs " + std::to_string(data.output_dim()) + "x" +
                         std::to_string(data.input_dim()));
  return 0.5 * (data.y() - w * data.x()).squaredNorm();
}

inline double loss(const NetworkTuple& net, const Dataset& data) {
  require_fits(net, data);
  return loss1(product(net), data);
}

inline Matrix grad_l1(const Matrix& w, const Dataset& data) {
  if (w.rows() != data.output_dim() || w.cols() != data.input_dim())
    throw DimensionError("end-to-end matrix is " + shape_str(w) + ", data needs " + std::to_string(data.output_dim()) + "x" +
                         std::to_string(data.input_dim()));
  return w * data.xxt() - data.yxt();
}

// Loss, end-to-end matrix and gradient from one pass over the layers.
struct Evaluation {
  Matrix product;
  double loss = 0.0;
  Matrix grad_l1;
  Perturbation grad;
};

namespace detail {

// prefix[j] = W_j ... W_1 for j = 1..N (prefix[0] unused).
inline std::vector<Matrix> prefix_products(const NetworkTuple& net) {
  std::vector<Matrix> prefix(net.depth() + 1);
  prefix[1] = net.layer(0);
  for (std::size_t j = 2; j <= net.depth(); ++j) prefix[j] = net.layer(j - 1) * prefix[j - 1];
  return prefix;
}

// suffix[j] = W_N ... W_{j+1} for j = 0..N-1 (suffix[N] unused).
inline std::vector<Matrix> suffix_products(const NetworkTuple& net) {
  const std::size_t n = net.depth();
  std::vector<Matrix> suffix(n + 1);
  if (n >= 1) suffix[n - 1] = net.layer(n - 1);
  for (std::size_t j = n - 1; j-- > 0;) suffix[j] = suffix[j + 1] * net.layer(j);
  return suffix;
}

}  // namespace detail

// Gradient blocks W_{j+1}^T ... W_N^T grad L^1(W) W_1^T ... W_{j-1}^T built
// from one forward prefix sweep and one backward sweep.
inline Evaluation evaluate(const NetworkTuple& net, const Dataset& data) {
  require_fits(net, data);
  const std::size_t n = net.depth();
  const auto prefix = detail::prefix_products(net);

  Evaluation ev;
  ev.product = prefix[n];
  ev.loss = 0.5 * (data.y() - ev.product * data.x()).squaredNorm();
  ev.grad_l1 = ev.product * data.xxt() - data.yxt();
  ev.grad.deltas.resize(n);

  Matrix back = ev.grad_l1;  // S_j^T G with S_j = W_N ... W_{j+1}
  for (std::size_t j = n; j-- > 0;) {
    ev.grad.deltas[j] = j == 0 ? back : Matrix(back * prefix[j].transpose());
    if (j > 0) back = net.layer(j).transpose() * back;
  }
  return ev;
}

inline Perturbation grad(const NetworkTuple& net, const Dataset& data) { return evaluate(net, data).grad; }

// Second derivative of the loss along delta:
//   sum_i ||Q_i||^2 + sum_{i!=j} <Q_i, Q_j> + sum_{i!=j} <W XX^T - YX^T, P_ij>
// with Q_i = W_N..W_{i+1} D_i W_{i-1}..W_1 X and P_ij the product with both
// D_i and D_j substituted (P_ij = P_ji).
inline double hessian_quadratic_form(const NetworkTuple& net, const Dataset& data, const Perturbation& delta) {
  require_fits(net, data);
  require_compatible(net, delta);
  const std::size_t n = net.depth();
  const auto prefix = detail::prefix_products(net);
  const auto suffix = detail::suffix_products(net);
  const Matrix g = prefix[n] * data.xxt() - data.yxt();

  // For 0-based layer i: left multiplies by the layers above it, right by
  // the layers below it.
  auto left = [&](std::size_t i, const Matrix& m) -> Matrix {
    return i + 1 < n ? Matrix(suffix[i + 1] * m) : m;
  };
  auto right = [&](std::size_t i, const Matrix& m) -> Matrix {
    return i > 0 ? Matrix(m * prefix[i]) : m;
  };

  std::vector<Matrix> q(n);
  for (std::size_t i = 0; i < n; ++i) q[i] = left(i, right(i, delta.deltas[i])) * data.x();

  double diag_terms = 0.0, cross_terms = 0.0, curvature_terms = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diag_terms += q[i].squaredNorm();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) cross_terms += q[i].cwiseProduct(q[j]).sum();
  }
  for (std::size_t i = 0; i < n; ++i) {
    Matrix mid = right(i, delta.deltas[i]);  // D_i W_{i-1}..W_1
    for (std::size_t j = i + 1; j < n; ++j) {
      const Matrix p = left(j, Matrix(delta.deltas[j] * mid));
      curvature_terms += 2.0 * g.cwiseProduct(p).sum();
      mid = net.layer(j) * mid;
    }
  }
  return diag_terms + cross_terms + curvature_terms;
}

// One gradient step; every layer moves along the gradient evaluated at the
// input tuple.
inline NetworkTuple gd_step(const NetworkTuple& net, const Dataset& data, double eta) {
  if (!(eta > 0.0)) throw ParameterError("step size must be positive");
  return shifted(net, grad(net, data), -eta);
}

// ---------------------------------------------------------------------------
// Serialization: one matrix CSV block per layer, each preceded by "# layer=<j>".

inline void write_network(std::ostream& os, const NetworkTuple& net) {
  for (std::size_t j = 0; j < net.depth(); ++j) {
    os << "# layer=" << (j + 1) << '\n';
    write_matrix_csv(os, net.layer(j));
  }
}

inline NetworkTuple read_network(std::istream& is) {
  std::vector<Matrix> layers;
  std::string line;
  while (detail::next_nonempty_line(is, line)) {
    long j = 0;
    if (line.rfind('#', 0) != 0 || !detail::parse_header_field(line, "layer", j))
      throw ContractViolation("expected '# layer=<j>', got '" + line + "'");
    if (j != static_cast<long>(layers.size()) + 1)
      throw ContractViolation("layer blocks out of order: got " + std::to_string(j) + ", expected " +
                              std::to_string(layers.size() + 1));
    layers.push_back(read_matrix_csv(is));
  }
  return NetworkTuple(std::move(layers));
}

inline void save_network(const std::string& path, const NetworkTuple& net) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_network(os, net);
  if (!os) throw IoError(path, "write failed");
}

inline NetworkTuple load_network(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_network(is);
}

}  // namespace dlnet
