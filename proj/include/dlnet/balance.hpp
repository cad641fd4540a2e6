#pragma once

// Balancedness of a layer tuple, the balanced initialization, and the
// layer-norm constants (M, K_delta) built on them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

// Which coefficient multiplies delta in the layer bound:
// standard -> (N+1)^2, improved -> N^2.
enum class BoundVariant { standard, improved };

inline const char* to_string(BoundVariant v) { return v == BoundVariant::standard ? "standard" : "improved"; }

inline BoundVariant parse_bound_variant(const std::string& s) {
  if (s == "standard") return BoundVariant::standard;
  if (s == "improved") return BoundVariant::improved;
  throw ParameterError("unknown bound variant '" + s + "' (expected standard|improved)");
}

inline double delta_coefficient(std::size_t n_layers, BoundVariant v) {
  const double n = static_cast<double>(n_layers);
  return v == BoundVariant::standard ? (n + 1.0) * (n + 1.0) : n * n;
}

struct BalanceReport {
  std::vector<double> gap_norms;       // ||W_{j+1}^T W_{j+1} - W_j W_j^T||, j = 1..N-1
  double balancedness_constant = 0.0;  // max of gap_norms, 0 for N = 1
  std::vector<double> layer_norms_sq;  // ||W_j||^2

  double max_layer_norm_sq() const {
    return layer_norms_sq.empty() ? 0.0 : *std::max_element(layer_norms_sq.begin(), layer_norms_sq.end());
  }
};

inline Matrix balance_gap(const NetworkTuple& net, std::size_t j) {
  const Matrix& lower = net.layer(j);
  const Matrix& upper = net.layer(j + 1);
  return upper.transpose() * upper - lower * lower.transpose();
}

inline BalanceReport balance_report(const NetworkTuple& net) {
  BalanceReport rep;
  const std::size_t n = net.depth();
  if (n == 0) throw DimensionError("balance report of an empty network");
  for (std::size_t j = 0; j + 1 < n; ++j) rep.gap_norms.push_back(symmetric_spectral_norm(balance_gap(net, j)));
  rep.balancedness_constant = rep.gap_norms.empty() ? 0.0 : *std::max_element(rep.gap_norms.begin(), rep.gap_norms.end());
  for (const auto& w : net.layers()) rep.layer_norms_sq.push_back(spectral_norm_sq(w));
  return rep;
}

// d_0 = d, d_1 = r, d_j = round(r + (j-1)(d-r)/(N-1)) for j >= 2, with
// halves rounded away from zero. A single layer yields [d, d].
inline std::vector<int> dims_schedule(int d, int r, int n_layers) {
  if (d < 1 || r < 1) throw ParameterError("dims schedule needs positive d and r");
  if (r > d) throw ParameterError("rank r=" + std::to_string(r) + " exceeds d=" + std::to_string(d));
  if (n_layers < 1) throw ParameterError("dims schedule needs at least one layer");
  if (n_layers == 1) return {d, d};
  std::vector<int> dims{d, r};
  const long span = d - r;
  const long den = n_layers - 1;
  for (long j = 2; j <= n_layers; ++j) {
    // floor(r + (j-1) span / den + 1/2) in exact integer arithmetic
    const long num = 2 * (j - 1) * span + den;
    dims.push_back(static_cast<int>(r + num / (2 * den)));
  }
  return dims;
}

// W_j = V_j I_{d_j,d_1} U_j^T with Haar-random V_j, U_1, and U_j the first
// d_1 columns of V_{j-1}. All nonzero singular values equal one and
// W_{j+1}^T W_{j+1} = W_j W_j^T.
inline NetworkTuple balanced_init(const std::vector<int>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ConstructionError("dims must list at least d_0 and d_1");
  for (int d : dims)
    if (d < 1) throw ConstructionError("dims must be positive");
  const int r = dims[1];
  for (std::size_t j = 0; j < dims.size(); ++j)
    if (dims[j] < r)
      throw ConstructionError("balanced init needs d_1 <= d_j for all j, but d_1=" + std::to_string(r) + " > d_" +
                              std::to_string(j) + "=" + std::to_string(dims[j]));
  Rng rng(seed);
  const Matrix u1 = random_orthogonal(dims[0], rng);
  std::vector<Matrix> layers;
  Matrix right = u1.leftCols(r);  // U_j
  for (std::size_t j = 1; j < dims.size(); ++j) {
    const Matrix v = random_orthogonal(dims[j], rng);
    layers.push_back(v.leftCols(r) * right.transpose());
    right = v.leftCols(r);
  }
  return NetworkTuple(std::move(layers));
}

// M = (sqrt(2 L(0)) + ||Y||) / sigma_min(X).
inline double compute_m(double initial_loss, const Dataset& data) {
  if (!(initial_loss >= 0.0)) throw ParameterError("initial loss must be nonnegative");
  data.require_full_rank();
  return (std::sqrt(2.0 * initial_loss) + data.spec_norm_y()) / data.sigma_min_x();
}

// ||W||^{2/N} + c delta with c = (N+1)^2 (standard) or N^2 (improved).
inline double layer_norm_bound(double w_spec_norm, std::size_t n_layers, double delta, BoundVariant variant) {
  if (w_spec_norm < 0.0 || delta < 0.0) throw ParameterError("layer norm bound needs nonnegative inputs");
  if (n_layers < 1) throw ParameterError("layer norm bound needs at least one layer");
  return std::pow(w_spec_norm, 2.0 / static_cast<double>(n_layers)) + delta_coefficient(n_layers, variant) * delta;
}

struct BoundConstants {
  double m_const = 0.0;
  double k_delta = 0.0;
  double delta = 0.0;
  double alpha = 0.0;
  BoundVariant variant = BoundVariant::standard;
};

// K_delta = M^{2/N} + c delta.
inline double k_delta(double m_const, std::size_t n_layers, double delta, BoundVariant variant) {
  return layer_norm_bound(m_const, n_layers, delta, variant);
}

}  // namespace dlnet
