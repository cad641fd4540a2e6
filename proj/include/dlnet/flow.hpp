#pragma once

// Continuous-time reference dynamics integrated with classical fixed-step
// RK4:
//   tuple flow    dW_j/dt = -grad_{W_j} L(W_1, ..., W_N)
//   product flow  dW/dt   = -A_W(grad L^1(W)),
//   A_W(Z) = sum_j (W W^T)^{(N-j)/N} Z (W^T W)^{(j-1)/N}.
// The product flow reproduces the tuple flow's end-to-end matrix only for
// balanced starting tuples.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dlnet/balance.hpp"
#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

struct FlowState {
  double t = 0.0;
  NetworkTuple net;  // tuple flow only
  Matrix w;          // end-to-end matrix (both flows)
  double loss = 0.0;
  double invariance_drift = 0.0;  // max_j ||D_j(t) - D_j(0)||, tuple flow only
  int product_rank = 0;
};

struct FlowTrajectory {
  std::vector<FlowState> states;
  // Whether the start was a balanced tuple; unknown when only W(0) was given.
  std::optional<bool> balanced_origin;
};

struct FlowOptions {
  std::size_t record_stride = 1;
  double rank_tol = kDefaultRankTol;
  double balance_tol = 1e-10;  // threshold for flagging a balanced origin
};

namespace detail {

inline std::size_t flow_steps(double t_end, double dt) {
  if (!(dt > 0.0)) throw ParameterError("flow step dt must be positive");
  if (!(t_end >= dt)) throw ParameterError("flow horizon t_end must be at least dt");
  return static_cast<std::size_t>(std::ceil(t_end / dt - 1e-9));
}

[[noreturn]] inline void blow_up(double t, double dt) {
  throw BlowUpError("flow state became non-finite at t=" + std::to_string(t) + "; the exact flow stays bounded, so dt=" +
                    std::to_string(dt) + " is too large");
}

inline double max_gap_drift(const NetworkTuple& net, const std::vector<Matrix>& gaps0) {
  double drift = 0.0;
  for (std::size_t j = 0; j < gaps0.size(); ++j)
    drift = std::max(drift, symmetric_spectral_norm(balance_gap(net, j) - gaps0[j]));
  return drift;
}

}  // namespace detail

// The step is t_end / ceil(t_end / dt) so the last state lands on t_end.
inline FlowTrajectory integrate_tuple_flow(const NetworkTuple& net0, const Dataset& data, double t_end, double dt,
                                           const FlowOptions& opts = {}) {
  require_fits(net0, data);
  if (opts.record_stride == 0) throw ParameterError("record stride must be positive");
  const std::size_t steps = detail::flow_steps(t_end, dt);
  const double h = t_end / static_cast<double>(steps);

  std::vector<Matrix> gaps0;
  for (std::size_t j = 0; j + 1 < net0.depth(); ++j) gaps0.push_back(balance_gap(net0, j));

  FlowTrajectory traj;
  traj.balanced_origin = balance_report(net0).balancedness_constant <= opts.balance_tol;
  auto record = [&](double t, const NetworkTuple& net) {
    FlowState s;
    s.t = t;
    s.net = net;
    s.w = product(net);
    s.loss = loss1(s.w, data);
    s.invariance_drift = detail::max_gap_drift(net, gaps0);
    s.product_rank = numerical_rank(s.w, opts.rank_tol);
    traj.states.push_back(std::move(s));
  };

  NetworkTuple net = net0;
  record(0.0, net);
  for (std::size_t step = 1; step <= steps; ++step) {
    Perturbation k1, k2, k3, k4;
    try {
      k1 = grad(net, data);
      k2 = grad(shifted(net, k1, -0.5 * h), data);
      k3 = grad(shifted(net, k2, -0.5 * h), data);
      k4 = grad(shifted(net, k3, -h), data);
    } catch (const ContractViolation&) {  // non-finite intermediate stage
      detail::blow_up(static_cast<double>(step) * h, dt);
    }
    std::vector<Matrix> next;
    next.reserve(net.depth());
    for (std::size_t j = 0; j < net.depth(); ++j) {
      next.push_back(net.layer(j) -
                     (h / 6.0) * (k1.deltas[j] + 2.0 * k2.deltas[j] + 2.0 * k3.deltas[j] + k4.deltas[j]));
      if (!next.back().allFinite()) detail::blow_up(static_cast<double>(step) * h, dt);
    }
    net = NetworkTuple(std::move(next));
    if (step % opts.record_stride == 0 || step == steps) record(static_cast<double>(step) * h, net);
  }
  return traj;
}

inline Matrix a_w_operator(const Matrix& w, const Matrix& z, std::size_t n_layers) {
  if (n_layers < 1) throw ParameterError("A_W needs at least one layer");
  if (w.rows() != z.rows() || w.cols() != z.cols())
    throw DimensionError("A_W argument is " + shape_str(z) + ", W is " + shape_str(w));
  const double n = static_cast<double>(n_layers);
  const Matrix wwt = w * w.transpose();
  const Matrix wtw = w.transpose() * w;
  Matrix out = Matrix::Zero(z.rows(), z.cols());
  for (std::size_t j = 1; j <= n_layers; ++j) {
    const double jd = static_cast<double>(j);
    out += sym_fractional_power(wwt, (n - jd) / n) * z * sym_fractional_power(wtw, (jd - 1.0) / n);
  }
  return out;
}

inline FlowTrajectory integrate_product_flow(const Matrix& w0, const Dataset& data, std::size_t n_layers, double t_end,
                                             double dt, const FlowOptions& opts = {}) {
  if (w0.rows() != data.output_dim() || w0.cols() != data.input_dim())
    throw DimensionError("W(0) is " + shape_str(w0) + ", data needs " + std::to_string(data.output_dim()) + "x" +
                         std::to_string(data.input_dim()));
  if (opts.record_stride == 0) throw ParameterError("record stride must be positive");
  const std::size_t steps = detail::flow_steps(t_end, dt);
  const double h = t_end / static_cast<double>(steps);
  auto field = [&](const Matrix& w) -> Matrix { return -a_w_operator(w, grad_l1(w, data), n_layers); };

  FlowTrajectory traj;
  auto record = [&](double t, const Matrix& w) {
    FlowState s;
    s.t = t;
    s.w = w;
    s.loss = loss1(w, data);
    s.product_rank = numerical_rank(w, opts.rank_tol);
    traj.states.push_back(std::move(s));
  };

  Matrix w = w0;
  record(0.0, w);
  for (std::size_t step = 1; step <= steps; ++step) {
    Matrix k1, k2, k3, k4;
    try {
      k1 = field(w);
      k2 = field(w + 0.5 * h * k1);
      k3 = field(w + 0.5 * h * k2);
      k4 = field(w + h * k3);
    } catch (const ContractViolation&) {
      detail::blow_up(static_cast<double>(step) * h, dt);
    }
    w += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!w.allFinite()) detail::blow_up(static_cast<double>(step) * h, dt);
    if (step % opts.record_stride == 0 || step == steps) record(static_cast<double>(step) * h, w);
  }
  return traj;
}

// Product flow started from a tuple; the trajectory flags whether that
// tuple was balanced.
inline FlowTrajectory integrate_product_flow(const NetworkTuple& net0, const Dataset& data, double t_end, double dt,
                                             const FlowOptions& opts = {}) {
  require_fits(net0, data);
  FlowTrajectory traj = integrate_product_flow(product(net0), data, net0.depth(), t_end, dt, opts);
  traj.balanced_origin = balance_report(net0).balancedness_constant <= opts.balance_tol;
  return traj;
}

inline constexpr const char* kFlowHeader = "t,loss,invariance_drift,product_rank";

inline void write_flow_csv(std::ostream& os, const FlowTrajectory& traj) {
  os << kFlowHeader << '\n' << std::setprecision(17);
  for (const auto& s : traj.states) os << s.t << ',' << s.loss << ',' << s.invariance_drift << ',' << s.product_rank << '\n';
}

inline void save_flow_csv(const std::string& path, const FlowTrajectory& traj) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_flow_csv(os, traj);
  if (!os) throw IoError(path, "write failed");
}

}  // namespace dlnet
