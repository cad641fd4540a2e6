#pragma once

// Gradient descent with per-iterate telemetry. When a certificate is
// supplied, every recorded iterate reached through certified step sizes is
// checked against the four guarantees the certificate carries:
//   (1) balancedness <= delta
//   (2) loss <= initial loss
//   (3) ||W_j||^2 <= K_delta for every layer
//   (4) L(k) - L(k+1) >= sigma eta_k ||grad L(k)||_F^2
// A failed check stops the run with StopKind::invariant_violation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dlnet/balance.hpp"
#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"
#include "dlnet/network.hpp"
#include "dlnet/stepsize.hpp"

namespace dlnet {

// Additive slack on each checked inequality: 1e-12 * (1 + scale).
inline constexpr double kInvariantTol = 1e-12;

struct TrajectoryRecord {
  std::uint64_t iter = 0;
  double eta = 0.0;  // step taken from this iterate; 0 on the terminal record
  double loss = 0.0;
  double grad_norm_f = 0.0;
  double balancedness = 0.0;
  double max_layer_norm_sq = 0.0;
  int product_rank = 0;
  double descent_slack = 0.0;  // (L(k) - L(k+1)) - sigma eta_k ||grad||^2
  double wall_time = 0.0;
  double next_loss = 0.0;      // L(k+1), equals loss on the terminal record
  bool certified_step = false;  // every step up to and including this one met the certificate
};

enum class StopKind { grad_tol, max_iters, loss_tol, diverged, invariant_violation };

inline const char* to_string(StopKind k) {
  switch (k) {
    case StopKind::grad_tol: return "grad_tol";
    case StopKind::max_iters: return "max_iters";
    case StopKind::loss_tol: return "loss_tol";
    case StopKind::diverged: return "diverged";
    case StopKind::invariant_violation: return "invariant_violation";
  }
  return "?";
}

struct StopReason {
  StopKind kind = StopKind::max_iters;
  std::string detail;
};

struct TrainLimits {
  std::uint64_t max_iters = 1'000'000;
  double grad_tol = 1e-10;
  double loss_tol = 0.0;                     // disabled when 0
  std::optional<double> divergence_cap;      // default 1e6 * L(0)
  std::uint64_t stride = 1;
  double rank_tol = kDefaultRankTol;
  bool record_wall_time = true;
};

struct TrainResult {
  NetworkTuple net;
  std::vector<TrajectoryRecord> records;
  StopReason stop;
  std::uint64_t iterations = 0;  // steps taken
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  double min_grad_norm = std::numeric_limits<double>::infinity();
  bool invariants_held = true;  // no certified check failed
};

namespace detail {

inline bool within(double value, double bound, double scale) {
  return value <= bound + kInvariantTol * (1.0 + std::abs(scale));
}

}  // namespace detail

inline TrainResult train(const NetworkTuple& net0, const Dataset& data, const Schedule& sched,
                         const std::optional<StepSizeCert>& cert = std::nullopt, const TrainLimits& limits = {}) {
  require_fits(net0, data);
  sched.validate();
  if (limits.stride == 0) throw ParameterError("telemetry stride must be positive");
  if (cert && cert->n_layers != net0.depth()) throw ParameterError("certificate was issued for a different depth");

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!limits.record_wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  TrainResult res;
  NetworkTuple net = net0;
  Evaluation ev = evaluate(net, data);
  res.initial_loss = ev.loss;
  const double cap = limits.divergence_cap.value_or(1e6 * ev.loss);
  const double sigma = cert ? cert->sigma : 0.0;
  bool certified = cert.has_value();

  auto make_record = [&](std::uint64_t k, double eta, double gnorm, double next_loss) {
    TrajectoryRecord r;
    r.iter = k;
    r.eta = eta;
    r.loss = ev.loss;
    r.grad_norm_f = gnorm;
    const BalanceReport rep = balance_report(net);
    r.balancedness = rep.balancedness_constant;
    r.max_layer_norm_sq = rep.max_layer_norm_sq();
    r.product_rank = numerical_rank(ev.product, limits.rank_tol);
    r.next_loss = next_loss;
    r.descent_slack = eta > 0.0 ? (ev.loss - next_loss) - sigma * eta * gnorm * gnorm : 0.0;
    r.wall_time = elapsed();
    r.certified_step = certified;
    return r;
  };

  // Returns a description of the first failed guarantee, empty if none.
  auto verify = [&](const TrajectoryRecord& r) -> std::string {
    if (!cert || !r.certified_step) return {};
    if (!detail::within(r.balancedness, cert->delta, cert->delta))
      return "balancedness " + std::to_string(r.balancedness) + " exceeds delta " + std::to_string(cert->delta);
    if (!detail::within(r.loss, res.initial_loss, res.initial_loss))
      return "loss " + std::to_string(r.loss) + " exceeds initial loss " + std::to_string(res.initial_loss);
    if (!detail::within(r.max_layer_norm_sq, cert->k_delta, cert->k_delta))
      return "layer norm^2 " + std::to_string(r.max_layer_norm_sq) + " exceeds K_delta " + std::to_string(cert->k_delta);
    if (r.eta > 0.0 && !(r.descent_slack >= -kInvariantTol * (1.0 + r.loss)))
      return "sufficient decrease fails with slack " + std::to_string(r.descent_slack);
    return {};
  };

  auto finish = [&](StopKind kind, std::string detail) {
    res.stop = {kind, std::move(detail)};
    res.net = net;
    res.final_loss = ev.loss;
  };

  for (std::uint64_t k = 0;; ++k) {
    const double gnorm = ev.grad.norm();
    res.final_grad_norm = gnorm;
    if (std::isfinite(gnorm)) res.min_grad_norm = std::min(res.min_grad_norm, gnorm);
    res.iterations = k;

    if (!std::isfinite(ev.loss) || !std::isfinite(gnorm)) {
      finish(StopKind::diverged, "non-finite loss or gradient at iteration " + std::to_string(k));
      return res;
    }
    StopKind stop_kind{};
    std::string stop_detail;
    bool stop = false;
    if (gnorm <= limits.grad_tol) {
      stop = true, stop_kind = StopKind::grad_tol, stop_detail = "gradient norm below tolerance";
    } else if (limits.loss_tol > 0.0 && ev.loss <= limits.loss_tol) {
      stop = true, stop_kind = StopKind::loss_tol, stop_detail = "loss below tolerance";
    } else if (k >= limits.max_iters) {
      stop = true, stop_kind = StopKind::max_iters, stop_detail = "iteration budget exhausted";
    }
    if (stop) {
      TrajectoryRecord r = make_record(k, 0.0, gnorm, ev.loss);
      const std::string violation = verify(r);
      res.records.push_back(r);
      if (!violation.empty()) {
        res.invariants_held = false;
        finish(StopKind::invariant_violation, "iteration " + std::to_string(k) + ": " + violation);
      } else {
        finish(stop_kind, stop_detail);
      }
      return res;
    }

    const double eta = schedule_eta(sched, k);
    if (cert && eta > cert->eta_max * (1.0 + 1e-12)) certified = false;

    std::vector<Matrix> next_layers;
    next_layers.reserve(net.depth());
    bool next_finite = true;
    for (std::size_t j = 0; j < net.depth(); ++j) {
      next_layers.push_back(net.layer(j) - eta * ev.grad.deltas[j]);
      next_finite = next_finite && next_layers.back().allFinite();
    }
    if (!next_finite) {
      res.records.push_back(make_record(k, eta, gnorm, std::numeric_limits<double>::quiet_NaN()));
      finish(StopKind::diverged, "non-finite iterate after step " + std::to_string(k));
      return res;
    }
    NetworkTuple next(std::move(next_layers));
    Evaluation ev_next = evaluate(next, data);

    const bool diverging = !std::isfinite(ev_next.loss) || ev_next.loss > cap;
    if (k % limits.stride == 0 || diverging) {
      TrajectoryRecord r = make_record(k, eta, gnorm, ev_next.loss);
      const std::string violation = diverging ? std::string{} : verify(r);
      res.records.push_back(r);
      if (!violation.empty()) {
        res.invariants_held = false;
        finish(StopKind::invariant_violation, "iteration " + std::to_string(k) + ": " + violation);
        return res;
      }
    }
    net = std::move(next);
    ev = std::move(ev_next);
    if (diverging) {
      res.iterations = k + 1;
      finish(StopKind::diverged, "loss " + std::to_string(ev.loss) + " exceeded divergence cap after step " + std::to_string(k));
      return res;
    }
  }
}

// ---------------------------------------------------------------------------
// Strong descent conditions along a recorded trajectory:
//   L(k) - L(k+1) >= sigma ||grad L(k)|| ||x_{k+1} - x_k||, with
//   ||x_{k+1} - x_k|| = eta_k ||grad L(k)||, and
//   L(k+1) = L(k)  =>  x_{k+1} = x_k.
// Equal losses are judged at roundoff level: the implication fails when the
// loss change is within 1e-14 (1 + L) although the step's first-order
// decrease eta ||grad||^2 exceeds 1e-12 (1 + L).

struct StrongDescentResult {
  bool holds = true;
  std::optional<std::size_t> first_violation;  // index into records
};

inline StrongDescentResult check_strong_descent(const std::vector<TrajectoryRecord>& records, double sigma) {
  if (records.size() < 2) throw UsageError("strong descent check needs at least two records");
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].iter != records[i - 1].iter + 1) throw UsageError("strong descent check needs stride-1 telemetry");

  StrongDescentResult out;
  for (std::size_t i = 0; i + 1 < records.size(); ++i) {
    const auto& r = records[i];
    if (r.eta <= 0.0) continue;
    const double next = records[i + 1].loss;
    const double decrease = r.loss - next;
    const double step_norm = r.eta * r.grad_norm_f;
    const double scale = 1.0 + std::abs(r.loss);
    const bool sufficient = decrease >= sigma * r.grad_norm_f * step_norm - kInvariantTol * scale;
    const bool rigid = !(std::abs(decrease) <= 1e-14 * scale && r.grad_norm_f * step_norm > kInvariantTol * scale);
    if (!sufficient || !rigid) {
      out.holds = false;
      out.first_violation = i;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rank diagnostics: Q = YX^T (XX^T)^{-1/2}, q = rank Q, r = min_j d_j,
// r_bar = min(q, r), k = rank of the limit product.

struct RankProfile {
  Matrix q_matrix;
  int q = 0;
  int r = 0;
  int r_bar = 0;
  int k = 0;
};

inline RankProfile rank_profile(const Dataset& data, const std::vector<int>& dims, const Matrix& w_limit,
                                double rel_tol = kDefaultRankTol) {
  data.require_full_rank();
  if (dims.empty()) throw DimensionError("rank profile needs the layer dims");
  Eigen::SelfAdjointEigenSolver<Matrix> es(data.xxt());
  const Vector& lam = es.eigenvalues();
  if (lam.minCoeff() <= 0.0) throw HypothesisError("XX^T is not positive definite");
  const Matrix inv_sqrt = es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  RankProfile p;
  p.q_matrix = data.yxt() * inv_sqrt;
  p.q = numerical_rank(p.q_matrix, rel_tol);
  p.r = *std::min_element(dims.begin(), dims.end());
  p.r_bar = std::min(p.q, p.r);
  p.k = numerical_rank(w_limit, rel_tol);
  return p;
}

// ---------------------------------------------------------------------------
// Telemetry CSV.

inline constexpr const char* kTelemetryHeader =
    "iter,eta,loss,grad_norm_f,balancedness,max_layer_norm_sq,product_rank,descent_slack,wall_time";

inline void write_telemetry(std::ostream& os, const std::vector<TrajectoryRecord>& records) {
  os << kTelemetryHeader << '\n' << std::setprecision(17);
  for (const auto& r : records)
    os << r.iter << ',' << r.eta << ',' << r.loss << ',' << r.grad_norm_f << ',' << r.balancedness << ','
       << r.max_layer_norm_sq << ',' << r.product_rank << ',' << r.descent_slack << ',' << r.wall_time << '\n';
}

inline void save_telemetry(const std::string& path, const std::vector<TrajectoryRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_telemetry(os, records);
  if (!os) throw IoError(path, "write failed");
}

}  // namespace dlnet
