#pragma once

// Certified step sizes for gradient descent on deep linear networks and the
// step-size schedules used in the experiments.
//
// For an initialization with balancedness constant alpha*delta the bound is
//
//   eta <= 2(1-alpha) delta / (4 L(0) + (1-alpha) delta B_delta)
//   B_delta = 2e N K^{N-1} ||X||^2 + sqrt(e) N K^{N/2-1} ||XY^T||
//   K       = M^{2/N} + c delta,   c = (N+1)^2 or N^2
//   M       = (sqrt(2 L(0)) + ||Y||) / sigma_min(X)
//
// and it coincides with min{2(1-sigma)/B, sigma(1-alpha) delta / (2 L(0))}
// for sigma = 4 L(0) / (4 L(0) + (1-alpha) delta B).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "dlnet/balance.hpp"
#include "dlnet/errors.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

struct StepSizeCert {
  std::size_t n_layers = 0;
  BoundVariant variant = BoundVariant::standard;
  double delta = 0.0;
  double alpha = 0.0;
  double m_const = 0.0;
  double k_delta = 0.0;
  double b_delta = 0.0;
  double sigma = 0.0;
  double eta_max = 0.0;   // closed form
  double eta_max_two_term = 0.0;  // two-term min form with this sigma
  double initial_loss = 0.0;
};

inline double b_delta(double k, std::size_t n_layers, double x_norm, double xyt_norm) {
  const double n = static_cast<double>(n_layers);
  const double e = std::numbers::e;
  return 2.0 * e * n * std::pow(k, n - 1.0) * x_norm * x_norm + std::sqrt(e) * n * std::pow(k, n / 2.0 - 1.0) * xyt_norm;
}

inline double eta_bound(double initial_loss, double delta, double alpha, double b) {
  const double slack = (1.0 - alpha) * delta;
  return 2.0 * slack / (4.0 * initial_loss + slack * b);
}

inline double sigma_for(double initial_loss, double delta, double alpha, double b) {
  return 4.0 * initial_loss / (4.0 * initial_loss + (1.0 - alpha) * delta * b);
}

// min{2(1-sigma)/B, sigma(1-alpha) delta/(2 L(0))}; the second term is
// vacuous when L(0) = 0.
inline double eta_bound_two_term(double initial_loss, double delta, double alpha, double b, double sigma) {
  const double first = 2.0 * (1.0 - sigma) / b;
  if (initial_loss == 0.0) return first;
  return std::min(first, sigma * (1.0 - alpha) * delta / (2.0 * initial_loss));
}

// Same bound with sigma = sigma_for(...); 1 - sigma is formed as
// (1-alpha) delta B / (4 L(0) + (1-alpha) delta B) so it keeps full
// precision when sigma is close to 1.
inline double eta_bound_two_term(double initial_loss, double delta, double alpha, double b) {
  const double slack = (1.0 - alpha) * delta;
  const double denom = 4.0 * initial_loss + slack * b;
  const double first = 2.0 * (slack * b / denom) / b;
  if (initial_loss == 0.0) return first;
  return std::min(first, (4.0 * initial_loss / denom) * slack / (2.0 * initial_loss));
}

// Assembles a certificate from scalar inputs. alpha must lie in [0, 1).
inline StepSizeCert certificate_from_constants(std::size_t n_layers, BoundVariant variant, double initial_loss, double m_const,
                                               double delta, double alpha, double x_norm, double xyt_norm) {
  if (n_layers < 1) throw ParameterError("certificate needs at least one layer");
  if (!(delta > 0.0)) throw ParameterError("delta must be positive");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw CertificationError("alpha must lie in [0, 1)");
  StepSizeCert c;
  c.n_layers = n_layers;
  c.variant = variant;
  c.delta = delta;
  c.alpha = alpha;
  c.m_const = m_const;
  c.initial_loss = initial_loss;
  c.k_delta = k_delta(m_const, n_layers, delta, variant);
  c.b_delta = b_delta(c.k_delta, n_layers, x_norm, xyt_norm);
  c.sigma = sigma_for(initial_loss, delta, alpha, c.b_delta);
  c.eta_max = eta_bound(initial_loss, delta, alpha, c.b_delta);
  c.eta_max_two_term = eta_bound_two_term(initial_loss, delta, alpha, c.b_delta);
  return c;
}

// ---------------------------------------------------------------------------
// Choice of delta.

enum class DeltaRule { n_cubed, n_np1_squared, numeric_opt };

inline const char* to_string(DeltaRule r) {
  switch (r) {
    case DeltaRule::n_cubed: return "n_cubed";
    case DeltaRule::n_np1_squared: return "n_np1_squared";
    case DeltaRule::numeric_opt: return "numeric_opt";
  }
  return "?";
}

inline DeltaRule parse_delta_rule(const std::string& s) {
  if (s == "n_cubed") return DeltaRule::n_cubed;
  if (s == "n_np1_squared") return DeltaRule::n_np1_squared;
  if (s == "numeric_opt") return DeltaRule::numeric_opt;
  throw ParameterError("unknown delta rule '" + s + "' (expected n_cubed|n_np1_squared|numeric_opt)");
}

// M^{2/N} / N^3
inline double delta_n_cubed(double m_const, std::size_t n_layers) {
  const double n = static_cast<double>(n_layers);
  return std::pow(m_const, 2.0 / n) / (n * n * n);
}

// M^{2/N} / (N (N+1)^2); with the standard variant K = (1 + 1/N) M^{2/N}.
inline double delta_n_np1_squared(double m_const, std::size_t n_layers) {
  const double n = static_cast<double>(n_layers);
  return std::pow(m_const, 2.0 / n) / (n * (n + 1.0) * (n + 1.0));
}

// Maximizes the closed-form bound over delta by golden-section search on
// log(delta) in [1e-12, 1e3] * M^{2/N}. Deltas not exceeding the measured
// balancedness are infeasible and score zero.
inline double delta_numeric_opt(std::size_t n_layers, BoundVariant variant, double initial_loss, double m_const,
                                double balancedness, double x_norm, double xyt_norm) {
  const double scale = std::pow(m_const, 2.0 / static_cast<double>(n_layers));
  if (!(scale > 0.0)) throw CertificationError("numeric delta search needs M > 0");
  auto objective = [&](double log_delta) {
    const double delta = std::exp(log_delta);
    const double alpha = balancedness / delta;
    if (alpha >= 1.0) return 0.0;
    const double b = b_delta(k_delta(m_const, n_layers, delta, variant), n_layers, x_norm, xyt_norm);
    return eta_bound(initial_loss, delta, alpha, b);
  };
  double lo = std::log(1e-12 * scale), hi = std::log(1e3 * scale);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - inv_phi * (hi - lo), b = lo + inv_phi * (hi - lo);
  double fa = objective(a), fb = objective(b);
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    if (fa < fb) {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = objective(b);
    } else {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = objective(a);
    }
  }
  return std::exp(0.5 * (lo + hi));
}

// Certificate for gradient descent started at net0. Without an explicit
// delta the default M^{2/N}/N^3 is used.
inline StepSizeCert certify(const NetworkTuple& net0, const Dataset& data, std::optional<double> delta = std::nullopt,
                            BoundVariant variant = BoundVariant::standard) {
  require_fits(net0, data);
  data.require_full_rank();
  const double l0 = loss(net0, data);
  const double m = compute_m(l0, data);
  const double d = delta ? *delta : delta_n_cubed(m, net0.depth());
  if (!(d > 0.0)) throw CertificationError("delta must be positive");
  const double measured = balance_report(net0).balancedness_constant;
  const double alpha = measured / d;
  if (alpha >= 1.0) {
    std::ostringstream os;
    os << std::setprecision(17) << "initialization has balancedness constant " << measured << " >= delta = " << d
       << "; choose delta > " << measured;
    throw CertificationError(os.str());
  }
  return certificate_from_constants(net0.depth(), variant, l0, m, d, alpha, data.spec_norm_x(), data.spec_norm_xyt());
}

inline StepSizeCert certify_with_rule(const NetworkTuple& net0, const Dataset& data, DeltaRule rule,
                                      BoundVariant variant = BoundVariant::standard) {
  require_fits(net0, data);
  data.require_full_rank();
  const double l0 = loss(net0, data);
  const double m = compute_m(l0, data);
  const std::size_t n = net0.depth();
  switch (rule) {
    case DeltaRule::n_cubed: return certify(net0, data, delta_n_cubed(m, n), variant);
    case DeltaRule::n_np1_squared: return certify(net0, data, delta_n_np1_squared(m, n), variant);
    case DeltaRule::numeric_opt: {
      const double bal = balance_report(net0).balancedness_constant;
      return certify(net0, data, delta_numeric_opt(n, variant, l0, m, bal, data.spec_norm_x(), data.spec_norm_xyt()), variant);
    }
  }
  throw ParameterError("unknown delta rule");
}

// Uniform certificate for every initialization in a set whose
// balancedness is at most delta_b and loss at most l_b.
inline StepSizeCert certify_uniform(const Dataset& data, std::size_t n_layers, double delta_b, double l_b, double delta,
                                    double alpha, BoundVariant variant = BoundVariant::standard) {
  data.require_full_rank();
  if (!(l_b >= 0.0)) throw ParameterError("L_B must be nonnegative");
  if (!(delta_b >= 0.0)) throw ParameterError("delta_B must be nonnegative");
  if (delta_b > alpha * delta)
    throw CertificationError("infeasible set: delta_B exceeds alpha * delta");
  const double m_b = compute_m(l_b, data);
  return certificate_from_constants(n_layers, variant, l_b, m_b, delta, alpha, data.spec_norm_x(), data.spec_norm_xyt());
}

// ---------------------------------------------------------------------------
// Schedules: eta_k = a1 (constant) or min{a1, a2 / (k+1)^gamma}.

enum class ScheduleKind { constant, power_decay };

struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  double a1 = 0.0;
  double a2 = 0.0;
  double gamma = 0.0;

  static Schedule constant(double eta) { return {ScheduleKind::constant, eta, eta, 0.0}; }
  static Schedule power_decay(double a1, double a2, double gamma) { return {ScheduleKind::power_decay, a1, a2, gamma}; }

  // Sum of eta_k diverges.
  bool divergent_sum() const { return kind == ScheduleKind::constant || gamma <= 1.0; }

  void validate() const {
    if (!(a1 > 0.0)) throw ParameterError("schedule needs a1 > 0");
    if (kind == ScheduleKind::power_decay) {
      if (!(a2 > 0.0)) throw ParameterError("schedule needs a2 > 0");
      if (!(gamma >= 0.0)) throw ParameterError("schedule needs gamma >= 0");
    }
  }
};

inline double schedule_eta(const Schedule& s, std::uint64_t k) {
  if (s.kind == ScheduleKind::constant) return s.a1;
  return std::min(s.a1, s.a2 / std::pow(static_cast<double>(k) + 1.0, s.gamma));
}

// a1 = a2 = 2(1 - sigma) / B_delta.
inline Schedule schedule_from_cert(const StepSizeCert& cert, double gamma) {
  if (!(cert.b_delta > 0.0)) throw ParameterError("certificate has no B_delta");
  const double a = 2.0 * (1.0 - cert.sigma) / cert.b_delta;
  return Schedule::power_decay(a, a, gamma);
}

// ---------------------------------------------------------------------------
// Certificate text: key=value lines, 17 significant digits.

inline void write_certificate(std::ostream& os, const StepSizeCert& c) {
  os << std::setprecision(17);
  os << "n_layers=" << c.n_layers << '\n'
     << "variant=" << to_string(c.variant) << '\n'
     << "delta=" << c.delta << '\n'
     << "alpha=" << c.alpha << '\n'
     << "M=" << c.m_const << '\n'
     << "K_delta=" << c.k_delta << '\n'
     << "B_delta=" << c.b_delta << '\n'
     << "sigma=" << c.sigma << '\n'
     << "eta_max=" << c.eta_max << '\n'
     << "eta_max_two_term=" << c.eta_max_two_term << '\n'
     << "initial_loss=" << c.initial_loss << '\n';
}

inline std::map<std::string, std::string> read_key_values(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractViolation("expected key=value, got '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline StepSizeCert read_certificate(std::istream& is) {
  const auto kv = read_key_values(is);
  auto num = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ContractViolation("certificate is missing '" + key + "'");
    return std::stod(it->second);
  };
  StepSizeCert c;
  c.n_layers = static_cast<std::size_t>(num("n_layers"));
  c.variant = parse_bound_variant(kv.count("variant") ? kv.at("variant") : "standard");
  c.delta = num("delta");
  c.alpha = num("alpha");
  c.m_const = num("M");
  c.k_delta = num("K_delta");
  c.b_delta = num("B_delta");
  c.sigma = num("sigma");
  c.eta_max = num("eta_max");
  c.eta_max_two_term = num("eta_max_two_term");
  c.initial_loss = num("initial_loss");
  return c;
}

inline void save_certificate(const std::string& path, const StepSizeCert& c) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_certificate(os, c);
  if (!os) throw IoError(path, "write failed");
}

inline StepSizeCert load_certificate(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_certificate(is);
}

}  // namespace dlnet
