#pragma once

// Experiment orchestration: synthetic rank-r regression problems with
// balanced initializations, certified or hand-set schedules over a list of
// depths, and the CSV/SVG artifacts each run leaves behind.
//
// Output layout: <out>/<depth>/<schedule>/{telemetry.csv, certificate.txt,
// summary.txt, figure.svg}; emit_plot_data adds <out>/<schedule>.plot.csv
// and <out>/<schedule>.svg with one series per depth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dlnet/balance.hpp"
#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"
#include "dlnet/network.hpp"
#include "dlnet/stepsize.hpp"
#include "dlnet/trainer.hpp"

namespace dlnet {

namespace fs = std::filesystem;

enum class ScheduleMode {
  certified,        // constant eta at the certified bound
  certified_decay,  // min{a, a/(k+1)^gamma} with a = 2(1 - sigma)/B_delta
  constant,         // constant a1
  power,            // min{a1, a2/(k+1)^gamma}
};

inline ScheduleMode parse_schedule_mode(const std::string& s) {
  if (s == "certified") return ScheduleMode::certified;
  if (s == "certified-decay" || s == "certified_decay") return ScheduleMode::certified_decay;
  if (s == "constant") return ScheduleMode::constant;
  if (s == "power" || s == "power_decay") return ScheduleMode::power;
  throw ParameterError("unknown schedule '" + s + "' (expected certified|certified-decay|constant|power)");
}

struct ScheduleSpec {
  ScheduleMode mode = ScheduleMode::certified;
  double a1 = 1e-3;
  double a2 = 1e-3;
  double gamma = 0.0;

  // Directory name for this schedule.
  std::string label() const {
    std::ostringstream os;
    os << std::setprecision(6);
    switch (mode) {
      case ScheduleMode::certified: os << "certified"; break;
      case ScheduleMode::certified_decay: os << "certified-gamma" << gamma; break;
      case ScheduleMode::constant: os << "constant-" << a1; break;
      case ScheduleMode::power: os << "power-" << a1 << '-' << a2 << "-gamma" << gamma; break;
    }
    return os.str();
  }

  Schedule resolve(const StepSizeCert& cert) const {
    switch (mode) {
      case ScheduleMode::certified: return Schedule::constant(cert.eta_max);
      case ScheduleMode::certified_decay: return schedule_from_cert(cert, gamma);
      case ScheduleMode::constant: return Schedule::constant(a1);
      case ScheduleMode::power: return Schedule::power_decay(a1, a2, gamma);
    }
    throw ParameterError("unknown schedule mode");
  }
};

struct ExperimentConfig {
  int d = 70;
  int m_factor = 3;  // m = m_factor * d
  int r = 2;
  std::vector<int> depths{2, 3, 5};
  ScheduleSpec schedule;
  DeltaRule delta_rule = DeltaRule::n_cubed;
  BoundVariant variant = BoundVariant::standard;
  std::uint64_t seed = 0;
  std::uint64_t max_iters = 1'000'000;
  std::uint64_t stride = 100;
  double grad_tol = 1e-10;
  double loss_tol = 0.0;
  bool record_wall_time = false;  // wall clock breaks byte-identical telemetry
  unsigned jobs = 1;
  std::string out = "out";

  int samples() const { return m_factor * d; }

  void validate() const {
    if (d < 1 || r < 1 || m_factor < 1) throw ParameterError("d, r and m-factor must be positive");
    if (r > d) throw ParameterError("r must not exceed d");
    if (depths.empty()) throw ParameterError("at least one depth is required");
    for (int n : depths)
      if (n < 1) throw ParameterError("depths must be >= 1");
    if (stride == 0) throw ParameterError("stride must be positive");
  }
};

struct GeneratedProblem {
  Dataset data;
  NetworkTuple net0;
  NetworkTuple teacher;
  std::vector<int> dims;
};

inline constexpr double kMinSigmaX = 1e-10;
inline constexpr int kMaxRedraws = 10;

// X has i.i.d. N(0, 1/d) entries (seed), the start and the teacher are
// balanced tuples (seed+1, seed+2) on the same dims, and Y = teacher * X.
inline GeneratedProblem generate_problem(const ExperimentConfig& cfg, int n_layers) {
  cfg.validate();
  GeneratedProblem p;
  p.dims = dims_schedule(cfg.d, cfg.r, n_layers);
  Rng rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
  const int m = cfg.samples();
  Matrix x;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxRedraws) throw GenerationError("X stayed rank deficient after " + std::to_string(kMaxRedraws) + " draws");
    x.resize(cfg.d, m);
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < cfg.d; ++i) x(i, j) = gauss(rng);
    if (m >= cfg.d && smallest_singular_value(x) >= kMinSigmaX) break;
  }
  p.net0 = balanced_init(p.dims, cfg.seed + 1);
  p.teacher = balanced_init(p.dims, cfg.seed + 2);
  Matrix y = product(p.teacher) * x;
  p.data = Dataset(std::move(x), std::move(y));
  return p;
}

struct CellSummary {
  int depth = 0;
  std::string schedule;
  fs::path dir;
  StepSizeCert cert;
  double eta0 = 0.0;
  bool divergent_sum = true;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  double min_grad_norm = 0.0;
  std::uint64_t iterations = 0;
  StopReason stop;
  RankProfile ranks;
  bool invariants_held = true;
};

struct ExperimentResult {
  fs::path dir;
  std::vector<CellSummary> cells;
};

inline void write_summary(std::ostream& os, const CellSummary& c, std::uint64_t seed) {
  os << std::setprecision(17);
  os << "depth=" << c.depth << '\n'
     << "schedule=" << c.schedule << '\n'
     << "seed=" << seed << '\n'
     << "eta0=" << c.eta0 << '\n'
     << "divergent_step_sum=" << (c.divergent_sum ? "true" : "false") << '\n'
     << "initial_loss=" << c.initial_loss << '\n'
     << "final_loss=" << c.final_loss << '\n'
     << "final_grad_norm=" << c.final_grad_norm << '\n'
     << "min_grad_norm=" << c.min_grad_norm << '\n'
     << "iterations=" << c.iterations << '\n'
     << "stop_reason=" << to_string(c.stop.kind) << '\n'
     << "stop_detail=" << c.stop.detail << '\n'
     << "final_rank=" << c.ranks.k << '\n'
     << "q=" << c.ranks.q << '\n'
     << "r=" << c.ranks.r << '\n'
     << "r_bar=" << c.ranks.r_bar << '\n'
     << "invariants_held=" << (c.invariants_held ? "true" : "false") << '\n';
}

// ---------------------------------------------------------------------------
// Plot data.

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (iter, loss)
};

inline Series read_loss_series(const fs::path& telemetry, const std::string& label) {
  std::ifstream is(telemetry);
  if (!is) throw IoError(telemetry.string(), "cannot open telemetry");
  std::string line;
  if (!std::getline(is, line)) throw IoError(telemetry.string(), "telemetry has no header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  const auto iter_col = std::find(cols.begin(), cols.end(), "iter") - cols.begin();
  const auto loss_col = std::find(cols.begin(), cols.end(), "loss") - cols.begin();
  if (iter_col == static_cast<long>(cols.size()) || loss_col == static_cast<long>(cols.size()))
    throw IoError(telemetry.string(), "telemetry header lacks iter/loss columns");
  Series s{label, {}};
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (static_cast<long>(cells.size()) <= std::max(iter_col, loss_col))
      throw IoError(telemetry.string(), "short telemetry row");
    s.points.emplace_back(std::stod(cells[static_cast<std::size_t>(iter_col)]), std::stod(cells[static_cast<std::size_t>(loss_col)]));
  }
  return s;
}

// Static line chart of log10(loss) against iteration.
inline void write_svg(std::ostream& os, const std::vector<Series>& series, const std::string& title) {
  constexpr double width = 640, height = 400, left = 70, right = 120, top = 40, bottom = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double x_max = 1.0, y_min = std::numeric_limits<double>::infinity(), y_max = -std::numeric_limits<double>::infinity();
  auto ylog = [](double loss) { return std::log10(std::max(loss, 1e-300)); };
  for (const auto& s : series)
    for (const auto& [it, l] : s.points) {
      if (!std::isfinite(l)) continue;
      x_max = std::max(x_max, it);
      y_min = std::min(y_min, ylog(l));
      y_max = std::max(y_max, ylog(l));
    }
  if (!std::isfinite(y_min)) y_min = 0.0, y_max = 1.0;
  if (y_max - y_min < 1e-9) y_max = y_min + 1.0;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double it) { return left + pw * it / x_max; };
  auto py = [&](double ly) { return top + ph * (y_max - ly) / (y_max - y_min); };

  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12 << "\" font-family=\"sans-serif\" font-size=\"12\">iteration (max "
     << std::setprecision(0) << x_max << ")</text>\n"
     << std::setprecision(2);
  os << "<text x=\"8\" y=\"" << top + 4 << "\" font-family=\"sans-serif\" font-size=\"12\">1e" << y_max << "</text>\n";
  os << "<text x=\"8\" y=\"" << top + ph << "\" font-family=\"sans-serif\" font-size=\"12\">1e" << y_min << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    bool first = true;
    for (const auto& [it, l] : series[i].points) {
      if (!std::isfinite(l)) continue;
      os << (first ? "" : " ") << px(it) << ',' << py(ylog(l));
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << left + pw + 10 << "\" y=\"" << top + 16 * (i + 1) << "\" fill=\"" << color
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[i].label << "</text>\n";
  }
  os << "</svg>\n";
}

inline void write_plot_csv(std::ostream& os, const std::vector<Series>& series) {
  os << "series,iter,loss\n" << std::setprecision(17);
  for (const auto& s : series)
    for (const auto& [it, l] : s.points) os << s.label << ',' << static_cast<std::uint64_t>(it) << ',' << l << '\n';
}

// Collects <dir>/<depth>/<schedule>/telemetry.csv and writes one data file
// and one chart per schedule. Returns the written paths.
inline std::vector<fs::path> emit_plot_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "experiment directory does not exist");
  std::map<std::string, std::map<int, fs::path>> by_schedule;
  for (const auto& depth_entry : fs::directory_iterator(dir)) {
    if (!depth_entry.is_directory()) continue;
    int depth = 0;
    try {
      std::size_t used = 0;
      depth = std::stoi(depth_entry.path().filename().string(), &used);
      if (used != depth_entry.path().filename().string().size()) continue;
    } catch (const std::exception&) {
      continue;
    }
    for (const auto& sched_entry : fs::directory_iterator(depth_entry.path())) {
      const fs::path tel = sched_entry.path() / "telemetry.csv";
      if (sched_entry.is_directory() && fs::exists(tel)) by_schedule[sched_entry.path().filename().string()][depth] = tel;
    }
  }
  if (by_schedule.empty()) throw IoError(dir.string(), "no telemetry.csv found under <depth>/<schedule>/");
  std::vector<fs::path> written;
  for (const auto& [sched, depths] : by_schedule) {
    std::vector<Series> series;
    for (const auto& [depth, tel] : depths) series.push_back(read_loss_series(tel, "N=" + std::to_string(depth)));
    const fs::path csv = dir / (sched + ".plot.csv");
    const fs::path svg = dir / (sched + ".svg");
    {
      std::ofstream os(csv);
      if (!os) throw IoError(csv.string(), "cannot open for writing");
      write_plot_csv(os, series);
    }
    {
      std::ofstream os(svg);
      if (!os) throw IoError(svg.string(), "cannot open for writing");
      write_svg(os, series, "loss, schedule " + sched);
    }
    written.push_back(csv);
    written.push_back(svg);
  }
  return written;
}

// ---------------------------------------------------------------------------

inline CellSummary run_cell(const ExperimentConfig& cfg, int depth, const fs::path& root) {
  const GeneratedProblem prob = generate_problem(cfg, depth);
  const StepSizeCert cert = certify_with_rule(prob.net0, prob.data, cfg.delta_rule, cfg.variant);
  const Schedule sched = cfg.schedule.resolve(cert);

  TrainLimits limits;
  limits.max_iters = cfg.max_iters;
  limits.stride = cfg.stride;
  limits.grad_tol = cfg.grad_tol;
  limits.loss_tol = cfg.loss_tol;
  limits.record_wall_time = cfg.record_wall_time;
  const TrainResult run = train(prob.net0, prob.data, sched, cert, limits);

  CellSummary c;
  c.depth = depth;
  c.schedule = cfg.schedule.label();
  c.dir = root / std::to_string(depth) / c.schedule;
  c.cert = cert;
  c.eta0 = schedule_eta(sched, 0);
  c.divergent_sum = sched.divergent_sum();
  c.initial_loss = run.initial_loss;
  c.final_loss = run.final_loss;
  c.final_grad_norm = run.final_grad_norm;
  c.min_grad_norm = run.min_grad_norm;
  c.iterations = run.iterations;
  c.stop = run.stop;
  c.ranks = rank_profile(prob.data, prob.dims, product(run.net));
  c.invariants_held = run.invariants_held;

  std::error_code ec;
  fs::create_directories(c.dir, ec);
  if (ec) throw IoError(c.dir.string(), "cannot create directory: " + ec.message());
  save_telemetry((c.dir / "telemetry.csv").string(), run.records);
  save_certificate((c.dir / "certificate.txt").string(), cert);
  {
    const fs::path p = c.dir / "summary.txt";
    std::ofstream os(p);
    if (!os) throw IoError(p.string(), "cannot open for writing");
    write_summary(os, c, cfg.seed);
  }
  {
    const fs::path p = c.dir / "figure.svg";
    std::ofstream os(p);
    if (!os) throw IoError(p.string(), "cannot open for writing");
    write_svg(os, {read_loss_series(c.dir / "telemetry.csv", "N=" + std::to_string(depth))}, "loss, " + c.schedule);
  }
  return c;
}

// One cell per depth; with jobs > 1 cells run concurrently.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.dir = cfg.out;
  if (cfg.jobs <= 1) {
    for (int depth : cfg.depths) res.cells.push_back(run_cell(cfg, depth, res.dir));
    return res;
  }
  std::vector<std::future<CellSummary>> pending;
  for (std::size_t i = 0; i < cfg.depths.size(); ++i) {
    if (pending.size() >= cfg.jobs) {
      res.cells.push_back(pending.front().get());
      pending.erase(pending.begin());
    }
    pending.push_back(std::async(std::launch::async, run_cell, std::cref(cfg), cfg.depths[i], res.dir));
  }
  for (auto& f : pending) res.cells.push_back(f.get());
  return res;
}

}  // namespace dlnet
