#include "commands.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "dlnet/dlnet.hpp"

namespace dlnet::cli {
namespace {

namespace fs = std::filesystem;

// Options shared by every subcommand that builds a problem.
struct ProblemOpts {
  int d = 70;
  int m_factor = 3;
  int r = 2;
  int depth = 2;
  std::uint64_t seed = 0;
  std::string data_dir;  // X.csv, Y.csv and optionally net0.txt; overrides generation
};

void add_problem_opts(CLI::App* app, ProblemOpts& p) {
  app->add_option("--d", p.d, "input/output dimension")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--m-factor", p.m_factor, "samples per dimension (m = m_factor * d)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--r", p.r, "rank of the target and width of the first hidden layer")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--depth", p.depth, "number of layers N")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--seed", p.seed, "random seed")->capture_default_str();
  app->add_option("--data-dir", p.data_dir, "read X.csv, Y.csv (and net0.txt) instead of generating");
}

struct Problem {
  Dataset data;
  NetworkTuple net0;
  std::vector<int> dims;
};

Problem load_problem(const ProblemOpts& p) {
  if (p.data_dir.empty()) {
    ExperimentConfig cfg;
    cfg.d = p.d;
    cfg.m_factor = p.m_factor;
    cfg.r = p.r;
    cfg.seed = p.seed;
    cfg.depths = {p.depth};
    GeneratedProblem g = generate_problem(cfg, p.depth);
    return {std::move(g.data), std::move(g.net0), std::move(g.dims)};
  }
  const fs::path dir(p.data_dir);
  Dataset data(load_matrix((dir / "X.csv").string()), load_matrix((dir / "Y.csv").string()));
  NetworkTuple net0;
  std::vector<int> dims;
  if (fs::exists(dir / "net0.txt")) {
    net0 = load_network((dir / "net0.txt").string());
    dims = net0.dims();
  } else {
    dims = dims_schedule(data.input_dim(), p.r, p.depth);
    if (data.output_dim() != dims.back())
      throw DimensionError("generated dims end at " + std::to_string(dims.back()) + " but Y has " +
                           std::to_string(data.output_dim()) + " rows; supply net0.txt");
    net0 = balanced_init(dims, p.seed + 1);
  }
  return {std::move(data), std::move(net0), std::move(dims)};
}

struct CertOpts {
  std::string delta_rule = "n_cubed";
  std::optional<double> delta;
  std::string variant = "standard";
};

void add_cert_opts(CLI::App* app, CertOpts& c) {
  app->add_option("--delta-rule", c.delta_rule, "n_cubed | n_np1_squared | numeric_opt")->capture_default_str();
  app->add_option("--delta", c.delta, "explicit delta (overrides --delta-rule)");
  app->add_option("--variant", c.variant, "layer bound coefficient: standard ((N+1)^2) | improved (N^2)")->capture_default_str();
}

StepSizeCert make_cert(const Problem& p, const CertOpts& c) {
  const BoundVariant v = parse_bound_variant(c.variant);
  if (c.delta) return certify(p.net0, p.data, *c.delta, v);
  return certify_with_rule(p.net0, p.data, parse_delta_rule(c.delta_rule), v);
}

struct ScheduleOpts {
  std::string mode = "certified";
  double a1 = 1e-3;
  double a2 = 1e-3;
  double gamma = 0.0;
};

void add_schedule_opts(CLI::App* app, ScheduleOpts& s) {
  app->add_option("--schedule", s.mode, "certified | certified-decay | constant | power")->capture_default_str();
  app->add_option("--a1", s.a1, "constant step, or cap of the power schedule")->capture_default_str();
  app->add_option("--a2", s.a2, "power schedule numerator")->capture_default_str();
  app->add_option("--gamma", s.gamma, "power schedule decay rate")->capture_default_str();
}

ScheduleSpec to_spec(const ScheduleOpts& s) {
  ScheduleSpec spec;
  spec.mode = parse_schedule_mode(s.mode);
  spec.a1 = s.a1;
  spec.a2 = s.a2;
  spec.gamma = s.gamma;
  return spec;
}

struct LimitOpts {
  std::uint64_t max_iters = 1'000'000;
  std::uint64_t stride = 100;
  double grad_tol = 1e-10;
  double loss_tol = 0.0;
};

void add_limit_opts(CLI::App* app, LimitOpts& l) {
  app->add_option("--max-iters", l.max_iters, "iteration budget")->capture_default_str();
  app->add_option("--stride", l.stride, "telemetry stride")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--grad-tol", l.grad_tol, "stop when ||grad||_F falls below")->capture_default_str();
  app->add_option("--loss-tol", l.loss_tol, "stop when the loss falls below (0 disables)")->capture_default_str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
}

void print_cert(std::ostream& out, const StepSizeCert& c) { write_certificate(out, c); }

bool run_ok(StopKind k) { return k != StopKind::diverged && k != StopKind::invariant_violation; }

// ---------------------------------------------------------------------------

int cmd_generate(const ProblemOpts& p, const std::string& out_dir, std::ostream& out) {
  ExperimentConfig cfg;
  cfg.d = p.d;
  cfg.m_factor = p.m_factor;
  cfg.r = p.r;
  cfg.seed = p.seed;
  const GeneratedProblem g = generate_problem(cfg, p.depth);
  const fs::path dir(out_dir);
  ensure_dir(dir);
  save_matrix((dir / "X.csv").string(), g.data.x());
  save_matrix((dir / "Y.csv").string(), g.data.y());
  save_network((dir / "net0.txt").string(), g.net0);
  save_network((dir / "teacher.txt").string(), g.teacher);
  out << "wrote " << dir.string() << " (d=" << p.d << " m=" << cfg.samples() << " N=" << p.depth << " dims=";
  for (std::size_t i = 0; i < g.dims.size(); ++i) out << (i ? "," : "") << g.dims[i];
  out << ")\n";
  return kOk;
}

int cmd_certify(const ProblemOpts& p, const CertOpts& c, const std::string& out_file, std::ostream& out) {
  const Problem prob = load_problem(p);
  const StepSizeCert cert = make_cert(prob, c);
  print_cert(out, cert);
  if (!out_file.empty()) save_certificate(out_file, cert);
  return kOk;
}

int cmd_train(const ProblemOpts& p, const CertOpts& c, const ScheduleOpts& s, const LimitOpts& l,
              const std::string& out_dir, std::ostream& out) {
  const Problem prob = load_problem(p);
  const StepSizeCert cert = make_cert(prob, c);
  const Schedule sched = to_spec(s).resolve(cert);
  TrainLimits limits;
  limits.max_iters = l.max_iters;
  limits.stride = l.stride;
  limits.grad_tol = l.grad_tol;
  limits.loss_tol = l.loss_tol;
  limits.record_wall_time = false;
  const TrainResult res = train(prob.net0, prob.data, sched, cert, limits);
  out << std::setprecision(10) << "eta0=" << schedule_eta(sched, 0) << " certified_eta=" << cert.eta_max << '\n'
      << "stop=" << to_string(res.stop.kind) << " (" << res.stop.detail << ")\n"
      << "iterations=" << res.iterations << " initial_loss=" << res.initial_loss << " final_loss=" << res.final_loss
      << " final_grad_norm=" << res.final_grad_norm << '\n';
  if (!out_dir.empty()) {
    const fs::path dir(out_dir);
    ensure_dir(dir);
    save_telemetry((dir / "telemetry.csv").string(), res.records);
    save_certificate((dir / "certificate.txt").string(), cert);
    save_network((dir / "final.txt").string(), res.net);
  }
  return run_ok(res.stop.kind) ? kOk : kRunFailed;
}

int cmd_flow(const ProblemOpts& p, const std::string& kind, double t_end, double dt, std::size_t stride,
             const std::string& out_file, std::ostream& out) {
  const Problem prob = load_problem(p);
  FlowOptions opts;
  opts.record_stride = stride;
  FlowTrajectory traj;
  if (kind == "tuple")
    traj = integrate_tuple_flow(prob.net0, prob.data, t_end, dt, opts);
  else if (kind == "product")
    traj = integrate_product_flow(prob.net0, prob.data, t_end, dt, opts);
  else
    throw ParameterError("unknown flow kind '" + kind + "' (expected tuple|product)");
  if (out_file.empty())
    write_flow_csv(out, traj);
  else
    save_flow_csv(out_file, traj);
  const FlowState& last = traj.states.back();
  if (!out_file.empty())
    out << std::setprecision(10) << "t=" << last.t << " loss=" << last.loss << " rank=" << last.product_rank << '\n';
  return kOk;
}

int cmd_experiment(const ExperimentConfig& cfg, std::ostream& out) {
  const ExperimentResult res = run_experiment(cfg);
  bool ok = true;
  out << std::setprecision(6);
  for (const auto& c : res.cells) {
    out << "N=" << c.depth << " schedule=" << c.schedule << " eta0=" << c.eta0 << " iterations=" << c.iterations
        << " final_loss=" << c.final_loss << " stop=" << to_string(c.stop.kind) << " k=" << c.ranks.k
        << " r_bar=" << c.ranks.r_bar << '\n';
    ok = ok && run_ok(c.stop.kind);
  }
  for (const auto& p : emit_plot_data(res.dir)) out << "wrote " << p.string() << '\n';
  return ok ? kOk : kRunFailed;
}

int cmd_plot(const std::string& dir, std::ostream& out) {
  for (const auto& p : emit_plot_data(dir)) out << "wrote " << p.string() << '\n';
  return kOk;
}

// Lines are key=value (keys are long option names without dashes); blank
// lines, [section] headers and lines starting with # or ; are skipped.
void apply_config_file(CLI::App* app, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open config file");
  auto trim = [](std::string v) {
    const auto b = v.find_first_not_of(" \t\r"), e = v.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : v.substr(b, e - b + 1);
  };
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    CLI::Option* opt = key == "config" ? nullptr : app->get_option_no_throw("--" + key);
    if (opt == nullptr) throw ParameterError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient descent on deep linear networks: certified step sizes, training, flows, experiments"};
  app.require_subcommand(1);

  // generate
  ProblemOpts gen_p;
  std::string gen_out = "problem";
  auto* gen = app.add_subcommand("generate", "write a synthetic problem (X, Y, start and teacher tuples)");
  add_problem_opts(gen, gen_p);
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();

  // certify
  ProblemOpts cert_p;
  CertOpts cert_c;
  std::string cert_out;
  auto* cert = app.add_subcommand("certify", "print the certified step size for a problem");
  add_problem_opts(cert, cert_p);
  add_cert_opts(cert, cert_c);
  cert->add_option("--out", cert_out, "also write the certificate to this file");

  // train
  ProblemOpts tr_p;
  CertOpts tr_c;
  ScheduleOpts tr_s;
  LimitOpts tr_l;
  std::string tr_out;
  auto* tr = app.add_subcommand("train", "run gradient descent on one problem");
  add_problem_opts(tr, tr_p);
  add_cert_opts(tr, tr_c);
  add_schedule_opts(tr, tr_s);
  add_limit_opts(tr, tr_l);
  tr->add_option("--out", tr_out, "directory for telemetry.csv, certificate.txt, final.txt");

  // flow
  ProblemOpts fl_p;
  std::string fl_kind = "tuple", fl_out;
  double fl_t = 1.0, fl_dt = 1e-3;
  std::size_t fl_stride = 100;
  auto* fl = app.add_subcommand("flow", "integrate the tuple or product gradient flow with RK4");
  add_problem_opts(fl, fl_p);
  fl->add_option("--kind", fl_kind, "tuple | product")->capture_default_str();
  fl->add_option("--t-end", fl_t, "horizon")->capture_default_str();
  fl->add_option("--dt", fl_dt, "RK4 step")->capture_default_str();
  fl->add_option("--stride", fl_stride, "record every this many steps")->capture_default_str()->check(CLI::PositiveNumber);
  fl->add_option("--out", fl_out, "CSV file (stdout if omitted)");

  // experiment
  ExperimentConfig ex;
  ScheduleOpts ex_s;
  std::string ex_rule = "n_cubed", ex_variant = "standard";
  auto* exp = app.add_subcommand("experiment", "run the depth sweep and write telemetry, certificates and plots");
  std::string ex_config;
  exp->add_option("--config", ex_config, "key=value file with any of these options; flags given on the command line win");
  exp->add_option("--d", ex.d, "input/output dimension")->capture_default_str()->check(CLI::PositiveNumber);
  exp->add_option("--m-factor", ex.m_factor, "samples per dimension")->capture_default_str()->check(CLI::PositiveNumber);
  exp->add_option("--r", ex.r, "target rank / first hidden width")->capture_default_str()->check(CLI::PositiveNumber);
  exp->add_option("--depths", ex.depths, "comma separated depths")->delimiter(',')->capture_default_str();
  add_schedule_opts(exp, ex_s);
  exp->add_option("--delta-rule", ex_rule, "n_cubed | n_np1_squared | numeric_opt")->capture_default_str();
  exp->add_option("--variant", ex_variant, "standard | improved")->capture_default_str();
  exp->add_option("--seed", ex.seed, "random seed")->capture_default_str();
  exp->add_option("--max-iters", ex.max_iters, "iteration budget per run")->capture_default_str();
  exp->add_option("--stride", ex.stride, "telemetry stride")->capture_default_str()->check(CLI::PositiveNumber);
  exp->add_option("--grad-tol", ex.grad_tol, "gradient tolerance")->capture_default_str();
  exp->add_option("--loss-tol", ex.loss_tol, "loss tolerance (0 disables)")->capture_default_str();
  exp->add_option("--jobs", ex.jobs, "depths run concurrently")->capture_default_str();
  exp->add_flag("--wall-time", ex.record_wall_time, "record wall clock in telemetry (not byte-reproducible)");
  exp->add_option("--out", ex.out, "output directory")->capture_default_str();

  // plot
  std::string plot_dir = "out";
  auto* plot = app.add_subcommand("plot", "rebuild per-schedule plot data and SVG charts from an experiment directory");
  plot->add_option("--dir", plot_dir, "experiment directory")->capture_default_str();

  std::vector<std::string> rev;  // CLI11 consumes args in reverse, without the program name
  if (!args.empty()) rev.assign(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kBadUsage;
  }

  try {
    if (*exp && !ex_config.empty()) apply_config_file(exp, ex_config);
  } catch (const CLI::ParseError& e) {
    err << "error: " << ex_config << ": " << e.what() << '\n';
    return kBadUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kBadUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }

  try {
    if (*gen) return cmd_generate(gen_p, gen_out, out);
    if (*cert) return cmd_certify(cert_p, cert_c, cert_out, out);
    if (*tr) return cmd_train(tr_p, tr_c, tr_s, tr_l, tr_out, out);
    if (*fl) return cmd_flow(fl_p, fl_kind, fl_t, fl_dt, fl_stride, fl_out, out);
    if (*exp) {
      ex.schedule = to_spec(ex_s);
      ex.delta_rule = parse_delta_rule(ex_rule);
      ex.variant = parse_bound_variant(ex_variant);
      return cmd_experiment(ex, out);
    }
    if (*plot) return cmd_plot(plot_dir, out);
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kBadUsage;
  } catch (const ConstructionError& e) {
    err << "error: " << e.what() << '\n';
    return kBadUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kBadUsage;
}

}  // namespace dlnet::cli
