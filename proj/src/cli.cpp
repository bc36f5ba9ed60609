#include "dmu/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmu/analysis.hpp"
#include "dmu/checkpoint.hpp"
#include "dmu/run_config.hpp"
#include "dmu/training.hpp"

namespace dmu {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<double> theta;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> epochs;
  std::optional<std::string> checkpoint;
};

struct Args {
  CommonArgs common;
  // gradcheck
  std::optional<double> tolerance;
  std::optional<double> epsilon;
  std::optional<std::size_t> samples;
  bool corrupt_gradient = false;
  // sweep
  std::string axis;
  std::vector<double> theta_values;
  std::vector<std::size_t> n_values;
  std::vector<std::size_t> tau_values;
  std::optional<std::size_t> span;
  // trace / hist
  std::optional<std::size_t> sequence;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> bins;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_checkpoint) {
  cmd->add_option("--config", a.config, "run configuration (JSON)")->required();
  cmd->add_option("--out", a.out, "output directory (overrides config)");
  cmd->add_option("--seed", a.seed, "model/shuffle seed (overrides config)");
  cmd->add_option("--theta", a.theta, "gate threshold for evaluation")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--workers", a.workers, "threads for per-sample passes")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", a.epochs, "training epochs (overrides config)");
  if (with_checkpoint) {
    cmd->add_option("--checkpoint", a.checkpoint, "checkpoint to load (default OUT/model.ckpt)");
  }
}

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (a.out) cfg.out = *a.out;
  if (a.seed) cfg.seed = *a.seed;
  if (a.theta) cfg.theta = *a.theta;
  if (a.workers) cfg.workers = *a.workers;
  if (a.epochs) cfg.epochs = *a.epochs;
  return cfg;
}

// The echo stored inside checkpoints leaves out the output directory, so
// identical runs written to different places stay byte-identical.
nlohmann::ordered_json checkpoint_echo(const RunConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("out");
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void prepare_out(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  write_text(cfg.out / "config.json", to_json(cfg).dump(2) + "\n");
}

Model load_model(const RunConfig& cfg, const CommonArgs& a) {
  const fs::path path = a.checkpoint ? fs::path(*a.checkpoint) : cfg.out / "model.ckpt";
  return load_checkpoint(path).model;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

TrainResult run_training(const RunConfig& cfg, const TaskData& data, std::ostream& out,
                         std::ostream* metrics, std::ostream* timing) {
  const Topology topology = build_topology(cfg, data.train.channels(), data.train.num_classes);
  const TrainConfig tc = build_train_config(cfg, topology);
  return train(tc, data.train, &data.test, [&](const MetricsRecord& r, const Model&) {
    if (metrics) append_metrics(*metrics, r);
    if (timing) {
      nlohmann::ordered_json t{{"epoch", r.epoch}, {"wall_seconds", r.wall_seconds}};
      *timing << t.dump() << '\n';
    }
    out << "epoch " << r.epoch << " loss " << fmt(r.train_loss) << " train_acc "
        << fmt(r.train_accuracy) << " test_acc " << fmt(r.test_accuracy.value_or(0.0));
    if (r.gates) out << " open_gates " << fmt(r.gates->mean_open, 3);
    out << '\n';
  });
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const TaskData data = build_task(cfg);
  prepare_out(cfg);
  std::ofstream metrics(cfg.out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream timing(cfg.out / "timing.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics || !timing) throw std::runtime_error("cannot open metrics files in " + cfg.out.string());
  const TrainResult r = run_training(cfg, data, out, &metrics, &timing);
  save_checkpoint(cfg.out / "model.ckpt", r.model, checkpoint_echo(cfg));
  out << "wrote " << (cfg.out / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const CommonArgs& a, std::ostream& out) {
  const Model model = load_model(cfg, a);
  const TaskData data = build_task(cfg);
  const EvalResult r = evaluate(model, data.test, cfg.decode, cfg.theta, cfg.workers);
  nlohmann::ordered_json j{{"accuracy", r.accuracy},
                           {"mean_loss", r.mean_loss},
                           {"correct", r.correct},
                           {"total", r.total},
                           {"theta", cfg.theta},
                           {"open_gates_mean", r.gates.mean_open},
                           {"open_gates_max", r.gates.max_open}};
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, const Args& a, std::ostream& out) {
  const TaskData data = build_task(cfg);
  const Topology topology = build_topology(cfg, data.train.channels(), data.train.num_classes);
  const Model model = init_model(topology, cfg.seed);
  const double eps = a.epsilon.value_or(cfg.gradcheck.epsilon);
  const double tol = a.tolerance.value_or(cfg.gradcheck.tolerance);
  const std::size_t samples = std::min(a.samples.value_or(cfg.gradcheck.samples), data.train.size());
  BackwardOptions options;
  options.sever_recurrent_path = a.corrupt_gradient;
  options.sever_delay_path = a.corrupt_gradient;

  std::map<std::string, double> worst;
  double max_error = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const GradCheckReport r = grad_check(model, data.train.inputs[i], target_for(data.train, i),
                                         cfg.decode, eps, tol, options);
    for (const auto& [name, e] : r.max_rel_error) worst[name] = std::max(worst[name], e);
    max_error = std::max(max_error, r.max_error);
  }
  for (const auto& [name, e] : worst) {
    out << std::left << std::setw(18) << name << ' ' << std::scientific << std::setprecision(3) << e
        << '\n';
  }
  const bool passed = max_error <= tol;
  out << "max_rel_error " << std::scientific << std::setprecision(3) << max_error << " tolerance "
      << tol << (passed ? " PASS" : " FAIL") << '\n';
  out << std::defaultfloat;
  return passed ? kExitOk : kExitRuntime;
}

int cmd_sweep(RunConfig cfg, const Args& a, std::ostream& out) {
  SweepSpec sweep = cfg.sweep;
  if (!a.theta_values.empty()) sweep.theta = a.theta_values;
  if (!a.n_values.empty()) sweep.n = a.n_values;
  if (!a.tau_values.empty()) sweep.tau = a.tau_values;
  if (a.span) sweep.span = *a.span;
  for (double th : sweep.theta) {
    if (!(th >= 0.0 && th <= 1.0)) throw ConfigError("theta values must lie in [0, 1]");
  }
  const std::vector<std::size_t>& axis_values = a.axis == "n" ? sweep.n : sweep.tau;
  if ((a.axis == "theta" && sweep.theta.empty()) || (a.axis != "theta" && axis_values.empty())) {
    throw ConfigError("no values listed for sweep axis '" + a.axis + "'");
  }
  if (a.axis == "tau" && sweep.span) {
    for (std::size_t tau : sweep.tau) {
      if (tau == 0 || sweep.span % tau) throw ConfigError("span must be divisible by every tau");
    }
  }

  const TaskData data = build_task(cfg);
  prepare_out(cfg);
  SweepResult result;
  if (a.axis == "theta") {
    Model model;
    if (a.common.checkpoint) {
      model = load_checkpoint(*a.common.checkpoint).model;
    } else {
      out << "training model for theta sweep\n";
      model = run_training(cfg, data, out, nullptr, nullptr).model;
      save_checkpoint(cfg.out / "model.ckpt", model, checkpoint_echo(cfg));
    }
    result = threshold_sweep(model, data.test, cfg.decode, sweep.theta, cfg.workers);
  } else {
    result.axis = a.axis;
    for (std::size_t v : axis_values) {
      RunConfig point = cfg;
      for (auto& l : point.layers) {
        if (a.axis == "n") {
          l.num_delays = v;
        } else {
          l.dilation = v;
          if (sweep.span) l.num_delays = sweep.span / v;
        }
      }
      const auto& first = point.layers.front();
      out << "training n=" << first.num_delays << " tau=" << first.dilation << '\n';
      const Model model = run_training(point, data, out, nullptr, nullptr).model;
      const EvalResult ev = evaluate(model, data.test, cfg.decode, cfg.theta, cfg.workers);
      SweepRow row;
      row.num_delays = first.num_delays;
      row.dilation = first.dilation;
      row.point = std::to_string(row.num_delays) + ":" + std::to_string(row.dilation);
      row.theta = cfg.theta;
      row.accuracy = ev.accuracy;
      row.open_gates = ev.gates.mean_open;
      result.rows.push_back(row);
    }
  }
  write_sweep_csv(cfg.out / "sweep.csv", result);
  for (const auto& row : result.rows) {
    out << a.axis << ' ' << row.point << " accuracy " << fmt(row.accuracy) << " open_gates "
        << fmt(row.open_gates, 3) << '\n';
  }
  return kExitOk;
}

int cmd_trace(RunConfig cfg, const Args& a, std::ostream& out) {
  if (a.sequence) cfg.analysis.trace_sequence = *a.sequence;
  if (a.layer) cfg.analysis.trace_layer = *a.layer;
  const Model model = load_model(cfg, a.common);
  const TaskData data = build_task(cfg);
  if (cfg.analysis.trace_sequence >= data.test.size()) {
    throw std::out_of_range("sequence index beyond the test set");
  }
  const GateTrace trace = trace_gates(model, data.test.inputs[cfg.analysis.trace_sequence],
                                      cfg.analysis.trace_layer, cfg.theta,
                                      cfg.analysis.trace_sequence);
  prepare_out(cfg);
  write_gate_trace_csv(cfg.out / "gate_trace.csv", trace);
  out << "wrote " << (cfg.out / "gate_trace.csv").string() << " (" << trace.steps() << " x "
      << trace.delays() << ")\n";
  return kExitOk;
}

int cmd_hist(RunConfig cfg, const Args& a, std::ostream& out) {
  if (a.layer) cfg.analysis.trace_layer = *a.layer;
  if (a.bins) cfg.analysis.hist_bins = *a.bins;
  const Model model = load_model(cfg, a.common);
  if (cfg.analysis.trace_layer >= model.layers.size()) throw std::out_of_range("layer index out of range");
  const auto& layer = model.layers[cfg.analysis.trace_layer];
  const std::string source = "layer" + std::to_string(cfg.analysis.trace_layer) +
                             (layer.kind == CellKind::indrnn ? ".u_h" : ".U_" + group_names(layer.kind)[0]);
  const WeightHistogram h = weight_histogram(recurrent_weights(layer), cfg.analysis.hist_bins, source);
  prepare_out(cfg);
  write_histogram_csv(cfg.out / "histogram.csv", h);
  out << "wrote " << (cfg.out / "histogram.csv").string() << " (" << h.total() << " weights from "
      << source << ")\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Delay-gated recurrent networks: training, evaluation and analysis", "dmu"};
  app.require_subcommand(1);
  Args a;

  auto* train = app.add_subcommand("train", "train a model; writes metrics, checkpoint and config");
  add_common(train, a.common, false);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, a.common, true);

  auto* gradcheck = app.add_subcommand("gradcheck", "compare backprop against central differences");
  add_common(gradcheck, a.common, false);
  gradcheck->add_option("--tolerance", a.tolerance, "max relative error")->check(CLI::PositiveNumber);
  gradcheck->add_option("--epsilon", a.epsilon, "finite-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--samples", a.samples, "training sequences to check");
  gradcheck->add_flag("--corrupt-gradient", a.corrupt_gradient,
                      "test hook: drop the recurrent and delay gradient paths");

  auto* sweep = app.add_subcommand("sweep", "sweep theta, n or tau; writes sweep.csv");
  add_common(sweep, a.common, true);
  sweep->add_option("--axis", a.axis, "theta, n or tau")
      ->required()
      ->check(CLI::IsMember({"theta", "n", "tau"}));
  sweep->add_option("--theta-values", a.theta_values, "comma-separated thresholds")->delimiter(',');
  sweep->add_option("--n-values", a.n_values, "comma-separated delay counts")->delimiter(',');
  sweep->add_option("--tau-values", a.tau_values, "comma-separated dilations")->delimiter(',');
  sweep->add_option("--span", a.span, "keep n * tau fixed at this span in a tau sweep");

  auto* trace = app.add_subcommand("trace", "export gate values of one test sequence");
  add_common(trace, a.common, true);
  trace->add_option("--sequence", a.sequence, "test sequence index");
  trace->add_option("--layer", a.layer, "layer index");

  auto* hist = app.add_subcommand("hist", "export a histogram of recurrent weights");
  add_common(hist, a.common, true);
  hist->add_option("--layer", a.layer, "layer index");
  hist->add_option("--bins", a.bins, "number of bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = resolve_config(a.common);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(cfg, out);
    if (*eval) return cmd_eval(cfg, a.common, out);
    if (*gradcheck) return cmd_gradcheck(cfg, a, out);
    if (*sweep) return cmd_sweep(cfg, a, out);
    if (*trace) return cmd_trace(cfg, a, out);
    if (*hist) return cmd_hist(cfg, a, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dmu
