#include "dmu/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "dmu/training.hpp"

namespace dmu {

namespace {

GateTrace trace_from(const SequenceForward& f, std::size_t n) {
  GateTrace trace;
  trace.values = Matrix(f.caches.size(), n);
  for (std::size_t t = 0; t < f.caches.size(); ++t) {
    const auto& g = f.caches[t].gate;
    std::copy(g.span().begin(), g.span().end(), trace.values.row(t).begin());
  }
  return trace;
}

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename Writer, typename Item>
void write_file(const std::filesystem::path& path, const Item& item, Writer writer) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  writer(out, item);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

GateTrace trace_gates(const Model& model, const Matrix& inputs, std::size_t layer, double theta,
                      std::size_t sequence_id) {
  if (layer >= model.layers.size()) throw std::out_of_range("layer index out of range");
  const Topology topo = model.topology.with_threshold(theta);
  if (!topo.layers[layer].has_delay_line()) {
    throw std::invalid_argument("layer " + std::to_string(layer) + " has no delay line");
  }
  ModelForward f = forward_model(model, topo, inputs);
  GateTrace trace = trace_from(f.layers[layer], topo.layers[layer].delay.num_delays);
  trace.layer = layer;
  trace.theta = theta;
  trace.sequence_id = sequence_id;
  return trace;
}

GateTrace trace_gates(const CellParams& params, const CellConfig& cfg, const Matrix& inputs) {
  if (!cfg.has_delay_line()) throw std::invalid_argument("cell has no delay line");
  GateTrace trace = trace_from(forward_cache_sequence(params, cfg, inputs), cfg.delay.num_delays);
  trace.theta = cfg.delay.gate_threshold;
  return trace;
}

std::size_t WeightHistogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

WeightHistogram weight_histogram(std::span<const double> weights, std::size_t num_bins,
                                 std::string source) {
  if (weights.empty()) throw std::invalid_argument("histogram of an empty weight set");
  if (num_bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  if (!all_finite(weights)) throw std::invalid_argument("histogram of non-finite weights");
  auto [lo_it, hi_it] = std::minmax_element(weights.begin(), weights.end());
  double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  WeightHistogram h;
  h.source = std::move(source);
  h.counts.assign(num_bins, 0);
  const double width = (hi - lo) / static_cast<double>(num_bins);
  for (std::size_t i = 0; i <= num_bins; ++i) {
    h.edges.push_back(i == num_bins ? hi : lo + width * static_cast<double>(i));
  }
  for (double w : weights) {
    auto bin = static_cast<std::size_t>((w - lo) / width);
    h.counts[std::min(bin, num_bins - 1)] += 1;
  }
  return h;
}

std::span<const double> recurrent_weights(const CellParams& params) {
  if (params.kind == CellKind::indrnn) return params.u_diag.span();
  return params.groups.at(0).U.span();
}

SweepResult threshold_sweep(const Model& model, const SequenceBatch& data, DecodeMode mode,
                            std::span<const double> thetas, std::size_t workers) {
  SweepResult sweep;
  sweep.axis = "theta";
  for (double theta : thetas) {
    if (!(theta >= 0.0 && theta <= 1.0)) {
      throw std::invalid_argument("theta " + format_double(theta) + " outside [0, 1]");
    }
    const EvalResult r = evaluate(model, data, mode, theta, workers);
    SweepRow row;
    row.point = format_double(theta);
    row.theta = theta;
    const auto& layer = model.topology.layers.front();
    row.num_delays = layer.delay.num_delays;
    row.dilation = layer.delay.dilation;
    row.accuracy = r.accuracy;
    row.open_gates = r.gates.mean_open;
    sweep.rows.push_back(row);
  }
  std::vector<const SweepRow*> by_theta;
  for (const auto& r : sweep.rows) by_theta.push_back(&r);
  std::stable_sort(by_theta.begin(), by_theta.end(),
                   [](const SweepRow* a, const SweepRow* b) { return a->theta < b->theta; });
  for (std::size_t i = 1; i < by_theta.size(); ++i) {
    if (by_theta[i]->open_gates > by_theta[i - 1]->open_gates) {
      throw SweepError("open gates rose from " + format_double(by_theta[i - 1]->open_gates) +
                       " at theta " + by_theta[i - 1]->point + " to " +
                       format_double(by_theta[i]->open_gates) + " at theta " + by_theta[i]->point);
    }
  }
  return sweep;
}

double GateUsage::max_class_distance() const {
  double worst = 0.0;
  for (std::size_t a = 0; a < mean_gate.rows(); ++a) {
    if (steps_per_class[a] == 0) continue;
    for (std::size_t b = a + 1; b < mean_gate.rows(); ++b) {
      if (steps_per_class[b] == 0) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < mean_gate.cols(); ++k) {
        d += std::abs(mean_gate(a, k) - mean_gate(b, k));
      }
      worst = std::max(worst, 0.5 * d);
    }
  }
  return worst;
}

double GateUsage::max_uniform_distance() const {
  const double u = 1.0 / static_cast<double>(mean_gate.cols());
  double worst = 0.0;
  for (std::size_t a = 0; a < mean_gate.rows(); ++a) {
    if (steps_per_class[a] == 0) continue;
    double d = 0.0;
    for (std::size_t k = 0; k < mean_gate.cols(); ++k) d += std::abs(mean_gate(a, k) - u);
    worst = std::max(worst, 0.5 * d);
  }
  return worst;
}

GateUsage gate_usage_by_label(const Model& model, const SequenceBatch& data, std::size_t layer,
                              std::size_t max_sequences) {
  if (!data.per_step()) throw std::invalid_argument("gate usage needs per-step labels");
  if (layer >= model.layers.size()) throw std::out_of_range("layer index out of range");
  const std::size_t n = model.topology.layers[layer].delay.num_delays;
  GateUsage usage;
  usage.mean_gate = Matrix(data.num_classes, n);
  usage.steps_per_class.assign(data.num_classes, 0);
  const std::size_t count = max_sequences ? std::min(max_sequences, data.size()) : data.size();
  for (std::size_t i = 0; i < count; ++i) {
    const GateTrace trace = trace_gates(model, data.inputs[i], layer, 0.0, i);
    for (std::size_t t = 0; t < data.lengths[i]; ++t) {
      const auto c = static_cast<std::size_t>(data.step_labels[i][t]);
      add_to(usage.mean_gate.row(c), trace.values.row(t));
      ++usage.steps_per_class[c];
    }
  }
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    if (usage.steps_per_class[c] == 0) continue;
    for (double& v : usage.mean_gate.row(c)) v /= static_cast<double>(usage.steps_per_class[c]);
  }
  return usage;
}

void write_gate_trace_csv(std::ostream& out, const GateTrace& trace) {
  out << "step,delay_index,value\n";
  for (std::size_t t = 0; t < trace.steps(); ++t) {
    for (std::size_t k = 0; k < trace.delays(); ++k) {
      // Delay indices are 1-based: tap k delivers k * tau steps later.
      out << t << ',' << (k + 1) << ',' << format_double(trace.values(t, k)) << '\n';
    }
  }
}

void write_histogram_csv(std::ostream& out, const WeightHistogram& hist) {
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    out << format_double(hist.edges[i]) << ',' << format_double(hist.edges[i + 1]) << ','
        << hist.counts[i] << '\n';
  }
}

void write_sweep_csv(std::ostream& out, const SweepResult& sweep) {
  out << "theta_or_n_tau,accuracy,open_gates\n";
  for (const auto& row : sweep.rows) {
    out << row.point << ',' << format_double(row.accuracy) << ',' << format_double(row.open_gates)
        << '\n';
  }
}

void write_gate_trace_csv(const std::filesystem::path& path, const GateTrace& trace) {
  write_file(path, trace, [](std::ostream& o, const GateTrace& t) { write_gate_trace_csv(o, t); });
}

void write_histogram_csv(const std::filesystem::path& path, const WeightHistogram& hist) {
  write_file(path, hist,
             [](std::ostream& o, const WeightHistogram& h) { write_histogram_csv(o, h); });
}

void write_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep) {
  write_file(path, sweep, [](std::ostream& o, const SweepResult& s) { write_sweep_csv(o, s); });
}

}  // namespace dmu
