#pragma once

#include <cstddef>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dmu/backprop.hpp"
#include "dmu/datasets.hpp"

namespace dmu {

struct GateTrace {
  Matrix values;  // T x n, post-threshold gate at every step
  std::size_t layer = 0;
  double theta = 0.0;
  std::size_t sequence_id = 0;

  std::size_t steps() const { return values.rows(); }
  std::size_t delays() const { return values.cols(); }
};

// Forward pass over one sequence recording the gate of `layer`. theta
// overrides the layer's threshold. Throws if the layer has no delay line.
GateTrace trace_gates(const Model& model, const Matrix& inputs, std::size_t layer = 0,
                      double theta = 0.0, std::size_t sequence_id = 0);
GateTrace trace_gates(const CellParams& params, const CellConfig& cfg, const Matrix& inputs);

struct WeightHistogram {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<std::size_t> counts;
  std::string source;

  std::size_t total() const;
};

// Equal-width bins over [min, max]; the maximum lands in the last bin. A
// zero span is widened to a unit interval centred on the value.
WeightHistogram weight_histogram(std::span<const double> weights, std::size_t num_bins,
                                 std::string source = {});

// Recurrent weights of a layer: u_h for indrnn, otherwise U of the first
// group.
std::span<const double> recurrent_weights(const CellParams& params);

struct SweepRow {
  std::string point;  // theta value, or "n:tau"
  double theta = 0.0;
  std::size_t num_delays = 0;
  std::size_t dilation = 1;
  double accuracy = 0.0;
  double open_gates = 0.0;
};

struct SweepResult {
  std::string axis;  // theta, n or tau
  std::vector<SweepRow> rows;
};

class SweepError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One evaluation per theta (each in [0, 1]); rows follow the input order.
// Throws SweepError if the mean open-gate count ever rises with theta.
SweepResult threshold_sweep(const Model& model, const SequenceBatch& data, DecodeMode mode,
                            std::span<const double> thetas, std::size_t workers = 1);

// Mean gate vector per label for per-step labelled data, over active steps.
struct GateUsage {
  Matrix mean_gate;  // classes x n
  std::vector<std::size_t> steps_per_class;

  // Largest total-variation distance between the gate profiles of any two
  // classes that were observed.
  double max_class_distance() const;
  // Largest distance between any class profile and the uniform gate 1/n.
  double max_uniform_distance() const;
};

GateUsage gate_usage_by_label(const Model& model, const SequenceBatch& data,
                              std::size_t layer = 0, std::size_t max_sequences = 0);

void write_gate_trace_csv(std::ostream& out, const GateTrace& trace);
void write_histogram_csv(std::ostream& out, const WeightHistogram& hist);
void write_sweep_csv(std::ostream& out, const SweepResult& sweep);

// File variants; throw std::runtime_error if the file cannot be written.
void write_gate_trace_csv(const std::filesystem::path& path, const GateTrace& trace);
void write_histogram_csv(const std::filesystem::path& path, const WeightHistogram& hist);
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep);

}  // namespace dmu
