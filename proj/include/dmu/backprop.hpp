#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dmu/cells.hpp"
#include "dmu/numerics.hpp"

namespace dmu {

// last:     cross-entropy on the readout of the final step.
// all:      readout integrator; cross-entropy on the time-mean of the logits.
// per_step: summed cross-entropy against one label per step (segmentation).
enum class DecodeMode { last, all, per_step };

DecodeMode parse_decode_mode(const std::string& name);
std::string to_string(DecodeMode mode);

struct SequenceForward {
  Matrix outputs;  // T x N, row t is h_t
  std::vector<StepCache> caches;
};

// Runs the cell over `inputs` (T x M) from a freshly reset state.
SequenceForward forward_cache_sequence(const CellParams& params, const CellConfig& cfg,
                                       const Matrix& inputs);

struct BackwardOptions {
  // Negative control for gradient checking: drops the gradient that flows
  // backward along the delay line (h_{t+k*tau} -> h~_t).
  bool sever_delay_path = false;
  // Drops dL/dh_{t-1} contributed through the inner recurrence.
  bool sever_recurrent_path = false;
};

struct SequenceGradient {
  CellParams params;  // same shapes as the cell parameters
  Matrix inputs;      // T x M, dL/dx_t
};

// Exact reverse-mode BPTT. dL_dh (T x N) holds the loss gradient w.r.t.
// every h_t. Neither caches nor params are modified.
SequenceGradient backward_sequence(const CellParams& params, const CellConfig& cfg,
                                   std::span<const StepCache> caches, const Matrix& dL_dh,
                                   const BackwardOptions& options = {});

inline SequenceGradient dmu_backward_sequence(const CellParams& params, const DmuConfig& cfg,
                                              std::span<const StepCache> caches,
                                              const Matrix& dL_dh) {
  return backward_sequence(params, cfg, caches, dL_dh);
}

struct Readout {
  Matrix W;  // C x N
  Vector b;  // C

  friend bool operator==(const Readout&, const Readout&) = default;
};

struct Target {
  int label = -1;                   // last / all
  std::span<const int> step_labels;  // per_step
  std::size_t length = 0;           // per_step: only the first `length` steps count (0 = all)
};

struct LossResult {
  double loss = 0.0;
  Matrix d_hidden;  // T x N
  Readout d_readout;
  std::size_t correct = 0;
  std::size_t total = 0;
};

LossResult compute_loss(DecodeMode mode, const Readout& readout, const Matrix& hidden,
                        const Target& target);

struct Topology {
  std::vector<CellConfig> layers;
  std::size_t num_classes = 2;

  std::size_t input_dim() const { return layers.front().input_dim; }
  std::size_t output_dim() const { return layers.back().hidden_dim; }
  void validate() const;
  // Same topology with every layer's gate threshold replaced.
  Topology with_threshold(double theta) const;

  friend bool operator==(const Topology&, const Topology&) = default;
};

struct Model {
  Topology topology;
  std::vector<CellParams> layers;
  Readout readout;

  friend bool operator==(const Model&, const Model&) = default;
};

Model init_model(const Topology& topology, std::uint64_t seed);
Model zero_like(const Model& model);

namespace detail {
template <typename M, typename Fn>
void visit_model_tensors(M& model, Fn&& fn) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for_each_tensor(model.layers[l], [&](const std::string& name, auto data, std::size_t rows,
                                         std::size_t cols) { fn(prefix + name, data, rows, cols); });
  }
  fn(std::string("readout.W"), model.readout.W.span(), model.readout.W.rows(),
     model.readout.W.cols());
  fn(std::string("readout.b"), model.readout.b.span(), model.readout.b.size(), std::size_t{1});
}
}  // namespace detail

template <typename Fn>
void for_each_tensor(Model& model, Fn&& fn) {
  detail::visit_model_tensors(model, fn);
}
template <typename Fn>
void for_each_tensor(const Model& model, Fn&& fn) {
  detail::visit_model_tensors(model, fn);
}

std::size_t parameter_count(const Model& model);

struct ModelForward {
  std::vector<SequenceForward> layers;
  const Matrix& top() const { return layers.back().outputs; }
};

// `topology` overrides the model's own (used to run inference with a gate
// threshold); it must describe the same shapes.
ModelForward forward_model(const Model& model, const Topology& topology, const Matrix& inputs);
ModelForward forward_model(const Model& model, const Matrix& inputs);

// Loss for one sequence; accumulates parameter gradients into `grads`.
LossResult loss_and_gradient(const Model& model, const Matrix& inputs, const Target& target,
                             DecodeMode mode, Model& grads, const BackwardOptions& options = {});

double loss_only(const Model& model, const Matrix& inputs, const Target& target,
                 DecodeMode mode);

struct GradCheckReport {
  std::map<std::string, double> max_rel_error;  // per tensor
  double max_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  bool passed = false;
};

// Central differences on every scalar parameter; relative error uses the
// denominator max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const Model& model, const Matrix& inputs, const Target& target,
                           DecodeMode mode, double epsilon = 1e-5, double tolerance = 1e-4,
                           const BackwardOptions& options = {});

}  // namespace dmu
