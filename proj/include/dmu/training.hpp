#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmu/backprop.hpp"
#include "dmu/datasets.hpp"

namespace dmu {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First and second moments mirror the parameter tensors of the model.
struct AdamState {
  AdamConfig config;
  Model m;
  Model v;
  std::uint64_t step = 0;
};

AdamState init_adam(const Model& params, const AdamConfig& config = {});

// Bias-corrected update on a single tensor; t is the (already incremented)
// step count.
void adam_update(const AdamConfig& config, std::uint64_t t, std::span<double> param,
                 std::span<const double> grad, std::span<double> m, std::span<double> v);

// One update of every tensor; shapes must match.
void adam_step(AdamState& adam, Model& params, const Model& grads);

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 120;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  DecodeMode decode = DecodeMode::last;
  Topology topology;
  // Threads used for the per-sample forward/backward passes. Results do not
  // depend on it.
  std::size_t workers = 1;
  // Threshold used when evaluating on the test set after each epoch.
  double eval_threshold = 0.0;
};

struct GateStats {
  double mean_open = 0.0;  // per step and per delay line
  std::size_t max_open = 0;
  std::size_t steps = 0;
};

struct MetricsRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> test_loss;
  double wall_seconds = 0.0;
  std::optional<GateStats> gates;  // only when thresholding is active
};

// Compact single-line JSON. The wall-clock field is left out unless asked
// for, so metric files are reproducible byte for byte.
std::string to_json_line(const MetricsRecord& record, bool include_wall_clock = false);
void append_metrics(std::ostream& out, const MetricsRecord& record,
                    bool include_wall_clock = false);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;  // per scored decision (sequence or step)
  std::size_t correct = 0;
  std::size_t total = 0;
  GateStats gates;
};

// Pure inference; theta overrides each layer's gate threshold.
EvalResult evaluate(const Model& model, const SequenceBatch& data, DecodeMode mode,
                    double theta = 0.0, std::size_t workers = 1);

Target target_for(const SequenceBatch& data, std::size_t index);

// Visiting order of the training samples in a given (0-based) epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count);

struct TrainResult {
  Model model;
  AdamState adam;
  std::vector<MetricsRecord> history;
};

using EpochCallback = std::function<void(const MetricsRecord&, const Model&)>;

// Mini-batch Adam on the mean batch loss. `test` may be null.
TrainResult train(const TrainConfig& cfg, const SequenceBatch& train_set,
                  const SequenceBatch* test = nullptr, const EpochCallback& on_epoch = {});

// Same, continuing from an existing model.
TrainResult train_from(const TrainConfig& cfg, Model model, const SequenceBatch& train_set,
                       const SequenceBatch* test = nullptr, const EpochCallback& on_epoch = {});

void check_compatible(const Topology& topology, const SequenceBatch& data, DecodeMode mode);

}  // namespace dmu
