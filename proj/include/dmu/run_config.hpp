#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dmu/backprop.hpp"
#include "dmu/datasets.hpp"
#include "dmu/training.hpp"
#include "json.hpp"

namespace dmu {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DelayedRecallTask {
  DelayedRecallSpec spec;
};

struct AddingTask {
  AddingSpec spec;  // classes >= 2: the CLI trains classifiers only
};

struct EcgTask {
  EcgSynthSpec spec;
};

struct IdxTask {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  bool permute = true;
  std::uint64_t permutation_seed = 0;
  std::size_t num_classes = 10;
  std::size_t train_limit = 0;  // 0 = everything
  std::size_t test_limit = 0;
};

// Manifest files list one "label path" pair per line; paths are relative to
// the manifest. Each event file uses the plain-text event format.
struct EventsTask {
  std::filesystem::path train_manifest, test_manifest;
  EventBinSpec bins;
  std::size_t num_classes = 2;
};

using TaskSpec = std::variant<DelayedRecallTask, AddingTask, EcgTask, IdxTask, EventsTask>;

struct LayerSpec {
  CellKind kind = CellKind::rnn;
  std::size_t hidden = 1;
  std::size_t num_delays = 0;
  std::size_t dilation = 1;
  Activation activation = Activation::tanh;
};

struct SweepSpec {
  std::vector<double> theta;
  std::vector<std::size_t> n;
  std::vector<std::size_t> tau;
  // When nonzero, a tau sweep sets n = span / tau at every point.
  std::size_t span = 0;
};

struct GradCheckSpec {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples = 1;
};

struct AnalysisSpec {
  std::size_t trace_sequence = 0;
  std::size_t trace_layer = 0;
  std::size_t hist_bins = 30;
};

struct RunConfig {
  TaskSpec task;
  std::size_t train_size = 1000;
  std::size_t test_size = 500;
  std::vector<LayerSpec> layers;
  double learning_rate = 0.001;
  std::size_t epochs = 120;
  std::size_t batch_size = 128;
  std::size_t workers = 1;
  DecodeMode decode = DecodeMode::last;
  double theta = 0.0;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  SweepSpec sweep;
  GradCheckSpec gradcheck;
  AnalysisSpec analysis;
};

// Throws ConfigError with the offending key in the message.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Fully resolved configuration, defaults included.
nlohmann::ordered_json to_json(const RunConfig& cfg);

struct TaskData {
  SequenceBatch train;
  SequenceBatch test;
};

// Generates or loads the train and test sets (test uses its own seed
// stream for generators).
TaskData build_task(const RunConfig& cfg);
std::size_t task_channels(const RunConfig& cfg, const TaskData& data);

Topology build_topology(const RunConfig& cfg, std::size_t input_dim, std::size_t num_classes);
TrainConfig build_train_config(const RunConfig& cfg, const Topology& topology);

}  // namespace dmu
