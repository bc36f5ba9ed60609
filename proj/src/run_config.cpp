#include "dmu/run_config.hpp"

#include <fstream>
#include <sstream>

#include "json_fields.hpp"

namespace dmu {

using json_fields::optional;
using json_fields::reject_unknown;
using json_fields::required;

namespace {

std::uint64_t test_seed(std::uint64_t seed) { return SeededRng(seed).fork(1).next_u64(); }

bool is_file_task(const TaskSpec& task) {
  return std::holds_alternative<IdxTask>(task) || std::holds_alternative<EventsTask>(task);
}

TaskSpec parse_task(const nlohmann::json& j, const std::filesystem::path& base) {
  const std::string where = "task";
  if (!j.is_object()) throw std::invalid_argument("task must be an object");
  const auto kind = required<std::string>(j, "kind", where);
  auto path_of = [&](const char* key) {
    std::filesystem::path p = required<std::string>(j, key, where);
    return p.is_relative() ? base / p : p;
  };
  if (kind == "delayed_recall") {
    reject_unknown(j, {"kind", "alphabet", "delay", "length", "distractors", "anchored", "noise",
                       "noise_channels", "seed", "train_size", "test_size"},
                   where);
    DelayedRecallTask t;
    auto& s = t.spec;
    s.alphabet = optional<std::size_t>(j, "alphabet", s.alphabet, where);
    s.delay = optional<std::size_t>(j, "delay", s.delay, where);
    s.length = optional<std::size_t>(j, "length", s.length, where);
    s.distractors = optional<bool>(j, "distractors", s.distractors, where);
    s.anchored = optional<bool>(j, "anchored", s.anchored, where);
    s.noise = optional<bool>(j, "noise", s.noise, where);
    s.noise_channels = optional<std::size_t>(j, "noise_channels", s.noise_channels, where);
    s.seed = optional<std::uint64_t>(j, "seed", s.seed, where);
    s.validate();
    return t;
  }
  if (kind == "adding") {
    reject_unknown(j, {"kind", "length", "classes", "seed", "train_size", "test_size"}, where);
    AddingTask t;
    t.spec.length = optional<std::size_t>(j, "length", t.spec.length, where);
    t.spec.classes = required<std::size_t>(j, "classes", where);
    t.spec.seed = optional<std::uint64_t>(j, "seed", t.spec.seed, where);
    if (t.spec.classes < 2) throw std::invalid_argument("task.classes must be at least 2");
    return t;
  }
  if (kind == "ecg") {
    reject_unknown(j, {"kind", "length", "min_active", "noise", "seed", "train_size", "test_size"},
                   where);
    EcgTask t;
    t.spec.length = optional<std::size_t>(j, "length", t.spec.length, where);
    t.spec.min_active = optional<std::size_t>(j, "min_active", t.spec.min_active, where);
    t.spec.noise = optional<double>(j, "noise", t.spec.noise, where);
    t.spec.seed = optional<std::uint64_t>(j, "seed", t.spec.seed, where);
    return t;
  }
  if (kind == "idx") {
    reject_unknown(j, {"kind", "train_images", "train_labels", "test_images", "test_labels",
                       "permute", "permutation_seed", "num_classes", "train_size", "test_size"},
                   where);
    IdxTask t;
    t.train_images = path_of("train_images");
    t.train_labels = path_of("train_labels");
    t.test_images = path_of("test_images");
    t.test_labels = path_of("test_labels");
    t.permute = optional<bool>(j, "permute", t.permute, where);
    t.permutation_seed = optional<std::uint64_t>(j, "permutation_seed", t.permutation_seed, where);
    t.num_classes = optional<std::size_t>(j, "num_classes", t.num_classes, where);
    return t;
  }
  if (kind == "events") {
    reject_unknown(j, {"kind", "train_manifest", "test_manifest", "num_channels", "bin_width",
                       "num_bins", "num_classes", "train_size", "test_size"},
                   where);
    EventsTask t;
    t.train_manifest = path_of("train_manifest");
    t.test_manifest = path_of("test_manifest");
    t.bins.num_channels = required<std::size_t>(j, "num_channels", where);
    t.bins.bin_width = optional<double>(j, "bin_width", t.bins.bin_width, where);
    t.bins.num_bins = optional<std::size_t>(j, "num_bins", t.bins.num_bins, where);
    t.num_classes = required<std::size_t>(j, "num_classes", where);
    if (!(t.bins.bin_width > 0.0)) throw std::invalid_argument("task.bin_width must be positive");
    return t;
  }
  throw std::invalid_argument("unknown task kind '" + kind +
                              "' (expected delayed_recall, adding, ecg, idx or events)");
}

LayerSpec parse_layer(const nlohmann::json& j, std::size_t index) {
  const std::string where = "model.layers[" + std::to_string(index) + "]";
  reject_unknown(j, {"cell", "hidden", "num_delays", "dilation", "activation"}, where);
  LayerSpec l;
  l.kind = parse_cell_kind(required<std::string>(j, "cell", where));
  l.hidden = required<std::size_t>(j, "hidden", where);
  l.num_delays = optional<std::size_t>(j, "num_delays", l.num_delays, where);
  l.dilation = optional<std::size_t>(j, "dilation", l.dilation, where);
  l.activation = parse_activation(optional<std::string>(j, "activation", "tanh", where));
  return l;
}

template <typename T>
std::vector<T> parse_list(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) return {};
  const auto& arr = j.at(key);
  if (!arr.is_array()) throw std::invalid_argument(where + "." + key + " must be a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    nlohmann::json wrap = {{"v", arr[i]}};
    out.push_back(required<T>(wrap, "v", where + "." + key + "[" + std::to_string(i) + "]"));
  }
  return out;
}

SequenceBatch load_event_manifest(const std::filesystem::path& manifest, const EventsTask& task,
                                  std::size_t limit) {
  std::ifstream in(manifest);
  if (!in) throw DatasetError("cannot open " + manifest.string());
  SequenceBatch batch;
  batch.num_classes = task.num_classes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    int label = -1;
    std::string file;
    if (!(fields >> label >> file)) {
      throw DatasetError(manifest.string() + ":" + std::to_string(lineno) +
                         ": expected 'label path'");
    }
    const auto events = load_event_file(manifest.parent_path() / file);
    auto binned = bin_event_stream(events, task.bins);
    batch.inputs.push_back(std::move(binned.counts));
    batch.labels.push_back(label);
    batch.lengths.push_back(task.bins.num_bins);
    if (limit && batch.size() == limit) break;
  }
  batch.validate();
  return batch;
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
  try {
    RunConfig cfg;
    reject_unknown(j, {"task", "model", "train", "decode", "theta", "seed", "out", "sweep",
                       "gradcheck", "analysis", "base_dir"},
                   "config");
    const std::filesystem::path base = optional<std::string>(j, "base_dir", "", "config");
    cfg.task = parse_task(required<nlohmann::json>(j, "task", "config"), base);
    const auto& task = j.at("task");
    const bool file_task = is_file_task(cfg.task);
    cfg.train_size = optional<std::size_t>(task, "train_size", file_task ? 0 : 1000, "task");
    cfg.test_size = optional<std::size_t>(task, "test_size", file_task ? 0 : 500, "task");
    if (!file_task && (cfg.train_size == 0 || cfg.test_size == 0)) {
      throw std::invalid_argument("task.train_size and task.test_size must be positive");
    }

    const auto model = required<nlohmann::json>(j, "model", "config");
    reject_unknown(model, {"layers"}, "model");
    const auto layers = required<nlohmann::json>(model, "layers", "model");
    if (!layers.is_array() || layers.empty()) {
      throw std::invalid_argument("model.layers must be a non-empty list");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) cfg.layers.push_back(parse_layer(layers[i], i));

    if (j.contains("train")) {
      const auto& t = j.at("train");
      reject_unknown(t, {"learning_rate", "epochs", "batch_size", "workers"}, "train");
      cfg.learning_rate = optional<double>(t, "learning_rate", cfg.learning_rate, "train");
      cfg.epochs = optional<std::size_t>(t, "epochs", cfg.epochs, "train");
      cfg.batch_size = optional<std::size_t>(t, "batch_size", cfg.batch_size, "train");
      cfg.workers = optional<std::size_t>(t, "workers", cfg.workers, "train");
      if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
      if (cfg.batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
      if (cfg.workers == 0) throw std::invalid_argument("train.workers must be positive");
    }
    cfg.decode = parse_decode_mode(optional<std::string>(j, "decode", "last", "config"));
    if (std::holds_alternative<EcgTask>(cfg.task) != (cfg.decode == DecodeMode::per_step)) {
      throw std::invalid_argument("decode must be per_step exactly for the ecg task");
    }
    cfg.theta = optional<double>(j, "theta", cfg.theta, "config");
    if (!(cfg.theta >= 0.0 && cfg.theta <= 1.0)) throw std::invalid_argument("theta must lie in [0, 1]");
    cfg.seed = optional<std::uint64_t>(j, "seed", cfg.seed, "config");
    cfg.out = optional<std::string>(j, "out", cfg.out.string(), "config");

    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      reject_unknown(s, {"theta", "n", "tau", "span"}, "sweep");
      cfg.sweep.theta = parse_list<double>(s, "theta", "sweep");
      cfg.sweep.n = parse_list<std::size_t>(s, "n", "sweep");
      cfg.sweep.tau = parse_list<std::size_t>(s, "tau", "sweep");
      cfg.sweep.span = optional<std::size_t>(s, "span", 0, "sweep");
      for (double th : cfg.sweep.theta) {
        if (!(th >= 0.0 && th <= 1.0)) throw std::invalid_argument("sweep.theta values must lie in [0, 1]");
      }
      for (std::size_t tau : cfg.sweep.tau) {
        if (tau == 0) throw std::invalid_argument("sweep.tau values must be positive");
        if (cfg.sweep.span && cfg.sweep.span % tau != 0) {
          throw std::invalid_argument("sweep.span must be divisible by every tau");
        }
      }
    }
    if (j.contains("gradcheck")) {
      const auto& g = j.at("gradcheck");
      reject_unknown(g, {"epsilon", "tolerance", "samples"}, "gradcheck");
      cfg.gradcheck.epsilon = optional<double>(g, "epsilon", cfg.gradcheck.epsilon, "gradcheck");
      cfg.gradcheck.tolerance = optional<double>(g, "tolerance", cfg.gradcheck.tolerance, "gradcheck");
      cfg.gradcheck.samples = optional<std::size_t>(g, "samples", cfg.gradcheck.samples, "gradcheck");
    }
    if (j.contains("analysis")) {
      const auto& a = j.at("analysis");
      reject_unknown(a, {"trace_sequence", "trace_layer", "hist_bins"}, "analysis");
      cfg.analysis.trace_sequence =
          optional<std::size_t>(a, "trace_sequence", cfg.analysis.trace_sequence, "analysis");
      cfg.analysis.trace_layer =
          optional<std::size_t>(a, "trace_layer", cfg.analysis.trace_layer, "analysis");
      cfg.analysis.hist_bins = optional<std::size_t>(a, "hist_bins", cfg.analysis.hist_bins, "analysis");
      if (cfg.analysis.hist_bins == 0) throw std::invalid_argument("analysis.hist_bins must be positive");
    }
    return cfg;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  // Relative data paths resolve against the config's directory.
  if (j.is_object() && !j.contains("base_dir")) j["base_dir"] = path.parent_path().string();
  return parse_run_config(j);
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json task;
  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, DelayedRecallTask>) {
          task["kind"] = "delayed_recall";
          task["alphabet"] = t.spec.alphabet;
          task["delay"] = t.spec.delay;
          task["length"] = t.spec.length;
          task["distractors"] = t.spec.distractors;
          task["anchored"] = t.spec.anchored;
          task["noise"] = t.spec.noise;
          task["noise_channels"] = t.spec.noise_channels;
          task["seed"] = t.spec.seed;
        } else if constexpr (std::is_same_v<T, AddingTask>) {
          task["kind"] = "adding";
          task["length"] = t.spec.length;
          task["classes"] = t.spec.classes;
          task["seed"] = t.spec.seed;
        } else if constexpr (std::is_same_v<T, EcgTask>) {
          task["kind"] = "ecg";
          task["length"] = t.spec.length;
          task["min_active"] = t.spec.min_active;
          task["noise"] = t.spec.noise;
          task["seed"] = t.spec.seed;
        } else if constexpr (std::is_same_v<T, IdxTask>) {
          task["kind"] = "idx";
          task["train_images"] = t.train_images.string();
          task["train_labels"] = t.train_labels.string();
          task["test_images"] = t.test_images.string();
          task["test_labels"] = t.test_labels.string();
          task["permute"] = t.permute;
          task["permutation_seed"] = t.permutation_seed;
          task["num_classes"] = t.num_classes;
        } else {
          task["kind"] = "events";
          task["train_manifest"] = t.train_manifest.string();
          task["test_manifest"] = t.test_manifest.string();
          task["num_channels"] = t.bins.num_channels;
          task["bin_width"] = t.bins.bin_width;
          task["num_bins"] = t.bins.num_bins;
          task["num_classes"] = t.num_classes;
        }
      },
      cfg.task);
  task["train_size"] = cfg.train_size;
  task["test_size"] = cfg.test_size;
  j["task"] = task;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : cfg.layers) {
    layers.push_back({{"cell", to_string(l.kind)},
                      {"hidden", l.hidden},
                      {"num_delays", l.num_delays},
                      {"dilation", l.dilation},
                      {"activation", to_string(l.activation)}});
  }
  j["model"] = {{"layers", layers}};
  j["train"] = {{"learning_rate", cfg.learning_rate},
                {"epochs", cfg.epochs},
                {"batch_size", cfg.batch_size},
                {"workers", cfg.workers}};
  j["decode"] = to_string(cfg.decode);
  j["theta"] = cfg.theta;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out.string();
  j["sweep"] = {{"theta", cfg.sweep.theta},
                {"n", cfg.sweep.n},
                {"tau", cfg.sweep.tau},
                {"span", cfg.sweep.span}};
  j["gradcheck"] = {{"epsilon", cfg.gradcheck.epsilon},
                    {"tolerance", cfg.gradcheck.tolerance},
                    {"samples", cfg.gradcheck.samples}};
  j["analysis"] = {{"trace_sequence", cfg.analysis.trace_sequence},
                   {"trace_layer", cfg.analysis.trace_layer},
                   {"hist_bins", cfg.analysis.hist_bins}};
  return j;
}

TaskData build_task(const RunConfig& cfg) {
  TaskData data;
  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, DelayedRecallTask>) {
          auto test = t.spec;
          test.seed = test_seed(t.spec.seed);
          data.train = gen_delayed_recall(t.spec, cfg.train_size);
          data.test = gen_delayed_recall(test, cfg.test_size);
        } else if constexpr (std::is_same_v<T, AddingTask>) {
          auto test = t.spec;
          test.seed = test_seed(t.spec.seed);
          data.train = gen_adding(t.spec, cfg.train_size);
          data.test = gen_adding(test, cfg.test_size);
        } else if constexpr (std::is_same_v<T, EcgTask>) {
          auto test = t.spec;
          test.seed = test_seed(t.spec.seed);
          data.train = gen_ecg_stream(t.spec, cfg.train_size);
          data.test = gen_ecg_stream(test, cfg.test_size);
        } else if constexpr (std::is_same_v<T, IdxTask>) {
          auto load = [&](const std::filesystem::path& images, const std::filesystem::path& labels,
                          std::size_t limit) {
            IdxImages img = load_idx_images(images);
            std::vector<int> lbl = load_idx_labels(labels);
            if (limit && limit < img.count) {
              img.count = limit;
              img.pixels.resize(limit * img.rows * img.cols);
              lbl.resize(std::min(lbl.size(), limit));
            }
            const std::size_t P = img.rows * img.cols;
            const auto perm = t.permute ? PermutationSpec::make(P, t.permutation_seed)
                                        : PermutationSpec::identity(P);
            return permute_sequence(img, lbl, perm, t.num_classes);
          };
          data.train = load(t.train_images, t.train_labels, cfg.train_size);
          data.test = load(t.test_images, t.test_labels, cfg.test_size);
        } else {
          data.train = load_event_manifest(t.train_manifest, t, cfg.train_size);
          data.test = load_event_manifest(t.test_manifest, t, cfg.test_size);
        }
      },
      cfg.task);
  return data;
}

std::size_t task_channels(const RunConfig&, const TaskData& data) { return data.train.channels(); }

Topology build_topology(const RunConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  Topology t;
  t.num_classes = num_classes;
  std::size_t in = input_dim;
  for (const auto& l : cfg.layers) {
    CellConfig c;
    c.kind = l.kind;
    c.input_dim = in;
    c.hidden_dim = l.hidden;
    c.delay.num_delays = l.num_delays;
    c.delay.dilation = l.dilation;
    c.g_activation = l.activation;
    t.layers.push_back(c);
    in = l.hidden;
  }
  t.validate();
  return t;
}

TrainConfig build_train_config(const RunConfig& cfg, const Topology& topology) {
  TrainConfig t;
  t.learning_rate = cfg.learning_rate;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.seed = cfg.seed;
  t.decode = cfg.decode;
  t.topology = topology;
  t.workers = cfg.workers;
  t.eval_threshold = cfg.theta;
  return t;
}

}  // namespace dmu
