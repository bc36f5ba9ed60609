#include "dmu/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <mutex>
#include <thread>
#include <utility>

#include "json.hpp"

namespace dmu {

namespace {

std::vector<std::span<double>> spans_of(Model& model) {
  std::vector<std::span<double>> out;
  for_each_tensor(model, [&](const std::string&, std::span<double> d, std::size_t, std::size_t) {
    out.push_back(d);
  });
  return out;
}

std::vector<std::span<const double>> spans_of(const Model& model) {
  std::vector<std::span<const double>> out;
  for_each_tensor(model, [&](const std::string&, std::span<const double> d, std::size_t,
                             std::size_t) { out.push_back(d); });
  return out;
}

// Run fn(i) for i in [0, count) on up to `workers` threads. Each index is
// handled by exactly one thread; callers write results into per-index slots.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void accumulate_gates(const ModelForward& f, const Topology& topology, std::size_t length,
                      double& open_sum, std::size_t& samples, std::size_t& max_open) {
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    if (!topology.layers[l].has_delay_line()) continue;
    const auto& caches = f.layers[l].caches;
    const std::size_t steps = std::min(length, caches.size());
    for (std::size_t t = 0; t < steps; ++t) {
      open_sum += static_cast<double>(caches[t].open_count);
      max_open = std::max(max_open, caches[t].open_count);
      ++samples;
    }
  }
}

}  // namespace

AdamState init_adam(const Model& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  s.m = zero_like(params);
  s.v = zero_like(params);
  return s;
}

void adam_update(const AdamConfig& c, std::uint64_t t, std::span<double> param,
                 std::span<const double> grad, std::span<double> m, std::span<double> v) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam: tensor shapes differ");
  }
  const double td = static_cast<double>(t);
  const double c1 = 1.0 - std::pow(c.beta1, td);
  const double c2 = 1.0 - std::pow(c.beta2, td);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

void adam_step(AdamState& adam, Model& params, const Model& grads) {
  auto p = spans_of(params);
  auto g = spans_of(grads);
  auto m = spans_of(adam.m);
  auto v = spans_of(adam.v);
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw DimensionError("adam: tensor lists differ");
  }
  ++adam.step;
  for (std::size_t i = 0; i < p.size(); ++i) adam_update(adam.config, adam.step, p[i], g[i], m[i], v[i]);
}

std::string to_json_line(const MetricsRecord& r, bool include_wall_clock) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["train_accuracy"] = r.train_accuracy;
  if (r.test_accuracy) j["test_accuracy"] = *r.test_accuracy;
  if (r.test_loss) j["test_loss"] = *r.test_loss;
  if (r.gates) {
    j["open_gates_mean"] = r.gates->mean_open;
    j["open_gates_max"] = r.gates->max_open;
  }
  if (include_wall_clock) j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

void append_metrics(std::ostream& out, const MetricsRecord& record, bool include_wall_clock) {
  out << to_json_line(record, include_wall_clock) << '\n';
  out.flush();
}

Target target_for(const SequenceBatch& data, std::size_t index) {
  Target t;
  if (data.per_step()) {
    t.step_labels = data.step_labels[index];
    t.length = data.lengths[index];
  } else {
    t.label = data.labels.at(index);
  }
  return t;
}

void check_compatible(const Topology& topology, const SequenceBatch& data, DecodeMode mode) {
  topology.validate();
  if (data.size() == 0) throw TrainingError("dataset is empty");
  if (data.channels() != topology.input_dim()) {
    throw TrainingError("dataset has " + std::to_string(data.channels()) +
                        " channels, topology expects " + std::to_string(topology.input_dim()));
  }
  if (data.num_classes != topology.num_classes) {
    throw TrainingError("dataset has " + std::to_string(data.num_classes) +
                        " classes, topology expects " + std::to_string(topology.num_classes));
  }
  if ((mode == DecodeMode::per_step) != data.per_step()) {
    throw TrainingError(mode == DecodeMode::per_step
                            ? "per_step decoding needs per-step labels"
                            : "dataset has per-step labels; use per_step decoding");
  }
  if (!data.per_step() && data.labels.size() != data.size()) {
    throw TrainingError("dataset has no class labels");
  }
}

EvalResult evaluate(const Model& model, const SequenceBatch& data, DecodeMode mode, double theta,
                    std::size_t workers) {
  check_compatible(model.topology, data, mode);
  const Topology topo = model.topology.with_threshold(theta);
  struct Slot {
    double loss = 0.0;
    std::size_t correct = 0, total = 0, gate_samples = 0, max_open = 0;
    double open_sum = 0.0;
  };
  std::vector<Slot> slots(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    ModelForward f = forward_model(model, topo, data.inputs[i]);
    LossResult r = compute_loss(mode, model.readout, f.top(), target_for(data, i));
    Slot& s = slots[i];
    s.loss = r.loss;
    s.correct = r.correct;
    s.total = r.total;
    accumulate_gates(f, topo, data.lengths[i], s.open_sum, s.gate_samples, s.max_open);
  });
  EvalResult out;
  double loss = 0.0, open_sum = 0.0;
  for (const Slot& s : slots) {
    loss += s.loss;
    out.correct += s.correct;
    out.total += s.total;
    open_sum += s.open_sum;
    out.gates.steps += s.gate_samples;
    out.gates.max_open = std::max(out.gates.max_open, s.max_open);
  }
  out.accuracy = out.total ? static_cast<double>(out.correct) / static_cast<double>(out.total) : 0.0;
  out.mean_loss = out.total ? loss / static_cast<double>(out.total) : 0.0;
  out.gates.mean_open = out.gates.steps ? open_sum / static_cast<double>(out.gates.steps) : 0.0;
  return out;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Stream ids below 2^32 are taken by parameter initialisation.
  SeededRng rng = SeededRng(seed).fork((std::uint64_t{1} << 32) + epoch);
  rng.shuffle(order);
  return order;
}

TrainResult train(const TrainConfig& cfg, const SequenceBatch& train_set,
                  const SequenceBatch* test, const EpochCallback& on_epoch) {
  cfg.topology.validate();
  return train_from(cfg, init_model(cfg.topology, cfg.seed), train_set, test, on_epoch);
}

TrainResult train_from(const TrainConfig& cfg, Model model, const SequenceBatch& train_set,
                       const SequenceBatch* test, const EpochCallback& on_epoch) {
  check_compatible(model.topology, train_set, cfg.decode);
  if (test) check_compatible(model.topology, *test, cfg.decode);
  if (cfg.batch_size == 0) throw TrainingError("batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw TrainingError("learning rate must be positive");

  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;
  TrainResult result{model, init_adam(model, adam_cfg), {}};
  Model& params = result.model;

  const std::size_t count = train_set.size();
  const Model zero = zero_like(params);
  std::vector<Model> sample_grads;
  std::vector<LossResult> sample_losses;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto order = epoch_order(cfg.seed, epoch, count);
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;

    for (std::size_t begin = 0; begin < count; begin += cfg.batch_size) {
      const std::size_t size = std::min(cfg.batch_size, count - begin);
      sample_grads.assign(size, zero);
      sample_losses.assign(size, LossResult{});
      parallel_for(size, cfg.workers, [&](std::size_t j) {
        const std::size_t i = order[begin + j];
        sample_losses[j] = loss_and_gradient(params, train_set.inputs[i], target_for(train_set, i),
                                             cfg.decode, sample_grads[j]);
      });

      // Reduce in batch order so the sum is independent of the worker count.
      Model batch_grad = zero;
      auto dst = spans_of(batch_grad);
      for (std::size_t j = 0; j < size; ++j) {
        auto src = spans_of(std::as_const(sample_grads[j]));
        for (std::size_t k = 0; k < dst.size(); ++k) add_to(dst[k], src[k]);
        loss_sum += sample_losses[j].loss;
        correct += sample_losses[j].correct;
        total += sample_losses[j].total;
      }
      const double scale = 1.0 / static_cast<double>(size);
      for (auto& d : dst) {
        for (double& v : d) v *= scale;
      }
      adam_step(result.adam, params, batch_grad);
    }

    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = total ? loss_sum / static_cast<double>(total) : 0.0;
    rec.train_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    if (test) {
      const EvalResult ev = evaluate(params, *test, cfg.decode, cfg.eval_threshold, cfg.workers);
      rec.test_accuracy = ev.accuracy;
      rec.test_loss = ev.mean_loss;
      if (cfg.eval_threshold > 0.0) rec.gates = ev.gates;
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec, params);
  }
  return result;
}

}  // namespace dmu
