#include "dmu/backprop.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dmu {

DecodeMode parse_decode_mode(const std::string& name) {
  if (name == "last") return DecodeMode::last;
  if (name == "all") return DecodeMode::all;
  if (name == "per_step") return DecodeMode::per_step;
  throw std::invalid_argument("unknown decode mode '" + name + "'");
}

std::string to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::last: return "last";
    case DecodeMode::all: return "all";
    case DecodeMode::per_step: return "per_step";
  }
  return "?";
}

SequenceForward forward_cache_sequence(const CellParams& params, const CellConfig& cfg,
                                       const Matrix& inputs) {
  if (inputs.rows() == 0) throw DimensionError("empty input sequence");
  if (inputs.cols() != cfg.input_dim) {
    throw DimensionError("input has " + std::to_string(inputs.cols()) + " channels, cell expects " +
                         std::to_string(cfg.input_dim));
  }
  const std::size_t T = inputs.rows();
  SequenceForward out{Matrix(T, cfg.hidden_dim), std::vector<StepCache>(T)};
  CellState state = reset_state(cfg);
  Vector x(cfg.input_dim);
  for (std::size_t t = 0; t < T; ++t) {
    std::copy(inputs.row(t).begin(), inputs.row(t).end(), x.span().begin());
    cell_forward(params, cfg, state, x, out.caches[t]);
    std::copy(out.caches[t].h.span().begin(), out.caches[t].h.span().end(),
              out.outputs.row(t).begin());
  }
  return out;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Accumulates gradients of out = W x + U h + b given d(out) = da.
void affine_backward(const AffineGroup& p, AffineGroup& g, std::span<const double> da,
                     std::span<const double> x, std::span<const double> h,
                     std::span<double> dx, std::span<double> dh) {
  outer_acc(da, x, g.W);
  add_to(g.b.span(), da);
  matvec_transposed_acc(p.W, da, dx);
  if (p.U.size() > 0) {
    outer_acc(da, h, g.U);
    if (!dh.empty()) matvec_transposed_acc(p.U, da, dh);
  }
}

}  // namespace

SequenceGradient backward_sequence(const CellParams& params, const CellConfig& cfg,
                                   std::span<const StepCache> caches, const Matrix& dL_dh,
                                   const BackwardOptions& options) {
  const std::size_t T = caches.size();
  const std::size_t N = cfg.hidden_dim;
  const std::size_t M = cfg.input_dim;
  const std::size_t n = cfg.delay.num_delays;
  const std::size_t tau = cfg.delay.dilation;
  check_shapes(params, cfg);
  if (T == 0) throw DimensionError("backward over an empty cache");
  if (dL_dh.rows() != T || dL_dh.cols() != N) {
    throw DimensionError("dL_dh is " + std::to_string(dL_dh.rows()) + "x" +
                         std::to_string(dL_dh.cols()) + " but the cache covers " +
                         std::to_string(T) + " steps of width " + std::to_string(N));
  }

  SequenceGradient result{zero_params(cfg), Matrix(T, M)};
  CellParams& g = result.params;

  Matrix gh = dL_dh;  // total gradient w.r.t. h_t, completed before step t is visited
  std::vector<double> g_tilde(N);
  std::vector<double> g_c_next(N, 0.0);
  std::vector<double> g_hd_next(n, 0.0);
  std::vector<double> g_hd_prev(n);
  std::vector<double> gd(n);
  std::vector<double> ga(n);
  std::vector<double> scratch(N);
  std::vector<double> none;

  const double theta = cfg.delay.gate_threshold;

  for (std::size_t t = T; t-- > 0;) {
    const StepCache& c = caches[t];
    auto dh_t = gh.row(t);
    auto dx_t = result.inputs.row(t);
    const bool drop_recurrent = t == 0 || options.sever_recurrent_path;
    std::span<double> dh_prev = drop_recurrent ? std::span<double>(scratch) : gh.row(t - 1);
    if (drop_recurrent) std::fill(scratch.begin(), scratch.end(), 0.0);

    std::copy(dh_t.begin(), dh_t.end(), g_tilde.begin());

    if (n > 0) {
      // h~_t reaches h_{t+k*tau} scaled by d_t[k].
      std::fill(gd.begin(), gd.end(), 0.0);
      for (std::size_t k = 1; k <= n; ++k) {
        const std::size_t s = t + k * tau;
        if (s >= T) break;
        auto dh_s = gh.row(s);
        gd[k - 1] = dot(dh_s, c.h_tilde.span());
        if (!options.sever_delay_path) {
          const double w = c.gate[k - 1];
          for (std::size_t i = 0; i < N; ++i) g_tilde[i] += w * dh_s[i];
        }
      }
      // Softmax Jacobian, masked by the (piecewise constant) threshold.
      double weighted = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (theta > 0.0 && c.gate_raw[k] < theta) gd[k] = 0.0;
        weighted += gd[k] * c.gate_raw[k];
      }
      for (std::size_t k = 0; k < n; ++k) {
        ga[k] = c.gate_raw[k] * (gd[k] - weighted);
        ga[k] += g_hd_next[k] *
                 activation_derivative(cfg.g_activation, c.gate_preact[k], c.h_d[k]);
      }
      outer_acc(ga, c.x.span(), g.delay.W_d);
      outer_acc(ga, c.hd_prev.span(), g.delay.U_d);
      add_to(g.delay.b_d.span(), ga);
      matvec_transposed_acc(params.delay.W_d, ga, dx_t);
      std::fill(g_hd_prev.begin(), g_hd_prev.end(), 0.0);
      matvec_transposed_acc(params.delay.U_d, ga, g_hd_prev);
      std::swap(g_hd_next, g_hd_prev);
    }

    const auto x = c.x.span();
    const auto h_prev = c.h_prev.span();
    switch (cfg.kind) {
      case CellKind::rnn:
      case CellKind::indrnn: {
        std::vector<double> da(N);
        for (std::size_t i = 0; i < N; ++i) {
          da[i] = g_tilde[i] *
                  activation_derivative(cfg.g_activation, c.gates[0][i], c.h_tilde[i]);
        }
        affine_backward(params.groups[0], g.groups[0], da, x, h_prev, dx_t, dh_prev);
        if (cfg.kind == CellKind::indrnn) {
          for (std::size_t i = 0; i < N; ++i) {
            g.u_diag[i] += da[i] * h_prev[i];
            dh_prev[i] += da[i] * params.u_diag[i];
          }
        }
        break;
      }
      case CellKind::lstm: {
        const Vector& ig = c.gates[0];
        const Vector& fg = c.gates[1];
        const Vector& og = c.gates[2];
        const Vector& zg = c.gates[3];
        std::vector<double> da_i(N), da_f(N), da_o(N), da_z(N);
        for (std::size_t k = 0; k < N; ++k) {
          const double tc = std::tanh(c.c[k]);
          const double go = g_tilde[k] * tc;
          const double gc = g_c_next[k] + g_tilde[k] * og[k] * (1.0 - tc * tc);
          da_i[k] = gc * zg[k] * ig[k] * (1.0 - ig[k]);
          da_f[k] = gc * c.c_prev[k] * fg[k] * (1.0 - fg[k]);
          da_o[k] = go * og[k] * (1.0 - og[k]);
          da_z[k] = gc * ig[k] * (1.0 - zg[k] * zg[k]);
          g_c_next[k] = gc * fg[k];
        }
        affine_backward(params.groups[0], g.groups[0], da_i, x, h_prev, dx_t, dh_prev);
        affine_backward(params.groups[1], g.groups[1], da_f, x, h_prev, dx_t, dh_prev);
        affine_backward(params.groups[2], g.groups[2], da_o, x, h_prev, dx_t, dh_prev);
        affine_backward(params.groups[3], g.groups[3], da_z, x, h_prev, dx_t, dh_prev);
        break;
      }
      case CellKind::gru: {
        const Vector& zg = c.gates[0];
        const Vector& rg = c.gates[1];
        const Vector& ng = c.gates[2];
        std::vector<double> da_n(N), da_z(N), da_r(N), reset_h(N), g_rh(N, 0.0);
        for (std::size_t k = 0; k < N; ++k) {
          da_n[k] = g_tilde[k] * (1.0 - zg[k]) * (1.0 - ng[k] * ng[k]);
          da_z[k] = g_tilde[k] * (h_prev[k] - ng[k]) * zg[k] * (1.0 - zg[k]);
          dh_prev[k] += g_tilde[k] * zg[k];
          reset_h[k] = rg[k] * h_prev[k];
        }
        // Candidate group sees r * h instead of h.
        affine_backward(params.groups[2], g.groups[2], da_n, x, reset_h, dx_t, g_rh);
        for (std::size_t k = 0; k < N; ++k) {
          da_r[k] = g_rh[k] * h_prev[k] * rg[k] * (1.0 - rg[k]);
          dh_prev[k] += g_rh[k] * rg[k];
        }
        affine_backward(params.groups[0], g.groups[0], da_z, x, h_prev, dx_t, dh_prev);
        affine_backward(params.groups[1], g.groups[1], da_r, x, h_prev, dx_t, dh_prev);
        break;
      }
    }
  }
  return result;
}

namespace {

double log_softmax_ce(std::span<const double> logits, int target, std::span<double> d_logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - peak);
  const double log_norm = peak + std::log(total);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    d_logits[c] = std::exp(logits[c] - log_norm);
  }
  d_logits[static_cast<std::size_t>(target)] -= 1.0;
  return log_norm - logits[static_cast<std::size_t>(target)];
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_target(int target, std::size_t classes) {
  if (target < 0 || static_cast<std::size_t>(target) >= classes) {
    throw std::out_of_range("target class " + std::to_string(target) + " outside [0, " +
                            std::to_string(classes) + ")");
  }
}

}  // namespace

LossResult compute_loss(DecodeMode mode, const Readout& readout, const Matrix& hidden,
                        const Target& target) {
  const std::size_t C = readout.W.rows();
  const std::size_t N = readout.W.cols();
  const std::size_t T = hidden.rows();
  if (C < 2) throw std::invalid_argument("readout needs at least two classes");
  if (hidden.cols() != N || readout.b.size() != C) {
    throw DimensionError("readout shape does not match the hidden width");
  }
  if (T == 0) throw DimensionError("empty hidden sequence");

  LossResult r;
  r.d_hidden = Matrix(T, N);
  r.d_readout = Readout{Matrix(C, N), Vector(C)};
  std::vector<double> logits(C);
  std::vector<double> d_logits(C);

  auto logits_at = [&](std::size_t t, std::span<double> out) {
    std::copy(readout.b.span().begin(), readout.b.span().end(), out.begin());
    matvec_acc(readout.W, hidden.row(t), out);
  };
  auto backprop_step = [&](std::size_t t, std::span<const double> d_out) {
    outer_acc(d_out, hidden.row(t), r.d_readout.W);
    add_to(r.d_readout.b.span(), d_out);
    matvec_transposed_acc(readout.W, d_out, r.d_hidden.row(t));
  };

  switch (mode) {
    case DecodeMode::last: {
      check_target(target.label, C);
      logits_at(T - 1, logits);
      r.loss = log_softmax_ce(logits, target.label, d_logits);
      backprop_step(T - 1, d_logits);
      r.correct = argmax(logits) == static_cast<std::size_t>(target.label) ? 1 : 0;
      r.total = 1;
      break;
    }
    case DecodeMode::all: {
      check_target(target.label, C);
      std::vector<double> step(C);
      std::fill(logits.begin(), logits.end(), 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        logits_at(t, step);
        for (std::size_t k = 0; k < C; ++k) logits[k] += step[k];
      }
      for (double& z : logits) z /= static_cast<double>(T);
      r.loss = log_softmax_ce(logits, target.label, d_logits);
      for (double& d : d_logits) d /= static_cast<double>(T);
      for (std::size_t t = 0; t < T; ++t) backprop_step(t, d_logits);
      r.correct = argmax(logits) == static_cast<std::size_t>(target.label) ? 1 : 0;
      r.total = 1;
      break;
    }
    case DecodeMode::per_step: {
      if (target.step_labels.size() != T) {
        throw DimensionError("per-step targets cover " + std::to_string(target.step_labels.size()) +
                             " steps, sequence has " + std::to_string(T));
      }
      const std::size_t len = target.length == 0 ? T : std::min(target.length, T);
      for (std::size_t t = 0; t < len; ++t) {
        check_target(target.step_labels[t], C);
        logits_at(t, logits);
        r.loss += log_softmax_ce(logits, target.step_labels[t], d_logits);
        backprop_step(t, d_logits);
        if (argmax(logits) == static_cast<std::size_t>(target.step_labels[t])) ++r.correct;
      }
      r.total = len;
      break;
    }
  }
  return r;
}

void Topology::validate() const {
  if (layers.empty()) throw std::invalid_argument("topology needs at least one layer");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].validate();
    if (l > 0 && layers[l].input_dim != layers[l - 1].hidden_dim) {
      throw std::invalid_argument("layer " + std::to_string(l) + " input_dim " +
                                  std::to_string(layers[l].input_dim) +
                                  " does not match previous hidden_dim " +
                                  std::to_string(layers[l - 1].hidden_dim));
    }
  }
}

Topology Topology::with_threshold(double theta) const {
  Topology t = *this;
  for (auto& layer : t.layers) layer.delay.gate_threshold = theta;
  return t;
}

Model init_model(const Topology& topology, std::uint64_t seed) {
  topology.validate();
  Model m;
  m.topology = topology;
  for (std::size_t l = 0; l < topology.layers.size(); ++l) {
    SeededRng rng = SeededRng(seed).fork(l);
    m.layers.push_back(init_params(topology.layers[l], rng));
  }
  SeededRng rng = SeededRng(seed).fork(topology.layers.size());
  const std::size_t N = topology.output_dim();
  m.readout.W = init_kaiming(rng, topology.num_classes, N, N);
  m.readout.b = init_kaiming_vector(rng, topology.num_classes, N);
  return m;
}

Model zero_like(const Model& model) {
  Model z = model;
  for_each_tensor(z, [](const std::string&, std::span<double> data, std::size_t, std::size_t) {
    std::fill(data.begin(), data.end(), 0.0);
  });
  return z;
}

std::size_t parameter_count(const Model& model) {
  std::size_t total = 0;
  for_each_tensor(model, [&](const std::string&, std::span<const double> data, std::size_t,
                             std::size_t) { total += data.size(); });
  return total;
}

ModelForward forward_model(const Model& model, const Topology& topology, const Matrix& inputs) {
  if (topology.layers.size() != model.layers.size()) {
    throw DimensionError("topology and model disagree on layer count");
  }
  ModelForward f;
  f.layers.reserve(model.layers.size());
  const Matrix* in = &inputs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    f.layers.push_back(forward_cache_sequence(model.layers[l], topology.layers[l], *in));
    in = &f.layers.back().outputs;
  }
  return f;
}

ModelForward forward_model(const Model& model, const Matrix& inputs) {
  return forward_model(model, model.topology, inputs);
}

LossResult loss_and_gradient(const Model& model, const Matrix& inputs, const Target& target,
                             DecodeMode mode, Model& grads, const BackwardOptions& options) {
  ModelForward f = forward_model(model, inputs);
  LossResult r = compute_loss(mode, model.readout, f.top(), target);

  add_to(grads.readout.W.span(), r.d_readout.W.span());
  add_to(grads.readout.b.span(), r.d_readout.b.span());

  Matrix upstream = r.d_hidden;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    SequenceGradient sg = backward_sequence(model.layers[l], model.topology.layers[l],
                                            f.layers[l].caches, upstream, options);
    auto src = sg.params;
    std::vector<std::span<double>> dst;
    for_each_tensor(grads.layers[l], [&](const std::string&, std::span<double> data, std::size_t,
                                         std::size_t) { dst.push_back(data); });
    std::size_t i = 0;
    for_each_tensor(src, [&](const std::string&, std::span<const double> data, std::size_t,
                             std::size_t) { add_to(dst[i++], data); });
    upstream = std::move(sg.inputs);
  }
  return r;
}

double loss_only(const Model& model, const Matrix& inputs, const Target& target,
                 DecodeMode mode) {
  ModelForward f = forward_model(model, inputs);
  return compute_loss(mode, model.readout, f.top(), target).loss;
}

GradCheckReport grad_check(const Model& model, const Matrix& inputs, const Target& target,
                           DecodeMode mode, double epsilon, double tolerance,
                           const BackwardOptions& options) {
  Model analytic = zero_like(model);
  loss_and_gradient(model, inputs, target, mode, analytic, options);

  std::vector<std::pair<std::string, std::span<const double>>> grads;
  for_each_tensor(analytic, [&](const std::string& name, std::span<const double> data,
                                std::size_t, std::size_t) { grads.emplace_back(name, data); });

  Model probe = model;
  GradCheckReport report;
  std::size_t tensor = 0;
  for_each_tensor(probe, [&](const std::string& name, std::span<double> data, std::size_t,
                             std::size_t) {
    double worst = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + epsilon;
      const double up = loss_only(probe, inputs, target, mode);
      data[i] = saved - epsilon;
      const double down = loss_only(probe, inputs, target, mode);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = grads[tensor].second[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
      ++report.checked;
    }
    report.max_rel_error[name] = worst;
    if (worst > report.max_error || report.worst_tensor.empty()) {
      report.max_error = worst;
      report.worst_tensor = name;
    }
    ++tensor;
  });
  report.passed = report.max_error <= tolerance;
  return report;
}

}  // namespace dmu
