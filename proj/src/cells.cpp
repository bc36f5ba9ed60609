#include "dmu/cells.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace dmu {

namespace {

std::atomic<GateObserver> g_gate_observer{nullptr};

std::size_t inner_group_count(CellKind kind) {
  switch (kind) {
    case CellKind::rnn:
    case CellKind::indrnn: return 1;
    case CellKind::lstm: return 4;
    case CellKind::gru: return 3;
  }
  return 0;
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + " is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                         "x" + std::to_string(cols));
  }
}

void expect_len(const Vector& v, std::size_t len, const char* what) {
  if (v.size() != len) {
    throw DimensionError(std::string(what) + " has length " + std::to_string(v.size()) +
                         ", expected " + std::to_string(len));
  }
}

// out = W x + U h + b (U may be empty)
void affine(const AffineGroup& g, std::span<const double> x, std::span<const double> h,
            std::span<double> out) {
  std::copy(g.b.span().begin(), g.b.span().end(), out.begin());
  matvec_acc(g.W, x, out);
  if (g.U.size() > 0) matvec_acc(g.U, h, out);
}

}  // namespace

CellKind parse_cell_kind(const std::string& name) {
  if (name == "rnn" || name == "dmu") return CellKind::rnn;
  if (name == "lstm") return CellKind::lstm;
  if (name == "gru") return CellKind::gru;
  if (name == "indrnn") return CellKind::indrnn;
  throw std::invalid_argument("unknown cell kind '" + name + "'");
}

std::string to_string(CellKind kind) {
  switch (kind) {
    case CellKind::rnn: return "rnn";
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
    case CellKind::indrnn: return "indrnn";
  }
  return "?";
}

void CellConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("input_dim must be positive");
  if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be positive");
  if (delay.dilation == 0) throw std::invalid_argument("dilation must be >= 1");
  if (!(delay.gate_threshold >= 0.0 && delay.gate_threshold <= 1.0)) {
    throw std::invalid_argument("gate_threshold must lie in [0, 1]");
  }
  if (g_activation != Activation::tanh && g_activation != Activation::relu) {
    throw std::invalid_argument("g_activation must be tanh or relu");
  }
}

std::vector<std::string> group_names(CellKind kind) {
  switch (kind) {
    case CellKind::rnn:
    case CellKind::indrnn: return {"h"};
    case CellKind::lstm: return {"i", "f", "o", "z"};
    case CellKind::gru: return {"z", "r", "n"};
  }
  return {};
}

std::size_t CellParams::parameter_count() const {
  std::size_t total = 0;
  for_each_tensor(*this, [&](const std::string&, std::span<const double> data, std::size_t,
                             std::size_t) { total += data.size(); });
  return total;
}

CellParams zero_params(const CellConfig& cfg) {
  cfg.validate();
  const std::size_t M = cfg.input_dim;
  const std::size_t N = cfg.hidden_dim;
  const std::size_t n = cfg.delay.num_delays;
  CellParams p;
  p.kind = cfg.kind;
  for (std::size_t g = 0; g < inner_group_count(cfg.kind); ++g) {
    AffineGroup group{Matrix(N, M), cfg.kind == CellKind::indrnn ? Matrix() : Matrix(N, N),
                      Vector(N)};
    p.groups.push_back(std::move(group));
  }
  if (cfg.kind == CellKind::indrnn) p.u_diag = Vector(N);
  p.delay = DelayGroup{Matrix(n, M), Matrix(n, n), Vector(n)};
  return p;
}

CellParams init_params(const CellConfig& cfg, SeededRng& rng) {
  CellParams p = zero_params(cfg);
  const std::size_t M = cfg.input_dim;
  const std::size_t N = cfg.hidden_dim;
  const std::size_t n = cfg.delay.num_delays;
  for (auto& g : p.groups) {
    g.W = init_kaiming(rng, N, M, M);
    if (cfg.kind != CellKind::indrnn) g.U = init_kaiming(rng, N, N, N);
    g.b = init_kaiming_vector(rng, N, M + N);
  }
  if (cfg.kind == CellKind::indrnn) {
    // Recurrent weights of an independent cell are scalars per neuron;
    // start them inside the stable range (-1, 1).
    for (double& u : p.u_diag.span()) u = rng.uniform(0.0, 1.0);
  }
  if (n > 0) {
    p.delay.W_d = init_kaiming(rng, n, M, M);
    p.delay.U_d = init_kaiming(rng, n, n, n);
    p.delay.b_d = init_kaiming_vector(rng, n, M + n);
  }
  return p;
}

std::size_t count_params(CellKind kind, std::size_t M, std::size_t N, std::size_t n) {
  const std::size_t rnn = N * N + M * N + N;
  const std::size_t delay = delay_param_count(M, n);
  switch (kind) {
    case CellKind::rnn: return rnn + delay;
    case CellKind::lstm: return 4 * rnn + delay;
    case CellKind::gru: return 3 * rnn + delay;
    case CellKind::indrnn: return M * N + 2 * N + delay;
  }
  return 0;
}

std::size_t delay_param_count(std::size_t M, std::size_t n) { return M * n + n * n + n; }

void check_shapes(const CellParams& params, const CellConfig& cfg) {
  const std::size_t M = cfg.input_dim;
  const std::size_t N = cfg.hidden_dim;
  const std::size_t n = cfg.delay.num_delays;
  if (params.kind != cfg.kind) {
    throw DimensionError("parameters are for a " + to_string(params.kind) +
                         " cell but the config describes " + to_string(cfg.kind));
  }
  if (params.groups.size() != inner_group_count(cfg.kind)) {
    throw DimensionError("wrong number of parameter groups for " + to_string(cfg.kind));
  }
  for (const auto& g : params.groups) {
    expect_shape(g.W, N, M, "W");
    if (cfg.kind == CellKind::indrnn) {
      expect_shape(g.U, 0, 0, "U");
    } else {
      expect_shape(g.U, N, N, "U");
    }
    expect_len(g.b, N, "b");
  }
  expect_len(params.u_diag, cfg.kind == CellKind::indrnn ? N : 0, "u_h");
  expect_shape(params.delay.W_d, n, M, "W_d");
  expect_shape(params.delay.U_d, n, n, "U_d");
  expect_len(params.delay.b_d, n, "b_d");
}

DelayWindow::DelayWindow(std::size_t columns, std::size_t width)
    : columns_(columns), width_(width), buffer_(columns * width, 0.0) {}

std::span<const double> DelayWindow::column(std::size_t j) const {
  if (j < 1 || j > columns_) throw std::out_of_range("window column out of range");
  return {buffer_.data() + slot(j) * width_, width_};
}

void DelayWindow::pop_into(std::span<double> out) {
  if (columns_ == 0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  double* col = buffer_.data() + head_ * width_;
  std::copy(col, col + width_, out.begin());
  // The freed slot becomes the new tail column.
  std::fill(col, col + width_, 0.0);
  head_ = (head_ + 1) % columns_;
}

void DelayWindow::deposit(std::size_t j, double weight, std::span<const double> v) {
  double* col = buffer_.data() + slot(j) * width_;
  for (std::size_t i = 0; i < width_; ++i) col[i] += weight * v[i];
}

bool DelayWindow::is_zero() const {
  return std::all_of(buffer_.begin(), buffer_.end(), [](double x) { return x == 0.0; });
}

CellState reset_state(const CellConfig& cfg) {
  cfg.validate();
  CellState s;
  s.h = Vector(cfg.hidden_dim);
  if (cfg.kind == CellKind::lstm) s.c = Vector(cfg.hidden_dim);
  s.h_d = Vector(cfg.delay.num_delays);
  s.window = DelayWindow(cfg.delay.span(), cfg.hidden_dim);
  return s;
}

std::pair<Vector, std::size_t> apply_gate_threshold(const Vector& d, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) {
    throw std::invalid_argument("gate threshold must lie in [0, 1]");
  }
  Vector out = d;
  std::size_t open = 0;
  for (double& v : out.span()) {
    if (v < theta) v = 0.0;
    if (v != 0.0) ++open;
  }
  return {std::move(out), open};
}

void set_gate_observer(GateObserver observer) { g_gate_observer.store(observer); }

namespace {

void inner_forward(const CellParams& p, const CellConfig& cfg, CellState& state,
                   StepCache& cache) {
  const std::size_t N = cfg.hidden_dim;
  const auto x = cache.x.span();
  const auto h = cache.h_prev.span();
  cache.h_tilde = Vector(N);
  auto out = cache.h_tilde.span();

  switch (cfg.kind) {
    case CellKind::rnn: {
      affine(p.groups[0], x, h, out);
      cache.gates = {Vector(std::vector<double>(out.begin(), out.end()))};  // pre-activation
      activate_inplace(cfg.g_activation, out);
      break;
    }
    case CellKind::indrnn: {
      affine(p.groups[0], x, h, out);
      for (std::size_t i = 0; i < N; ++i) out[i] += p.u_diag[i] * h[i];
      cache.gates = {Vector(std::vector<double>(out.begin(), out.end()))};
      activate_inplace(cfg.g_activation, out);
      break;
    }
    case CellKind::lstm: {
      cache.gates.assign(4, Vector(N));
      for (std::size_t g = 0; g < 4; ++g) {
        affine(p.groups[g], x, h, cache.gates[g].span());
        activate_inplace(g == 3 ? Activation::tanh : Activation::sigmoid, cache.gates[g].span());
      }
      const Vector& i_g = cache.gates[0];
      const Vector& f_g = cache.gates[1];
      const Vector& o_g = cache.gates[2];
      const Vector& z_g = cache.gates[3];
      cache.c = Vector(N);
      for (std::size_t k = 0; k < N; ++k) {
        cache.c[k] = f_g[k] * cache.c_prev[k] + i_g[k] * z_g[k];
        out[k] = o_g[k] * std::tanh(cache.c[k]);
      }
      state.c = cache.c;
      break;
    }
    case CellKind::gru: {
      cache.gates.assign(3, Vector(N));
      for (std::size_t g = 0; g < 2; ++g) {
        affine(p.groups[g], x, h, cache.gates[g].span());
        activate_inplace(Activation::sigmoid, cache.gates[g].span());
      }
      const Vector& z_g = cache.gates[0];
      const Vector& r_g = cache.gates[1];
      std::vector<double> reset_h(N);
      for (std::size_t k = 0; k < N; ++k) reset_h[k] = r_g[k] * h[k];
      affine(p.groups[2], x, reset_h, cache.gates[2].span());
      activate_inplace(Activation::tanh, cache.gates[2].span());
      const Vector& n_g = cache.gates[2];
      for (std::size_t k = 0; k < N; ++k) {
        out[k] = (1.0 - z_g[k]) * n_g[k] + z_g[k] * h[k];
      }
      break;
    }
  }
}

}  // namespace

void cell_forward(const CellParams& params, const CellConfig& cfg, CellState& state,
                  const Vector& x, StepCache& cache) {
  cfg.validate();
  check_shapes(params, cfg);
  expect_len(x, cfg.input_dim, "input");
  const std::size_t N = cfg.hidden_dim;
  const std::size_t n = cfg.delay.num_delays;
  const std::size_t tau = cfg.delay.dilation;
  if (state.h.size() != N || state.h_d.size() != n ||
      state.window.columns() != n * tau || (cfg.kind == CellKind::lstm && state.c.size() != N)) {
    throw DimensionError("state does not match the cell config; use reset_state");
  }

  cache.x = x;
  cache.h_prev = state.h;
  cache.c_prev = state.c;
  cache.hd_prev = state.h_d;

  inner_forward(params, cfg, state, cache);

  if (n == 0) {
    cache.gate_preact = Vector();
    cache.gate_raw = Vector();
    cache.gate = Vector();
    cache.h_d = Vector();
    cache.arrival = Vector(N);
    cache.h = cache.h_tilde;
    cache.open_count = 0;
  } else {
    const DelayGroup& dg = params.delay;
    cache.gate_preact = Vector(n);
    auto a = cache.gate_preact.span();
    std::copy(dg.b_d.span().begin(), dg.b_d.span().end(), a.begin());
    matvec_acc(dg.W_d, x.span(), a);
    matvec_acc(dg.U_d, cache.hd_prev.span(), a);

    cache.gate_raw = cache.gate_preact;
    activate_inplace(Activation::softmax, cache.gate_raw.span());
    if (auto observer = g_gate_observer.load()) observer(cache.gate_raw.span());

    cache.h_d = cache.gate_preact;
    activate_inplace(cfg.g_activation, cache.h_d.span());

    if (cfg.delay.gate_threshold > 0.0) {
      auto [gated, open] = apply_gate_threshold(cache.gate_raw, cfg.delay.gate_threshold);
      cache.gate = std::move(gated);
      cache.open_count = open;
    } else {
      cache.gate = cache.gate_raw;
      cache.open_count = n;
    }

    cache.arrival = Vector(N);
    state.window.pop_into(cache.arrival.span());
    for (std::size_t k = 1; k <= n; ++k) {
      const double w = cache.gate[k - 1];
      if (w == 0.0) continue;  // closed gates skip their deposit
      state.window.deposit(k * tau, w, cache.h_tilde.span());
    }

    cache.h = Vector(N);
    for (std::size_t i = 0; i < N; ++i) cache.h[i] = cache.h_tilde[i] + cache.arrival[i];
    state.h_d = cache.h_d;
  }

  state.h = cache.h;
  ++state.step_counter;
}

StepOutputs dmu_step(const CellParams& params, const DmuConfig& cfg, DmuState& state,
                     const Vector& x) {
  if (cfg.kind != CellKind::rnn) {
    throw std::invalid_argument("dmu_step expects an rnn candidate cell");
  }
  StepCache cache;
  cell_forward(params, cfg, state, x, cache);
  return StepOutputs{std::move(cache.h), std::move(cache.h_tilde), std::move(cache.gate),
                     std::move(cache.gate_preact), cache.open_count};
}

Vector baseline_step(const BaselineParams& params, const CellConfig& cfg, CellState& state,
                     const Vector& x) {
  if (cfg.has_delay_line()) {
    throw std::invalid_argument("baseline_step expects a config without a delay line");
  }
  StepCache cache;
  cell_forward(params, cfg, state, x, cache);
  return std::move(cache.h);
}

Vector delay_augment_step(const DelayAugmentedParams& params, const CellConfig& cfg,
                          CellState& state, const Vector& x) {
  if (cfg.kind != CellKind::lstm && cfg.kind != CellKind::gru) {
    throw std::invalid_argument("delay augmentation wraps lstm or gru cells");
  }
  StepCache cache;
  cell_forward(params, cfg, state, x, cache);
  return std::move(cache.h);
}

}  // namespace dmu
