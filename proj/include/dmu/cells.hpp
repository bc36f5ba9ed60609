#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dmu/numerics.hpp"

namespace dmu {

// Inner recurrence that produces the candidate state. A delay line of
// length n (possibly zero) is layered on top of any of them.
enum class CellKind { rnn, lstm, gru, indrnn };

CellKind parse_cell_kind(const std::string& name);
std::string to_string(CellKind kind);

struct DelayConfig {
  std::size_t num_delays = 0;   // n
  std::size_t dilation = 1;     // tau
  double gate_threshold = 0.0;  // theta, applied at inference only

  std::size_t span() const { return num_delays * dilation; }

  friend bool operator==(const DelayConfig&, const DelayConfig&) = default;
};

struct CellConfig {
  CellKind kind = CellKind::rnn;
  std::size_t input_dim = 1;   // M
  std::size_t hidden_dim = 1;  // N
  DelayConfig delay;
  // sigma_g for rnn/indrnn candidates and for the delay hidden state.
  // LSTM and GRU use their fixed sigmoid/tanh gate activations.
  Activation g_activation = Activation::tanh;

  bool has_delay_line() const { return delay.num_delays > 0; }
  void validate() const;

  friend bool operator==(const CellConfig&, const CellConfig&) = default;
};

// A DMU is an rnn candidate with a delay line; the name is kept for call
// sites that only deal with the plain DMU cell.
using DmuConfig = CellConfig;

// W x + U h + b
struct AffineGroup {
  Matrix W;
  Matrix U;
  Vector b;

  friend bool operator==(const AffineGroup&, const AffineGroup&) = default;
};

// Shared by the delay gate (softmax) and the delay hidden state (sigma_g).
struct DelayGroup {
  Matrix W_d;  // n x M
  Matrix U_d;  // n x n
  Vector b_d;  // n

  friend bool operator==(const DelayGroup&, const DelayGroup&) = default;
};

// Learnable parameters of one recurrent layer.
//
// groups holds the inner cell's affine maps:
//   rnn    {h}
//   indrnn {h}  (U is empty; the recurrent weights live in u_diag)
//   lstm   {i, f, o, z}
//   gru    {z, r, n}
struct CellParams {
  CellKind kind = CellKind::rnn;
  std::vector<AffineGroup> groups;
  Vector u_diag;
  DelayGroup delay;

  Matrix& W_h() { return groups.at(0).W; }
  const Matrix& W_h() const { return groups.at(0).W; }
  Matrix& U_h() { return groups.at(0).U; }
  const Matrix& U_h() const { return groups.at(0).U; }
  Vector& b_h() { return groups.at(0).b; }
  const Vector& b_h() const { return groups.at(0).b; }

  std::size_t parameter_count() const;

  friend bool operator==(const CellParams&, const CellParams&) = default;
};

using BaselineParams = CellParams;
using DelayAugmentedParams = CellParams;

std::vector<std::string> group_names(CellKind kind);

// Visit every tensor as (name, flat data). Order is fixed and defines the
// checkpoint layout.
namespace detail {
template <typename Params, typename Fn>
void visit_cell_tensors(Params& params, Fn&& fn) {
  const auto names = group_names(params.kind);
  for (std::size_t g = 0; g < params.groups.size(); ++g) {
    auto& group = params.groups[g];
    fn("W_" + names[g], group.W.span(), group.W.rows(), group.W.cols());
    if (params.kind != CellKind::indrnn) {
      fn("U_" + names[g], group.U.span(), group.U.rows(), group.U.cols());
    }
    fn("b_" + names[g], group.b.span(), group.b.size(), std::size_t{1});
  }
  if (params.kind == CellKind::indrnn) {
    fn(std::string("u_h"), params.u_diag.span(), params.u_diag.size(), std::size_t{1});
  }
  if (params.delay.b_d.size() > 0) {
    fn(std::string("W_d"), params.delay.W_d.span(), params.delay.W_d.rows(),
       params.delay.W_d.cols());
    fn(std::string("U_d"), params.delay.U_d.span(), params.delay.U_d.rows(),
       params.delay.U_d.cols());
    fn(std::string("b_d"), params.delay.b_d.span(), params.delay.b_d.size(), std::size_t{1});
  }
}
}  // namespace detail

template <typename Fn>
void for_each_tensor(CellParams& params, Fn&& fn) {
  detail::visit_cell_tensors(params, fn);
}
template <typename Fn>
void for_each_tensor(const CellParams& params, Fn&& fn) {
  detail::visit_cell_tensors(params, fn);
}

CellParams zero_params(const CellConfig& cfg);
// Kaiming-normal weights and biases (std sqrt(2 / fan_in)); fan_in is M for
// feedforward maps, N (or n) for recurrent maps and M + N (or M + n) for
// biases.
CellParams init_params(const CellConfig& cfg, SeededRng& rng);

// Closed-form parameter counts. For the delay-augmented gated cells, add
// delay_param_count to the inner count.
std::size_t count_params(CellKind kind, std::size_t M, std::size_t N, std::size_t n);
std::size_t delay_param_count(std::size_t M, std::size_t n);

// Sliding-window delay memory: n * tau columns of width N. Column j
// (1-indexed from the read end) holds the sum of everything scheduled to
// arrive j steps after the most recent step.
class DelayWindow {
 public:
  DelayWindow() = default;
  DelayWindow(std::size_t columns, std::size_t width);

  std::size_t columns() const { return columns_; }
  std::size_t width() const { return width_; }

  std::span<const double> column(std::size_t j) const;

  // Remove column 1 into `out`, shift the rest toward the read end and
  // append a zeroed tail column.
  void pop_into(std::span<double> out);
  void deposit(std::size_t j, double weight, std::span<const double> v);

  bool is_zero() const;

  friend bool operator==(const DelayWindow&, const DelayWindow&) = default;

 private:
  std::size_t slot(std::size_t j) const { return (head_ + j - 1) % columns_; }

  std::size_t columns_ = 0;
  std::size_t width_ = 0;
  std::size_t head_ = 0;
  std::vector<double> buffer_;
};

struct CellState {
  Vector h;    // N
  Vector c;    // N, lstm only
  Vector h_d;  // n
  DelayWindow window;
  std::size_t step_counter = 0;

  friend bool operator==(const CellState&, const CellState&) = default;
};

using DmuState = CellState;

CellState reset_state(const CellConfig& cfg);

// Everything a step computed; doubles as the backprop cache.
struct StepCache {
  Vector x;
  Vector h_prev;
  Vector c_prev;
  Vector hd_prev;
  std::vector<Vector> gates;  // lstm/gru: activated gates; rnn/indrnn: pre-activation
  Vector c;
  Vector h_tilde;
  Vector gate_preact;  // a_t
  Vector gate_raw;     // softmax(a_t)
  Vector gate;         // after thresholding (== gate_raw when theta == 0)
  Vector h_d;
  Vector arrival;      // m^1_t, popped from the window
  Vector h;
  std::size_t open_count = 0;
};

struct StepOutputs {
  Vector h;
  Vector h_tilde;
  Vector d;
  Vector gate_preact;
  std::size_t open_count = 0;
};

// Generic step: inner candidate, then the delay line (if any).
void cell_forward(const CellParams& params, const CellConfig& cfg, CellState& state,
                  const Vector& x, StepCache& cache);

StepOutputs dmu_step(const CellParams& params, const DmuConfig& cfg, DmuState& state,
                     const Vector& x);
// Plain cell without a delay line; returns h_t.
Vector baseline_step(const BaselineParams& params, const CellConfig& cfg, CellState& state,
                     const Vector& x);
// LSTM/GRU candidate routed through a delay line; returns h_t.
Vector delay_augment_step(const DelayAugmentedParams& params, const CellConfig& cfg,
                          CellState& state, const Vector& x);

// Zero gate entries below theta. Returns the thresholded vector and the
// number of nonzero entries left.
std::pair<Vector, std::size_t> apply_gate_threshold(const Vector& d, double theta);

// Process-wide hook invoked with every un-thresholded gate vector a forward
// step computes. Must be thread-safe; pass nullptr to remove.
using GateObserver = void (*)(std::span<const double> gate);
void set_gate_observer(GateObserver observer);

void check_shapes(const CellParams& params, const CellConfig& cfg);

}  // namespace dmu
