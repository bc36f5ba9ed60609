#include "dmu/backprop.hpp"

#include <cmath>
#include <random>

#include "gtest/gtest.h"
#include "oracles.hpp"

namespace dmu {
namespace {

CellConfig make_cfg(CellKind kind, std::size_t M, std::size_t N, std::size_t n,
                    std::size_t tau = 1) {
  CellConfig cfg;
  cfg.kind = kind;
  cfg.input_dim = M;
  cfg.hidden_dim = N;
  cfg.delay.num_delays = n;
  cfg.delay.dilation = tau;
  return cfg;
}

Topology single_layer(const CellConfig& cfg, std::size_t classes = 3) {
  Topology t;
  t.layers = {cfg};
  t.num_classes = classes;
  return t;
}

Matrix random_sequence(std::uint64_t seed, std::size_t T, std::size_t M) {
  std::mt19937_64 gen(seed);
  return oracle::to_matrix(oracle::random_inputs(gen, T, M));
}

TEST(ForwardCacheTest, SingleStepMatchesDmuStep) {
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 3, 2);
  SeededRng rng(1);
  CellParams p = init_params(cfg, rng);
  Matrix xs = random_sequence(1, 1, 2);
  SequenceForward f = forward_cache_sequence(p, cfg, xs);
  ASSERT_EQ(f.caches.size(), 1u);
  DmuState state = reset_state(cfg);
  StepOutputs out = dmu_step(p, cfg, state, Vector({xs(0, 0), xs(0, 1)}));
  EXPECT_EQ(f.caches[0].h, out.h);
  EXPECT_EQ(f.caches[0].gate, out.d);
}

TEST(ForwardCacheTest, CachedEqualsUncachedAndReplays) {
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 4, 3, 2);
  SeededRng rng(2);
  CellParams p = init_params(cfg, rng);
  Matrix xs = random_sequence(2, 9, 2);
  SequenceForward f = forward_cache_sequence(p, cfg, xs);
  DmuState state = reset_state(cfg);
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    StepOutputs out = dmu_step(p, cfg, state, Vector({xs(t, 0), xs(t, 1)}));
    EXPECT_EQ(f.caches[t].h, out.h);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f.outputs(t, i), out.h[i]);
  }
  // Replaying step t from the cached inputs and states reproduces the gates.
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    const StepCache& c = f.caches[t];
    Vector a = p.delay.b_d;
    Vector wx = matvec(p.delay.W_d, c.x);
    Vector uh = matvec(p.delay.U_d, c.hd_prev);
    for (std::size_t k = 0; k < 3; ++k) a[k] = (a[k] + wx[k]) + uh[k];
    EXPECT_EQ(activate(Activation::softmax, a), c.gate);
  }
}

TEST(BackwardTest, NoDelaysMatchesReferenceRnnBptt) {
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 3, 0);
  Model model = init_model(single_layer(cfg), 4);
  std::mt19937_64 gen(4);
  auto xs = oracle::random_inputs(gen, 7, 2);
  Model grads = zero_like(model);
  loss_and_gradient(model, oracle::to_matrix(xs), Target{1}, DecodeMode::last, grads);
  const CellParams& p = model.layers[0];
  oracle::RnnGrads ref = oracle::rnn_bptt_last(
      oracle::to_mat(p.W_h()), oracle::to_mat(p.U_h()), oracle::to_vec(p.b_h()),
      oracle::to_mat(model.readout.W), oracle::to_vec(model.readout.b), xs, 1);
  const CellParams& g = grads.layers[0];
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(g.W_h()(i, j), ref.dW[i][j], 1e-12);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.U_h()(i, j), ref.dU[i][j], 1e-12);
    EXPECT_NEAR(g.b_h()[i], ref.db[i], 1e-12);
  }
}

TEST(BackwardTest, RejectsMismatchedUpstream) {
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 3, 1);
  SeededRng rng(1);
  CellParams p = init_params(cfg, rng);
  SequenceForward f = forward_cache_sequence(p, cfg, random_sequence(1, 4, 2));
  EXPECT_THROW(backward_sequence(p, cfg, f.caches, Matrix(3, 3)), DimensionError);
}

TEST(BackwardTest, ZeroUpstreamGivesZeroGradients) {
  CellConfig cfg = make_cfg(CellKind::lstm, 2, 3, 2, 2);
  SeededRng rng(8);
  CellParams p = init_params(cfg, rng);
  SequenceForward f = forward_cache_sequence(p, cfg, random_sequence(8, 6, 2));
  SequenceGradient g = backward_sequence(p, cfg, f.caches, Matrix(6, 3));
  EXPECT_EQ(g.params, zero_params(cfg));
  EXPECT_EQ(g.inputs, Matrix(6, 2));
}

TEST(BackwardTest, DoesNotMutateInputs) {
  CellConfig cfg = make_cfg(CellKind::gru, 2, 3, 2);
  SeededRng rng(9);
  CellParams p = init_params(cfg, rng);
  SequenceForward f = forward_cache_sequence(p, cfg, random_sequence(9, 5, 2));
  const CellParams p_before = p;
  const auto h_before = f.outputs;
  Matrix upstream(5, 3, 0.1);
  backward_sequence(p, cfg, f.caches, upstream);
  EXPECT_EQ(p, p_before);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(f.caches[t].h.span()[0], h_before(t, 0));
}

TEST(BackwardTest, LastStepLossOnlyReachesDelayTaps) {
  // One-hot inputs make column t of dL/dW_h the step-t contribution.
  const std::size_t T = 12, n = 3, tau = 2;
  CellConfig cfg = make_cfg(CellKind::rnn, T, 3, n, tau);
  Model model = init_model(single_layer(cfg), 10);
  model.layers[0].U_h().fill(0.0);
  model.layers[0].delay.U_d.fill(0.0);
  Matrix xs = Matrix::identity(T);
  Model grads = zero_like(model);
  loss_and_gradient(model, xs, Target{2}, DecodeMode::last, grads);
  const Matrix& gW = grads.layers[0].W_h();
  for (std::size_t t = 0; t < T; ++t) {
    bool reached = t == T - 1;
    for (std::size_t k = 1; k <= n; ++k) reached |= t + k * tau == T - 1;
    double norm = 0.0;
    for (std::size_t i = 0; i < 3; ++i) norm += std::abs(gW(i, t));
    EXPECT_EQ(norm != 0.0, reached) << "step " << t;
  }
}

TEST(BackwardTest, DelayLineAddsGateScaledGradient) {
  // Recurrent path severed (U_h = 0) and a single open tap k*: the gradient
  // reaching h~_{T-1-k*tau} is d[k*] times the gradient at h_{T-1}.
  const std::size_t T = 10, n = 4, tau = 2, k_open = 3;
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 3, n, tau);
  SeededRng rng(31);
  CellParams p = init_params(cfg, rng);
  p.U_h().fill(0.0);
  p.delay.W_d.fill(0.0);
  p.delay.U_d.fill(0.0);
  p.delay.b_d = Vector{0.0, 0.0, 3.0, 0.0};
  cfg.delay.gate_threshold = 0.5;  // only tap 3 (softmax weight ~0.87) stays open

  SequenceForward f = forward_cache_sequence(p, cfg, random_sequence(31, T, 2));
  Matrix upstream(T, 3);
  upstream(T - 1, 0) = 0.7;
  upstream(T - 1, 1) = -1.3;
  upstream(T - 1, 2) = 0.4;
  SequenceGradient g = backward_sequence(p, cfg, f.caches, upstream);

  const double gate = f.caches[0].gate[k_open - 1];
  ASSERT_GT(gate, 0.5);
  const std::size_t source = T - 1 - k_open * tau;
  for (std::size_t t = 0; t < T; ++t) {
    Vector expected(2);
    if (t == T - 1 || t == source) {
      const double scale = t == source ? gate : 1.0;
      Vector da(3);
      for (std::size_t i = 0; i < 3; ++i) {
        const double ht = f.caches[t].h_tilde[i];
        da[i] = scale * upstream(T - 1, i) * (1.0 - ht * ht);
      }
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t i = 0; i < 3; ++i) expected[j] += p.W_h()(i, j) * da[i];
    }
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(g.inputs(t, j), expected[j], 1e-14) << t;
  }
}

TEST(LossTest, UniformLogitsGiveLogC) {
  Readout r{Matrix(20, 4), Vector(20)};
  LossResult res = compute_loss(DecodeMode::last, r, Matrix(3, 4, 0.5), Target{7});
  EXPECT_NEAR(res.loss, std::log(20.0), 1e-12);
  EXPECT_NEAR(res.loss, 2.9957, 1e-4);
}

TEST(LossTest, IntegratorAveragesLogits) {
  // Identity readout: logits equal the hidden state.
  Readout r{Matrix::identity(2), Vector(2)};
  Matrix hidden{{1, 0}, {0, 1}};
  LossResult res = compute_loss(DecodeMode::all, r, hidden, Target{0});
  EXPECT_NEAR(res.loss, std::log(2.0), 1e-15);
  // Both steps receive gradient, each with the 1/T factor.
  EXPECT_NEAR(res.d_hidden(0, 0), -0.25, 1e-15);
  EXPECT_NEAR(res.d_hidden(1, 0), -0.25, 1e-15);
}

TEST(LossTest, LastModeTouchesOnlyFinalStep) {
  SeededRng rng(3);
  Readout r{init_kaiming(rng, 4, 3, 3), init_kaiming_vector(rng, 4, 3)};
  Matrix hidden(6, 3, 0.2);
  LossResult res = compute_loss(DecodeMode::last, r, hidden, Target{1});
  for (std::size_t t = 0; t + 1 < 6; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(res.d_hidden(t, i), 0.0);
  EXPECT_THROW(compute_loss(DecodeMode::last, r, hidden, Target{4}), std::out_of_range);
}

TEST(LossTest, PerStepSumsAndRespectsLength) {
  Readout r{Matrix(3, 2), Vector(3)};
  std::vector<int> labels{0, 1, 2, 0};
  LossResult full = compute_loss(DecodeMode::per_step, r, Matrix(4, 2), Target{-1, labels});
  EXPECT_NEAR(full.loss, 4 * std::log(3.0), 1e-12);
  LossResult part = compute_loss(DecodeMode::per_step, r, Matrix(4, 2), Target{-1, labels, 2});
  EXPECT_NEAR(part.loss, 2 * std::log(3.0), 1e-12);
  EXPECT_EQ(part.total, 2u);
  EXPECT_EQ(part.d_hidden(3, 0), 0.0);
}

struct GradCase {
  CellKind kind;
  std::size_t n;
  std::size_t tau;
  std::size_t T;
  DecodeMode mode;
};

class GradCheckTest : public ::testing::TestWithParam<GradCase> {};

TEST_P(GradCheckTest, MatchesCentralDifferences) {
  const GradCase c = GetParam();
  CellConfig cfg = make_cfg(c.kind, 2, 3, c.n, c.tau);
  Topology topo = single_layer(cfg);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Model model = init_model(topo, seed * 101);
    Matrix xs = random_sequence(seed, c.T, 2);
    std::vector<int> steps(c.T);
    for (std::size_t t = 0; t < c.T; ++t) steps[t] = static_cast<int>((t + seed) % 3);
    Target target{static_cast<int>(seed % 3), steps};
    GradCheckReport report = grad_check(model, xs, target, c.mode);
    EXPECT_TRUE(report.passed) << report.worst_tensor << " " << report.max_error;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Cells, GradCheckTest,
    ::testing::Values(GradCase{CellKind::rnn, 2, 1, 6, DecodeMode::last},
                      GradCase{CellKind::rnn, 2, 2, 8, DecodeMode::last},
                      GradCase{CellKind::rnn, 3, 3, 10, DecodeMode::all},
                      GradCase{CellKind::rnn, 2, 1, 6, DecodeMode::per_step},
                      GradCase{CellKind::lstm, 0, 1, 5, DecodeMode::last},
                      GradCase{CellKind::gru, 0, 1, 5, DecodeMode::all},
                      GradCase{CellKind::indrnn, 0, 1, 6, DecodeMode::last},
                      GradCase{CellKind::indrnn, 2, 1, 6, DecodeMode::all},
                      GradCase{CellKind::lstm, 2, 2, 7, DecodeMode::all},
                      GradCase{CellKind::gru, 2, 1, 7, DecodeMode::last}),
    [](const ::testing::TestParamInfo<GradCase>& info) {
      return to_string(info.param.kind) + "_n" + std::to_string(info.param.n) + "_tau" +
             std::to_string(info.param.tau) + "_" + to_string(info.param.mode);
    });

TEST(GradCheckStackTest, TwoLayerNetwork) {
  Topology topo;
  topo.layers = {make_cfg(CellKind::rnn, 2, 3, 2), make_cfg(CellKind::lstm, 3, 2, 2, 2)};
  topo.num_classes = 3;
  Model model = init_model(topo, 5);
  GradCheckReport report = grad_check(model, random_sequence(5, 7, 2), Target{2},
                                      DecodeMode::all);
  EXPECT_TRUE(report.passed) << report.worst_tensor << " " << report.max_error;
  EXPECT_EQ(report.checked, parameter_count(model));
}

TEST(GradCheckNegativeControl, SeveredDelayPathFails) {
  CellConfig cfg = make_cfg(CellKind::rnn, 2, 3, 2);
  Model model = init_model(single_layer(cfg), 6);
  BackwardOptions broken;
  broken.sever_delay_path = true;
  GradCheckReport report =
      grad_check(model, random_sequence(6, 6, 2), Target{0}, DecodeMode::last, 1e-5, 1e-4,
                 broken);
  EXPECT_FALSE(report.passed);
}

}  // namespace
}  // namespace dmu
