#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include "fairmask/model.hpp"
#include "fairmask/search_space.hpp"
#include "fairmask/trainer.hpp"

using namespace fairmask;

namespace {

Architecture tiny_arch() {
  Architecture a;
  a.d_in = 5;
  a.d_model = 8;
  a.n_blocks = 2;
  a.mlp_hidden = 6;
  return a;
}

Eigen::MatrixXd random_batch(int rows, int cols, Rng& rng) {
  Eigen::MatrixXd x(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) x(i, j) = rng.normal();
  return x;
}

Mask random_mask(int n_blocks, Rng& rng) {
  Mask m(n_blocks);
  for (int b = 0; b < n_blocks; ++b)
    for (int k = 0; k < kNumKinds; ++k) m.set(b, static_cast<ModuleKind>(k), rng.coin());
  return m;
}

// Scalar loss used by the gradient checks: weighted sum of logits, so
// dL/dlogits is a constant matrix and the finite-difference target is smooth.
double weighted_logit_loss(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& weights) {
  return (logits.array() * weights.array()).sum();
}

// Central finite differences through a mutable reference to one delta entry.
double central_diff(const std::function<double()>& eval, double& entry, double eps) {
  const double saved = entry;
  entry = saved + eps;
  const double up = eval();
  entry = saved - eps;
  const double down = eval();
  entry = saved;
  return (up - down) / (2.0 * eps);
}

// Runs the finite-difference comparison for every gradient the backward pass
// reports, returning the max relative error.
double max_grad_error(ModelParams& p, const Mask& mask, const Eigen::MatrixXd& x,
                      const Eigen::MatrixXd& weights) {
  ForwardCache cache;
  const Eigen::MatrixXd logits = forward(p, mask, x, &cache);
  (void)logits;
  const DeltaGrads grads = backward(p, mask, cache, weights);

  const auto eval = [&]() { return weighted_logit_loss(forward(p, mask, x), weights); };
  const double eps = 1e-4;
  double worst = 0.0;
  auto check_tensor = [&](Eigen::MatrixXd& param, const Eigen::MatrixXd& grad) {
    ASSERT_EQ(param.rows(), grad.rows());
    ASSERT_EQ(param.cols(), grad.cols());
    for (Eigen::Index i = 0; i < param.rows(); ++i)
      for (Eigen::Index j = 0; j < param.cols(); ++j) {
        const double numeric = central_diff(eval, param(i, j), eps);
        const double analytic = grad(i, j);
        const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic) / scale);
      }
  };
  auto check_vector = [&](Eigen::VectorXd& param, const Eigen::VectorXd& grad) {
    ASSERT_EQ(param.size(), grad.size());
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double numeric = central_diff(eval, param(i), eps);
      const double analytic = grad(i);
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
  };

  for (int b = 0; b < p.arch.n_blocks; ++b) {
    BlockParams& d = p.delta.blocks[static_cast<std::size_t>(b)];
    const BlockParams& g = grads.blocks[static_cast<std::size_t>(b)];
    if (mask.get(b, ModuleKind::kMhsa)) {
      check_tensor(d.mix_w, g.mix_w);
      check_vector(d.mix_b, g.mix_b);
    }
    if (mask.get(b, ModuleKind::kMlp)) {
      check_tensor(d.mlp_w1, g.mlp_w1);
      check_vector(d.mlp_b1, g.mlp_b1);
      check_tensor(d.mlp_w2, g.mlp_w2);
      check_vector(d.mlp_b2, g.mlp_b2);
    }
    if (mask.get(b, ModuleKind::kLn)) {
      check_vector(d.ln1_gain, g.ln1_gain);
      check_vector(d.ln1_bias, g.ln1_bias);
      check_vector(d.ln2_gain, g.ln2_gain);
      check_vector(d.ln2_bias, g.ln2_bias);
    }
  }
  check_tensor(p.delta.head.w, grads.head.w);
  check_vector(p.delta.head.b, grads.head.b);
  return worst;
}

}  // namespace

TEST(InitRandom, DeltaIsZeroAndLnUnit) {
  const ModelParams p = init_random(tiny_arch(), 3);
  for (const auto& blk : p.delta.blocks) {
    EXPECT_TRUE(blk.mix_w.isZero(0.0));
    EXPECT_TRUE(blk.mlp_w1.isZero(0.0));
    EXPECT_TRUE(blk.ln1_gain.isZero(0.0));
  }
  EXPECT_TRUE(p.delta.head.w.isZero(0.0));
  for (const auto& blk : p.base.blocks) {
    EXPECT_TRUE((blk.ln1_gain.array() == 1.0).all());
    EXPECT_TRUE((blk.ln2_gain.array() == 1.0).all());
    EXPECT_TRUE(blk.ln1_bias.isZero(0.0));
    EXPECT_TRUE(blk.mix_b.isZero(0.0));
  }
}

TEST(InitRandom, DeterministicInSeed) {
  const ModelParams a = init_random(tiny_arch(), 17);
  const ModelParams b = init_random(tiny_arch(), 17);
  EXPECT_TRUE(a.base.stem.w == b.base.stem.w);
  EXPECT_TRUE(a.base.head.w == b.base.head.w);
  EXPECT_TRUE(a.base.blocks[1].mlp_w1 == b.base.blocks[1].mlp_w1);
  const ModelParams c = init_random(tiny_arch(), 18);
  EXPECT_FALSE(a.base.stem.w == c.base.stem.w);
}

TEST(EffectiveParams, ZeroMaskGivesBase) {
  ModelParams p = init_random(tiny_arch(), 1);
  for (auto& blk : p.delta.blocks) blk.mix_w.setConstant(0.5);
  const ParamSet eff = effective_params(p, linear_readout(p.arch.n_blocks));
  for (int b = 0; b < p.arch.n_blocks; ++b)
    EXPECT_TRUE(eff.blocks[static_cast<std::size_t>(b)].mix_w ==
                p.base.blocks[static_cast<std::size_t>(b)].mix_w);
}

TEST(EffectiveParams, FullMaskZeroDeltaStillBase) {
  const ModelParams p = init_random(tiny_arch(), 1);
  const ParamSet eff = effective_params(p, full_ft(p.arch.n_blocks));
  for (int b = 0; b < p.arch.n_blocks; ++b) {
    EXPECT_TRUE(eff.blocks[static_cast<std::size_t>(b)].mlp_w1 ==
                p.base.blocks[static_cast<std::size_t>(b)].mlp_w1);
  }
  EXPECT_TRUE(eff.head.w == p.base.head.w);
}

TEST(EffectiveParams, SelectedDeltaIsLocal) {
  ModelParams p = init_random(tiny_arch(), 1);
  Mask m(p.arch.n_blocks);
  m.set(1, ModuleKind::kMhsa, true);
  p.delta.blocks[1].mix_w(0, 0) = 1e-3;
  p.delta.blocks[0].mix_w(0, 0) = 7.0;  // unselected, must not appear
  const ParamSet eff = effective_params(p, m);
  EXPECT_DOUBLE_EQ(eff.blocks[1].mix_w(0, 0), p.base.blocks[1].mix_w(0, 0) + 1e-3);
  EXPECT_TRUE(eff.blocks[0].mix_w == p.base.blocks[0].mix_w);
  EXPECT_TRUE(eff.blocks[1].mlp_w1 == p.base.blocks[1].mlp_w1);
}

TEST(EffectiveParams, MaskShapeMismatchThrows) {
  const ModelParams p = init_random(tiny_arch(), 1);
  EXPECT_THROW(effective_params(p, Mask(p.arch.n_blocks + 1)), ConfigError);
}

TEST(Forward, PureAndDeterministic) {
  const ModelParams p = init_random(tiny_arch(), 5);
  Rng rng(6);
  const Eigen::MatrixXd x = random_batch(1, p.arch.d_in, rng);
  const Mask m = full_ft(p.arch.n_blocks);
  EXPECT_TRUE(forward(p, m, x) == forward(p, m, x));
}

TEST(Forward, FrozenDeltaDoesNotChangeLogits) {
  ModelParams p = init_random(tiny_arch(), 5);
  Rng rng(6);
  const Eigen::MatrixXd x = random_batch(3, p.arch.d_in, rng);
  Mask m(p.arch.n_blocks);
  m.set(0, ModuleKind::kMlp, true);
  const Eigen::MatrixXd before = forward(p, m, x);
  // Arbitrary garbage in unselected modules.
  p.delta.blocks[0].mix_w.setConstant(3.0);
  p.delta.blocks[1].mlp_w1.setConstant(-2.0);
  p.delta.blocks[1].ln1_gain.setConstant(0.7);
  const Eigen::MatrixXd after = forward(p, m, x);
  EXPECT_TRUE(before == after);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  const ModelParams p = init_random(tiny_arch(), 8);
  Rng rng(9);
  const Eigen::MatrixXd x = random_batch(4, p.arch.d_in, rng);
  const Eigen::MatrixXd logits = forward(p, full_ft(p.arch.n_blocks), x);
  const auto scores = positive_scores(logits);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double p0 = 1.0 - scores[static_cast<std::size_t>(i)];
    const double p1 = scores[static_cast<std::size_t>(i)];
    EXPECT_NEAR(p0 + p1, 1.0, 1e-12);
  }
}

TEST(Forward, LayerNormStatistics) {
  Rng rng(10);
  const Eigen::MatrixXd x = random_batch(6, 8, rng);
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv;
  const Eigen::VectorXd gain = Eigen::VectorXd::Ones(8);
  const Eigen::VectorXd bias = Eigen::VectorXd::Zero(8);
  const Eigen::MatrixXd out = detail::layer_norm(x, gain, bias, xhat, inv);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    EXPECT_LT(std::abs(out.row(i).mean()), 1e-10);
    const double var = (out.row(i).array() - out.row(i).mean()).square().mean();
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps in the denominator shifts variance slightly
  }
}

TEST(Forward, NonFiniteActivationCarriesBlockIndex) {
  ModelParams p = init_random(tiny_arch(), 3);
  p.base.blocks[1].mix_w.setConstant(1e308);
  Rng rng(4);
  const Eigen::MatrixXd x = random_batch(2, p.arch.d_in, rng);
  try {
    forward(p, full_ft(p.arch.n_blocks), x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos);
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(2024);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    ModelParams p = init_random(tiny_arch(), rng.next_u64());
    // Nonzero delta so LN gains/biases and every path are exercised away
    // from the init point.
    for (auto& blk : p.delta.blocks) {
      blk.ln1_gain = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
      blk.ln1_bias = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
      blk.mix_w = 0.05 * random_batch(p.arch.d_model, p.arch.d_model, rng);
      blk.mix_b = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
      blk.ln2_gain = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
      blk.ln2_bias = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
      blk.mlp_w1 = 0.05 * random_batch(p.arch.d_model, p.arch.mlp_hidden, rng);
      blk.mlp_b1 = 0.05 * random_batch(p.arch.mlp_hidden, 1, rng).col(0);
      blk.mlp_w2 = 0.05 * random_batch(p.arch.mlp_hidden, p.arch.d_model, rng);
      blk.mlp_b2 = 0.05 * random_batch(p.arch.d_model, 1, rng).col(0);
    }
    const int batch = 1 + static_cast<int>(rng.below(8));
    const Eigen::MatrixXd x = random_batch(batch, p.arch.d_in, rng);
    const Eigen::MatrixXd weights = random_batch(batch, 2, rng);
    const Mask mask = random_mask(p.arch.n_blocks, rng);
    worst = std::max(worst, max_grad_error(p, mask, x, weights));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  ModelParams p = init_random(tiny_arch(), 12);
  Rng rng(13);
  const Eigen::MatrixXd x = random_batch(3, p.arch.d_in, rng);
  ForwardCache cache;
  forward(p, full_ft(p.arch.n_blocks), x, &cache);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(3, 2);
  const DeltaGrads g = backward(p, full_ft(p.arch.n_blocks), cache, zero);
  EXPECT_TRUE(g.head.w.isZero(0.0));
  for (const auto& blk : g.blocks) {
    EXPECT_TRUE(blk.mix_w.isZero(0.0));
    EXPECT_TRUE(blk.mlp_w1.isZero(0.0));
    EXPECT_TRUE(blk.ln1_gain.isZero(0.0));
  }
}

TEST(Backward, LnGainGradOnNormalizedInput) {
  // For a row already zero-mean unit-variance, xhat ~= x and the gain
  // gradient reduces to dy .* x summed over rows.
  const Eigen::Index d = 2;
  Eigen::MatrixXd x(1, d);
  x << 1.0, -1.0;  // mean 0, population variance 1
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv;
  const Eigen::VectorXd gain = Eigen::VectorXd::Constant(d, 1.3);
  const Eigen::VectorXd bias = Eigen::VectorXd::Zero(d);
  detail::layer_norm(x, gain, bias, xhat, inv);
  Eigen::MatrixXd dout(1, d);
  dout << 0.25, 0.5;
  Eigen::VectorXd dgain, dbias;
  detail::layer_norm_backward(dout, gain, xhat, inv, &dgain, &dbias);
  const double scale = 1.0 / std::sqrt(1.0 + kLnEps);  // xhat = x / sqrt(1+eps)
  EXPECT_NEAR(dgain(0), 0.25 * 1.0 * scale, 1e-12);
  EXPECT_NEAR(dgain(1), 0.5 * -1.0 * scale, 1e-12);
  EXPECT_NEAR(dbias(0), 0.25, 1e-15);
  EXPECT_NEAR(dbias(1), 0.5, 1e-15);
}

TEST(Backward, UnselectedModulesGetNoGradientEntries) {
  ModelParams p = init_random(tiny_arch(), 20);
  Rng rng(21);
  const Eigen::MatrixXd x = random_batch(2, p.arch.d_in, rng);
  Mask m(p.arch.n_blocks);
  m.set(0, ModuleKind::kMhsa, true);
  ForwardCache cache;
  forward(p, m, x, &cache);
  const DeltaGrads g = backward(p, m, cache, random_batch(2, 2, rng));
  EXPECT_GT(g.blocks[0].mix_w.size(), 0);
  EXPECT_EQ(g.blocks[0].mlp_w1.size(), 0);
  EXPECT_EQ(g.blocks[0].ln1_gain.size(), 0);
  EXPECT_EQ(g.blocks[1].mix_w.size(), 0);
  EXPECT_GT(g.head.w.size(), 0);
}

TEST(Backward, StaleCacheThrows) {
  ModelParams p = init_random(tiny_arch(), 30);
  Rng rng(31);
  const Eigen::MatrixXd x = random_batch(4, p.arch.d_in, rng);
  ForwardCache cache;
  forward(p, full_ft(p.arch.n_blocks), x, &cache);
  const Eigen::MatrixXd wrong_rows = random_batch(3, 2, rng);
  EXPECT_THROW(backward(p, full_ft(p.arch.n_blocks), cache, wrong_rows), ConfigError);
}

TEST(Checkpoint, RoundTripBitExact) {
  Architecture arch = tiny_arch();
  ModelParams p = init_random(arch, 40);
  Rng rng(41);
  p.delta.blocks[0].mlp_w1 = random_batch(arch.d_model, arch.mlp_hidden, rng);
  p.delta.head.w = random_batch(arch.d_model, 2, rng);

  const auto path = std::filesystem::temp_directory_path() / "fairmask_test.ckpt";
  save_checkpoint(p, path.string());
  const ModelParams q = load_checkpoint(path.string());
  EXPECT_EQ(q.arch, p.arch);
  EXPECT_TRUE(q.base.stem.w == p.base.stem.w);
  EXPECT_TRUE(q.base.blocks[1].mix_w == p.base.blocks[1].mix_w);
  EXPECT_TRUE(q.delta.blocks[0].mlp_w1 == p.delta.blocks[0].mlp_w1);
  EXPECT_TRUE(q.delta.head.w == p.delta.head.w);
  std::filesystem::remove(path);
}

TEST(Checkpoint, FreshDeltaIsZeroAfterRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "fairmask_fresh.ckpt";
  save_checkpoint(init_random(tiny_arch(), 50), path.string());
  const ModelParams q = load_checkpoint(path.string());
  for (const auto& blk : q.delta.blocks) EXPECT_TRUE(blk.mix_w.isZero(0.0));
  EXPECT_TRUE(q.delta.head.w.isZero(0.0));
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileThrows) {
  const auto path = std::filesystem::temp_directory_path() / "fairmask_trunc.ckpt";
  save_checkpoint(init_random(tiny_arch(), 60), path.string());
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  EXPECT_THROW(load_checkpoint(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicThrows) {
  const auto path = std::filesystem::temp_directory_path() / "fairmask_magic.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE this is not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path.string()), IoError);
  std::filesystem::remove(path);
}
