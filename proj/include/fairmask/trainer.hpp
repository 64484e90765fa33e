#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fairmask/dataset.hpp"
#include "fairmask/errors.hpp"
#include "fairmask/metrics.hpp"
#include "fairmask/model.hpp"
#include "fairmask/rng.hpp"
#include "fairmask/search_space.hpp"

namespace fairmask {

struct TrainConfig {
  int epochs = 30;
  int warmup_epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double eta_min = 0.0;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch_size must be positive");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
      throw ConfigError("train: need 0 <= warmup_epochs <= epochs");
    // Zero is allowed as an explicit no-op optimizer.
    if (!(learning_rate >= 0.0)) throw ConfigError("train: learning rate must be nonnegative");
    if (weight_decay < 0.0 || eta_min < 0.0) throw ConfigError("train: negative decay or eta_min");
    for (double beta : {adam_beta1, adam_beta2})
      if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("train: betas must lie in [0,1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  }
};

struct EpochReport {
  int epoch = 0;  // 0-based
  double train_loss = 0.0;
  SubgroupReport validation;
};

enum class TrainDecision { kContinue, kStop };

using EpochObserver = std::function<TrainDecision(const EpochReport&)>;

/// Linear warmup to the peak rate, then cosine to eta_min.
inline double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  cfg.validate();
  if (step >= total_steps) throw ConfigError("lr_at: step past schedule end");
  const auto warmup_steps = static_cast<std::size_t>(std::llround(
      static_cast<double>(total_steps) * static_cast<double>(cfg.warmup_epochs) /
      static_cast<double>(cfg.epochs)));
  if (step < warmup_steps)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return cfg.learning_rate;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return cfg.eta_min + (cfg.learning_rate - cfg.eta_min) * 0.5 * (1.0 + std::cos(M_PI * t));
}

/// Mean softmax cross-entropy with log-sum-exp stabilization.
/// Returns the loss and dL/dlogits = (softmax - onehot)/batch.
inline std::pair<double, Eigen::MatrixXd> cross_entropy(const Eigen::MatrixXd& logits,
                                                        const std::vector<int>& labels) {
  const Eigen::Index n = logits.rows();
  if (static_cast<std::size_t>(n) != labels.size() || logits.cols() != 2)
    throw ConfigError("cross_entropy: shape mismatch");
  Eigen::MatrixXd grad(n, 2);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = std::max(logits(i, 0), logits(i, 1));
    const double e0 = std::exp(logits(i, 0) - m);
    const double e1 = std::exp(logits(i, 1) - m);
    const double z = e0 + e1;
    const int y = labels[static_cast<std::size_t>(i)];
    loss += m + std::log(z) - logits(i, y);
    grad(i, 0) = e0 / z - (y == 0 ? 1.0 : 0.0);
    grad(i, 1) = e1 / z - (y == 1 ? 1.0 : 0.0);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return {loss * inv_n, grad * inv_n};
}

/// Positive-class softmax probabilities.
inline std::vector<double> positive_scores(const Eigen::MatrixXd& logits) {
  std::vector<double> s(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = std::max(logits(i, 0), logits(i, 1));
    const double e0 = std::exp(logits(i, 0) - m);
    const double e1 = std::exp(logits(i, 1) - m);
    s[static_cast<std::size_t>(i)] = e1 / (e0 + e1);
  }
  return s;
}

namespace detail {

// Flat view over one delta tensor and its gradient.
struct TensorSlot {
  double* param;
  const double* grad;
  std::size_t size;
};

// Canonical enumeration of updated tensors: blocks in order, kinds in
// (MHSA, MLP, LN) order, then the head. AdamW state lines up with this.
inline std::vector<std::size_t> updated_sizes(const DeltaSet& delta, const Mask& mask) {
  std::vector<std::size_t> sizes;
  for (std::size_t b = 0; b < delta.blocks.size(); ++b) {
    const BlockParams& d = delta.blocks[b];
    const int bi = static_cast<int>(b);
    if (mask.get(bi, ModuleKind::kMhsa)) {
      sizes.push_back(static_cast<std::size_t>(d.mix_w.size()));
      sizes.push_back(static_cast<std::size_t>(d.mix_b.size()));
    }
    if (mask.get(bi, ModuleKind::kMlp)) {
      sizes.push_back(static_cast<std::size_t>(d.mlp_w1.size()));
      sizes.push_back(static_cast<std::size_t>(d.mlp_b1.size()));
      sizes.push_back(static_cast<std::size_t>(d.mlp_w2.size()));
      sizes.push_back(static_cast<std::size_t>(d.mlp_b2.size()));
    }
    if (mask.get(bi, ModuleKind::kLn)) {
      sizes.push_back(static_cast<std::size_t>(d.ln1_gain.size()));
      sizes.push_back(static_cast<std::size_t>(d.ln1_bias.size()));
      sizes.push_back(static_cast<std::size_t>(d.ln2_gain.size()));
      sizes.push_back(static_cast<std::size_t>(d.ln2_bias.size()));
    }
  }
  sizes.push_back(static_cast<std::size_t>(delta.head.w.size()));
  sizes.push_back(static_cast<std::size_t>(delta.head.b.size()));
  return sizes;
}

inline std::vector<TensorSlot> updated_slots(DeltaSet& delta, const DeltaGrads& grads,
                                             const Mask& mask) {
  std::vector<TensorSlot> slots;
  auto add = [&](Eigen::MatrixXd& p, const Eigen::MatrixXd& g) {
    slots.push_back({p.data(), g.data(), static_cast<std::size_t>(p.size())});
  };
  auto addv = [&](Eigen::VectorXd& p, const Eigen::VectorXd& g) {
    slots.push_back({p.data(), g.data(), static_cast<std::size_t>(p.size())});
  };
  for (std::size_t b = 0; b < delta.blocks.size(); ++b) {
    BlockParams& d = delta.blocks[b];
    const BlockParams& g = grads.blocks[b];
    const int bi = static_cast<int>(b);
    if (mask.get(bi, ModuleKind::kMhsa)) {
      add(d.mix_w, g.mix_w);
      addv(d.mix_b, g.mix_b);
    }
    if (mask.get(bi, ModuleKind::kMlp)) {
      add(d.mlp_w1, g.mlp_w1);
      addv(d.mlp_b1, g.mlp_b1);
      add(d.mlp_w2, g.mlp_w2);
      addv(d.mlp_b2, g.mlp_b2);
    }
    if (mask.get(bi, ModuleKind::kLn)) {
      addv(d.ln1_gain, g.ln1_gain);
      addv(d.ln1_bias, g.ln1_bias);
      addv(d.ln2_gain, g.ln2_gain);
      addv(d.ln2_bias, g.ln2_bias);
    }
  }
  add(delta.head.w, grads.head.w);
  addv(delta.head.b, grads.head.b);
  return slots;
}

// Decoupled-decay Adam over the updated tensors only.
class AdamW {
public:
  AdamW(const TrainConfig& cfg, const std::vector<std::size_t>& sizes) : cfg_(cfg) {
    for (std::size_t s : sizes) {
      m_.emplace_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(s)));
      v_.emplace_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(s)));
    }
  }

  void step(const std::vector<TensorSlot>& slots, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, t_);
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const TensorSlot& s = slots[k];
      Eigen::ArrayXd& m = m_[k];
      Eigen::ArrayXd& v = v_[k];
      for (std::size_t i = 0; i < s.size; ++i) {
        const double g = s.grad[i];
        m[static_cast<Eigen::Index>(i)] =
            cfg_.adam_beta1 * m[static_cast<Eigen::Index>(i)] + (1.0 - cfg_.adam_beta1) * g;
        v[static_cast<Eigen::Index>(i)] =
            cfg_.adam_beta2 * v[static_cast<Eigen::Index>(i)] + (1.0 - cfg_.adam_beta2) * g * g;
        const double mhat = m[static_cast<Eigen::Index>(i)] / bc1;
        const double vhat = v[static_cast<Eigen::Index>(i)] / bc2;
        s.param[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) +
                            cfg_.weight_decay * s.param[i]);
      }
    }
  }

private:
  TrainConfig cfg_;
  std::vector<Eigen::ArrayXd> m_, v_;
  int t_ = 0;
};

}  // namespace detail

struct FineTuneResult {
  ModelParams params;
  std::vector<EpochReport> reports;
  bool pruned = false;
};

/// Evaluate a dataset and build its subgroup report (search mode).
inline SubgroupReport evaluate(const ModelParams& p, const Mask& mask, const Dataset& ds,
                               double threshold = 0.5,
                               ReportMode mode = ReportMode::kSearch) {
  const Eigen::MatrixXd logits = forward(p, mask, ds.features);
  return subgroup_report(positive_scores(logits), ds.labels, ds.groups, threshold, mode);
}

/// Inner-loop fine-tuning: AdamW on the delta of mask-selected modules and
/// the head. Delta starts from zero; unselected modules never receive a
/// moment buffer or an update, so their delta stays exactly zero.
inline FineTuneResult fine_tune(const ModelParams& initial, const Mask& mask, const Dataset& train,
                                const Dataset& val, const TrainConfig& cfg,
                                const EpochObserver& observer = nullptr) {
  cfg.validate();
  train.validate();
  val.validate();
  if (mask.n_blocks() != initial.arch.n_blocks)
    throw ConfigError("fine_tune: mask does not match architecture");

  FineTuneResult result;
  result.params = initial;
  result.params.delta = zero_delta(initial.arch);
  ModelParams& p = result.params;

  const std::size_t n = static_cast<std::size_t>(train.n_rows());
  const std::size_t batches_per_epoch =
      (n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(cfg.epochs);

  // Moment buffers exist only for updated tensors.
  detail::AdamW opt(cfg, detail::updated_sizes(p.delta, mask));

  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, 0xE0 + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const auto bsz = static_cast<Eigen::Index>(stop - start);
      Eigen::MatrixXd x(bsz, train.n_features());
      std::vector<int> y(static_cast<std::size_t>(bsz));
      for (Eigen::Index i = 0; i < bsz; ++i) {
        x.row(i) = train.features.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)]));
        y[static_cast<std::size_t>(i)] = train.labels[order[start + static_cast<std::size_t>(i)]];
      }

      ForwardCache cache;
      double loss = 0.0;
      Eigen::MatrixXd dlogits;
      try {
        const Eigen::MatrixXd logits = forward(p, mask, x, &cache);
        std::tie(loss, dlogits) = cross_entropy(logits, y);
      } catch (const NumericError& e) {
        throw NumericError("fine_tune: diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + " (" + e.what() + ")");
      }
      if (!std::isfinite(loss))
        throw NumericError("fine_tune: diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step));
      loss_sum += loss * static_cast<double>(bsz);

      const DeltaGrads grads = backward(p, mask, cache, dlogits);
      const auto slots = detail::updated_slots(p.delta, grads, mask);
      opt.step(slots, lr_at(cfg, step, total_steps));
      ++step;
    }

    EpochReport report;
    report.epoch = epoch;
    report.train_loss = loss_sum / static_cast<double>(n);
    report.validation = evaluate(p, mask, val);
    result.reports.push_back(report);

    if (observer && observer(result.reports.back()) == TrainDecision::kStop) {
      result.pruned = true;
      return result;
    }
  }
  return result;
}

/// Full-model training on the source task; the learned weights are folded
/// into the base so the result serves as theta_0 with zero delta.
inline ModelParams pretrain(const Architecture& arch, const Dataset& source, const TrainConfig& cfg,
                            std::uint64_t seed) {
  source.validate();
  ModelParams init = init_random(arch, seed);
  TrainConfig pre_cfg = cfg;
  pre_cfg.seed = derive_seed(seed, 0x9E);
  FineTuneResult r = fine_tune(init, full_ft(arch.n_blocks), source, source, pre_cfg);

  ModelParams out = std::move(r.params);
  for (std::size_t b = 0; b < out.base.blocks.size(); ++b) {
    BlockParams& base = out.base.blocks[b];
    const BlockParams& d = out.delta.blocks[b];
    base.ln1_gain += d.ln1_gain;
    base.ln1_bias += d.ln1_bias;
    base.mix_w += d.mix_w;
    base.mix_b += d.mix_b;
    base.ln2_gain += d.ln2_gain;
    base.ln2_bias += d.ln2_bias;
    base.mlp_w1 += d.mlp_w1;
    base.mlp_b1 += d.mlp_b1;
    base.mlp_w2 += d.mlp_w2;
    base.mlp_b2 += d.mlp_b2;
  }
  out.base.head.w += out.delta.head.w;
  out.base.head.b += out.delta.head.b;
  out.delta = zero_delta(arch);
  return out;
}

}  // namespace fairmask
