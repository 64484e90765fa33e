#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fairmask/errors.hpp"
#include "fairmask/rng.hpp"
#include "fairmask/search_space.hpp"

namespace fairmask {

struct TpeConfig {
  double gamma = 0.25;        // good-fraction quantile
  int n_candidates = 24;
  int n_startup = 10;         // prior-only trials before modeling
  double prior_weight = 1.0;  // Bernoulli smoothing toward 0.5
  double min_bandwidth = 1e-3;  // in log10-lr space

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("tpe: gamma must lie in (0,1)");
    if (n_candidates < 1 || n_startup < 0) throw ConfigError("tpe: bad counts");
    if (!(prior_weight > 0.0 && min_bandwidth > 0.0))
      throw ConfigError("tpe: prior_weight and min_bandwidth must be positive");
  }
};

/// One finished (or pruned) trial as seen by the sampler. Objectives are
/// higher-is-better; pruned trials carry their last reported value.
struct Observation {
  int trial_id = 0;
  TrialConfig config;
  double value = 0.0;
  bool pruned = false;
};

using History = std::vector<Observation>;

inline std::size_t count_completed(const History& h) {
  std::size_t n = 0;
  for (const auto& o : h) n += o.pruned ? 0 : 1;
  return n;
}

/// Top ceil(gamma * n_completed) completed trials by value (ties to the
/// earlier trial id) form the good set; everything else, including pruned
/// trials, is bad.
inline std::pair<History, History> split_history(const History& h, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("split_history: gamma must lie in (0,1)");
  History completed, bad;
  for (const auto& o : h) (o.pruned ? bad : completed).push_back(o);
  if (completed.size() < 2)
    throw ConfigError("split_history: need at least 2 completed trials");

  std::stable_sort(completed.begin(), completed.end(), [](const Observation& a, const Observation& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.trial_id < b.trial_id;
  });
  const auto n_good = static_cast<std::size_t>(
      std::ceil(gamma * static_cast<double>(completed.size())));
  History good(completed.begin(), completed.begin() + static_cast<std::ptrdiff_t>(n_good));
  bad.insert(bad.end(), completed.begin() + static_cast<std::ptrdiff_t>(n_good), completed.end());
  return {std::move(good), std::move(bad)};
}

namespace detail {

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Truncated Gaussian KDE over scalar observations on [lo, hi], equal kernel
// weights, shared bandwidth.
struct Kde {
  std::vector<double> centers;
  double bandwidth = 1.0;
  double lo = 0.0, hi = 1.0;

  static Kde fit(const std::vector<double>& xs, double lo, double hi, double min_bw) {
    Kde k;
    k.centers = xs;
    k.lo = lo;
    k.hi = hi;
    const auto n = static_cast<double>(xs.size());
    double bw = min_bw;
    if (xs.size() >= 2) {
      const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= n;
      bw = std::sqrt(var) * std::pow(n, -0.2);  // Scott's rule
    }
    k.bandwidth = std::max(bw, min_bw);
    return k;
  }

  double density(double x) const {
    const double h = bandwidth;
    double acc = 0.0;
    for (double c : centers) {
      const double z = normal_cdf((hi - c) / h) - normal_cdf((lo - c) / h);
      if (z <= 0.0) continue;
      acc += normal_pdf((x - c) / h) / (h * z);
    }
    return acc / static_cast<double>(centers.size());
  }

  double sample(Rng& rng) const {
    const double c = centers[static_cast<std::size_t>(rng.below(centers.size()))];
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double x = c + bandwidth * rng.normal();
      if (x >= lo && x <= hi) return x;
    }
    return std::clamp(c, lo, hi);
  }
};

inline double bernoulli_p(const History& set, int block, ModuleKind kind, double prior_weight) {
  double ones = 0.0;
  for (const auto& o : set) ones += o.config.mask.get(block, kind) ? 1.0 : 0.0;
  return (ones + prior_weight * 0.5) / (static_cast<double>(set.size()) + prior_weight);
}

}  // namespace detail

/// TPE proposal: prior sampling during startup, then draw candidates from
/// the good-set densities and keep the one maximizing the l/g likelihood
/// ratio across dimensions. Candidates whose mask was already evaluated are
/// deprioritized; on a deterministic objective re-running a known mask only
/// floods the good set with copies and freezes the sampler.
inline TrialConfig propose(const History& h, const SearchSpace& space, const TpeConfig& cfg,
                           Rng& rng) {
  space.validate();
  cfg.validate();
  if (count_completed(h) < static_cast<std::size_t>(cfg.n_startup) || count_completed(h) < 2)
    return sample_prior(space, rng);

  const auto [good, bad] = split_history(h, cfg.gamma);
  if (bad.empty()) return sample_prior(space, rng);

  std::set<std::string> seen_masks;
  for (const auto& o : h) seen_masks.insert(encode(o.config.mask, space));

  // Per-bit Bernoulli parameters.
  const std::size_t n_bits = static_cast<std::size_t>(space.n_bits());
  std::vector<double> p_good(n_bits), p_bad(n_bits);
  {
    std::size_t i = 0;
    for (int b = 0; b < space.n_blocks; ++b)
      for (ModuleKind k : space.searched_kinds) {
        p_good[i] = detail::bernoulli_p(good, b, k, cfg.prior_weight);
        p_bad[i] = detail::bernoulli_p(bad, b, k, cfg.prior_weight);
        ++i;
      }
  }

  const double log_lo = std::log10(space.lr_lo), log_hi = std::log10(space.lr_hi);
  auto log_lrs = [&](const History& set) {
    std::vector<double> xs;
    xs.reserve(set.size());
    for (const auto& o : set) xs.push_back(std::log10(o.config.learning_rate));
    return xs;
  };
  const detail::Kde kde_good = detail::Kde::fit(log_lrs(good), log_lo, log_hi, cfg.min_bandwidth);
  const detail::Kde kde_bad = detail::Kde::fit(log_lrs(bad), log_lo, log_hi, cfg.min_bandwidth);

  TrialConfig best;
  double best_score = -std::numeric_limits<double>::infinity();
  bool best_fresh = false;
  for (int c = 0; c < cfg.n_candidates; ++c) {
    TrialConfig cand;
    cand.mask = Mask(space.n_blocks);
    double score = 0.0;
    std::size_t i = 0;
    for (int b = 0; b < space.n_blocks; ++b)
      for (ModuleKind k : space.searched_kinds) {
        const bool bit = rng.coin(p_good[i]);
        cand.mask.set(b, k, bit);
        const double l = bit ? p_good[i] : 1.0 - p_good[i];
        const double g = bit ? p_bad[i] : 1.0 - p_bad[i];
        score += std::log(l) - std::log(g);
        ++i;
      }
    const double x = kde_good.sample(rng);
    cand.learning_rate = std::pow(10.0, x);
    const double dl = kde_good.density(x);
    const double dg = kde_bad.density(x);
    score += std::log(std::max(dl, 1e-300)) - std::log(std::max(dg, 1e-300));
    const bool fresh = !seen_masks.count(encode(cand.mask, space));
    // Fresh masks outrank evaluated ones; score breaks ties within each tier.
    if ((fresh && !best_fresh) || (fresh == best_fresh && score > best_score)) {
      best_score = score;
      best_fresh = fresh;
      best = std::move(cand);
    }
  }
  return best;
}

}  // namespace fairmask
