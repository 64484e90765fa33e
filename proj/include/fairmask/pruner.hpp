#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fairmask/errors.hpp"

namespace fairmask {

struct ShConfig {
  int reduction_factor = 4;  // eta
  int min_resource = 1;      // r0, in epochs

  void validate() const {
    if (reduction_factor < 2) throw ConfigError("sh: reduction_factor must be >= 2");
    if (min_resource < 1) throw ConfigError("sh: min_resource must be >= 1");
  }

  // Rung epochs r0 * eta^k, capped at the total epoch budget.
  std::vector<int> rung_epochs(int total_epochs) const {
    validate();
    std::vector<int> rungs;
    long long r = min_resource;
    while (r <= total_epochs) {
      rungs.push_back(static_cast<int>(r));
      r *= reduction_factor;
    }
    return rungs;
  }
};

enum class PruneDecision { kContinue, kPrune };

/// Asynchronous successive halving: a report at a rung is judged against
/// everything recorded at that rung so far. Decisions are never revoked.
class RungState {
public:
  RungState(ShConfig cfg, int total_epochs)
      : cfg_(cfg), rungs_(cfg.rung_epochs(total_epochs)) {
    values_.resize(rungs_.size());
    seen_.resize(rungs_.size());
  }

  const std::vector<int>& rung_epochs() const { return rungs_; }

  // Rung index for a 1-based epoch count, or -1 if not a rung boundary.
  int rung_of(int epoch) const {
    for (std::size_t k = 0; k < rungs_.size(); ++k)
      if (rungs_[k] == epoch) return static_cast<int>(k);
    return -1;
  }

  /// Record `value` for `trial_id` at `epoch` and decide. Non-rung epochs
  /// always continue without recording.
  PruneDecision report(int trial_id, int epoch, double value) {
    const int k = rung_of(epoch);
    if (k < 0) return PruneDecision::kContinue;
    auto& seen = seen_[static_cast<std::size_t>(k)];
    if (!seen.insert(trial_id).second)
      throw ConfigError("sh: duplicate report for trial " + std::to_string(trial_id) + " at rung " +
                        std::to_string(k));
    auto& vals = values_[static_cast<std::size_t>(k)];
    vals.push_back({trial_id, value});

    const auto n = vals.size();
    const std::size_t keep =
        std::max<std::size_t>(1, n / static_cast<std::size_t>(cfg_.reduction_factor));
    // Rank of this trial: count entries strictly better (higher value; ties
    // favor the lower trial id).
    std::size_t better = 0;
    for (const auto& [id, v] : vals) {
      if (id == trial_id) continue;
      if (v > value || (v == value && id < trial_id)) ++better;
    }
    return better < keep ? PruneDecision::kContinue : PruneDecision::kPrune;
  }

  std::size_t recorded_at(int rung) const { return values_[static_cast<std::size_t>(rung)].size(); }

  /// Re-evaluate a recorded trial against the rung's current full population
  /// (the decision a late reporter with the same value would receive).
  PruneDecision reevaluate(int rung, int trial_id) const {
    const auto& vals = values_[static_cast<std::size_t>(rung)];
    const auto it = std::find_if(vals.begin(), vals.end(),
                                 [&](const auto& e) { return e.first == trial_id; });
    if (it == vals.end()) throw ConfigError("sh: trial not recorded at rung");
    const double value = it->second;
    const std::size_t keep =
        std::max<std::size_t>(1, vals.size() / static_cast<std::size_t>(cfg_.reduction_factor));
    std::size_t better = 0;
    for (const auto& [id, v] : vals) {
      if (id == trial_id) continue;
      if (v > value || (v == value && id < trial_id)) ++better;
    }
    return better < keep ? PruneDecision::kContinue : PruneDecision::kPrune;
  }

private:
  ShConfig cfg_;
  std::vector<int> rungs_;
  std::vector<std::vector<std::pair<int, double>>> values_;  // arrival order per rung
  std::vector<std::set<int>> seen_;
};

}  // namespace fairmask
