#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairmask/dataset.hpp"
#include "fairmask/errors.hpp"
#include "fairmask/metrics.hpp"
#include "fairmask/model.hpp"
#include "fairmask/pruner.hpp"
#include "fairmask/search_space.hpp"
#include "fairmask/tpe.hpp"
#include "fairmask/trainer.hpp"

namespace fairmask {

using json = nlohmann::json;

struct RunConfig {
  int n_trials = 40;  // T_N
  ObjectiveKind objective = ObjectiveKind::kMinGroupAuc;
  SearchSpace space;
  TrainConfig train;  // per-trial template; lr and seed overridden per trial
  TpeConfig tpe;
  ShConfig sh;
  std::uint64_t run_seed = 0;
  int workers = 1;
  double search_fraction = 1.0;  // balanced subsample of train during search
  bool retrain_full = false;

  void validate() const {
    if (n_trials < 1) throw ConfigError("run: need at least one trial");
    if (workers < 1) throw ConfigError("run: need at least one worker");
    if (!(search_fraction > 0.0 && search_fraction <= 1.0))
      throw ConfigError("run: search_fraction must lie in (0,1]");
    space.validate();
    train.validate();
    tpe.validate();
    sh.validate();
  }
};

enum class TrialStatus { kCompleted, kPruned, kFailed };

inline std::string to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::kCompleted: return "completed";
    case TrialStatus::kPruned: return "pruned";
    case TrialStatus::kFailed: return "failed";
  }
  return "?";
}

struct TrialRecord {
  int trial_id = 0;
  TrialConfig config;
  std::vector<std::pair<int, double>> rung_values;  // (epoch, objective)
  TrialStatus status = TrialStatus::kFailed;
  std::optional<double> final_value;  // completed: final; pruned: last reported
  double wall_seconds = 0.0;
  std::uint64_t trial_seed = 0;
};

struct RunResult {
  int best_trial = -1;
  Mask best_mask;
  double best_lr = 0.0;
  double val_objective = 0.0;
  std::optional<SubgroupReport> test_report;
  std::vector<double> best_so_far;  // one entry per completed trial
  std::vector<TrialRecord> records;
};

/// Prefix maximum of completed-trial objectives; pruned and failed trials
/// contribute no entry.
inline std::vector<double> best_so_far(const std::vector<TrialRecord>& records) {
  std::vector<double> out;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : records)
    if (r.status == TrialStatus::kCompleted && r.final_value) {
      best = std::max(best, *r.final_value);
      out.push_back(best);
    }
  return out;
}

/// Mean of best-mask bits across runs, indexed [block][kind].
inline std::vector<std::array<double, kNumKinds>> mask_frequency(
    const std::vector<RunResult>& results) {
  if (results.empty()) throw ConfigError("mask_frequency: no results");
  const int n_blocks = results.front().best_mask.n_blocks();
  for (const auto& r : results)
    if (r.best_mask.n_blocks() != n_blocks)
      throw ConfigError("mask_frequency: results come from different spaces");
  std::vector<std::array<double, kNumKinds>> freq(
      static_cast<std::size_t>(n_blocks), {0.0, 0.0, 0.0});
  for (const auto& r : results)
    for (int b = 0; b < n_blocks; ++b)
      for (int k = 0; k < kNumKinds; ++k)
        freq[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] +=
            r.best_mask.get(b, static_cast<ModuleKind>(k)) ? 1.0 : 0.0;
  for (auto& row : freq)
    for (double& v : row) v /= static_cast<double>(results.size());
  return freq;
}

// --- trial execution ---

// What a single inner-loop run reports back to the coordinator.
struct InnerResult {
  TrialStatus status = TrialStatus::kFailed;
  std::optional<double> final_value;
  std::optional<ModelParams> model;  // trained model of a completed trial
  std::string fail_reason;
};

// Per-epoch hook handed to the inner loop; returns the pruning decision.
using RungCallback = std::function<PruneDecision(int epoch, double value)>;

/// Inner-loop seam: the default runs fine_tune; tests may inject stubs.
using TrialRunner =
    std::function<InnerResult(int trial_id, const TrialConfig& cfg, std::uint64_t trial_seed,
                              const RungCallback& on_epoch)>;

namespace detail {

class TrialStore {
public:
  TrialStore(const RunConfig& cfg, std::ostream* log)
      : cfg_(cfg), rungs_(cfg.sh, cfg.train.epochs), log_(log) {
    records_.resize(static_cast<std::size_t>(cfg.n_trials));
  }

  TrialConfig propose_trial(int trial_id) {
    std::lock_guard<std::mutex> lock(mu_);
    Rng rng(derive_seed(cfg_.run_seed, 0xA0000 + static_cast<std::uint64_t>(trial_id)));
    TrialConfig tc = propose(history_, cfg_.space, cfg_.tpe, rng);
    records_[static_cast<std::size_t>(trial_id)].trial_id = trial_id;
    records_[static_cast<std::size_t>(trial_id)].config = tc;
    records_[static_cast<std::size_t>(trial_id)].trial_seed =
        derive_seed(cfg_.run_seed, static_cast<std::uint64_t>(trial_id));
    emit("proposed", trial_id,
         {{"mask", encode(tc.mask, cfg_.space)}, {"lr", tc.learning_rate}});
    return tc;
  }

  PruneDecision on_epoch(int trial_id, int epoch, double value) {
    std::lock_guard<std::mutex> lock(mu_);
    const int rung = rungs_.rung_of(epoch);
    if (rung < 0) return PruneDecision::kContinue;
    const PruneDecision d = rungs_.report(trial_id, epoch, value);
    records_[static_cast<std::size_t>(trial_id)].rung_values.emplace_back(epoch, value);
    emit("rung", trial_id,
         {{"rung", rung},
          {"epoch", epoch},
          {"value", value},
          {"decision", d == PruneDecision::kContinue ? "continue" : "prune"}});
    return d;
  }

  void finish_trial(int trial_id, const InnerResult& res, double wall_seconds) {
    std::lock_guard<std::mutex> lock(mu_);
    TrialRecord& rec = records_[static_cast<std::size_t>(trial_id)];
    rec.status = res.status;
    rec.final_value = res.final_value;
    rec.wall_seconds = wall_seconds;
    switch (res.status) {
      case TrialStatus::kCompleted:
        emit("completed", trial_id, {{"value", *res.final_value}});
        history_.push_back({trial_id, rec.config, *res.final_value, false});
        break;
      case TrialStatus::kPruned:
        emit("pruned", trial_id,
             {{"epoch", rec.rung_values.empty() ? 0 : rec.rung_values.back().first},
              {"value", res.final_value ? json(*res.final_value) : json()}});
        if (res.final_value) history_.push_back({trial_id, rec.config, *res.final_value, true});
        break;
      case TrialStatus::kFailed:
        emit("failed", trial_id, {{"reason", res.fail_reason}});
        // A diverged trial counts like a rung-0 pruning: its last observed
        // value, if any, lands in the bad set.
        if (res.final_value) history_.push_back({trial_id, rec.config, *res.final_value, true});
        break;
    }
  }

  std::vector<TrialRecord> records() const {
    std::lock_guard<std::mutex> lock(mu_);
    return records_;
  }

private:
  void emit(const char* event, int trial, json payload) {
    if (!log_) return;
    json line{{"event", event}, {"trial", trial}, {"payload", std::move(payload)}};
    (*log_) << line.dump() << "\n";
  }

  RunConfig cfg_;
  RungState rungs_;
  std::ostream* log_;
  mutable std::mutex mu_;
  History history_;
  std::vector<TrialRecord> records_;
};

inline RunResult run_trials(const RunConfig& cfg, const TrialRunner& runner, std::ostream* log) {
  cfg.validate();
  TrialStore store(cfg, log);

  auto execute = [&](int trial_id) {
    const TrialConfig tc = store.propose_trial(trial_id);
    const std::uint64_t trial_seed = derive_seed(cfg.run_seed, static_cast<std::uint64_t>(trial_id));
    const auto t0 = std::chrono::steady_clock::now();
    InnerResult res = runner(trial_id, tc, trial_seed, [&](int epoch, double value) {
      return store.on_epoch(trial_id, epoch, value);
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    store.finish_trial(trial_id, res, secs);
  };

  if (cfg.workers == 1) {
    for (int t = 0; t < cfg.n_trials; ++t) execute(t);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int n_workers = std::min(cfg.workers, cfg.n_trials);
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const int t = next.fetch_add(1);
          if (t >= cfg.n_trials) return;
          execute(t);
        }
      });
    for (auto& th : pool) th.join();
  }

  RunResult result;
  result.records = store.records();
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : result.records) {
    if (r.status != TrialStatus::kCompleted || !r.final_value) continue;
    if (result.best_trial < 0 || *r.final_value > best) {
      best = *r.final_value;
      result.best_trial = r.trial_id;
    }
  }
  if (result.best_trial < 0) throw NumericError("search: no trial completed");
  const TrialRecord& winner = result.records[static_cast<std::size_t>(result.best_trial)];
  result.best_mask = winner.config.mask;
  result.best_lr = winner.config.learning_rate;
  result.val_objective = *winner.final_value;
  result.best_so_far = best_so_far(result.records);
  return result;
}

}  // namespace detail

/// Builds the standard inner loop: fine_tune on `train` with per-epoch
/// validation objectives reported to the pruner.
inline TrialRunner make_training_runner(const ModelParams& theta0, const Dataset& train,
                                        const Dataset& val, const RunConfig& cfg) {
  return [&theta0, &train, &val, cfg](int /*trial_id*/, const TrialConfig& tc,
                                      std::uint64_t trial_seed,
                                      const RungCallback& on_epoch) -> InnerResult {
    TrainConfig tcfg = cfg.train;
    tcfg.learning_rate = tc.learning_rate;
    tcfg.seed = trial_seed;
    InnerResult res;
    double last_value = 0.0;
    bool any_value = false;
    try {
      FineTuneResult ft = fine_tune(theta0, tc.mask, train, val, tcfg,
                                    [&](const EpochReport& er) {
                                      const double value = fair_objective(er.validation, cfg.objective);
                                      last_value = value;
                                      any_value = true;
                                      return on_epoch(er.epoch + 1, value) == PruneDecision::kPrune
                                                 ? TrainDecision::kStop
                                                 : TrainDecision::kContinue;
                                    });
      if (ft.pruned) {
        res.status = TrialStatus::kPruned;
        res.final_value = last_value;
      } else {
        res.status = TrialStatus::kCompleted;
        res.final_value = last_value;
        res.model = std::move(ft.params);
      }
    } catch (const NumericError& e) {
      res.status = TrialStatus::kFailed;
      if (any_value) res.final_value = last_value;
      res.fail_reason = e.what();
    } catch (const MetricError& e) {
      res.status = TrialStatus::kFailed;
      if (any_value) res.final_value = last_value;
      res.fail_reason = e.what();
    }
    return res;
  };
}

/// Outer loop over PEFT masks and learning rate: propose -> fine-tune with
/// pruning -> record; the best completed configuration is evaluated on test
/// (optionally after a retrain on the full train set).
inline RunResult run_search(const RunConfig& cfg, const ModelParams& theta0, const Dataset& train,
                            const Dataset& val, const Dataset& test, std::ostream* trial_log = nullptr) {
  cfg.validate();
  if (cfg.space.n_blocks != theta0.arch.n_blocks)
    throw ConfigError("search: space block count does not match checkpoint architecture");
  train.validate();
  val.validate();
  test.validate();

  const Dataset search_train =
      cfg.search_fraction < 1.0
          ? balanced_subsample(train, cfg.search_fraction, derive_seed(cfg.run_seed, 0x5B))
          : train;

  // Keep the best completed model to avoid retraining when reuse suffices.
  std::mutex best_mu;
  int best_id = -1;
  double best_val = 0.0;
  std::optional<ModelParams> best_model;

  TrialRunner base = make_training_runner(theta0, search_train, val, cfg);
  TrialRunner runner = [&](int trial_id, const TrialConfig& tc, std::uint64_t seed,
                           const RungCallback& on_epoch) {
    InnerResult res = base(trial_id, tc, seed, on_epoch);
    if (res.status == TrialStatus::kCompleted && res.model) {
      std::lock_guard<std::mutex> lock(best_mu);
      if (best_id < 0 || *res.final_value > best_val ||
          (*res.final_value == best_val && trial_id < best_id)) {
        best_id = trial_id;
        best_val = *res.final_value;
        best_model = std::move(res.model);
      }
      res.model.reset();  // coordinator does not need a second copy
    }
    return res;
  };

  RunResult result = detail::run_trials(cfg, runner, trial_log);

  ModelParams final_model = [&]() {
    if (cfg.retrain_full) {
      TrainConfig tcfg = cfg.train;
      tcfg.learning_rate = result.best_lr;
      tcfg.seed = derive_seed(cfg.run_seed, static_cast<std::uint64_t>(result.best_trial));
      return fine_tune(theta0, result.best_mask, train, val, tcfg).params;
    }
    if (best_model && best_id == result.best_trial) return std::move(*best_model);
    // Fallback: deterministic re-run of the winning trial.
    TrainConfig tcfg = cfg.train;
    tcfg.learning_rate = result.best_lr;
    tcfg.seed = derive_seed(cfg.run_seed, static_cast<std::uint64_t>(result.best_trial));
    return fine_tune(theta0, result.best_mask, search_train, val, tcfg).params;
  }();

  result.test_report = evaluate(final_model, result.best_mask, test);
  return result;
}

/// Trial loop with an injected inner loop; used by the stub-objective tests
/// and benchmarks. No dataset or model is involved.
inline RunResult run_search_with_runner(const RunConfig& cfg, const TrialRunner& runner,
                                        std::ostream* trial_log = nullptr) {
  return detail::run_trials(cfg, runner, trial_log);
}

// --- baselines ---

struct BaselineResult {
  std::string name;
  Mask mask;
  double learning_rate = 0.0;  // selected from the grid
  double val_objective = 0.0;
  SubgroupReport test_report;
};

inline std::vector<double> log_spaced_grid(double lo, double hi, int points) {
  if (points < 1 || !(lo > 0.0 && lo < hi)) throw ConfigError("lr grid: bad range");
  std::vector<double> g;
  if (points == 1) {
    g.push_back(std::sqrt(lo * hi));
    return g;
  }
  const double a = std::log10(lo), b = std::log10(hi);
  for (int i = 0; i < points; ++i)
    g.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1)));
  return g;
}

/// Named-mask baselines plus training from scratch, each with its learning
/// rate selected from the grid by the validation objective.
inline std::vector<BaselineResult> run_baselines(const ModelParams& theta0, const Dataset& train,
                                                 const Dataset& val, const Dataset& test,
                                                 const TrainConfig& train_cfg,
                                                 const std::vector<double>& lr_grid,
                                                 ObjectiveKind objective,
                                                 std::uint64_t seed) {
  if (lr_grid.empty()) throw ConfigError("baselines: lr grid must be nonempty");
  const int B = theta0.arch.n_blocks;
  struct Item {
    std::string name;
    Mask mask;
    bool from_scratch;
  };
  const std::vector<Item> items = {
      {"scratch", full_ft(B), true},
      {"full_ft", full_ft(B), false},
      {"linear_readout", linear_readout(B), false},
      {"attention_only", attention_only(B), false},
      {"layernorm_only", layernorm_only(B), false},
  };

  std::vector<BaselineResult> out;
  for (std::size_t it = 0; it < items.size(); ++it) {
    const Item& item = items[it];
    ModelParams scratch_init;
    const ModelParams* base = &theta0;
    if (item.from_scratch) {
      scratch_init = init_random(theta0.arch, derive_seed(seed, 0xF00));
      base = &scratch_init;
    }

    BaselineResult best;
    best.name = item.name;
    best.mask = item.mask;
    bool have = false;
    for (std::size_t li = 0; li < lr_grid.size(); ++li) {
      TrainConfig cfg = train_cfg;
      cfg.learning_rate = lr_grid[li];
      cfg.seed = derive_seed(seed, 0xB000 + it * 100 + li);
      try {
        FineTuneResult ft = fine_tune(*base, item.mask, train, val, cfg);
        const double obj = fair_objective(ft.reports.back().validation, objective);
        if (!have || obj > best.val_objective) {
          have = true;
          best.learning_rate = lr_grid[li];
          best.val_objective = obj;
          best.test_report = evaluate(ft.params, item.mask, test);
        }
      } catch (const NumericError&) {
        continue;  // diverged at this lr
      }
    }
    if (!have) throw NumericError("baselines: every learning rate diverged for " + item.name);
    out.push_back(std::move(best));
  }
  return out;
}

}  // namespace fairmask
