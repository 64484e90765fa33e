#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "fairmask/orchestrator.hpp"

using namespace fairmask;

namespace {

RunConfig stub_run_config(int n_blocks, int n_trials, std::uint64_t seed = 1) {
  RunConfig cfg;
  cfg.n_trials = n_trials;
  cfg.space.n_blocks = n_blocks;
  cfg.run_seed = seed;
  cfg.train.epochs = 30;
  cfg.train.seed = seed;
  return cfg;
}

// Stub inner loop: completes immediately with objective = set bit count.
InnerResult popcount_runner(int, const TrialConfig& tc, std::uint64_t, const RungCallback&) {
  InnerResult r;
  r.status = TrialStatus::kCompleted;
  r.final_value = static_cast<double>(tc.mask.count());
  return r;
}

TrialRecord completed_record(int id, double value) {
  TrialRecord r;
  r.trial_id = id;
  r.status = TrialStatus::kCompleted;
  r.final_value = value;
  return r;
}

TrialRecord pruned_record(int id, double value) {
  TrialRecord r;
  r.trial_id = id;
  r.status = TrialStatus::kPruned;
  r.final_value = value;
  return r;
}

}  // namespace

TEST(BestSoFar, PrefixMaximum) {
  std::vector<TrialRecord> recs = {completed_record(0, 0.6), completed_record(1, 0.5),
                                   completed_record(2, 0.7)};
  EXPECT_EQ(best_so_far(recs), (std::vector<double>{0.6, 0.6, 0.7}));
}

TEST(BestSoFar, AllPrunedGivesEmpty) {
  std::vector<TrialRecord> recs = {pruned_record(0, 0.9), pruned_record(1, 0.8)};
  EXPECT_TRUE(best_so_far(recs).empty());
}

TEST(BestSoFar, NondecreasingOnRandomInput) {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<TrialRecord> recs;
    const int n = 1 + static_cast<int>(rng.below(30));
    for (int i = 0; i < n; ++i) {
      if (rng.coin(0.3)) recs.push_back(pruned_record(i, rng.uniform()));
      else recs.push_back(completed_record(i, rng.uniform()));
    }
    const auto traj = best_so_far(recs);
    for (std::size_t i = 1; i < traj.size(); ++i) EXPECT_GE(traj[i], traj[i - 1]);
  }
}

TEST(MaskFrequency, SingleResultEqualsItsBits) {
  RunResult r;
  r.best_mask = attention_only(3);
  const auto freq = mask_frequency({r});
  for (int b = 0; b < 3; ++b) {
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(b)][0], 1.0);  // MHSA
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(b)][1], 0.0);
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(b)][2], 0.0);
  }
}

TEST(MaskFrequency, ComplementaryMasksAverageToHalf) {
  RunResult a, b;
  a.best_mask = attention_only(4);
  b.best_mask = full_ft(4);
  for (int blk = 0; blk < 4; ++blk) {
    b.best_mask.set(blk, ModuleKind::kMhsa, false);  // complement of attention_only
  }
  const auto freq = mask_frequency({a, b});
  for (int blk = 0; blk < 4; ++blk) {
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(blk)][0], 0.5);
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(blk)][1], 0.5);
    EXPECT_DOUBLE_EQ(freq[static_cast<std::size_t>(blk)][2], 0.5);
  }
}

TEST(MaskFrequency, MixedSpacesThrow) {
  RunResult a, b;
  a.best_mask = Mask(3);
  b.best_mask = Mask(4);
  EXPECT_THROW(mask_frequency({a, b}), ConfigError);
  EXPECT_THROW(mask_frequency({}), ConfigError);
}

TEST(RunSearch, SingleTrialIsBest) {
  const RunConfig cfg = stub_run_config(2, 1);
  const RunResult res = run_search_with_runner(cfg, popcount_runner);
  EXPECT_EQ(res.best_trial, 0);
  EXPECT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.best_mask, res.records[0].config.mask);
}

TEST(RunSearch, StubObjectiveFindsAllOnes) {
  // Exhaustive optimum for B=2 is the 6-bit all-ones mask (objective 6).
  const RunConfig cfg = stub_run_config(2, 200, 7);
  const RunResult res = run_search_with_runner(cfg, popcount_runner);
  EXPECT_EQ(res.best_mask, full_ft(2));
  EXPECT_DOUBLE_EQ(res.val_objective, 6.0);
  const auto traj = res.best_so_far;
  for (std::size_t i = 1; i < traj.size(); ++i) EXPECT_GE(traj[i], traj[i - 1]);
}

TEST(RunSearch, ArgmaxContractAgainstLogScan) {
  const RunConfig cfg = stub_run_config(3, 40, 11);
  const RunResult res = run_search_with_runner(cfg, popcount_runner);
  double best = -1e300;
  int best_id = -1;
  for (const auto& rec : res.records) {
    if (rec.status != TrialStatus::kCompleted) continue;
    if (*rec.final_value > best) {
      best = *rec.final_value;
      best_id = rec.trial_id;
    }
  }
  EXPECT_EQ(res.best_trial, best_id);
  EXPECT_DOUBLE_EQ(res.val_objective, best);
}

TEST(RunSearch, TiesGoToEarliestTrial) {
  RunConfig cfg = stub_run_config(1, 5, 3);
  TrialRunner constant = [](int, const TrialConfig&, std::uint64_t, const RungCallback&) {
    InnerResult r;
    r.status = TrialStatus::kCompleted;
    r.final_value = 1.0;
    return r;
  };
  const RunResult res = run_search_with_runner(cfg, constant);
  EXPECT_EQ(res.best_trial, 0);
}

TEST(RunSearch, FailedTrialsNeverWin) {
  RunConfig cfg = stub_run_config(2, 10, 5);
  TrialRunner flaky = [](int id, const TrialConfig&, std::uint64_t, const RungCallback&) {
    InnerResult r;
    if (id != 3) {
      r.status = TrialStatus::kFailed;
      r.fail_reason = "synthetic divergence";
      r.final_value = 100.0;  // high last-seen value must not make it the winner
    } else {
      r.status = TrialStatus::kCompleted;
      r.final_value = 0.25;
    }
    return r;
  };
  const RunResult res = run_search_with_runner(cfg, flaky);
  EXPECT_EQ(res.best_trial, 3);
  EXPECT_EQ(res.records.size(), 10u);  // failures still count toward T_N
}

TEST(RunSearch, AllFailedThrows) {
  RunConfig cfg = stub_run_config(2, 3, 5);
  TrialRunner broken = [](int, const TrialConfig&, std::uint64_t, const RungCallback&) {
    InnerResult r;
    r.status = TrialStatus::kFailed;
    r.fail_reason = "boom";
    return r;
  };
  EXPECT_THROW(run_search_with_runner(cfg, broken), NumericError);
}

TEST(RunSearch, PruningFlowsThroughRungCallbacks) {
  RunConfig cfg = stub_run_config(1, 12, 9);
  cfg.train.epochs = 30;  // rungs at 1, 4, 16
  // Simulated training: per-epoch value is trial-dependent; respects the
  // pruner's decision like a real inner loop would.
  TrialRunner simulated = [](int id, const TrialConfig&, std::uint64_t,
                             const RungCallback& on_epoch) {
    InnerResult r;
    const double quality = static_cast<double>(id % 4);  // trials 0,4,8 weakest
    double last = 0.0;
    for (int epoch = 1; epoch <= 30; ++epoch) {
      last = quality + 0.01 * epoch;
      if (on_epoch(epoch, last) == PruneDecision::kPrune) {
        r.status = TrialStatus::kPruned;
        r.final_value = last;
        return r;
      }
    }
    r.status = TrialStatus::kCompleted;
    r.final_value = last;
    return r;
  };
  std::ostringstream log;
  const RunResult res = run_search_with_runner(cfg, simulated, &log);
  int pruned = 0, completed = 0;
  for (const auto& rec : res.records) {
    if (rec.status == TrialStatus::kPruned) ++pruned;
    if (rec.status == TrialStatus::kCompleted) {
      ++completed;
      EXPECT_FALSE(rec.rung_values.empty());
    }
  }
  EXPECT_GT(pruned, 0);
  EXPECT_GT(completed, 0);
  // Winner quality class must be the best (3).
  EXPECT_NEAR(res.val_objective, 3.0 + 0.30, 1e-12);

  // Log sanity: one JSON object per line, rung events carry decisions.
  std::set<std::string> events;
  std::string line;
  std::istringstream in(log.str());
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    events.insert(j.at("event").get<std::string>());
    if (j.at("event") == "rung") {
      EXPECT_TRUE(j.at("payload").contains("decision"));
      EXPECT_TRUE(j.at("payload").contains("value"));
    }
  }
  EXPECT_TRUE(events.count("proposed"));
  EXPECT_TRUE(events.count("rung"));
  EXPECT_TRUE(events.count("completed"));
  EXPECT_TRUE(events.count("pruned"));
}

TEST(RunSearch, TrialSeedsDependOnlyOnRunSeedAndId) {
  RunConfig cfg = stub_run_config(2, 6, 13);
  std::vector<std::uint64_t> seeds_a, seeds_b;
  TrialRunner capture_a = [&](int, const TrialConfig&, std::uint64_t seed, const RungCallback&) {
    seeds_a.push_back(seed);
    InnerResult r;
    r.status = TrialStatus::kCompleted;
    r.final_value = 0.0;
    return r;
  };
  // Second run prunes half the trials; seeds must not shift.
  TrialRunner capture_b = [&](int id, const TrialConfig&, std::uint64_t seed, const RungCallback&) {
    seeds_b.push_back(seed);
    InnerResult r;
    if (id % 2 == 0) {
      r.status = TrialStatus::kPruned;
      r.final_value = 0.0;
    } else {
      r.status = TrialStatus::kCompleted;
      r.final_value = 1.0;
    }
    return r;
  };
  run_search_with_runner(cfg, capture_a);
  run_search_with_runner(cfg, capture_b);
  EXPECT_EQ(seeds_a, seeds_b);
  for (std::size_t i = 0; i < seeds_a.size(); ++i)
    EXPECT_EQ(seeds_a[i], derive_seed(13, i));
}

TEST(RunSearch, SingleWorkerLogIsByteIdentical) {
  const RunConfig cfg = stub_run_config(2, 30, 21);
  std::ostringstream log_a, log_b;
  run_search_with_runner(cfg, popcount_runner, &log_a);
  run_search_with_runner(cfg, popcount_runner, &log_b);
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_FALSE(log_a.str().empty());
}

TEST(RunSearch, MultiWorkerCompletesAllTrials) {
  RunConfig cfg = stub_run_config(2, 16, 17);
  cfg.workers = 4;
  const RunResult res = run_search_with_runner(cfg, popcount_runner);
  EXPECT_EQ(res.records.size(), 16u);
  std::set<int> ids;
  for (const auto& rec : res.records) {
    EXPECT_EQ(rec.status, TrialStatus::kCompleted);
    ids.insert(rec.trial_id);
  }
  EXPECT_EQ(ids.size(), 16u);
}

// End-to-end on a real (tiny) training run.
namespace {

struct TinyWorld {
  Architecture arch;
  ModelParams theta0;
  Dataset train, val, test;

  static TinyWorld make() {
    TinyWorld w;
    w.arch.d_in = 6;
    w.arch.d_model = 8;
    w.arch.n_blocks = 2;
    w.arch.mlp_hidden = 8;
    SynthConfig data_cfg;
    data_cfg.n_samples = 150;
    data_cfg.d = 6;
    data_cfg.group_fractions = {0.7, 0.3};
    data_cfg.noise_per_group = {0.1, 0.6};
    data_cfg.shift_per_group = {0.0, 0.0};
    const Dataset ds = generate_synthetic(data_cfg, 31);
    std::tie(w.train, w.val, w.test) = split(ds, SplitRatios{0.6, 0.2, 0.2}, 32);
    w.theta0 = init_random(w.arch, 33);
    return w;
  }
};

}  // namespace

TEST(RunSearch, RealTrainingEndToEnd) {
  const TinyWorld w = TinyWorld::make();
  RunConfig cfg;
  cfg.n_trials = 4;
  cfg.space.n_blocks = 2;
  cfg.space.lr_lo = 1e-4;
  cfg.space.lr_hi = 1e-2;
  cfg.train.epochs = 4;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 32;
  cfg.tpe.n_startup = 2;
  cfg.run_seed = 41;
  std::ostringstream log;
  const RunResult res = run_search(cfg, w.theta0, w.train, w.val, w.test, &log);
  ASSERT_TRUE(res.test_report.has_value());
  EXPECT_GT(res.test_report->overall_auc, 0.0);
  EXPECT_GE(res.best_trial, 0);
  EXPECT_GE(res.best_lr, cfg.space.lr_lo);
  EXPECT_LE(res.best_lr, cfg.space.lr_hi);
  EXPECT_FALSE(log.str().empty());
}

TEST(RunSearch, RetrainFullUsesWholeTrainSet) {
  const TinyWorld w = TinyWorld::make();
  RunConfig cfg;
  cfg.n_trials = 2;
  cfg.space.n_blocks = 2;
  cfg.train.epochs = 3;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch_size = 32;
  cfg.tpe.n_startup = 2;
  cfg.run_seed = 43;
  cfg.search_fraction = 0.5;
  cfg.retrain_full = true;
  const RunResult res = run_search(cfg, w.theta0, w.train, w.val, w.test);
  ASSERT_TRUE(res.test_report.has_value());
}

TEST(RunBaselines, AllFiveMethodsReport) {
  const TinyWorld w = TinyWorld::make();
  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.warmup_epochs = 1;
  tcfg.batch_size = 32;
  const auto grid = log_spaced_grid(1e-4, 1e-2, 3);
  const auto table = run_baselines(w.theta0, w.train, w.val, w.test, tcfg, grid,
                                   ObjectiveKind::kMinGroupAuc, 45);
  ASSERT_EQ(table.size(), 5u);
  std::set<std::string> names;
  for (const auto& row : table) {
    names.insert(row.name);
    EXPECT_TRUE(std::find(grid.begin(), grid.end(), row.learning_rate) != grid.end());
    EXPECT_GT(row.test_report.overall_auc, 0.0);
  }
  EXPECT_EQ(names, (std::set<std::string>{"scratch", "full_ft", "linear_readout", "attention_only",
                                          "layernorm_only"}));
}

TEST(RunBaselines, LinearReadoutTrainsOnlyHead) {
  const TinyWorld w = TinyWorld::make();
  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.warmup_epochs = 0;
  tcfg.batch_size = 32;
  tcfg.learning_rate = 1e-3;
  tcfg.seed = 5;
  // Freeze exactness is asserted through fine_tune directly with the same mask.
  const FineTuneResult r = fine_tune(w.theta0, linear_readout(2), w.train, w.val, tcfg);
  for (const auto& blk : r.params.delta.blocks) {
    EXPECT_TRUE(blk.mix_w.isZero(0.0));
    EXPECT_TRUE(blk.mlp_w1.isZero(0.0));
    EXPECT_TRUE(blk.ln1_gain.isZero(0.0));
  }
  EXPECT_FALSE(r.params.delta.head.w.isZero(0.0));
}

TEST(LogSpacedGrid, EndpointsAndCount) {
  const auto g = log_spaced_grid(1e-5, 1e-1, 7);
  ASSERT_EQ(g.size(), 7u);
  EXPECT_DOUBLE_EQ(g.front(), 1e-5);
  EXPECT_NEAR(g.back(), 1e-1, 1e-15);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GT(g[i], g[i - 1]);
}
