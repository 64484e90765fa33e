#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairmask/dataset.hpp"
#include "fairmask/errors.hpp"
#include "fairmask/metrics.hpp"
#include "fairmask/model.hpp"
#include "fairmask/orchestrator.hpp"
#include "fairmask/pruner.hpp"
#include "fairmask/search_space.hpp"
#include "fairmask/tpe.hpp"
#include "fairmask/trainer.hpp"

// JSON round-trips for configs (defaults materialized, unknown keys
// rejected) and one-way serialization for reports and results.

namespace fairmask {

namespace serde {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw ConfigError("config: " + context + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + key + "' in " + context);
}

template <typename T>
void merge(const json& j, const char* key, T& target) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace serde

// --- SynthConfig ---

inline json to_json(const SynthConfig& c) {
  return json{{"n_samples", c.n_samples},
              {"d", c.d},
              {"group_fractions", c.group_fractions},
              {"teacher_seed", c.teacher_seed},
              {"noise_per_group", c.noise_per_group},
              {"shift_per_group", c.shift_per_group},
              {"input_map_strength", c.input_map_strength}};
}

inline SynthConfig synth_from_json(const json& j, const std::string& context = "synth") {
  serde::check_keys(j, {"n_samples", "d", "group_fractions", "teacher_seed", "noise_per_group",
                        "shift_per_group", "input_map_strength"},
                    context);
  SynthConfig c;
  serde::merge(j, "n_samples", c.n_samples);
  serde::merge(j, "d", c.d);
  serde::merge(j, "group_fractions", c.group_fractions);
  serde::merge(j, "teacher_seed", c.teacher_seed);
  serde::merge(j, "noise_per_group", c.noise_per_group);
  serde::merge(j, "shift_per_group", c.shift_per_group);
  serde::merge(j, "input_map_strength", c.input_map_strength);
  // Default per-group vectors track the group count when only fractions given.
  if (!j.contains("noise_per_group") && c.noise_per_group.size() != c.group_fractions.size())
    c.noise_per_group.assign(c.group_fractions.size(), 0.1);
  if (!j.contains("shift_per_group") && c.shift_per_group.size() != c.group_fractions.size())
    c.shift_per_group.assign(c.group_fractions.size(), 0.0);
  c.validate();
  return c;
}

// --- SplitRatios ---

inline json to_json(const SplitRatios& r, bool stratified, std::uint64_t seed) {
  return json{{"train", r.train}, {"val", r.val}, {"test", r.test},
              {"stratified", stratified}, {"seed", seed}};
}

struct SplitSpec {
  SplitRatios ratios;
  bool stratified = false;
  std::uint64_t seed = 0;
};

inline SplitSpec split_from_json(const json& j) {
  serde::check_keys(j, {"train", "val", "test", "stratified", "seed"}, "split");
  SplitSpec s;
  serde::merge(j, "train", s.ratios.train);
  serde::merge(j, "val", s.ratios.val);
  serde::merge(j, "test", s.ratios.test);
  serde::merge(j, "stratified", s.stratified);
  serde::merge(j, "seed", s.seed);
  s.ratios.validate();
  return s;
}

// --- Architecture ---

inline json to_json(const Architecture& a) {
  return json{{"d_in", a.d_in},
              {"d_model", a.d_model},
              {"n_blocks", a.n_blocks},
              {"mlp_hidden", a.mlp_hidden},
              {"n_classes", a.n_classes}};
}

inline Architecture arch_from_json(const json& j) {
  serde::check_keys(j, {"d_in", "d_model", "n_blocks", "mlp_hidden", "n_classes"}, "arch");
  Architecture a;
  serde::merge(j, "d_in", a.d_in);
  serde::merge(j, "d_model", a.d_model);
  serde::merge(j, "n_blocks", a.n_blocks);
  serde::merge(j, "mlp_hidden", a.mlp_hidden);
  serde::merge(j, "n_classes", a.n_classes);
  a.validate();
  return a;
}

// --- TrainConfig ---

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"warmup_epochs", c.warmup_epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"eta_min", c.eta_min}};
}

inline TrainConfig train_from_json(const json& j) {
  serde::check_keys(j,
                    {"epochs", "warmup_epochs", "batch_size", "learning_rate", "weight_decay",
                     "adam_beta1", "adam_beta2", "adam_eps", "seed", "eta_min"},
                    "train");
  TrainConfig c;
  serde::merge(j, "epochs", c.epochs);
  serde::merge(j, "warmup_epochs", c.warmup_epochs);
  serde::merge(j, "batch_size", c.batch_size);
  serde::merge(j, "learning_rate", c.learning_rate);
  serde::merge(j, "weight_decay", c.weight_decay);
  serde::merge(j, "adam_beta1", c.adam_beta1);
  serde::merge(j, "adam_beta2", c.adam_beta2);
  serde::merge(j, "adam_eps", c.adam_eps);
  serde::merge(j, "seed", c.seed);
  serde::merge(j, "eta_min", c.eta_min);
  c.validate();
  return c;
}

// --- SearchSpace ---

inline json to_json(const SearchSpace& s) {
  std::vector<std::string> kinds;
  for (ModuleKind k : s.searched_kinds) kinds.push_back(to_string(k));
  return json{{"n_blocks", s.n_blocks}, {"kinds", kinds}, {"lr_range", {s.lr_lo, s.lr_hi}}};
}

inline SearchSpace space_from_json(const json& j) {
  serde::check_keys(j, {"n_blocks", "kinds", "lr_range"}, "space");
  SearchSpace s;
  serde::merge(j, "n_blocks", s.n_blocks);
  if (j.contains("kinds")) {
    s.searched_kinds.clear();
    for (const auto& k : j.at("kinds")) s.searched_kinds.push_back(kind_from_string(k.get<std::string>()));
  }
  if (j.contains("lr_range")) {
    const auto r = j.at("lr_range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("config: lr_range must have two entries");
    s.lr_lo = r[0];
    s.lr_hi = r[1];
  }
  s.validate();
  return s;
}

// --- TpeConfig / ShConfig ---

inline json to_json(const TpeConfig& c) {
  return json{{"gamma", c.gamma},
              {"n_candidates", c.n_candidates},
              {"n_startup", c.n_startup},
              {"prior_weight", c.prior_weight},
              {"min_bandwidth", c.min_bandwidth}};
}

inline TpeConfig tpe_from_json(const json& j) {
  serde::check_keys(j, {"gamma", "n_candidates", "n_startup", "prior_weight", "min_bandwidth"},
                    "tpe");
  TpeConfig c;
  serde::merge(j, "gamma", c.gamma);
  serde::merge(j, "n_candidates", c.n_candidates);
  serde::merge(j, "n_startup", c.n_startup);
  serde::merge(j, "prior_weight", c.prior_weight);
  serde::merge(j, "min_bandwidth", c.min_bandwidth);
  c.validate();
  return c;
}

inline json to_json(const ShConfig& c) {
  return json{{"reduction_factor", c.reduction_factor}, {"min_resource", c.min_resource}};
}

inline ShConfig sh_from_json(const json& j) {
  serde::check_keys(j, {"reduction_factor", "min_resource"}, "sh");
  ShConfig c;
  serde::merge(j, "reduction_factor", c.reduction_factor);
  serde::merge(j, "min_resource", c.min_resource);
  c.validate();
  return c;
}

// --- RunConfig ---

inline json to_json(const RunConfig& c) {
  return json{{"trials", c.n_trials},
              {"objective", to_string(c.objective)},
              {"space", to_json(c.space)},
              {"train", to_json(c.train)},
              {"tpe", to_json(c.tpe)},
              {"sh", to_json(c.sh)},
              {"seed", c.run_seed},
              {"workers", c.workers},
              {"search_fraction", c.search_fraction},
              {"retrain_full", c.retrain_full}};
}

inline RunConfig run_from_json(const json& j) {
  serde::check_keys(j,
                    {"trials", "objective", "space", "train", "tpe", "sh", "seed", "workers",
                     "search_fraction", "retrain_full"},
                    "run");
  RunConfig c;
  serde::merge(j, "trials", c.n_trials);
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
  if (j.contains("space")) c.space = space_from_json(j.at("space"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("tpe")) c.tpe = tpe_from_json(j.at("tpe"));
  if (j.contains("sh")) c.sh = sh_from_json(j.at("sh"));
  serde::merge(j, "seed", c.run_seed);
  serde::merge(j, "workers", c.workers);
  serde::merge(j, "search_fraction", c.search_fraction);
  serde::merge(j, "retrain_full", c.retrain_full);
  c.validate();
  return c;
}

// --- reports and results (serialization only) ---

inline json to_json(const SubgroupReport& r) {
  json per_group = json::object();
  for (const auto& [g, a] : r.per_group_auc) per_group[std::to_string(g)] = a;
  json undefined = json::array();
  for (int g : r.undefined_groups) undefined.push_back(g);
  return json{{"overall_auc", r.overall_auc},
              {"per_group_auc", per_group},
              {"min_auc", r.min_auc},
              {"gap_auc", r.gap_auc},
              {"eoddsd", r.eoddsd ? json(*r.eoddsd) : json()},
              {"dpd", r.dpd},
              {"undefined_groups", undefined}};
}

inline json to_json(const TrialRecord& r, const SearchSpace& space) {
  json rungs = json::array();
  for (const auto& [epoch, value] : r.rung_values) rungs.push_back({epoch, value});
  return json{{"trial", r.trial_id},
              {"mask", encode(r.config.mask, space)},
              {"lr", r.config.learning_rate},
              {"status", to_string(r.status)},
              {"value", r.final_value ? json(*r.final_value) : json()},
              {"rungs", rungs},
              {"wall_seconds", r.wall_seconds},
              {"seed", r.trial_seed}};
}

inline json to_json(const RunResult& r, const SearchSpace& space) {
  json trials = json::array();
  for (const auto& rec : r.records) trials.push_back(to_json(rec, space));
  return json{{"best_trial", r.best_trial},
              {"mask", encode(r.best_mask, space)},
              {"lr", r.best_lr},
              {"val_objective", r.val_objective},
              {"space", to_json(space)},
              {"test_report", r.test_report ? to_json(*r.test_report) : json()},
              {"best_so_far", r.best_so_far},
              {"trials", trials}};
}

inline json to_json(const BaselineResult& b, const SearchSpace& space) {
  return json{{"name", b.name},
              {"mask", encode(b.mask, space)},
              {"lr", b.learning_rate},
              {"val_objective", b.val_objective},
              {"test_report", to_json(b.test_report)}};
}

}  // namespace fairmask
