#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairmask/dataset.hpp"
#include "fairmask/errors.hpp"
#include "fairmask/orchestrator.hpp"
#include "fairmask/serde.hpp"

namespace fairmask::cli {

namespace fs = std::filesystem;

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

inline LogLevel log_level() {
  const char* env = std::getenv("FAIRMASK_LOG");
  if (!env) return LogLevel::kInfo;
  const std::string v(env);
  if (v == "quiet") return LogLevel::kQuiet;
  if (v == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

inline void info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::cerr << "[fairmask] " << msg << "\n";
}

inline void debug(const std::string& msg) {
  if (log_level() >= LogLevel::kDebug) std::cerr << "[fairmask:debug] " << msg << "\n";
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::vector<std::string> overrides;  // dotted-path key=value pairs
};

inline void apply_override(json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key.path=value, got '" + kv + "'");
  const std::string path = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings are allowed
  }
  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline json load_config(const CommonArgs& args) {
  std::ifstream in(args.config_path);
  if (!in) throw ConfigError("cannot open config file " + args.config_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config JSON: " + std::string(e.what()));
  }
  for (const auto& kv : args.overrides) apply_override(j, kv);
  return j;
}

inline void prepare_out_dir(const CommonArgs& args, const std::string& primary_artifact) {
  fs::create_directories(args.out_dir);
  const fs::path artifact = fs::path(args.out_dir) / primary_artifact;
  if (fs::exists(artifact) && !args.force)
    throw ConfigError("output " + artifact.string() +
                      " already exists; re-run with --force to overwrite");
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_resolved_config(const CommonArgs& args, const json& resolved) {
  write_text(fs::path(args.out_dir) / "resolved_config.json", resolved.dump(2) + "\n");
  debug("resolved config: " + resolved.dump());
}

// --- shared data / model source loading ---

struct DataSpec {
  std::optional<SynthConfig> synth;
  std::uint64_t seed = 0;
  std::optional<std::string> csv;
  bool entity_split = false;
};

inline DataSpec data_from_json(const json& j) {
  serde::check_keys(j, {"synth", "csv", "seed", "entity_split"}, "data");
  DataSpec d;
  if (j.contains("synth")) d.synth = synth_from_json(j.at("synth"), "data.synth");
  if (j.contains("csv")) d.csv = j.at("csv").get<std::string>();
  serde::merge(j, "seed", d.seed);
  serde::merge(j, "entity_split", d.entity_split);
  if (d.synth.has_value() == d.csv.has_value())
    throw ConfigError("data: exactly one of 'synth' and 'csv' is required");
  if (d.entity_split && d.synth) throw ConfigError("data: entity_split requires a csv source");
  return d;
}

inline json to_json(const DataSpec& d) {
  json j{{"seed", d.seed}, {"entity_split", d.entity_split}};
  if (d.synth) j["synth"] = fairmask::to_json(*d.synth);
  if (d.csv) j["csv"] = *d.csv;
  return j;
}

inline LoadedCsv load_data(const DataSpec& d) {
  if (d.synth) {
    LoadedCsv out;
    out.dataset = generate_synthetic(*d.synth, d.seed);
    return out;
  }
  return load_csv_with_entities(*d.csv);
}

struct ModelSource {
  std::optional<std::string> checkpoint;
  std::optional<Architecture> init_arch;
  std::uint64_t init_seed = 0;
};

inline ModelSource model_from_json(const json& j) {
  ModelSource m;
  serde::check_keys(j, {"checkpoint", "init"}, "model");
  if (j.contains("checkpoint")) m.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("init")) {
    serde::check_keys(j.at("init"), {"arch", "seed"}, "model.init");
    m.init_arch = arch_from_json(j.at("init").at("arch"));
    serde::merge(j.at("init"), "seed", m.init_seed);
  }
  if (m.checkpoint.has_value() == m.init_arch.has_value())
    throw ConfigError("model: exactly one of 'checkpoint' and 'init' is required");
  return m;
}

inline json to_json(const ModelSource& m) {
  json j = json::object();
  if (m.checkpoint) j["checkpoint"] = *m.checkpoint;
  if (m.init_arch) j["init"] = json{{"arch", fairmask::to_json(*m.init_arch)}, {"seed", m.init_seed}};
  return j;
}

inline ModelParams load_model(const ModelSource& m) {
  if (m.checkpoint) return load_checkpoint(*m.checkpoint);
  return init_random(*m.init_arch, m.init_seed);
}

// --- subcommands ---

inline int cmd_synth(const CommonArgs& args) {
  json j = load_config(args);
  serde::check_keys(j, {"synth", "seed"}, "synth config");
  SynthConfig cfg = synth_from_json(j.contains("synth") ? j.at("synth") : json::object());
  std::uint64_t seed = 0;
  serde::merge(j, "seed", seed);
  if (args.seed) seed = *args.seed;

  prepare_out_dir(args, "dataset.csv");
  write_resolved_config(args, json{{"synth", to_json(cfg)}, {"seed", seed}});

  info("generating synthetic dataset: n=" + std::to_string(cfg.n_samples));
  const Dataset ds = generate_synthetic(cfg, seed);
  write_csv(ds, (fs::path(args.out_dir) / "dataset.csv").string());
  info("wrote " + (fs::path(args.out_dir) / "dataset.csv").string());
  return 0;
}

inline int cmd_pretrain(const CommonArgs& args) {
  json j = load_config(args);
  serde::check_keys(j, {"arch", "source", "train", "seed"}, "pretrain config");
  if (!j.contains("arch")) throw ConfigError("pretrain: 'arch' is required");
  const Architecture arch = arch_from_json(j.at("arch"));
  if (!j.contains("source")) throw ConfigError("pretrain: 'source' is required");
  const DataSpec source = data_from_json(j.at("source"));
  TrainConfig train = j.contains("train") ? train_from_json(j.at("train")) : TrainConfig{};
  std::uint64_t seed = 0;
  serde::merge(j, "seed", seed);
  if (args.seed) seed = *args.seed;

  prepare_out_dir(args, "theta0.ckpt");
  write_resolved_config(args, json{{"arch", to_json(arch)},
                                   {"source", to_json(source)},
                                   {"train", to_json(train)},
                                   {"seed", seed}});

  const Dataset ds = load_data(source).dataset;
  if (static_cast<int>(ds.n_features()) != arch.d_in)
    throw ConfigError("pretrain: source feature width does not match arch.d_in");
  info("pretraining on source task: n=" + std::to_string(ds.n_rows()) +
       ", epochs=" + std::to_string(train.epochs));
  const ModelParams theta0 = pretrain(arch, ds, train, seed);
  save_checkpoint(theta0, (fs::path(args.out_dir) / "theta0.ckpt").string());
  info("wrote " + (fs::path(args.out_dir) / "theta0.ckpt").string());
  return 0;
}

struct SearchSetup {
  DataSpec data;
  SplitSpec split;
  ModelSource model;
  Dataset train, val, test;
  ModelParams theta0;
};

inline SearchSetup load_search_setup(const json& j) {
  SearchSetup s;
  if (!j.contains("data")) throw ConfigError("config: 'data' is required");
  s.data = data_from_json(j.at("data"));
  s.split = j.contains("split") ? split_from_json(j.at("split")) : SplitSpec{};
  if (!j.contains("model")) throw ConfigError("config: 'model' is required");
  s.model = model_from_json(j.at("model"));

  const LoadedCsv loaded = load_data(s.data);
  if (s.data.entity_split) {
    if (loaded.entities.empty())
      throw ConfigError("data: entity_split set but the csv has no entity column");
    std::tie(s.train, s.val, s.test) =
        split_by_entity(loaded.dataset, loaded.entities, s.split.ratios, s.split.seed);
  } else {
    std::tie(s.train, s.val, s.test) =
        split(loaded.dataset, s.split.ratios, s.split.seed, s.split.stratified);
  }
  s.theta0 = load_model(s.model);
  if (s.theta0.arch.d_in != static_cast<int>(s.train.n_features()))
    throw ConfigError("model d_in does not match dataset feature width");
  return s;
}

inline int cmd_search(const CommonArgs& args) {
  json j = load_config(args);
  serde::check_keys(j, {"data", "split", "model", "run"}, "search config");
  RunConfig run = j.contains("run") ? run_from_json(j.at("run")) : RunConfig{};
  if (args.seed) run.run_seed = *args.seed;
  if (args.workers) run.workers = *args.workers;
  run.validate();

  prepare_out_dir(args, "run_result.json");
  SearchSetup setup = load_search_setup(j);
  if (run.space.n_blocks != setup.theta0.arch.n_blocks)
    throw ConfigError("run.space.n_blocks does not match the model architecture");

  write_resolved_config(args, json{{"data", to_json(setup.data)},
                                   {"split", to_json(setup.split.ratios, setup.split.stratified,
                                                     setup.split.seed)},
                                   {"model", to_json(setup.model)},
                                   {"run", to_json(run)}});

  info("search: trials=" + std::to_string(run.n_trials) + ", objective=" +
       to_string(run.objective) + ", workers=" + std::to_string(run.workers));
  const fs::path log_path = fs::path(args.out_dir) / "trials.jsonl";
  RunResult result;
  {
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot write " + log_path.string());
    result = run_search(run, setup.theta0, setup.train, setup.val, setup.test, &log);
  }
  write_text(fs::path(args.out_dir) / "run_result.json",
             to_json(result, run.space).dump(2) + "\n");
  info("best trial " + std::to_string(result.best_trial) + ": objective=" +
       std::to_string(result.val_objective) + ", mask=" + encode(result.best_mask, run.space));
  return 0;
}

inline int cmd_baselines(const CommonArgs& args) {
  json j = load_config(args);
  serde::check_keys(j, {"data", "split", "model", "baselines"}, "baselines config");
  json bj = j.contains("baselines") ? j.at("baselines") : json::object();
  serde::check_keys(bj, {"objective", "train", "lr_grid", "lr_range", "grid_points", "seed"},
                    "baselines");
  ObjectiveKind objective = ObjectiveKind::kMinGroupAuc;
  if (bj.contains("objective")) objective = objective_from_string(bj.at("objective").get<std::string>());
  TrainConfig train = bj.contains("train") ? train_from_json(bj.at("train")) : TrainConfig{};
  std::uint64_t seed = 0;
  serde::merge(bj, "seed", seed);
  if (args.seed) seed = *args.seed;

  std::vector<double> lr_grid;
  if (bj.contains("lr_grid")) {
    lr_grid = bj.at("lr_grid").get<std::vector<double>>();
  } else {
    double lo = 1e-5, hi = 1e-1;
    if (bj.contains("lr_range")) {
      const auto r = bj.at("lr_range").get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("baselines: lr_range must have two entries");
      lo = r[0];
      hi = r[1];
    }
    int points = 7;
    serde::merge(bj, "grid_points", points);
    lr_grid = log_spaced_grid(lo, hi, points);
  }

  prepare_out_dir(args, "baselines.json");
  SearchSetup setup = load_search_setup(j);

  write_resolved_config(args,
                        json{{"data", to_json(setup.data)},
                             {"split", to_json(setup.split.ratios, setup.split.stratified,
                                               setup.split.seed)},
                             {"model", to_json(setup.model)},
                             {"baselines", json{{"objective", to_string(objective)},
                                                {"train", to_json(train)},
                                                {"lr_grid", lr_grid},
                                                {"seed", seed}}}});

  info("baselines: grid of " + std::to_string(lr_grid.size()) + " learning rates");
  const auto table = run_baselines(setup.theta0, setup.train, setup.val, setup.test, train,
                                   lr_grid, objective, seed);

  SearchSpace space;
  space.n_blocks = setup.theta0.arch.n_blocks;
  json out = json::array();
  for (const auto& row : table) out.push_back(to_json(row, space));
  write_text(fs::path(args.out_dir) / "baselines.json", out.dump(2) + "\n");

  std::string csv = "name,lr,val_objective,overall_auc,min_auc,gap_auc,eoddsd,dpd\n";
  char buf[64];
  for (const auto& row : table) {
    csv += row.name;
    for (double v : {row.learning_rate, row.val_objective, row.test_report.overall_auc,
                     row.test_report.min_auc, row.test_report.gap_auc,
                     row.test_report.eoddsd.value_or(std::nan("")), row.test_report.dpd}) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      csv += buf;
    }
    csv += "\n";
  }
  write_text(fs::path(args.out_dir) / "baselines.csv", csv);
  info("wrote baselines table for " + std::to_string(table.size()) + " methods");
  return 0;
}

inline int cmd_report(const CommonArgs& args) {
  json j = load_config(args);
  serde::check_keys(j, {"runs"}, "report config");
  if (!j.contains("runs")) throw ConfigError("report: 'runs' list is required");
  const auto paths = j.at("runs").get<std::vector<std::string>>();
  if (paths.empty()) throw ConfigError("report: 'runs' must not be empty");

  prepare_out_dir(args, "mask_frequency.csv");
  write_resolved_config(args, json{{"runs", paths}});

  std::vector<RunResult> results;
  std::optional<SearchSpace> space;
  std::vector<std::vector<double>> trajectories;
  for (const auto& path : paths) {
    std::ifstream in(path);
    if (!in) throw IoError("report: cannot open " + path);
    json rj;
    try {
      rj = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError("report: bad JSON in " + path + ": " + e.what());
    }
    const SearchSpace run_space = space_from_json(rj.at("space"));
    if (!space) space = run_space;
    else if (to_json(*space) != to_json(run_space))
      throw ConfigError("report: runs use different search spaces");
    RunResult r;
    r.best_mask = decode(rj.at("mask").get<std::string>(), run_space);
    results.push_back(std::move(r));
    trajectories.push_back(rj.at("best_so_far").get<std::vector<double>>());
  }

  const auto freq = mask_frequency(results);
  std::string freq_csv = "block,kind,frequency\n";
  char buf[64];
  for (std::size_t b = 0; b < freq.size(); ++b)
    for (int k = 0; k < kNumKinds; ++k) {
      std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g\n", b,
                    to_string(static_cast<ModuleKind>(k)).c_str(),
                    freq[b][static_cast<std::size_t>(k)]);
      freq_csv += buf;
    }
  write_text(fs::path(args.out_dir) / "mask_frequency.csv", freq_csv);

  std::string traj_csv = "run,trial_index,best_objective\n";
  for (std::size_t r = 0; r < trajectories.size(); ++r)
    for (std::size_t i = 0; i < trajectories[r].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g\n", r, i, trajectories[r][i]);
      traj_csv += buf;
    }
  write_text(fs::path(args.out_dir) / "best_so_far.csv", traj_csv);
  info("wrote mask_frequency.csv and best_so_far.csv for " + std::to_string(paths.size()) +
       " run(s)");
  return 0;
}

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Fairness-directed PEFT mask search over a block network"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool with_workers) {
    sub->add_option("--config", args.config_path, "JSON config file")->required();
    sub->add_option("--out", args.out_dir, "output directory")->required();
    sub->add_flag("--force", args.force, "overwrite an existing completed run");
    sub->add_option("--seed", args.seed, "override the config seed");
    sub->add_option("--set", args.overrides,
                    "override a scalar config field via dotted path, e.g. run.trials=5");
    if (with_workers) sub->add_option("--workers", args.workers, "trial executor threads");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic biased dataset CSV");
  add_common(synth, false);
  CLI::App* pre = app.add_subcommand("pretrain", "train theta0 on a source task");
  add_common(pre, false);
  CLI::App* search = app.add_subcommand("search", "run the PEFT mask search");
  add_common(search, true);
  CLI::App* base = app.add_subcommand("baselines", "run the named-mask baseline suite");
  add_common(base, false);
  CLI::App* rep = app.add_subcommand("report", "aggregate run results into CSV reports");
  add_common(rep, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(args);
    if (pre->parsed()) return cmd_pretrain(args);
    if (search->parsed()) return cmd_search(args);
    if (base->parsed()) return cmd_baselines(args);
    if (rep->parsed()) return cmd_report(args);
    std::cerr << app.help() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace fairmask::cli
