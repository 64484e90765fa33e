#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fairmask/errors.hpp"
#include "fairmask/rng.hpp"

namespace fairmask {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Feature matrix with binary labels and subgroup ids.
struct Dataset {
  Matrix features;                       // n x d
  std::vector<int> labels;               // {0,1}, length n
  std::vector<int> groups;               // ids in [0, n_groups), length n
  std::vector<std::string> group_names;  // length n_groups

  Eigen::Index n_rows() const { return features.rows(); }
  Eigen::Index n_features() const { return features.cols(); }
  int n_groups() const { return static_cast<int>(group_names.size()); }

  void validate() const {
    const auto n = static_cast<std::size_t>(features.rows());
    if (n < 1 || features.cols() < 1)
      throw ConfigError("dataset: need at least one row and one feature");
    if (labels.size() != n || groups.size() != n)
      throw ConfigError("dataset: labels/groups length mismatch with feature rows");
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] != 0 && labels[i] != 1)
        throw ConfigError("dataset: non-binary label at row " + std::to_string(i));
      if (groups[i] < 0 || groups[i] >= n_groups())
        throw ConfigError("dataset: group id out of range at row " + std::to_string(i));
    }
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
    out.labels.reserve(idx.size());
    out.groups.reserve(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.features.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(idx[k]));
      out.labels.push_back(labels[idx[k]]);
      out.groups.push_back(groups[idx[k]]);
    }
    out.group_names = group_names;
    return out;
  }

  std::vector<std::size_t> group_sizes() const {
    std::vector<std::size_t> sizes(group_names.size(), 0);
    for (int g : groups) sizes[static_cast<std::size_t>(g)]++;
    return sizes;
  }
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;

  void validate() const {
    for (double r : {train, val, test})
      if (!(r > 0.0 && r < 1.0)) throw ConfigError("split ratios must each lie in (0,1)");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split ratios must sum to 1");
  }
};

/// Configuration of the synthetic biased-data generator. Labels come from a
/// fixed random teacher applied to clean features; observed features are the
/// clean ones plus group-specific noise and mean shift, so groups with fewer
/// samples and more noise generalize worse while the training set stays
/// perfectly fittable. input_map_strength applies a fixed linear map
/// I + strength*G/sqrt(d) to the observed features, modelling an acquisition
/// shift between a pretraining source (strength 0) and the target domain.
struct SynthConfig {
  std::size_t n_samples = 1000;
  std::size_t d = 16;
  std::vector<double> group_fractions{0.8, 0.2};
  std::uint64_t teacher_seed = 7;
  std::vector<double> noise_per_group{0.1, 1.5};
  std::vector<double> shift_per_group{0.0, 0.0};
  double input_map_strength = 0.0;

  std::size_t n_groups() const { return group_fractions.size(); }

  void validate() const {
    if (n_samples < 1 || d < 1) throw ConfigError("synth: n_samples and d must be positive");
    if (group_fractions.size() < 2) throw ConfigError("synth: need at least two groups");
    if (noise_per_group.size() != group_fractions.size() ||
        shift_per_group.size() != group_fractions.size())
      throw ConfigError("synth: per-group vectors must match group count");
    double sum = 0.0;
    for (double f : group_fractions) {
      if (f <= 0.0) throw ConfigError("synth: group fractions must be positive");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: group fractions must sum to 1");
    for (double s : noise_per_group)
      if (s < 0.0) throw ConfigError("synth: noise levels must be nonnegative");
    if (input_map_strength < 0.0) throw ConfigError("synth: input_map_strength must be nonnegative");
  }
};

namespace detail {

// Two-layer tanh teacher, 16 hidden units, fan-in scaled weights, no biases.
// The teacher is a function of teacher_seed only so every dataset drawn from
// the same config shares one labeling rule.
struct Teacher {
  Matrix w1;  // d x hidden
  Vector w2;  // hidden

  static constexpr int kHidden = 16;

  static Teacher make(std::size_t d, std::uint64_t teacher_seed) {
    Rng rng(derive_seed(teacher_seed, 0x7E));
    Teacher t;
    t.w1.resize(static_cast<Eigen::Index>(d), kHidden);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < t.w1.rows(); ++i)
      for (Eigen::Index j = 0; j < t.w1.cols(); ++j) t.w1(i, j) = rng.normal() * s1;
    t.w2.resize(kHidden);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(kHidden));
    for (int j = 0; j < kHidden; ++j) t.w2(j) = rng.normal() * s2;
    return t;
  }

  double score(const Eigen::RowVectorXd& x) const {
    return (x * w1).array().tanh().matrix() * w2;
  }
};

}  // namespace detail

/// Deterministic synthetic dataset: floor(n * fraction_g) rows per group with
/// the remainder assigned to group 0.
inline Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

/// Row-level uniform split into train/val/test using a seeded shuffle.
/// Sizes are floor(n*train), floor(n*val), remainder to test. With
/// `stratified` the same partition is applied within each group.
inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& ds, const SplitRatios& ratios,
                                                   std::uint64_t seed, bool stratified = false);

/// Threshold-binarized attribute: group 0 iff raw < threshold.
inline std::vector<int> binarize_attribute(const std::vector<double>& raw, double threshold) {
  std::vector<int> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] < threshold ? 0 : 1;
  return out;
}

/// Per-group uniform subsample without replacement of floor(fraction * n_g)
/// rows (at least 1), preserving group proportions within one row.
inline Dataset balanced_subsample(const Dataset& ds, double fraction, std::uint64_t seed);

// --- implementation ---

inline Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = cfg.n_samples;
  const std::size_t n_g = cfg.n_groups();

  std::vector<std::size_t> counts(n_g);
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < n_g; ++g) {
    counts[g] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.group_fractions[g]));
    assigned += counts[g];
  }
  counts[0] += n - assigned;  // remainder to group 0

  const detail::Teacher teacher = detail::Teacher::make(cfg.d, cfg.teacher_seed);
  Rng rng(derive_seed(seed, 0x5D));

  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.d));
  ds.labels.resize(n);
  ds.groups.resize(n);
  for (std::size_t g = 0; g < n_g; ++g) ds.group_names.push_back("g" + std::to_string(g));

  // Clean features and teacher scores first; labels from the sample median of
  // the scores so classes are balanced.
  Matrix clean(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.d));
  std::vector<double> scores(n);
  std::size_t row = 0;
  for (std::size_t g = 0; g < n_g; ++g) {
    for (std::size_t k = 0; k < counts[g]; ++k, ++row) {
      for (std::size_t j = 0; j < cfg.d; ++j)
        clean(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) = rng.normal();
      ds.groups[row] = static_cast<int>(g);
      scores[row] = teacher.score(clean.row(static_cast<Eigen::Index>(row)));
    }
  }

  std::vector<double> sorted = scores;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n / 2), sorted.end());
  const double median = sorted[n / 2];
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = scores[i] > median ? 1 : 0;

  // Observed features: clean + group noise + group mean shift along 1/sqrt(d).
  const double dir = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = static_cast<std::size_t>(ds.groups[i]);
    for (std::size_t j = 0; j < cfg.d; ++j) {
      double v = clean(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      v += cfg.noise_per_group[g] * rng.normal();
      v += cfg.shift_per_group[g] * dir;
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }

  // Acquisition shift: observed rows pass through a fixed linear map tied to
  // the teacher seed, so source (strength 0) and target tasks share the same
  // labeling rule but differ in how features present.
  if (cfg.input_map_strength > 0.0) {
    Rng map_rng(derive_seed(cfg.teacher_seed, 0x3A));
    Matrix map = Matrix::Identity(static_cast<Eigen::Index>(cfg.d), static_cast<Eigen::Index>(cfg.d));
    const double scale = cfg.input_map_strength / std::sqrt(static_cast<double>(cfg.d));
    for (Eigen::Index i = 0; i < map.rows(); ++i)
      for (Eigen::Index j = 0; j < map.cols(); ++j) map(i, j) += scale * map_rng.normal();
    ds.features = ds.features * map.transpose();
  }
  return ds;
}

namespace detail {

inline std::tuple<std::vector<std::size_t>, std::vector<std::size_t>, std::vector<std::size_t>>
split_indices(std::vector<std::size_t> idx, const SplitRatios& ratios, Rng& rng) {
  rng.shuffle(idx);
  const std::size_t n = idx.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.train));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.val));
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> va(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                              idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  std::vector<std::size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return {std::move(tr), std::move(va), std::move(te)};
}

}  // namespace detail

inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& ds, const SplitRatios& ratios,
                                                   std::uint64_t seed, bool stratified) {
  ratios.validate();
  ds.validate();
  const std::size_t n = static_cast<std::size_t>(ds.n_rows());
  if (n < 10) throw ConfigError("split: need at least 10 rows");

  std::vector<std::size_t> tr, va, te;
  Rng rng(derive_seed(seed, 0x51));
  if (!stratified) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::tie(tr, va, te) = detail::split_indices(std::move(idx), ratios, rng);
  } else {
    for (int g = 0; g < ds.n_groups(); ++g) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < n; ++i)
        if (ds.groups[i] == g) idx.push_back(i);
      if (idx.empty()) continue;
      auto [gtr, gva, gte] = detail::split_indices(std::move(idx), ratios, rng);
      tr.insert(tr.end(), gtr.begin(), gtr.end());
      va.insert(va.end(), gva.begin(), gva.end());
      te.insert(te.end(), gte.begin(), gte.end());
    }
  }
  if (tr.empty() || va.empty() || te.empty())
    throw ConfigError("split: a split would be empty at these ratios");
  return {ds.subset(tr), ds.subset(va), ds.subset(te)};
}

/// Entity-level split: rows sharing an entity id land in the same split.
/// Entities are shuffled and allocated by cumulative entity counts.
inline std::tuple<Dataset, Dataset, Dataset> split_by_entity(const Dataset& ds,
                                                             const std::vector<std::string>& entities,
                                                             const SplitRatios& ratios,
                                                             std::uint64_t seed) {
  ratios.validate();
  ds.validate();
  if (entities.size() != static_cast<std::size_t>(ds.n_rows()))
    throw ConfigError("split_by_entity: entity column length mismatch");

  std::vector<std::string> uniq;
  std::map<std::string, std::size_t> ent_id;
  for (const auto& e : entities)
    if (ent_id.emplace(e, uniq.size()).second) uniq.push_back(e);

  std::vector<std::size_t> order(uniq.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x53));
  rng.shuffle(order);

  const std::size_t m = order.size();
  const auto m_train = static_cast<std::size_t>(std::floor(static_cast<double>(m) * ratios.train));
  const auto m_val = static_cast<std::size_t>(std::floor(static_cast<double>(m) * ratios.val));
  std::vector<int> bucket(m);  // 0 train, 1 val, 2 test
  for (std::size_t k = 0; k < m; ++k) bucket[order[k]] = k < m_train ? 0 : (k < m_train + m_val ? 1 : 2);

  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    switch (bucket[ent_id[entities[i]]]) {
      case 0: tr.push_back(i); break;
      case 1: va.push_back(i); break;
      default: te.push_back(i); break;
    }
  }
  if (tr.empty() || va.empty() || te.empty())
    throw ConfigError("split_by_entity: a split would be empty at these ratios");
  return {ds.subset(tr), ds.subset(va), ds.subset(te)};
}

inline Dataset balanced_subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
  ds.validate();
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("balanced_subsample: fraction must lie in (0,1]");
  const auto sizes = ds.group_sizes();
  for (std::size_t g = 0; g < sizes.size(); ++g)
    if (sizes[g] > 0 && fraction * static_cast<double>(sizes[g]) < 1.0)
      throw ConfigError("balanced_subsample: fraction too small for group " + std::to_string(g));

  Rng rng(derive_seed(seed, 0xB5));
  std::vector<std::size_t> chosen;
  for (int g = 0; g < ds.n_groups(); ++g) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < static_cast<std::size_t>(ds.n_rows()); ++i)
      if (ds.groups[i] == g) idx.push_back(i);
    if (idx.empty()) continue;
    rng.shuffle(idx);
    auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size())));
    take = std::max<std::size_t>(take, 1);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(chosen.begin(), chosen.end());
  return ds.subset(chosen);
}

// --- CSV ingestion ---
// Header: f0,f1,...,f{d-1},label,group[,entity]; no quoting, UTF-8, LF.

struct LoadedCsv {
  Dataset dataset;
  std::vector<std::string> entities;  // empty when no entity column
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  if (!cells.empty() && !cells.back().empty() && cells.back().back() == '\r') cells.back().pop_back();
  return cells;
}

inline double parse_real(const std::string& cell, std::size_t row, const std::string& col) {
  if (cell.empty())
    throw ParseError("csv: missing value at row " + std::to_string(row) + ", column " + col);
  const char* begin = cell.data();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end != begin + cell.size() || std::isnan(v))
    throw ParseError("csv: bad value '" + cell + "' at row " + std::to_string(row) + ", column " + col);
  return v;
}

}  // namespace detail

inline LoadedCsv load_csv_with_entities(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError("csv: empty file " + path);
  auto header = detail::split_line(line);
  bool has_entity = !header.empty() && header.back() == "entity";
  if (has_entity) header.pop_back();
  if (header.size() < 3 || header[header.size() - 2] != "label" || header.back() != "group")
    throw ParseError("csv: header must be f0,...,f{d-1},label,group[,entity]");
  const std::size_t d = header.size() - 2;
  for (std::size_t j = 0; j < d; ++j)
    if (header[j] != "f" + std::to_string(j))
      throw ParseError("csv: expected feature column f" + std::to_string(j) + ", got " + header[j]);

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::vector<int> group_ids;
  std::vector<std::string> group_names;
  std::map<std::string, int> group_lookup;
  std::vector<std::string> entities;

  std::size_t row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const auto cells = detail::split_line(line);
    const std::size_t expected = d + 2 + (has_entity ? 1 : 0);
    if (cells.size() != expected)
      throw ParseError("csv: row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                       " cells, expected " + std::to_string(expected));
    std::vector<double> feats(d);
    for (std::size_t j = 0; j < d; ++j)
      feats[j] = detail::parse_real(cells[j], row_no, "f" + std::to_string(j));
    const std::string& lab = cells[d];
    if (lab != "0" && lab != "1")
      throw ParseError("csv: non-binary label '" + lab + "' at row " + std::to_string(row_no));
    const std::string& grp = cells[d + 1];
    auto [it, inserted] = group_lookup.emplace(grp, static_cast<int>(group_names.size()));
    if (inserted) group_names.push_back(grp);
    rows.push_back(std::move(feats));
    labels.push_back(lab == "1" ? 1 : 0);
    group_ids.push_back(it->second);
    if (has_entity) entities.push_back(cells[d + 2]);
  }
  if (rows.empty()) throw ParseError("csv: no data rows in " + path);

  LoadedCsv out;
  out.dataset.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.dataset.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  out.dataset.labels = std::move(labels);
  out.dataset.groups = std::move(group_ids);
  out.dataset.group_names = std::move(group_names);
  out.entities = std::move(entities);
  out.dataset.validate();
  return out;
}

inline Dataset load_csv(const std::string& path) { return load_csv_with_entities(path).dataset; }

inline void write_csv(const Dataset& ds, const std::string& path) {
  ds.validate();
  for (const auto& name : ds.group_names)
    if (name.find(',') != std::string::npos || name.find('\n') != std::string::npos)
      throw ConfigError("csv: group names may not contain commas or newlines");
  std::ofstream out(path);
  if (!out) throw IoError("csv: cannot write " + path);
  const auto d = ds.n_features();
  for (Eigen::Index j = 0; j < d; ++j) out << "f" << j << ",";
  out << "label,group\n";
  char buf[40];
  for (Eigen::Index i = 0; i < ds.n_rows(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features(i, j));
      out << buf << ",";
    }
    out << ds.labels[static_cast<std::size_t>(i)] << ","
        << ds.group_names[static_cast<std::size_t>(ds.groups[static_cast<std::size_t>(i)])] << "\n";
  }
  if (!out) throw IoError("csv: write failed for " + path);
}

}  // namespace fairmask
