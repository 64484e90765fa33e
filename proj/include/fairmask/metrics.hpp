#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fairmask/errors.hpp"

namespace fairmask {

/// AUROC as the Mann-Whitney statistic (wins + 0.5*ties) / (P*N), computed by
/// rank-sum with midrank tie correction in O(n log n).
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  if (labels.size() != n) throw ConfigError("auroc: scores/labels length mismatch");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ConfigError("auroc: labels must be 0/1");
    pos += static_cast<std::size_t>(y);
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("auroc: undefined for single-class labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks over tied runs; accumulate the positive-class rank sum.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Larger of the cross-group TPR spread and FPR spread. Requires every group
/// to have at least one positive and one negative.
inline double eodds_diff(const std::vector<int>& preds, const std::vector<int>& labels,
                         const std::vector<int>& groups) {
  const std::size_t n = preds.size();
  if (labels.size() != n || groups.size() != n)
    throw ConfigError("eodds_diff: length mismatch");
  if (n == 0) throw ConfigError("eodds_diff: empty input");
  const int n_groups = *std::max_element(groups.begin(), groups.end()) + 1;

  std::vector<std::size_t> tp(n_groups, 0), fp(n_groups, 0), p(n_groups, 0), nn(n_groups, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int g = groups[i];
    if (labels[i] == 1) {
      ++p[g];
      if (preds[i] == 1) ++tp[g];
    } else {
      ++nn[g];
      if (preds[i] == 1) ++fp[g];
    }
  }
  double tpr_min = 1.0, tpr_max = 0.0, fpr_min = 1.0, fpr_max = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    if (p[g] == 0)
      throw MetricError("eodds_diff: TPR undefined for group " + std::to_string(g));
    if (nn[g] == 0)
      throw MetricError("eodds_diff: FPR undefined for group " + std::to_string(g));
    const double tpr = static_cast<double>(tp[g]) / static_cast<double>(p[g]);
    const double fpr = static_cast<double>(fp[g]) / static_cast<double>(nn[g]);
    tpr_min = std::min(tpr_min, tpr);
    tpr_max = std::max(tpr_max, tpr);
    fpr_min = std::min(fpr_min, fpr);
    fpr_max = std::max(fpr_max, fpr);
  }
  return std::max(tpr_max - tpr_min, fpr_max - fpr_min);
}

/// Spread of positive-prediction rates across groups.
inline double dp_diff(const std::vector<int>& preds, const std::vector<int>& groups) {
  const std::size_t n = preds.size();
  if (groups.size() != n) throw ConfigError("dp_diff: length mismatch");
  if (n == 0) throw ConfigError("dp_diff: empty input");
  const int n_groups = *std::max_element(groups.begin(), groups.end()) + 1;
  std::vector<std::size_t> sel(n_groups, 0), cnt(n_groups, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++cnt[groups[i]];
    sel[groups[i]] += static_cast<std::size_t>(preds[i]);
  }
  double lo = 1.0, hi = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    if (cnt[g] == 0) throw MetricError("dp_diff: empty group " + std::to_string(g));
    const double rate = static_cast<double>(sel[g]) / static_cast<double>(cnt[g]);
    lo = std::min(lo, rate);
    hi = std::max(hi, rate);
  }
  return hi - lo;
}

/// One evaluation's subgroup summary. Field names line up with the JSON and
/// the CSV headers emitted by the reporting tools.
struct SubgroupReport {
  double overall_auc = 0.0;
  std::map<int, double> per_group_auc;    // only groups where AUC is defined
  double min_auc = 0.0;                   // over defined groups
  double gap_auc = 0.0;                   // max - min over defined groups
  std::optional<double> eoddsd;           // absent when a group rate is undefined
  double dpd = 0.0;
  std::set<int> undefined_groups;         // groups excluded from min/gap
};

enum class ReportMode {
  kStrict,  // any undefined per-group AUC or rate is an error
  kSearch,  // undefined groups are recorded and excluded
};

/// Per-group AUROC plus hard-prediction fairness metrics at `threshold`.
inline SubgroupReport subgroup_report(const std::vector<double>& scores,
                                      const std::vector<int>& labels,
                                      const std::vector<int>& groups,
                                      double threshold = 0.5,
                                      ReportMode mode = ReportMode::kSearch) {
  const std::size_t n = scores.size();
  if (labels.size() != n || groups.size() != n)
    throw ConfigError("subgroup_report: length mismatch");
  if (n < 2) throw ConfigError("subgroup_report: need at least 2 rows");
  const int n_groups = *std::max_element(groups.begin(), groups.end()) + 1;

  SubgroupReport rep;
  rep.overall_auc = auroc(scores, labels);  // throws if globally single-class

  for (int g = 0; g < n_groups; ++g) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i)
      if (groups[i] == g) {
        s.push_back(scores[i]);
        y.push_back(labels[i]);
      }
    if (s.empty()) {
      rep.undefined_groups.insert(g);
      continue;
    }
    try {
      rep.per_group_auc[g] = auroc(s, y);
    } catch (const MetricError&) {
      if (mode == ReportMode::kStrict) throw;
      rep.undefined_groups.insert(g);
    }
  }
  if (rep.per_group_auc.empty())
    throw MetricError("subgroup_report: no group has a defined AUC");
  double lo = 1.0, hi = 0.0;
  for (const auto& [g, a] : rep.per_group_auc) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  rep.min_auc = lo;
  rep.gap_auc = hi - lo;

  std::vector<int> preds(n);
  for (std::size_t i = 0; i < n; ++i) preds[i] = scores[i] >= threshold ? 1 : 0;
  try {
    rep.eoddsd = eodds_diff(preds, labels, groups);
  } catch (const MetricError&) {
    if (mode == ReportMode::kStrict) throw;
    rep.eoddsd = std::nullopt;
  }
  rep.dpd = dp_diff(preds, groups);
  return rep;
}

/// Search objectives, all oriented higher-is-better.
enum class ObjectiveKind {
  kMinGroupAuc,
  kOverallAuc,
  kNegGap,
  kNegEOddsD,
  kNegDpd,
};

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kMinGroupAuc: return "min_group_auc";
    case ObjectiveKind::kOverallAuc: return "overall_auc";
    case ObjectiveKind::kNegGap: return "neg_gap";
    case ObjectiveKind::kNegEOddsD: return "neg_eoddsd";
    case ObjectiveKind::kNegDpd: return "neg_dpd";
  }
  return "?";
}

inline ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "min_group_auc") return ObjectiveKind::kMinGroupAuc;
  if (s == "overall_auc") return ObjectiveKind::kOverallAuc;
  if (s == "neg_gap") return ObjectiveKind::kNegGap;
  if (s == "neg_eoddsd") return ObjectiveKind::kNegEOddsD;
  if (s == "neg_dpd") return ObjectiveKind::kNegDpd;
  throw ConfigError("unknown objective '" + s + "'");
}

inline double fair_objective(const SubgroupReport& rep, ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kMinGroupAuc: return rep.min_auc;
    case ObjectiveKind::kOverallAuc: return rep.overall_auc;
    case ObjectiveKind::kNegGap: return -rep.gap_auc;
    case ObjectiveKind::kNegEOddsD:
      if (!rep.eoddsd) throw MetricError("fair_objective: eoddsd undefined in report");
      return -*rep.eoddsd;
    case ObjectiveKind::kNegDpd: return -rep.dpd;
  }
  throw ConfigError("fair_objective: bad kind");
}

}  // namespace fairmask
