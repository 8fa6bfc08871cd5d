#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pcrl/corpus.hpp"
#include "pcrl/policy.hpp"
#include "pcrl/training.hpp"

namespace pcrl {

struct RankedItem {
  std::size_t item_index = 0;
  /// Candidate indices, best first. Equal scores keep their input order.
  std::vector<std::size_t> order;
  std::vector<double> scores;
  Category top1 = Category::neutral;
};

/// One score per candidate of an item, higher is better.
using ItemScorer = std::function<std::vector<double>(const EvalItem&)>;

/// Mean per-token log-probability of each candidate under the item's state.
ItemScorer model_scorer(const PolicyModel& model);

RankedItem rank_scores(std::size_t item_index, const EvalItem& item, std::vector<double> scores);
std::vector<RankedItem> rank_items(const std::vector<EvalItem>& items, const ItemScorer& scorer);
std::vector<RankedItem> rank_items(const PolicyModel& model, const std::vector<EvalItem>& items);

struct MetricsReport {
  std::string model_tag;
  std::size_t n_items = 0;
  std::size_t n_hits = 0, n_entail = 0, n_rand = 0, n_contradict = 0;
  /// Percentages.
  double hits = 0.0, entail = 0.0, rand = 0.0, contradict = 0.0;
  double hits_stderr = 0.0, entail_stderr = 0.0, rand_stderr = 0.0, contradict_stderr = 0.0;

  bool operator==(const MetricsReport&) const = default;
  double partition_sum() const { return hits + entail + rand + contradict; }
};

/// A gold top counts only under Hits@1; entail tops under Entail@1.
MetricsReport compute_metrics(const std::vector<RankedItem>& ranked, const std::string& model_tag);

struct SignificanceResult {
  std::string label_a, label_b;
  double z = 0.0;
  double p = 1.0;
  /// Pooled proportion was 0 or 1; z = 0 and p = 1 are returned.
  bool degenerate = false;

  bool operator==(const SignificanceResult&) const = default;
};

/// Pooled two-proportion z-test, two-sided.
SignificanceResult z_test(double p1, std::size_t n1, double p2, std::size_t n2);

struct MetricComparison {
  std::string metric;
  double base = 0.0, other = 0.0;
  SignificanceResult test;
};

/// z-tests of `other` against `base` for the four metrics, in table order.
std::vector<MetricComparison> compare_metrics(const MetricsReport& base, const MetricsReport& other);

struct Report {
  MetricsReport metrics;
  std::optional<TrajectoryLog> trajectory;
  std::vector<WeightStats> weights;

  bool operator==(const Report&) const = default;
};

/// Throws ContractError when the four metrics do not sum to 100 +- 0.2.
void check_partition(const MetricsReport& m);

std::string format_report(const Report& r);
std::string format_comparison(const MetricsReport& base, const std::vector<MetricsReport>& others);
std::string format_weight_table(const std::vector<WeightStats>& stats);

std::string metrics_to_json(const MetricsReport& m);
MetricsReport metrics_from_json(const std::string& text);
std::string report_to_json(const Report& r);
Report report_from_json(const std::string& text);

/// Writes metrics.json, report.json and report.txt into dir.
void write_report(const std::filesystem::path& dir, const Report& r);
MetricsReport load_metrics(const std::filesystem::path& path);

}  // namespace pcrl
