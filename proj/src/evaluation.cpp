#include "pcrl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pcrl/common.hpp"

namespace pcrl {

using nlohmann::json;

ItemScorer model_scorer(const PolicyModel& model) {
  return [&model](const EvalItem& item) {
    const TokenSeq state = encode_state(model, item.persona, item.context);
    std::vector<TokenSeq> utts;
    utts.reserve(item.candidates.size());
    for (const auto& c : item.candidates) utts.push_back(encode_utterance(model.vocab, c.text));
    return score_candidates(model, state, utts);
  };
}

RankedItem rank_scores(std::size_t item_index, const EvalItem& item, std::vector<double> scores) {
  if (item.candidates.empty()) throw ContractError("evaluation item " + std::to_string(item_index) + " has no candidates");
  if (scores.size() != item.candidates.size()) throw ContractError("one score per candidate is required");
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("NaN candidate score in item " + std::to_string(item_index));
  RankedItem r;
  r.item_index = item_index;
  r.order.resize(scores.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  r.scores = std::move(scores);
  r.top1 = item.candidates[r.order.front()].category;
  return r;
}

std::vector<RankedItem> rank_items(const std::vector<EvalItem>& items, const ItemScorer& scorer) {
  std::vector<RankedItem> out(items.size());
  parallel_for(items.size(), [&](std::size_t i) { out[i] = rank_scores(i, items[i], scorer(items[i])); });
  return out;
}

std::vector<RankedItem> rank_items(const PolicyModel& model, const std::vector<EvalItem>& items) {
  return rank_items(items, model_scorer(model));
}

MetricsReport compute_metrics(const std::vector<RankedItem>& ranked, const std::string& model_tag) {
  if (ranked.empty()) throw ContractError("compute_metrics: no ranked items");
  MetricsReport m;
  m.model_tag = model_tag;
  m.n_items = ranked.size();
  for (const auto& r : ranked) {
    switch (r.top1) {
      case Category::gold: ++m.n_hits; break;
      case Category::entail: ++m.n_entail; break;
      case Category::contradict: ++m.n_contradict; break;
      case Category::neutral: ++m.n_rand; break;
    }
  }
  const double n = static_cast<double>(m.n_items);
  auto pct = [&](std::size_t k, double& value, double& se) {
    const double p = static_cast<double>(k) / n;
    value = 100.0 * p;
    se = 100.0 * std::sqrt(p * (1.0 - p) / n);
  };
  pct(m.n_hits, m.hits, m.hits_stderr);
  pct(m.n_entail, m.entail, m.entail_stderr);
  pct(m.n_rand, m.rand, m.rand_stderr);
  pct(m.n_contradict, m.contradict, m.contradict_stderr);
  return m;
}

SignificanceResult z_test(double p1, std::size_t n1, double p2, std::size_t n2) {
  if (n1 == 0 || n2 == 0) throw ContractError("z_test: sample sizes must be positive");
  if (!(p1 >= 0.0 && p1 <= 1.0) || !(p2 >= 0.0 && p2 <= 1.0))
    throw ContractError("z_test: proportions must lie in [0, 1]");
  SignificanceResult r;
  const double a = static_cast<double>(n1), b = static_cast<double>(n2);
  const double pooled = (p1 * a + p2 * b) / (a + b);
  const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / a + 1.0 / b));
  if (!(se > 0.0)) {
    // A pooled proportion of 0 or 1 forces p1 == p2.
    r.degenerate = true;
    return r;
  }
  r.z = (p1 - p2) / se;
  r.p = std::erfc(std::fabs(r.z) / std::sqrt(2.0));
  return r;
}

std::vector<MetricComparison> compare_metrics(const MetricsReport& base, const MetricsReport& other) {
  std::vector<MetricComparison> out;
  auto add = [&](const char* name, std::size_t kb, std::size_t ko) {
    MetricComparison c;
    c.metric = name;
    c.base = 100.0 * static_cast<double>(kb) / static_cast<double>(base.n_items);
    c.other = 100.0 * static_cast<double>(ko) / static_cast<double>(other.n_items);
    c.test = z_test(c.other / 100.0, other.n_items, c.base / 100.0, base.n_items);
    c.test.label_a = other.model_tag;
    c.test.label_b = base.model_tag;
    out.push_back(c);
  };
  add("hits", base.n_hits, other.n_hits);
  add("entail", base.n_entail, other.n_entail);
  add("rand", base.n_rand, other.n_rand);
  add("contradict", base.n_contradict, other.n_contradict);
  return out;
}

void check_partition(const MetricsReport& m) {
  const double sum = m.partition_sum();
  if (std::fabs(sum - 100.0) > 0.2) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "metrics for '%s' sum to %.4f, not 100 +- 0.2", m.model_tag.c_str(), sum);
    throw ContractError(buf);
  }
}

namespace {

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

json weight_json(const WeightStats& w) {
  return {{"method", method_name(w.method)}, {"alpha", w.alpha},         {"n_records", w.n_records},
          {"n_tokens", w.n_tokens},          {"mean", w.mean},           {"variance", w.variance},
          {"cov", w.cov},                    {"bootstrap_n", w.bootstrap_n}, {"boot_cov_mean", w.boot_cov_mean},
          {"ci_low", w.ci_low},              {"ci_high", w.ci_high}};
}

WeightStats weight_from(const json& j) {
  WeightStats w;
  w.method = parse_method(j.at("method").get<std::string>());
  w.alpha = j.at("alpha").get<double>();
  w.n_records = j.at("n_records").get<std::size_t>();
  w.n_tokens = j.at("n_tokens").get<std::size_t>();
  w.mean = j.at("mean").get<double>();
  w.variance = j.at("variance").get<double>();
  w.cov = j.at("cov").get<double>();
  w.bootstrap_n = j.at("bootstrap_n").get<std::size_t>();
  w.boot_cov_mean = j.at("boot_cov_mean").get<double>();
  w.ci_low = j.at("ci_low").get<double>();
  w.ci_high = j.at("ci_high").get<double>();
  return w;
}

json metrics_json(const MetricsReport& m) {
  return {{"model_tag", m.model_tag},
          {"n_items", m.n_items},
          {"hits", m.hits},
          {"entail", m.entail},
          {"rand", m.rand},
          {"contradict", m.contradict},
          {"hits_stderr", m.hits_stderr},
          {"entail_stderr", m.entail_stderr},
          {"rand_stderr", m.rand_stderr},
          {"contradict_stderr", m.contradict_stderr},
          {"counts", {{"hits", m.n_hits}, {"entail", m.n_entail}, {"rand", m.n_rand}, {"contradict", m.n_contradict}}}};
}

MetricsReport metrics_from(const json& j) {
  MetricsReport m;
  m.model_tag = j.at("model_tag").get<std::string>();
  m.n_items = j.at("n_items").get<std::size_t>();
  m.hits = j.at("hits").get<double>();
  m.entail = j.at("entail").get<double>();
  m.rand = j.at("rand").get<double>();
  m.contradict = j.at("contradict").get<double>();
  m.hits_stderr = j.at("hits_stderr").get<double>();
  m.entail_stderr = j.at("entail_stderr").get<double>();
  m.rand_stderr = j.at("rand_stderr").get<double>();
  m.contradict_stderr = j.at("contradict_stderr").get<double>();
  const json& c = j.at("counts");
  m.n_hits = c.at("hits").get<std::size_t>();
  m.n_entail = c.at("entail").get<std::size_t>();
  m.n_rand = c.at("rand").get<std::size_t>();
  m.n_contradict = c.at("contradict").get<std::size_t>();
  return m;
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string format_weight_table(const std::vector<WeightStats>& stats) {
  std::string out = fmt("%-12s %6s %8s %8s %10s %10s %10s %21s\n", "method", "alpha", "records", "tokens", "mean",
                        "CoV", "boot CoV", "95% CI");
  for (const auto& w : stats)
    out += fmt("%-12s %6.3f %8zu %8zu %10.4f %10.4f %10.4f   [%8.4f, %8.4f]\n", method_name(w.method).c_str(), w.alpha,
               w.n_records, w.n_tokens, w.mean, w.cov, w.boot_cov_mean, w.ci_low, w.ci_high);
  return out;
}

std::string format_report(const Report& r) {
  check_partition(r.metrics);
  const MetricsReport& m = r.metrics;
  std::string out = fmt("model: %s   items: %zu\n\n", m.model_tag.c_str(), m.n_items);
  out += fmt("%-16s %9s %9s %9s %13s\n", "", "Hits@1", "Entail@1", "Rand@1", "Contradict@1");
  out += fmt("%-16s %9.2f %9.2f %9.2f %13.2f\n", m.model_tag.c_str(), m.hits, m.entail, m.rand, m.contradict);
  out += fmt("%-16s %9.2f %9.2f %9.2f %13.2f\n", "  std. error", m.hits_stderr, m.entail_stderr, m.rand_stderr,
             m.contradict_stderr);

  out += "\nHeld-out NLL trajectory\n";
  if (!r.trajectory || r.trajectory->rows.empty()) {
    out += "  absent (no RL phase for this model)\n";
  } else {
    out += fmt("  method: %s\n", method_name(r.trajectory->method).c_str());
    out += fmt("  %5s %10s %10s %12s %10s %12s %9s\n", "epoch", "pos_nll", "neg_nll", "mean_weight", "weight_cov",
               "mean_reward", "seconds");
    for (const auto& row : r.trajectory->rows)
      out += fmt("  %5zu %10.4f %10.4f %12.4f %10.4f %12.4f %9.1f\n", row.epoch, row.pos_nll, row.neg_nll,
                 row.mean_weight, row.weight_cov, row.mean_reward, row.seconds);
  }

  out += "\nImportance-weight variance\n";
  if (r.weights.empty())
    out += "  absent\n";
  else
    out += format_weight_table(r.weights);
  return out;
}

std::string format_comparison(const MetricsReport& base, const std::vector<MetricsReport>& others) {
  check_partition(base);
  std::string out = fmt("%-16s %9s %9s %9s %13s\n", "model", "Hits@1", "Entail@1", "Rand@1", "Contradict@1");
  out += fmt("%-16s %9.2f %9.2f %9.2f %13.2f\n", base.model_tag.c_str(), base.hits, base.entail, base.rand,
             base.contradict);
  for (const auto& o : others) {
    check_partition(o);
    const auto cmp = compare_metrics(base, o);
    auto cell = [](const MetricComparison& c) { return fmt("%.2f%s", c.other, c.test.p < 0.05 ? "*" : ""); };
    out += fmt("%-16s %9s %9s %9s %13s\n", o.model_tag.c_str(), cell(cmp[0]).c_str(), cell(cmp[1]).c_str(),
               cell(cmp[2]).c_str(), cell(cmp[3]).c_str());
  }
  out += fmt("\n* significantly different from %s (two-sided two-sample z-test, p < 0.05)\n", base.model_tag.c_str());
  for (const auto& o : others) {
    for (const auto& c : compare_metrics(base, o))
      out += fmt("  %-12s vs %-12s %-10s z = %8.3f  p = %.3g%s\n", o.model_tag.c_str(), base.model_tag.c_str(),
                 c.metric.c_str(), c.test.z, c.test.p, c.test.degenerate ? "  (degenerate)" : "");
  }
  return out;
}

std::string metrics_to_json(const MetricsReport& m) { return metrics_json(m).dump(2) + "\n"; }

MetricsReport metrics_from_json(const std::string& text) {
  try {
    return metrics_from(parse_json(text, "metrics"));
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics: ") + e.what());
  }
}

std::string report_to_json(const Report& r) {
  json j;
  j["metrics"] = metrics_json(r.metrics);
  if (r.trajectory) {
    json t;
    t["method"] = method_name(r.trajectory->method);
    t["rows"] = json::array();
    for (const auto& row : r.trajectory->rows)
      t["rows"].push_back({{"epoch", row.epoch},
                           {"pos_nll", row.pos_nll},
                           {"neg_nll", row.neg_nll},
                           {"mean_weight", row.mean_weight},
                           {"weight_cov", row.weight_cov},
                           {"seconds", row.seconds},
                           {"mean_reward", row.mean_reward}});
    j["trajectory"] = t;
  } else {
    j["trajectory"] = nullptr;
  }
  j["weights"] = json::array();
  for (const auto& w : r.weights) j["weights"].push_back(weight_json(w));
  return j.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
  const json j = parse_json(text, "report");
  try {
    Report r;
    r.metrics = metrics_from(j.at("metrics"));
    if (!j.at("trajectory").is_null()) {
      TrajectoryLog log;
      log.method = parse_method(j["trajectory"].at("method").get<std::string>());
      for (const auto& row : j["trajectory"].at("rows"))
        log.rows.push_back({row.at("epoch").get<std::size_t>(), row.at("pos_nll").get<double>(),
                            row.at("neg_nll").get<double>(), row.at("mean_weight").get<double>(),
                            row.at("weight_cov").get<double>(), row.at("seconds").get<double>(),
                            row.at("mean_reward").get<double>()});
      r.trajectory = log;
    }
    for (const auto& w : j.at("weights")) r.weights.push_back(weight_from(w));
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
}

void write_report(const std::filesystem::path& dir, const Report& r) {
  const std::string text = format_report(r);  // enforces the partition check first
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    out << body;
  };
  write("metrics.json", metrics_to_json(r.metrics));
  write("report.json", report_to_json(r));
  write("report.txt", text);
}

MetricsReport load_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return metrics_from_json(ss.str());
}

}  // namespace pcrl
