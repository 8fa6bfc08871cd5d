#include "pcrl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pcrl/common.hpp"

namespace pcrl {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool is_offline(Method m) { return m == Method::gold || m == Method::varmi || m == Method::reward_only; }

std::vector<double> exp_all(const std::vector<double>& lp) {
  std::vector<double> p(lp.size());
  std::transform(lp.begin(), lp.end(), p.begin(), [](double x) { return std::exp(x); });
  return p;
}

std::vector<double> flatten(const std::vector<std::vector<double>>& v) {
  std::vector<double> out;
  for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
  return out;
}

bool all_finite(const std::vector<double>& xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(double loss, const std::vector<double>& grad) {
  if (!std::isfinite(loss)) return false;
  for (double g : grad)
    if (!std::isfinite(g)) return false;
  return true;
}

[[noreturn]] void numeric_abort(const TrainHooks& hooks, const PolicyModel& model, std::size_t epoch,
                                std::size_t batch, const std::vector<std::size_t>& indices,
                                const std::vector<CandidateRecord>* records, const std::vector<TokenSeq>& utterances,
                                const BatchStep& step) {
  nlohmann::json dump;
  dump["epoch"] = epoch;
  dump["batch"] = batch;
  dump["loss"] = std::isfinite(step.result.loss) ? nlohmann::json(step.result.loss) : nlohmann::json("non-finite");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    nlohmann::json e;
    e["index"] = indices[i];
    e["utterance"] = model.vocab.decode(utterances[i]);
    if (records) e["reward"] = (*records)[indices[i]].reward;
    nlohmann::json lp = nlohmann::json::array();
    for (double x : step.logprobs[i]) lp.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    e["logprobs"] = lp;
    dump["examples"].push_back(e);
  }
  std::string where;
  if (!hooks.dump_dir.empty()) {
    std::filesystem::create_directories(hooks.dump_dir);
    const auto path = hooks.dump_dir / ("nan_batch_e" + std::to_string(epoch) + "_b" + std::to_string(batch) + ".json");
    std::ofstream(path) << dump.dump(2) << "\n";
    where = "; batch dumped to " + path.string();
  }
  throw NumericError("non-finite loss or gradient in epoch " + std::to_string(epoch) + ", batch " +
                     std::to_string(batch) + " (first record index " + std::to_string(indices.front()) + ")" + where);
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::mle: return "mle";
    case Method::gold: return "gold";
    case Method::varmi: return "varmi";
    case Method::reward_only: return "reward_only";
    case Method::online: return "online";
  }
  throw ContractError("bad method");
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::mle, Method::gold, Method::varmi, Method::reward_only, Method::online})
    if (method_name(m) == name) return m;
  throw ConfigError("unknown method '" + name + "' (expected mle, gold, varmi, reward_only or online)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be a positive number");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

std::vector<double> compute_weights(Method method, std::span<const double> probs, int reward, double alpha) {
  if (!is_offline(method)) throw ContractError("compute_weights: method must be gold, varmi or reward_only");
  if (reward != 1 && reward != -1) throw ContractError("compute_weights: reward must be +1 or -1");
  std::vector<double> w(probs.size());
  for (std::size_t t = 0; t < probs.size(); ++t) {
    const double p = probs[t];
    if (!(p > 0.0 && p <= 1.0)) throw NumericError("token probability " + std::to_string(p) + " outside (0, 1]");
    if (method == Method::reward_only || (method == Method::varmi && reward == 1))
      w[t] = 1.0;
    else
      w[t] = std::max(p, alpha);
  }
  return w;
}

std::vector<EncodedRecord> encode_records(const PolicyModel& model, const std::vector<CandidateRecord>& records) {
  std::vector<EncodedRecord> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i].state = encode_state(model, records[i].persona, records[i].context);
    out[i].utterance = encode_utterance(model.vocab, records[i].candidate);
    out[i].reward = records[i].reward;
  }
  return out;
}

double eval_nll(const PolicyModel& model, const std::vector<EncodedRecord>& records) {
  if (records.empty()) throw ContractError("eval_nll: empty record set");
  std::vector<double> nll(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    nll[i] = -sequence_score(model, records[i].state, records[i].utterance);
  });
  return std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(nll.size());
}

double eval_nll(const PolicyModel& model, const std::vector<CandidateRecord>& records) {
  return eval_nll(model, encode_records(model, records));
}

Moments moments(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("moments of an empty sample");
  Moments m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.variance = ss / static_cast<double>(xs.size());
  if (m.mean == 0.0) throw NumericError("coefficient of variation undefined: mean weight is 0");
  m.cov = std::sqrt(m.variance) / m.mean;
  return m;
}

namespace {

// Weights of every record under the current model, without updating it.
std::vector<std::vector<double>> all_weights(const PolicyModel& model, const std::vector<EncodedRecord>& recs,
                                             Method method, double alpha) {
  std::vector<std::vector<double>> w(recs.size());
  parallel_for(recs.size(), [&](std::size_t i) {
    const auto lp = token_logprobs(model, recs[i].state, recs[i].utterance);
    if (!all_finite(lp)) {
      // Reported by the training loop, which dumps the offending batch.
      w[i].assign(lp.size(), std::numeric_limits<double>::quiet_NaN());
      return;
    }
    w[i] = compute_weights(method, exp_all(lp), recs[i].reward, alpha);
  });
  return w;
}

std::vector<EncodedRecord> checked_heldout(const PolicyModel& model, const std::vector<CandidateRecord>& recs,
                                           const char* which) {
  if (recs.empty()) throw ContractError(std::string("held-out ") + which + " set is empty");
  return encode_records(model, recs);
}

}  // namespace

TrajectoryLog offline_train(PolicyModel& model, const std::vector<CandidateRecord>& records, const TrainConfig& cfg,
                            const std::vector<CandidateRecord>& heldout_pos,
                            const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks) {
  cfg.validate();
  if (!is_offline(cfg.method))
    throw ContractError("offline_train: method must be gold, varmi or reward_only, got " + method_name(cfg.method));
  if (records.empty()) throw ContractError("offline_train: no training records");
  for (const auto& r : records)
    if (r.reward != 1 && r.reward != -1) throw ContractError("offline_train: record reward must be +1 or -1");

  const auto t0 = Clock::now();
  const auto train = encode_records(model, records);
  const auto pos = checked_heldout(model, heldout_pos, "positive");
  const auto neg = checked_heldout(model, heldout_neg, "negative");
  const double discount = std::pow(cfg.gamma, 0.0);

  TrajectoryLog log;
  log.method = cfg.method;
  {
    const auto m = moments(flatten(all_weights(model, train, cfg.method, cfg.alpha)));
    log.rows.push_back({0, eval_nll(model, pos), eval_nll(model, neg), m.mean, m.cov, seconds_since(t0), 0.0});
    if (hooks.on_epoch) hooks.on_epoch(log.rows.back());
  }

  AdamState opt = make_adam(model, cfg.lr);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), cfg.seed, epoch);
    std::vector<double> epoch_weights;
    std::size_t batch = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size, ++batch) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<const TokenSeq*> s, u;
      for (std::size_t i : idx) {
        s.push_back(&train[i].state);
        u.push_back(&train[i].utterance);
      }
      std::vector<std::vector<double>> weights(idx.size());
      auto step = batch_grad(model, s, u, [&](std::size_t i, const std::vector<double>& lp) {
        const int reward = train[idx[i]].reward;
        if (!all_finite(lp)) {
          // Let the batch fail the finiteness check so it gets dumped.
          weights[i].assign(lp.size(), std::numeric_limits<double>::quiet_NaN());
          return weights[i];
        }
        weights[i] = compute_weights(cfg.method, exp_all(lp), reward, cfg.alpha);
        std::vector<double> c(lp.size());
        for (std::size_t t = 0; t < c.size(); ++t) c[t] = weights[i][t] * reward * discount;
        return c;
      });
      if (!all_finite(step.result.loss, step.result.grad)) {
        std::vector<TokenSeq> utts;
        for (std::size_t i : idx) utts.push_back(train[i].utterance);
        numeric_abort(hooks, model, epoch, batch, idx, &records, utts, step);
      }
      adam_step(model, opt, step.result.grad);
      for (const auto& w : weights) epoch_weights.insert(epoch_weights.end(), w.begin(), w.end());
    }
    const auto m = moments(epoch_weights);
    const double pn = eval_nll(model, pos), nn = eval_nll(model, neg);
    if (!std::isfinite(pn) || !std::isfinite(nn))
      throw NumericError("held-out NLL became non-finite after epoch " + std::to_string(epoch));
    log.rows.push_back({epoch, pn, nn, m.mean, m.cov, seconds_since(t0), 0.0});
    if (hooks.on_epoch) hooks.on_epoch(log.rows.back());
  }
  return log;
}

int critic_reward(const World& world, const std::string& reply, const PersonaSet& persona) {
  const auto triple = parse_utterance(world, reply);
  if (!triple) return 0;
  switch (entailment_oracle(world, *triple, persona)) {
    case Label::entail: return 1;
    case Label::contradict: return -1;
    case Label::neutral: return 0;
  }
  return 0;
}

namespace {

struct Sampled {
  std::vector<TokenSeq> replies;
  std::vector<int> rewards;
};

Sampled sample_and_score(const PolicyModel& model, const Critic& critic, const std::vector<Prompt>& prompts,
                         const std::vector<TokenSeq>& states, std::span<const std::size_t> idx, std::uint64_t seed,
                         std::size_t epoch) {
  Sampled out;
  out.replies.resize(idx.size());
  out.rewards.resize(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    DecodingConfig dc;
    dc.mode = DecodingConfig::Mode::temperature;
    dc.temperature = 1.0;
    dc.seed = derive_seed(derive_seed(seed, 9000 + epoch), idx[i]);
    out.replies[i] = sample_utterance(model, states[idx[i]], dc);
    out.rewards[i] = critic(model.vocab.decode(out.replies[i]), prompts[idx[i]].persona);
    if (out.rewards[i] < -1 || out.rewards[i] > 1) throw ContractError("critic reward must be -1, 0 or +1");
  });
  return out;
}

}  // namespace

TrajectoryLog online_train(PolicyModel& model, const World& world, const std::vector<Prompt>& prompts,
                           const TrainConfig& cfg, const std::vector<CandidateRecord>& heldout_pos,
                           const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks) {
  const Critic critic = [&world](const std::string& reply, const PersonaSet& persona) {
    return critic_reward(world, reply, persona);
  };
  return online_train(model, critic, prompts, cfg, heldout_pos, heldout_neg, hooks);
}

TrajectoryLog online_train(PolicyModel& model, const Critic& critic, const std::vector<Prompt>& prompts,
                           const TrainConfig& cfg, const std::vector<CandidateRecord>& heldout_pos,
                           const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.method != Method::online) throw ContractError("online_train: method must be online");
  if (prompts.empty()) throw ContractError("online_train: no prompts");

  const auto t0 = Clock::now();
  std::vector<TokenSeq> states;
  for (const auto& p : prompts) states.push_back(encode_state(model, p.persona, p.context));
  const auto pos = checked_heldout(model, heldout_pos, "positive");
  const auto neg = checked_heldout(model, heldout_neg, "negative");
  auto mean_of = [](const std::vector<int>& r) {
    return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
  };

  TrajectoryLog log;
  log.method = Method::online;
  {
    std::vector<std::size_t> all(prompts.size());
    std::iota(all.begin(), all.end(), 0);
    const auto s = sample_and_score(model, critic, prompts, states, all, cfg.seed, 0);
    log.rows.push_back({0, eval_nll(model, pos), eval_nll(model, neg), 1.0, 0.0, seconds_since(t0), mean_of(s.rewards)});
    if (hooks.on_epoch) hooks.on_epoch(log.rows.back());
  }

  AdamState opt = make_adam(model, cfg.lr);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(prompts.size(), cfg.seed, epoch);
    std::vector<int> rewards;
    std::size_t batch = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size, ++batch) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                         order.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto s = sample_and_score(model, critic, prompts, states, idx, cfg.seed, epoch);
      std::vector<const TokenSeq*> sp, up;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        sp.push_back(&states[idx[i]]);
        up.push_back(&s.replies[i]);
      }
      auto step = batch_grad(model, sp, up, [&](std::size_t i, const std::vector<double>& lp) {
        return std::vector<double>(lp.size(), static_cast<double>(s.rewards[i]));
      });
      if (!all_finite(step.result.loss, step.result.grad))
        numeric_abort(hooks, model, epoch, batch, idx, nullptr, s.replies, step);
      adam_step(model, opt, step.result.grad);
      rewards.insert(rewards.end(), s.rewards.begin(), s.rewards.end());
    }
    log.rows.push_back(
        {epoch, eval_nll(model, pos), eval_nll(model, neg), 1.0, 0.0, seconds_since(t0), mean_of(rewards)});
    if (hooks.on_epoch) hooks.on_epoch(log.rows.back());
  }
  return log;
}

WeightStats weight_stats(const PolicyModel& model, const std::vector<CandidateRecord>& records, Method method,
                         double alpha, std::size_t bootstrap_n, std::uint64_t seed) {
  if (!is_offline(method)) throw ConfigError("weight_stats: method must be gold, varmi or reward_only");
  if (records.empty()) throw ContractError("weight_stats: no records");
  if (bootstrap_n < 100) throw ConfigError("bootstrap_n must be at least 100");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");

  const auto w = all_weights(model, encode_records(model, records), method, alpha);
  WeightStats st;
  st.method = method;
  st.alpha = alpha;
  st.n_records = records.size();
  const auto flat = flatten(w);
  if (!all_finite(flat)) throw NumericError("weight_stats: model produced non-finite token probabilities");
  st.n_tokens = flat.size();
  const auto m = moments(flat);
  st.mean = m.mean;
  st.variance = m.variance;
  st.cov = m.cov;

  std::vector<double> covs(bootstrap_n);
  parallel_for(bootstrap_n, [&](std::size_t b) {
    Rng rng(derive_seed(seed, b));
    std::vector<double> sample;
    sample.reserve(flat.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const auto& x = w[rng.below(w.size())];
      sample.insert(sample.end(), x.begin(), x.end());
    }
    covs[b] = moments(sample).cov;
  });
  st.bootstrap_n = bootstrap_n;
  st.boot_cov_mean = std::accumulate(covs.begin(), covs.end(), 0.0) / static_cast<double>(bootstrap_n);
  std::sort(covs.begin(), covs.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(covs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, covs.size() - 1);
    return covs[lo] + (pos - static_cast<double>(lo)) * (covs[hi] - covs[lo]);
  };
  st.ci_low = quantile(0.025);
  st.ci_high = quantile(0.975);
  return st;
}

void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryLog& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,pos_nll,neg_nll,mean_weight,weight_cov,seconds\n";
  char buf[256];
  for (const auto& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%.12g,%.3f\n", r.epoch, r.pos_nll, r.neg_nll, r.mean_weight,
                  r.weight_cov, r.seconds);
    out << buf;
  }
}

TrajectoryLog read_trajectory_csv(const std::filesystem::path& path, Method method) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  TrajectoryLog log;
  log.method = method;
  std::string line;
  std::getline(in, line);
  if (line != "epoch,pos_nll,neg_nll,mean_weight,weight_cov,seconds")
    throw DataError(path.string() + ": unexpected trajectory header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TrajectoryRow r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf", &r.epoch, &r.pos_nll, &r.neg_nll, &r.mean_weight,
                    &r.weight_cov, &r.seconds) != 6)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed trajectory row");
    log.rows.push_back(r);
  }
  return log;
}

}  // namespace pcrl
