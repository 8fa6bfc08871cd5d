#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcrl/corpus.hpp"
#include "pcrl/policy.hpp"

namespace pcrl {

enum class Method { mle, gold, varmi, reward_only, online };

std::string method_name(Method m);
/// Throws ConfigError for unknown names.
Method parse_method(const std::string& name);

struct TrainConfig {
  Method method = Method::varmi;
  double lr = 1e-4;
  double alpha = 0.05;
  double gamma = 1.0;
  std::size_t epochs = 4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a field is outside its domain.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Per-token importance weights for one candidate.
///   gold:        max(p_t, alpha)
///   varmi:       1 for reward +1, else max(p_t, alpha)
///   reward_only: 1
/// Throws NumericError when a probability is not in (0, 1].
std::vector<double> compute_weights(Method method, std::span<const double> probs, int reward, double alpha);

/// Token sequences of a record, ready for the policy.
struct EncodedRecord {
  TokenSeq state;
  TokenSeq utterance;
  int reward = 0;
};

std::vector<EncodedRecord> encode_records(const PolicyModel& model, const std::vector<CandidateRecord>& records);

struct TrajectoryRow {
  std::size_t epoch = 0;
  double pos_nll = 0.0;
  double neg_nll = 0.0;
  double mean_weight = 0.0;
  double weight_cov = 0.0;
  double seconds = 0.0;
  /// Online runs only: mean critic reward of the sampled replies.
  double mean_reward = 0.0;

  bool operator==(const TrajectoryRow&) const = default;
};

struct TrajectoryLog {
  Method method = Method::varmi;
  std::vector<TrajectoryRow> rows;

  bool operator==(const TrajectoryLog&) const = default;
};

struct TrainHooks {
  std::function<void(const TrajectoryRow&)> on_epoch;
  /// Where a failing batch is written before NumericError is thrown.
  std::filesystem::path dump_dir;
};

/// Mean over records of the per-token NLL of the candidate.
double eval_nll(const PolicyModel& model, const std::vector<CandidateRecord>& records);
double eval_nll(const PolicyModel& model, const std::vector<EncodedRecord>& records);

/// Offline policy-gradient fine-tuning with c_t = w_t * reward * gamma^0.
/// Row 0 of the log is measured before any update.
TrajectoryLog offline_train(PolicyModel& model, const std::vector<CandidateRecord>& records, const TrainConfig& cfg,
                            const std::vector<CandidateRecord>& heldout_pos,
                            const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks = {});

/// Reward for a reply: +1 entail, -1 contradict, 0 neutral or unparseable.
int critic_reward(const World& world, const std::string& reply, const PersonaSet& persona);

struct Prompt {
  PersonaSet persona;
  std::vector<Turn> context;
};

/// Scores a decoded reply against the speaker persona.
using Critic = std::function<int(const std::string& reply, const PersonaSet& persona)>;

/// On-policy REINFORCE: sample a reply per prompt, score it with the critic,
/// and step with c_t = reward. The default critic is critic_reward.
TrajectoryLog online_train(PolicyModel& model, const World& world, const std::vector<Prompt>& prompts,
                           const TrainConfig& cfg, const std::vector<CandidateRecord>& heldout_pos,
                           const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks = {});
TrajectoryLog online_train(PolicyModel& model, const Critic& critic, const std::vector<Prompt>& prompts,
                           const TrainConfig& cfg, const std::vector<CandidateRecord>& heldout_pos,
                           const std::vector<CandidateRecord>& heldout_neg, const TrainHooks& hooks = {});

struct WeightStats {
  Method method = Method::gold;
  double alpha = 0.0;
  std::size_t n_records = 0;
  std::size_t n_tokens = 0;
  double mean = 0.0;
  double variance = 0.0;
  double cov = 0.0;
  std::size_t bootstrap_n = 0;
  double boot_cov_mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;

  bool operator==(const WeightStats&) const = default;
};

/// Dispersion of the flattened per-token weights; the bootstrap resamples
/// whole records.
WeightStats weight_stats(const PolicyModel& model, const std::vector<CandidateRecord>& records, Method method,
                         double alpha, std::size_t bootstrap_n, std::uint64_t seed);

/// Population mean, variance and CoV of a flat sample.
struct Moments {
  double mean = 0.0;
  double variance = 0.0;
  double cov = 0.0;
};
Moments moments(std::span<const double> xs);

void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryLog& log);
TrajectoryLog read_trajectory_csv(const std::filesystem::path& path, Method method);

}  // namespace pcrl
