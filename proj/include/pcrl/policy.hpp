#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcrl/corpus.hpp"
#include "pcrl/transformer.hpp"
#include "pcrl/vocab.hpp"

namespace pcrl {

/// Conditional token model pi(utterance | persona, context).
struct PolicyModel {
  Vocab vocab;
  Transformer net;

  /// Reference architecture over the vocabulary of `world`.
  static PolicyModel create(const World& world, std::uint64_t seed, bool zero_output = false);
  static PolicyModel create(Vocab vocab, ModelConfig cfg, std::uint64_t seed, bool zero_output = false);

  /// Largest state we build; the rest of the window is reserved for the reply.
  std::size_t max_state_tokens() const;

  bool operator==(const PolicyModel&) const = default;
};

inline constexpr std::size_t kMaxUtteranceTokens = 32;

/// persona facts joined by <psep>, each context turn introduced by <tsep>,
/// then <bos>. Oldest turns are dropped to fit max_tokens; the persona never is.
TokenSeq encode_state(const Vocab& vocab, const PersonaSet& persona, const std::vector<Turn>& context,
                      std::size_t max_tokens);
TokenSeq encode_state(const PolicyModel& model, const PersonaSet& persona, const std::vector<Turn>& context);

/// Utterance tokens followed by <eos>.
TokenSeq encode_utterance(const Vocab& vocab, const std::string& text);

/// log pi(a_t | state, a_<t) for every utterance token, teacher-forced.
std::vector<double> token_logprobs(const PolicyModel& model, const TokenSeq& state, const TokenSeq& utterance);

/// Mean per-token log-probability.
double sequence_score(const PolicyModel& model, const TokenSeq& state, const TokenSeq& utterance);

/// sequence_score for several utterances sharing one state (state encoded once).
std::vector<double> score_candidates(const PolicyModel& model, const TokenSeq& state,
                                     const std::vector<TokenSeq>& utterances);

/// Next-token distribution after `prefix` (probabilities, sums to 1).
std::vector<double> next_token_probs(const PolicyModel& model, const TokenSeq& prefix);

struct DecodingConfig {
  enum class Mode { greedy, temperature, top_k };
  Mode mode = Mode::greedy;
  double temperature = 1.0;
  std::size_t k = 1;
  std::size_t max_tokens = kMaxUtteranceTokens;
  std::uint64_t seed = 0;
};

/// Autoregressive draw. The result ends with <eos> unless max_tokens was hit.
TokenSeq sample_utterance(const PolicyModel& model, const TokenSeq& state, const DecodingConfig& config);

struct WeightedExample {
  TokenSeq state;
  TokenSeq utterance;
  /// One constant per utterance token.
  std::vector<double> coefficients;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// loss = -(1/B) sum_b sum_t c_t log pi(a_t|s_t) and its exact gradient.
LossAndGrad weighted_nll_grad(const PolicyModel& model, std::span<const WeightedExample> batch);

/// Coefficients chosen from the current token log-probabilities of example i.
/// The values are treated as constants in the gradient.
using CoefficientFn = std::function<std::vector<double>(std::size_t index, const std::vector<double>& logprobs)>;

struct BatchStep {
  LossAndGrad result;
  std::vector<std::vector<double>> logprobs;
  std::vector<std::vector<double>> coefficients;
};

/// Shared engine behind weighted_nll_grad: one forward pass per example, then
/// coefficients, then the backward pass.
BatchStep batch_grad(const PolicyModel& model, std::span<const TokenSeq* const> states,
                     std::span<const TokenSeq* const> utterances, const CoefficientFn& coefficients);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  bool operator==(const AdamState&) const = default;
};

AdamState make_adam(const PolicyModel& model, double lr);
void adam_step(PolicyModel& model, AdamState& opt, std::span<const double> grad);

struct SupervisedExample {
  TokenSeq state;
  TokenSeq utterance;
};

/// Every turn of every dialogue, conditioned on its speaker's persona.
std::vector<SupervisedExample> dialogue_examples(const PolicyModel& model, const std::vector<Dialogue>& dialogues);

struct MleOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(std::size_t epoch, double nll)> on_epoch;
};

/// Per-token training NLL: entry 0 before training, then one per epoch.
struct MleLog {
  std::vector<double> epoch_nll;
};

MleLog mle_train(PolicyModel& model, const std::vector<SupervisedExample>& examples, AdamState& opt,
                 const MleOptions& options);

/// Mean per-token NLL over examples.
double mean_token_nll(const PolicyModel& model, const std::vector<SupervisedExample>& examples);

/// Epoch order used by every trainer: a seeded Fisher-Yates permutation.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model, const AdamState& opt);

struct Checkpoint {
  PolicyModel model;
  AdamState opt;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also rejects a checkpoint built for another vocabulary.
Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocab& expected);
/// Leaves model and opt untouched when loading fails.
void load_checkpoint_into(const std::filesystem::path& path, PolicyModel& model, AdamState& opt);

}  // namespace pcrl
