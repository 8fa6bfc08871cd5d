#include "pcrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pcrl/common.hpp"

namespace pcrl {

namespace {

// Fixed number of gradient accumulators per batch, so the reduction order
// does not depend on how many workers exist.
constexpr std::size_t kGradChunks = 8;

TokenSeq model_input(const TokenSeq& state, const TokenSeq& utterance) {
  TokenSeq in = state;
  in.insert(in.end(), utterance.begin(), utterance.end() - 1);
  return in;
}

void check_pair(const PolicyModel& model, const TokenSeq& state, const TokenSeq& utterance) {
  if (utterance.empty()) throw ContractError("empty utterance");
  if (state.empty()) throw ContractError("empty state");
  if (state.size() + utterance.size() - 1 > static_cast<std::size_t>(model.net.config().max_len))
    throw ContractError("state + utterance exceed the context window");
  const int V = static_cast<int>(model.vocab.size());
  for (int id : state)
    if (id < 0 || id >= V) throw ContractError("state token out of range");
  for (int id : utterance)
    if (id < 0 || id >= V) throw ContractError("utterance token out of range");
}

}  // namespace

PolicyModel PolicyModel::create(const World& world, std::uint64_t seed, bool zero_output) {
  Vocab vocab(world.vocab);
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(vocab.size());
  return create(std::move(vocab), cfg, seed, zero_output);
}

PolicyModel PolicyModel::create(Vocab vocab, ModelConfig cfg, std::uint64_t seed, bool zero_output) {
  cfg.vocab_size = static_cast<int>(vocab.size());
  if (cfg.max_len <= static_cast<int>(kMaxUtteranceTokens) + 1)
    throw ConfigError("max_len must exceed the reply budget");
  return PolicyModel{std::move(vocab), Transformer(cfg, seed, zero_output)};
}

std::size_t PolicyModel::max_state_tokens() const {
  return static_cast<std::size_t>(net.config().max_len) - kMaxUtteranceTokens;
}

TokenSeq encode_state(const Vocab& vocab, const PersonaSet& persona, const std::vector<Turn>& context,
                      std::size_t max_tokens) {
  if (persona.facts.empty()) throw ContractError("encode_state: persona is empty");
  TokenSeq persona_part;
  for (std::size_t i = 0; i < persona.facts.size(); ++i) {
    if (i) persona_part.push_back(vocab.persona_sep());
    const auto ids = vocab.encode(persona.facts[i].text);
    persona_part.insert(persona_part.end(), ids.begin(), ids.end());
  }
  std::vector<TokenSeq> turns;
  for (const auto& t : context) turns.push_back(vocab.encode(t.text));

  if (persona_part.size() + 1 > max_tokens) throw ContractError("persona alone exceeds the state budget");
  std::size_t used = persona_part.size() + 1;
  std::size_t keep_from = turns.size();
  while (keep_from > 0 && used + turns[keep_from - 1].size() + 1 <= max_tokens) {
    --keep_from;
    used += turns[keep_from].size() + 1;
  }

  TokenSeq out = std::move(persona_part);
  for (std::size_t i = keep_from; i < turns.size(); ++i) {
    out.push_back(vocab.turn_sep());
    out.insert(out.end(), turns[i].begin(), turns[i].end());
  }
  out.push_back(vocab.begin());
  return out;
}

TokenSeq encode_state(const PolicyModel& model, const PersonaSet& persona, const std::vector<Turn>& context) {
  return encode_state(model.vocab, persona, context, model.max_state_tokens());
}

TokenSeq encode_utterance(const Vocab& vocab, const std::string& text) {
  TokenSeq out = vocab.encode(text);
  if (out.size() + 1 > kMaxUtteranceTokens) throw ContractError("utterance longer than the reply budget");
  out.push_back(vocab.end());
  return out;
}

std::vector<double> token_logprobs(const PolicyModel& model, const TokenSeq& state, const TokenSeq& utterance) {
  check_pair(model, state, utterance);
  Transformer::Activations act;
  model.net.forward(model_input(state, utterance), state.size() - 1, act);
  std::vector<double> out(utterance.size());
  for (std::size_t t = 0; t < utterance.size(); ++t) out[t] = act.logp(static_cast<Eigen::Index>(t), utterance[t]);
  return out;
}

double sequence_score(const PolicyModel& model, const TokenSeq& state, const TokenSeq& utterance) {
  const auto lp = token_logprobs(model, state, utterance);
  return std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size());
}

std::vector<double> score_candidates(const PolicyModel& model, const TokenSeq& state,
                                     const std::vector<TokenSeq>& utterances) {
  for (const auto& u : utterances) check_pair(model, state, u);
  Transformer::Cache base;
  const Mat state_lp = model.net.extend(base, state);
  const auto last = state_lp.rows() - 1;
  std::vector<double> scores;
  scores.reserve(utterances.size());
  for (const auto& u : utterances) {
    double sum = state_lp(last, u[0]);
    if (u.size() > 1) {
      Transformer::Cache c = base;
      const Mat lp = model.net.extend(c, std::span<const int>(u.data(), u.size() - 1));
      for (std::size_t t = 1; t < u.size(); ++t) sum += lp(static_cast<Eigen::Index>(t - 1), u[t]);
    }
    scores.push_back(sum / static_cast<double>(u.size()));
  }
  return scores;
}

std::vector<double> next_token_probs(const PolicyModel& model, const TokenSeq& prefix) {
  if (prefix.empty()) throw ContractError("next_token_probs: empty prefix");
  Transformer::Cache c;
  const Mat lp = model.net.extend(c, prefix);
  std::vector<double> p(static_cast<std::size_t>(lp.cols()));
  for (Eigen::Index j = 0; j < lp.cols(); ++j) p[static_cast<std::size_t>(j)] = std::exp(lp(lp.rows() - 1, j));
  return p;
}

TokenSeq sample_utterance(const PolicyModel& model, const TokenSeq& state, const DecodingConfig& config) {
  if (config.temperature <= 0.0) throw ContractError("temperature must be positive");
  if (config.k < 1) throw ContractError("top-k needs k >= 1");
  Rng rng(derive_seed(config.seed, 17));
  Transformer::Cache cache;
  Mat lp = model.net.extend(cache, state);
  Eigen::RowVectorXd row = lp.row(lp.rows() - 1);
  const auto V = row.size();
  const auto max_len = static_cast<std::size_t>(model.net.config().max_len);

  TokenSeq out;
  while (out.size() < config.max_tokens) {
    int tok = 0;
    if (config.mode == DecodingConfig::Mode::greedy) {
      row.maxCoeff(&tok);
    } else {
      std::vector<int> support(static_cast<std::size_t>(V));
      std::iota(support.begin(), support.end(), 0);
      if (config.mode == DecodingConfig::Mode::top_k && config.k < support.size()) {
        std::stable_sort(support.begin(), support.end(), [&](int a, int b) { return row(a) > row(b); });
        support.resize(config.k);
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (int id : support) mx = std::max(mx, row(id));
      std::vector<double> w(support.size());
      double total = 0.0;
      for (std::size_t i = 0; i < support.size(); ++i) {
        w[i] = std::exp((row(support[i]) - mx) / config.temperature);
        total += w[i];
      }
      double u = rng.uniform() * total;
      tok = support.back();
      for (std::size_t i = 0; i < support.size(); ++i) {
        if (u < w[i]) {
          tok = support[i];
          break;
        }
        u -= w[i];
      }
    }
    out.push_back(tok);
    if (tok == model.vocab.end() || cache.len + 1 > max_len) break;
    lp = model.net.extend(cache, std::span<const int>(&out.back(), 1));
    row = lp.row(0);
  }
  return out;
}

BatchStep batch_grad(const PolicyModel& model, std::span<const TokenSeq* const> states,
                     std::span<const TokenSeq* const> utterances, const CoefficientFn& coefficients) {
  if (states.size() != utterances.size()) throw ContractError("states/utterances size mismatch");
  const std::size_t B = states.size();
  BatchStep step;
  step.result.grad.assign(model.net.num_params(), 0.0);
  step.logprobs.resize(B);
  step.coefficients.resize(B);
  if (B == 0) return step;
  for (std::size_t i = 0; i < B; ++i) check_pair(model, *states[i], *utterances[i]);

  const std::size_t chunks = std::min(kGradChunks, B);
  std::vector<std::vector<double, Eigen::aligned_allocator<double>>> grads(chunks);
  std::vector<double> losses(chunks, 0.0);
  const double inv_b = 1.0 / static_cast<double>(B);
  const auto V = static_cast<Eigen::Index>(model.vocab.size());

  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * B / chunks, hi = (c + 1) * B / chunks;
    auto& g = grads[c];
    g.assign(model.net.num_params(), 0.0);
    Transformer::Activations act;
    for (std::size_t i = lo; i < hi; ++i) {
      const TokenSeq& s = *states[i];
      const TokenSeq& u = *utterances[i];
      model.net.forward(model_input(s, u), s.size() - 1, act);
      std::vector<double> lp(u.size());
      for (std::size_t t = 0; t < u.size(); ++t) lp[t] = act.logp(static_cast<Eigen::Index>(t), u[t]);
      std::vector<double> coef = coefficients(i, lp);
      if (coef.size() != u.size())
        throw ContractError("coefficient count " + std::to_string(coef.size()) + " != utterance length " +
                            std::to_string(u.size()));
      bool any = false;
      Mat dlogits(static_cast<Eigen::Index>(u.size()), V);
      for (std::size_t t = 0; t < u.size(); ++t) {
        losses[c] -= coef[t] * lp[t] * inv_b;
        const auto r = static_cast<Eigen::Index>(t);
        dlogits.row(r) = act.logp.row(r).array().exp() * (coef[t] * inv_b);
        dlogits(r, u[t]) -= coef[t] * inv_b;
        any = any || coef[t] != 0.0;
      }
      if (any) model.net.backward(act, dlogits, g);
      step.logprobs[i] = std::move(lp);
      step.coefficients[i] = std::move(coef);
    }
  });

  for (std::size_t c = 0; c < chunks; ++c) {
    step.result.loss += losses[c];
    for (std::size_t j = 0; j < step.result.grad.size(); ++j) step.result.grad[j] += grads[c][j];
  }
  return step;
}

LossAndGrad weighted_nll_grad(const PolicyModel& model, std::span<const WeightedExample> batch) {
  std::vector<const TokenSeq*> s, u;
  for (const auto& ex : batch) {
    if (ex.coefficients.size() != ex.utterance.size())
      throw ContractError("coefficient list length must equal utterance length");
    s.push_back(&ex.state);
    u.push_back(&ex.utterance);
  }
  return batch_grad(model, s, u, [&](std::size_t i, const std::vector<double>&) { return batch[i].coefficients; })
      .result;
}

AdamState make_adam(const PolicyModel& model, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  AdamState s;
  s.lr = lr;
  s.m.assign(model.net.num_params(), 0.0);
  s.v.assign(model.net.num_params(), 0.0);
  return s;
}

void adam_step(PolicyModel& model, AdamState& opt, std::span<const double> grad) {
  auto params = model.net.params();
  if (grad.size() != params.size() || opt.m.size() != params.size() || opt.v.size() != params.size())
    throw ContractError("optimizer state does not match the parameter vector");
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grad[i];
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
    params[i] -= opt.lr * (opt.m[i] / c1) / (std::sqrt(opt.v[i] / c2) + opt.eps);
  }
}

std::vector<SupervisedExample> dialogue_examples(const PolicyModel& model, const std::vector<Dialogue>& dialogues) {
  std::vector<SupervisedExample> out;
  for (const auto& d : dialogues) {
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      const Turn& turn = d.turns[t];
      std::vector<Turn> ctx(d.turns.begin(), d.turns.begin() + static_cast<std::ptrdiff_t>(t));
      out.push_back({encode_state(model, d.persona_of(turn.speaker), ctx), encode_utterance(model.vocab, turn.text)});
    }
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 5000 + epoch));
  rng.shuffle(order);
  return order;
}

double mean_token_nll(const PolicyModel& model, const std::vector<SupervisedExample>& examples) {
  if (examples.empty()) throw ContractError("mean_token_nll: no examples");
  std::vector<double> sums(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    const auto lp = token_logprobs(model, examples[i].state, examples[i].utterance);
    sums[i] = -std::accumulate(lp.begin(), lp.end(), 0.0);
  });
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    total += sums[i];
    tokens += examples[i].utterance.size();
  }
  return total / static_cast<double>(tokens);
}

MleLog mle_train(PolicyModel& model, const std::vector<SupervisedExample>& examples, AdamState& opt,
                 const MleOptions& options) {
  if (examples.empty()) throw ContractError("mle_train: empty training set");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  MleLog log;
  log.epoch_nll.push_back(mean_token_nll(model, examples));
  const double initial = log.epoch_nll.front();
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);

  int strikes = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto order = epoch_order(examples.size(), options.seed, epoch);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += options.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + options.batch_size);
      std::vector<const TokenSeq*> s, u;
      for (std::size_t i = lo; i < hi; ++i) {
        s.push_back(&examples[order[i]].state);
        u.push_back(&examples[order[i]].utterance);
      }
      auto step = batch_grad(model, s, u, [](std::size_t, const std::vector<double>& lp) {
        return std::vector<double>(lp.size(), 1.0);
      });
      for (const auto& lp : step.logprobs) {
        nll -= std::accumulate(lp.begin(), lp.end(), 0.0);
        tokens += lp.size();
      }
      if (!std::isfinite(step.result.loss)) throw NumericError("non-finite MLE loss in epoch " + std::to_string(epoch));
      adam_step(model, opt, step.result.grad);
    }
    nll /= static_cast<double>(tokens);
    log.epoch_nll.push_back(nll);
    if (!std::isfinite(nll)) throw NumericError("non-finite MLE loss in epoch " + std::to_string(epoch));
    strikes = nll > 2.0 * initial ? strikes + 1 : 0;
    if (strikes >= 2) {
      std::ostringstream msg;
      msg << "MLE training diverged: epoch " << epoch << " NLL " << nll << " > 2x initial " << initial
          << " for 2 consecutive epochs";
      throw NumericError(msg.str());
    }
    if (options.checkpoint_dir)
      save_checkpoint(*options.checkpoint_dir / ("mle_epoch" + std::to_string(epoch) + ".ckpt"), model, opt);
    if (options.on_epoch) options.on_epoch(epoch, nll);
  }
  return log;
}

// Checkpoint container: magic, version, architecture, vocabulary, parameters,
// optimizer state, trailing FNV-1a checksum over everything before it.
namespace {

constexpr char kMagic[8] = {'P', 'C', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void doubles(const std::vector<double>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const auto n = pod<std::uint64_t>();
    if (n > (b_.size() - pos_) / sizeof(double)) throw LoadError("checkpoint truncated");
    std::vector<double> v(n);
    std::memcpy(v.data(), b_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw LoadError("checkpoint truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model, const AdamState& opt) {
  Writer w;
  w.bytes().append(kMagic, sizeof kMagic);
  w.pod(kCkptVersion);
  const ModelConfig& c = model.net.config();
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len}) w.pod(static_cast<std::int32_t>(v));
  w.pod(model.vocab.hash());
  w.pod(static_cast<std::uint32_t>(model.vocab.size()));
  for (const auto& t : model.vocab.tokens()) w.str(t);
  w.doubles(std::vector<double>(model.net.params().begin(), model.net.params().end()));
  for (double v : {opt.lr, opt.beta1, opt.beta2, opt.eps}) w.pod(v);
  w.pod(opt.step);
  w.doubles(opt.m);
  w.doubles(opt.v);
  w.pod(fnv1a(w.bytes()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw DataError("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < sizeof kMagic + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw LoadError(path.string() + ": not a checkpoint");
  const std::string_view body(bytes.data(), bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (fnv1a(body) != stored) throw LoadError(path.string() + ": checksum mismatch (corrupted checkpoint)");

  Reader r(body.substr(sizeof kMagic));
  const auto version = r.pod<std::uint32_t>();
  if (version != kCkptVersion) throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  cfg.vocab_size = r.pod<std::int32_t>();
  cfg.d_model = r.pod<std::int32_t>();
  cfg.n_layers = r.pod<std::int32_t>();
  cfg.n_heads = r.pod<std::int32_t>();
  cfg.d_ff = r.pod<std::int32_t>();
  cfg.max_len = r.pod<std::int32_t>();
  const auto vocab_hash = r.pod<std::uint64_t>();
  const auto n_tokens = r.pod<std::uint32_t>();
  std::vector<std::string> tokens;
  for (std::uint32_t i = 0; i < n_tokens; ++i) tokens.push_back(r.str());
  Vocab vocab = Vocab::from_tokens(tokens);
  if (vocab.hash() != vocab_hash || static_cast<int>(vocab.size()) != cfg.vocab_size)
    throw LoadError(path.string() + ": vocabulary does not match its hash");

  Checkpoint ck{PolicyModel::create(std::move(vocab), cfg, 0), AdamState{}};
  const auto params = r.doubles();
  if (params.size() != ck.model.net.num_params())
    throw LoadError(path.string() + ": parameter count " + std::to_string(params.size()) + " does not match architecture");
  std::copy(params.begin(), params.end(), ck.model.net.params().begin());
  ck.opt.lr = r.pod<double>();
  ck.opt.beta1 = r.pod<double>();
  ck.opt.beta2 = r.pod<double>();
  ck.opt.eps = r.pod<double>();
  ck.opt.step = r.pod<std::uint64_t>();
  ck.opt.m = r.doubles();
  ck.opt.v = r.doubles();
  if ((!ck.opt.m.empty() && ck.opt.m.size() != params.size()) || ck.opt.v.size() != ck.opt.m.size())
    throw LoadError(path.string() + ": optimizer state shape mismatch");
  if (!r.done()) throw LoadError(path.string() + ": trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocab& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.model.vocab.size() != expected.size())
    throw LoadError(path.string() + ": shape mismatch: checkpoint vocab size " + std::to_string(ck.model.vocab.size()) +
                    ", expected " + std::to_string(expected.size()));
  if (ck.model.vocab.hash() != expected.hash())
    throw LoadError(path.string() + ": vocab hash " + hex64(ck.model.vocab.hash()) + " does not match expected " +
                    hex64(expected.hash()));
  return ck;
}

void load_checkpoint_into(const std::filesystem::path& path, PolicyModel& model, AdamState& opt) {
  Checkpoint ck = load_checkpoint(path, model.vocab);
  model = std::move(ck.model);
  opt = std::move(ck.opt);
}

}  // namespace pcrl
