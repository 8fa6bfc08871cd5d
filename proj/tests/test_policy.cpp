#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "pcrl/common.hpp"
#include "pcrl/corpus.hpp"
#include "pcrl/policy.hpp"
#include "test_util.hpp"

using namespace pcrl;
using pcrl::testing::small_model;

namespace {

const World& world() {
  static const World w = build_world(7, 200, 12);
  return w;
}

struct Fixture {
  std::vector<TokenSeq> states, utts;
};

Fixture sample_examples(const PolicyModel& m, std::size_t n, std::uint64_t seed) {
  const auto records = build_training_records(world(), 20, 6, seed, n);
  Fixture f;
  for (std::size_t i = 0; i < n; ++i) {
    // Keep the context short so the small test models fit it.
    f.states.push_back(encode_state(m.vocab, records[i].persona, {}, m.max_state_tokens()));
    f.utts.push_back(encode_utterance(m.vocab, records[i].candidate));
  }
  return f;
}

std::vector<WeightedExample> weighted(const Fixture& f, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<WeightedExample> out;
  for (std::size_t i = 0; i < f.states.size(); ++i) {
    WeightedExample ex{f.states[i], f.utts[i], {}};
    for (std::size_t t = 0; t < f.utts[i].size(); ++t) ex.coefficients.push_back(rng.uniform() * 2.0 - 0.7);
    out.push_back(std::move(ex));
  }
  return out;
}

// Loss evaluated only through the forward pass.
double reference_loss(const PolicyModel& m, const std::vector<WeightedExample>& batch) {
  double total = 0.0;
  for (const auto& ex : batch) {
    const auto lp = token_logprobs(m, ex.state, ex.utterance);
    for (std::size_t t = 0; t < lp.size(); ++t) total -= ex.coefficients[t] * lp[t];
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TEST(Model, ZeroOutputHeadIsUniform) {
  const PolicyModel m = PolicyModel::create(world(), 3, /*zero_output=*/true);
  const auto f = sample_examples(m, 2, 1);
  const double expect = -std::log(static_cast<double>(m.vocab.size()));
  for (std::size_t i = 0; i < 2; ++i)
    for (double lp : token_logprobs(m, f.states[i], f.utts[i])) EXPECT_NEAR(lp, expect, 1e-12);
}

TEST(Model, ReferenceArchitecture) {
  const PolicyModel m = PolicyModel::create(world(), 1);
  const ModelConfig& c = m.net.config();
  EXPECT_EQ(c.d_model, 64);
  EXPECT_EQ(c.n_layers, 2);
  EXPECT_EQ(c.n_heads, 2);
  EXPECT_EQ(c.d_ff, 128);
  EXPECT_EQ(c.max_len, 256);
  EXPECT_EQ(static_cast<std::size_t>(c.vocab_size), world().vocab.size() + Vocab::kNumControl);
  EXPECT_EQ(m, PolicyModel::create(world(), 1));
  EXPECT_NE(m, PolicyModel::create(world(), 2));
}

TEST(Model, NextTokenDistributionNormalizes) {
  const PolicyModel m = small_model(world(), 4);
  const auto f = sample_examples(m, 3, 2);
  for (const auto& s : f.states) {
    const auto p = next_token_probs(m, s);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    EXPECT_TRUE(std::all_of(p.begin(), p.end(), [](double x) { return x > 0.0 && x < 1.0; }));
  }
}

TEST(Model, TeacherForcingMatchesIncrementalDecoding) {
  const PolicyModel m = small_model(world(), 5);
  const auto f = sample_examples(m, 3, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto lp = token_logprobs(m, f.states[i], f.utts[i]);
    TokenSeq prefix = f.states[i];
    for (std::size_t t = 0; t < f.utts[i].size(); ++t) {
      const auto p = next_token_probs(m, prefix);
      EXPECT_NEAR(lp[t], std::log(p[static_cast<std::size_t>(f.utts[i][t])]), 1e-10);
      prefix.push_back(f.utts[i][t]);
    }
  }
}

TEST(Model, CacheChunkingDoesNotMatter) {
  const PolicyModel m = small_model(world(), 6);
  const auto f = sample_examples(m, 1, 4);
  TokenSeq seq = f.states[0];
  seq.insert(seq.end(), f.utts[0].begin(), f.utts[0].end());
  Transformer::Cache whole, pieces;
  const Mat all = m.net.extend(whole, seq);
  Mat last;
  for (std::size_t lo = 0; lo < seq.size(); lo += 5) {
    const std::size_t n = std::min<std::size_t>(5, seq.size() - lo);
    last = m.net.extend(pieces, std::span<const int>(seq.data() + lo, n));
  }
  EXPECT_LT((all.bottomRows(last.rows()) - last).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(pieces.len, seq.size());
}

TEST(Model, SequenceScoreIsMeanLogprob) {
  const PolicyModel m = small_model(world(), 7);
  const auto f = sample_examples(m, 4, 5);
  const auto scores = score_candidates(m, f.states[0], f.utts);
  for (std::size_t i = 0; i < f.utts.size(); ++i) {
    const auto lp = token_logprobs(m, f.states[0], f.utts[i]);
    const double mean = std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(lp.size());
    EXPECT_NEAR(scores[i], mean, 1e-10);
    EXPECT_NEAR(sequence_score(m, f.states[0], f.utts[i]), mean, 1e-12);
  }
}

TEST(Model, RejectsOverlongAndOutOfRange) {
  const PolicyModel m = small_model(world(), 8);
  TokenSeq state(static_cast<std::size_t>(m.net.config().max_len), m.vocab.begin());
  EXPECT_THROW(token_logprobs(m, state, {m.vocab.end(), m.vocab.end()}), ContractError);
  EXPECT_THROW(token_logprobs(m, {m.vocab.begin()}, {static_cast<int>(m.vocab.size())}), ContractError);
  EXPECT_THROW(token_logprobs(m, {}, {m.vocab.end()}), ContractError);
  EXPECT_THROW(token_logprobs(m, {m.vocab.begin()}, {}), ContractError);
}

TEST(Encoding, StateLayout) {
  const Vocab v(world().vocab);
  const auto records = build_training_records(world(), 20, 8, 9, 30);
  const CandidateRecord* rec = nullptr;
  for (const auto& r : records)
    if (r.context.size() >= 2) rec = &r;
  ASSERT_NE(rec, nullptr);
  const TokenSeq s = encode_state(v, rec->persona, rec->context, 10000);
  EXPECT_EQ(s.back(), v.begin());
  EXPECT_EQ(std::count(s.begin(), s.end(), v.persona_sep()), static_cast<long>(rec->persona.facts.size()) - 1);
  EXPECT_EQ(std::count(s.begin(), s.end(), v.turn_sep()), static_cast<long>(rec->context.size()));
  std::vector<std::string> parts;
  for (const auto& f : rec->persona.facts) parts.push_back(f.text);
  std::string text = join(parts, " <psep> ");
  for (const auto& t : rec->context) text += " <tsep> " + t.text;
  text += " <bos>";
  EXPECT_EQ(s, v.encode(text));
}

TEST(Encoding, TruncationDropsOldestTurnsOnly) {
  const Vocab v(world().vocab);
  const auto records = build_training_records(world(), 20, 8, 9, 200);
  const CandidateRecord* rec = nullptr;
  for (const auto& r : records)
    if (r.context.size() >= 4) rec = &r;
  ASSERT_NE(rec, nullptr);
  const TokenSeq full = encode_state(v, rec->persona, rec->context, 10000);
  std::vector<Turn> tail(rec->context.begin() + 2, rec->context.end());
  const TokenSeq want = encode_state(v, rec->persona, tail, 10000);
  EXPECT_EQ(encode_state(v, rec->persona, rec->context, want.size()), want);
  EXPECT_EQ(encode_state(v, rec->persona, rec->context, full.size()), full);
  const TokenSeq bare = encode_state(v, rec->persona, {}, 10000);
  EXPECT_EQ(encode_state(v, rec->persona, rec->context, bare.size()), bare);
  EXPECT_THROW(encode_state(v, rec->persona, rec->context, bare.size() - 1), ContractError);
  EXPECT_THROW(encode_state(v, PersonaSet{}, {}, 100), ContractError);
}

TEST(Encoding, Utterances) {
  const Vocab v(world().vocab);
  const std::string text = world().render(Triple{"i", world().relations[0].name, world().relations[0].objects[0]}, 0);
  const TokenSeq u = encode_utterance(v, text);
  EXPECT_EQ(u.back(), v.end());
  EXPECT_EQ(v.decode(u), text);
  std::string longer;
  for (int i = 0; i < 40; ++i) longer += text.substr(0, text.find(' ')) + " ";
  EXPECT_THROW(encode_utterance(v, longer), ContractError);
  EXPECT_THROW(encode_utterance(v, "qqqzzz"), DataError);
}

TEST(Gradient, MatchesCentralDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    PolicyModel m = small_model(world(), seed);
    const auto batch = weighted(sample_examples(m, 3, seed), seed);
    const LossAndGrad lg = weighted_nll_grad(m, batch);
    EXPECT_NEAR(lg.loss, reference_loss(m, batch), 1e-10);

    Rng rng(seed * 31);
    auto params = m.net.params();
    int checked = 0;
    while (checked < 5) {
      const std::size_t i = rng.below(params.size());
      if (std::abs(lg.grad[i]) < 1e-6) continue;
      const double h = 1e-5, saved = params[i];
      params[i] = saved + h;
      const double up = reference_loss(m, batch);
      params[i] = saved - h;
      const double down = reference_loss(m, batch);
      params[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double rel = std::abs(fd - lg.grad[i]) / std::max(std::abs(fd), std::abs(lg.grad[i]));
      EXPECT_LE(rel, 1e-4) << "seed " << seed << " param " << i << " analytic " << lg.grad[i] << " fd " << fd;
      ++checked;
    }
  }
}

TEST(Gradient, LinearInCoefficients) {
  const PolicyModel m = small_model(world(), 11);
  const Fixture f = sample_examples(m, 4, 6);
  auto a = weighted(f, 1), b = weighted(f, 2), sum = a, scaled = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t t = 0; t < a[i].coefficients.size(); ++t) {
      sum[i].coefficients[t] += b[i].coefficients[t];
      scaled[i].coefficients[t] *= -3.0;
    }
  const auto ga = weighted_nll_grad(m, a).grad, gb = weighted_nll_grad(m, b).grad;
  const auto gs = weighted_nll_grad(m, sum).grad, gk = weighted_nll_grad(m, scaled).grad;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_NEAR(gs[i], ga[i] + gb[i], 1e-10);
    EXPECT_NEAR(gk[i], -3.0 * ga[i], 1e-10);
  }
}

TEST(Gradient, ZeroCoefficientsGiveZeroGradient) {
  const PolicyModel m = small_model(world(), 12);
  auto batch = weighted(sample_examples(m, 3, 7), 3);
  for (auto& ex : batch) std::fill(ex.coefficients.begin(), ex.coefficients.end(), 0.0);
  const auto lg = weighted_nll_grad(m, batch);
  EXPECT_EQ(lg.loss, 0.0);
  EXPECT_TRUE(std::all_of(lg.grad.begin(), lg.grad.end(), [](double g) { return g == 0.0; }));
}

TEST(Gradient, CoefficientLengthChecked) {
  const PolicyModel m = small_model(world(), 13);
  auto batch = weighted(sample_examples(m, 2, 8), 4);
  batch[1].coefficients.pop_back();
  EXPECT_THROW(weighted_nll_grad(m, batch), ContractError);
}

TEST(Gradient, BatchGradReportsLogprobsAndCoefficients) {
  const PolicyModel m = small_model(world(), 14);
  const Fixture f = sample_examples(m, 3, 9);
  std::vector<const TokenSeq*> s, u;
  for (std::size_t i = 0; i < 3; ++i) {
    s.push_back(&f.states[i]);
    u.push_back(&f.utts[i]);
  }
  const BatchStep step = batch_grad(m, s, u, [](std::size_t i, const std::vector<double>& lp) {
    std::vector<double> c;
    for (double x : lp) c.push_back(std::exp(x) + static_cast<double>(i));
    return c;
  });
  for (std::size_t i = 0; i < 3; ++i) {
    const auto lp = token_logprobs(m, f.states[i], f.utts[i]);
    ASSERT_EQ(step.logprobs[i].size(), lp.size());
    for (std::size_t t = 0; t < lp.size(); ++t) {
      EXPECT_NEAR(step.logprobs[i][t], lp[t], 1e-12);
      EXPECT_NEAR(step.coefficients[i][t], std::exp(lp[t]) + static_cast<double>(i), 1e-12);
    }
  }
}

TEST(Sampling, GreedyIsArgmaxAndLowTemperatureLimit) {
  const PolicyModel m = small_model(world(), 15);
  const auto f = sample_examples(m, 2, 10);
  for (const auto& s : f.states) {
    DecodingConfig g;
    g.max_tokens = 6;
    const TokenSeq greedy = sample_utterance(m, s, g);
    TokenSeq prefix = s;
    for (int tok : greedy) {
      const auto p = next_token_probs(m, prefix);
      EXPECT_EQ(tok, static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
      prefix.push_back(tok);
    }
    DecodingConfig cold = g;
    cold.mode = DecodingConfig::Mode::temperature;
    cold.temperature = 1e-4;
    cold.seed = 99;
    EXPECT_EQ(sample_utterance(m, s, cold), greedy);
    DecodingConfig top1 = g;
    top1.mode = DecodingConfig::Mode::top_k;
    top1.k = 1;
    EXPECT_EQ(sample_utterance(m, s, top1), greedy);
  }
}

TEST(Sampling, TemperatureOneFollowsTheModel) {
  const PolicyModel m = small_model(world(), 16);
  const TokenSeq state = sample_examples(m, 1, 11).states[0];
  const auto p = next_token_probs(m, state);
  // Frequencies of the first drawn token over many seeds.
  const int n = 20000;
  std::vector<int> hits(p.size(), 0);
  for (int s = 0; s < n; ++s) {
    DecodingConfig c;
    c.mode = DecodingConfig::Mode::temperature;
    c.max_tokens = 1;
    c.seed = static_cast<std::uint64_t>(s);
    ++hits[static_cast<std::size_t>(sample_utterance(m, state, c).at(0))];
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double sd = std::sqrt(p[k] * (1 - p[k]) / n);
    EXPECT_NEAR(static_cast<double>(hits[k]) / n, p[k], 5 * sd + 1e-4) << "token " << k;
  }
}

TEST(Sampling, TopKRenormalizesOverTheKBest) {
  const PolicyModel m = small_model(world(), 17);
  const TokenSeq state = sample_examples(m, 1, 12).states[0];
  const auto p = next_token_probs(m, state);
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
  const double z = p[idx[0]] + p[idx[1]] + p[idx[2]];
  const int n = 6000;
  std::vector<int> hits(p.size(), 0);
  for (int s = 0; s < n; ++s) {
    DecodingConfig c;
    c.mode = DecodingConfig::Mode::top_k;
    c.k = 3;
    c.max_tokens = 1;
    c.seed = static_cast<std::uint64_t>(s);
    ++hits[static_cast<std::size_t>(sample_utterance(m, state, c).at(0))];
  }
  int inside = 0;
  for (int j = 0; j < 3; ++j) {
    const double q = p[idx[static_cast<std::size_t>(j)]] / z;
    const int h = hits[idx[static_cast<std::size_t>(j)]];
    inside += h;
    EXPECT_NEAR(static_cast<double>(h) / n, q, 5 * std::sqrt(q * (1 - q) / n));
  }
  EXPECT_EQ(inside, n);
}

TEST(Sampling, StopsAtEosOrBudgetAndIsSeeded) {
  const PolicyModel m = small_model(world(), 18);
  const TokenSeq state = sample_examples(m, 1, 13).states[0];
  for (std::uint64_t s = 0; s < 20; ++s) {
    DecodingConfig c;
    c.mode = DecodingConfig::Mode::temperature;
    c.max_tokens = 5;
    c.seed = s;
    const TokenSeq out = sample_utterance(m, state, c);
    EXPECT_LE(out.size(), 5u);
    EXPECT_TRUE(out.size() == 5 || out.back() == m.vocab.end());
    EXPECT_EQ(std::count(out.begin(), out.end(), m.vocab.end()), out.back() == m.vocab.end() ? 1 : 0);
    EXPECT_EQ(sample_utterance(m, state, c), out);
  }
  DecodingConfig bad;
  bad.temperature = 0.0;
  EXPECT_THROW(sample_utterance(m, state, bad), ContractError);
}

TEST(Adam, MatchesHandComputedSteps) {
  PolicyModel m = small_model(world(), 19);
  AdamState opt = make_adam(m, 0.01);
  const std::vector<double> start(m.net.params().begin(), m.net.params().end());
  std::vector<double> g(start.size(), 0.0);
  g[0] = 2.0;
  g[1] = -0.5;
  adam_step(m, opt, g);
  // First bias-corrected step moves by lr * sign(g).
  EXPECT_NEAR(m.net.params()[0], start[0] - 0.01 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(m.net.params()[1], start[1] + 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(m.net.params()[2], start[2]);

  std::vector<double> g2(start.size(), 0.0);
  g2[0] = 1.0;
  const double p0 = m.net.params()[0];
  adam_step(m, opt, g2);
  const double m1 = 0.9 * 0.2 + 0.1 * 1.0, v1 = 0.999 * 0.004 + 0.001 * 1.0;
  const double step = 0.01 * (m1 / (1 - 0.81)) / (std::sqrt(v1 / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(m.net.params()[0], p0 - step, 1e-15);
  EXPECT_EQ(opt.step, 2u);
  EXPECT_THROW(make_adam(m, 0.0), ConfigError);
  EXPECT_THROW(adam_step(m, opt, std::vector<double>(3)), ContractError);
}

TEST(Mle, LowersTrainingNllAndWritesEpochCheckpoints) {
  TempDir dir;
  PolicyModel m = small_model(world(), 20);
  const auto dialogues = synthesize_dialogues(world(), 12, 4, 3);
  std::vector<Dialogue> short_dialogues = dialogues;
  auto examples = dialogue_examples(m, short_dialogues);
  ASSERT_EQ(examples.size(), 48u);
  AdamState opt = make_adam(m, 3e-3);
  MleOptions o;
  o.epochs = 3;
  o.batch_size = 8;
  o.checkpoint_dir = dir.path();
  std::vector<std::size_t> seen;
  o.on_epoch = [&](std::size_t e, double) { seen.push_back(e); };
  const MleLog log = mle_train(m, examples, opt, o);
  ASSERT_EQ(log.epoch_nll.size(), 4u);
  EXPECT_LT(log.epoch_nll.back(), log.epoch_nll.front());
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
  for (int e = 1; e <= 3; ++e) EXPECT_TRUE(std::filesystem::exists(dir / ("mle_epoch" + std::to_string(e) + ".ckpt")));
  EXPECT_EQ(load_checkpoint(dir / "mle_epoch3.ckpt").model, m);

  // Same seed, same result.
  PolicyModel m2 = small_model(world(), 20);
  AdamState opt2 = make_adam(m2, 3e-3);
  o.checkpoint_dir.reset();
  o.on_epoch = nullptr;
  EXPECT_EQ(mle_train(m2, examples, opt2, o).epoch_nll, log.epoch_nll);
  double diff = 0;
  for (std::size_t i = 0; i < m.net.num_params(); ++i) diff = std::max(diff, std::abs(m.net.params()[i] - m2.net.params()[i]));
  EXPECT_EQ(diff, 0.0);
  EXPECT_EQ(m2.vocab, m.vocab);
  EXPECT_EQ(m2, m);
}

TEST(Mle, EpochOrderIsAPermutation) {
  const auto a = epoch_order(100, 3, 1);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(a, epoch_order(100, 3, 1));
  EXPECT_NE(a, epoch_order(100, 3, 2));
  EXPECT_NE(a, epoch_order(100, 4, 1));
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  TempDir dir;
  PolicyModel m = small_model(world(), 21);
  AdamState opt = make_adam(m, 1e-3);
  std::vector<double> g(m.net.num_params(), 0.1);
  adam_step(m, opt, g);
  save_checkpoint(dir / "a.ckpt", m, opt);
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt", m.vocab);
  EXPECT_EQ(ck.model, m);
  EXPECT_EQ(ck.opt, opt);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, CorruptionAndMismatchAreReported) {
  TempDir dir;
  PolicyModel m = small_model(world(), 22);
  const AdamState opt = make_adam(m, 1e-3);
  save_checkpoint(dir / "a.ckpt", m, opt);
  std::string bytes;
  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(dir / "b.ckpt", std::ios::binary) << b; };

  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  write(flipped);
  try {
    load_checkpoint(dir / "b.ckpt");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
  write(bytes.substr(0, bytes.size() / 3));
  EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), LoadError);
  write("not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), LoadError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), LoadError);

  std::vector<std::string> other_tokens = world().vocab;
  other_tokens.push_back("zzzextra");
  try {
    load_checkpoint(dir / "a.ckpt", Vocab(other_tokens));
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }

  // A failed load leaves the destination untouched.
  PolicyModel dst = small_model(world(), 23);
  AdamState dst_opt = make_adam(dst, 5e-4);
  const PolicyModel before = dst;
  write(flipped);
  EXPECT_THROW(load_checkpoint_into(dir / "b.ckpt", dst, dst_opt), LoadError);
  EXPECT_EQ(dst, before);
  EXPECT_EQ(dst_opt.lr, 5e-4);
}
