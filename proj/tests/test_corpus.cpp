#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include <gtest/gtest.h>

#include "pcrl/common.hpp"
#include "pcrl/corpus.hpp"
#include "test_util.hpp"

using namespace pcrl;

namespace {

World tiny_world() {
  World w;
  w.subject = "i";
  w.relations = {
      {"live_in", true, {"i live in {o} ."}, {"paris", "london", "rome"}, "where do you live ?"},
      {"like_hobby", false, {"i like {o} ."}, {"hunting", "fishing"}, "what do you do for fun ?"},
      {"have_pet", false, {"i own a {o} ."}, {"dog", "cat"}, "do you have pets ?"},
  };
  w.entities = {"i", "bob"};
  for (const auto& r : w.relations) w.entities.insert(w.entities.end(), r.objects.begin(), r.objects.end());
  return w;
}

PersonaSet persona_of(std::initializer_list<Triple> ts) {
  PersonaSet p;
  for (const auto& t : ts) p.facts.push_back({t.relation + " " + t.object, t});
  return p;
}

// Decision table written out case by case: (same subject, same relation,
// same object, exclusive relation) -> label against a one-fact persona.
Label table_label(bool ss, bool sr, bool so, bool excl) {
  static const std::map<std::tuple<bool, bool, bool, bool>, Label> table = {
      {{true, true, true, true}, Label::entail},       {{true, true, true, false}, Label::entail},
      {{true, true, false, true}, Label::contradict},  {{true, true, false, false}, Label::neutral},
      {{true, false, true, true}, Label::neutral},     {{true, false, true, false}, Label::neutral},
      {{true, false, false, true}, Label::neutral},    {{true, false, false, false}, Label::neutral},
      {{false, true, true, true}, Label::neutral},     {{false, true, true, false}, Label::neutral},
      {{false, true, false, true}, Label::neutral},    {{false, true, false, false}, Label::neutral},
      {{false, false, true, true}, Label::neutral},    {{false, false, true, false}, Label::neutral},
      {{false, false, false, true}, Label::neutral},   {{false, false, false, false}, Label::neutral},
  };
  return table.at({ss, sr, so, excl});
}

const World& reference_world() {
  static const World w = build_world(7, 200, 12);
  return w;
}

}  // namespace

TEST(Oracle, ExclusiveConflictContradicts) {
  const World w = tiny_world();
  const auto p = persona_of({{"i", "live_in", "london"}});
  EXPECT_EQ(entailment_oracle(w, {"i", "live_in", "paris"}, p), Label::contradict);
  EXPECT_EQ(entailment_oracle(w, {"i", "live_in", "london"}, p), Label::entail);
}

TEST(Oracle, UnrelatedIsNeutral) {
  const World w = tiny_world();
  const auto p = persona_of({{"i", "live_in", "london"}, {"i", "have_pet", "dog"}});
  EXPECT_EQ(entailment_oracle(w, {"i", "like_hobby", "hunting"}, p), Label::neutral);
  // Non-exclusive relations never contradict.
  EXPECT_EQ(entailment_oracle(w, {"i", "have_pet", "cat"}, p), Label::neutral);
}

TEST(Oracle, MatchesExhaustiveRuleTable) {
  const World w = tiny_world();
  std::vector<Triple> all;
  for (const auto& s : {"i", "bob"})
    for (const auto& r : w.relations)
      for (const auto& o : r.objects) all.push_back({s, r.name, o});
  for (const auto& cand : all) {
    for (const auto& fact : all) {
      const bool excl = w.relation(cand.relation).exclusive;
      const Label want = table_label(cand.subject == fact.subject, cand.relation == fact.relation,
                                     cand.object == fact.object, excl);
      EXPECT_EQ(entailment_oracle(w, cand, persona_of({fact})), want)
          << cand.subject << " " << cand.relation << " " << cand.object << " vs " << fact.object;
    }
  }
}

TEST(Oracle, EntailTakesPrecedence) {
  const World w = tiny_world();
  // Malformed persona holding both objects of an exclusive relation.
  const auto p = persona_of({{"i", "live_in", "london"}, {"i", "live_in", "paris"}});
  EXPECT_EQ(entailment_oracle(w, {"i", "live_in", "paris"}, p), Label::entail);
  EXPECT_EQ(entailment_oracle(w, {"i", "live_in", "rome"}, p), Label::contradict);
}

TEST(Oracle, UnknownEntityIsDataError) {
  const World w = tiny_world();
  EXPECT_THROW(entailment_oracle(w, {"i", "live_in", "atlantis"}, {}), DataError);
  EXPECT_THROW(entailment_oracle(w, {"i", "fly_to", "paris"}, {}), DataError);
}

TEST(Oracle, EntityOverlap) {
  EXPECT_TRUE(entity_overlap({"i", "live_in", "paris"}, {"i", "live_in", "rome"}));
  EXPECT_TRUE(entity_overlap({"i", "live_in", "paris"}, {"bob", "live_in", "paris"}));
  EXPECT_FALSE(entity_overlap({"i", "live_in", "paris"}, {"bob", "live_in", "rome"}));
  EXPECT_FALSE(entity_overlap({"i", "live_in", "paris"}, {"i", "have_pet", "dog"}));
}

TEST(World, BuildIsDeterministicAndValidated) {
  EXPECT_EQ(serialize_world(build_world(3, 120, 8)), serialize_world(build_world(3, 120, 8)));
  EXPECT_NE(serialize_world(build_world(3, 120, 8)), serialize_world(build_world(4, 120, 8)));
  EXPECT_THROW(build_world(1, 7, 8), ConfigError);
  EXPECT_THROW(build_world(1, 100, 3), ConfigError);
  EXPECT_THROW(build_world(1, 100, 99), ConfigError);
}

TEST(World, EntitiesAreUniqueAndRelationsMixed) {
  const World& w = reference_world();
  std::set<std::string> uniq(w.entities.begin(), w.entities.end());
  EXPECT_EQ(uniq.size(), w.entities.size());
  EXPECT_EQ(w.entities.size(), 200u);
  EXPECT_EQ(w.entities.front(), w.subject);
  bool excl = false, nonexcl = false;
  for (const auto& r : w.relations) (r.exclusive ? excl : nonexcl) = true;
  EXPECT_TRUE(excl && nonexcl);
  EXPECT_TRUE(std::is_sorted(w.vocab.begin(), w.vocab.end()));
}

TEST(World, EveryRenderingParsesBack) {
  const World& w = reference_world();
  for (const auto& r : w.relations) {
    for (std::size_t t = 0; t < r.templates.size(); ++t) {
      for (const auto& o : r.objects) {
        const Triple tr{w.subject, r.name, o};
        const std::string text = w.render(tr, t);
        const auto parsed = parse_utterance(w, text);
        ASSERT_TRUE(parsed.has_value()) << text;
        EXPECT_EQ(*parsed, tr) << text;
        for (const auto& p : w.prefixes) {
          if (p.empty()) continue;
          const auto pp = parse_utterance(w, p + " " + text);
          ASSERT_TRUE(pp.has_value()) << p << " " << text;
          EXPECT_EQ(*pp, tr);
        }
      }
    }
  }
  for (const auto& c : w.chitchat) EXPECT_FALSE(parse_utterance(w, c).has_value());
  EXPECT_FALSE(parse_utterance(w, "").has_value());
}

TEST(Persona, OneFactPerRelation) {
  const World& w = reference_world();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const PersonaSet p = sample_persona(w, 5, s);
    ASSERT_EQ(p.facts.size(), 5u);
    std::set<std::string> rels;
    for (const auto& f : p.facts) {
      rels.insert(f.triple.relation);
      EXPECT_EQ(parse_utterance(w, f.text), f.triple);
    }
    EXPECT_EQ(rels.size(), 5u);
  }
  EXPECT_EQ(sample_persona(w, 4, 9), sample_persona(w, 4, 9));
}

TEST(Dialogues, DeterministicAndWellFormed) {
  const World& w = reference_world();
  const auto a = synthesize_dialogues(w, 30, 8, 5);
  EXPECT_EQ(a, synthesize_dialogues(w, 30, 8, 5));
  EXPECT_NE(a, synthesize_dialogues(w, 30, 8, 6));
  for (const auto& d : a) {
    ASSERT_EQ(d.turns.size(), 8u);
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      const Turn& turn = d.turns[t];
      EXPECT_EQ(turn.speaker, static_cast<int>(t % 2));
      const auto parsed = parse_utterance(w, turn.text);
      EXPECT_EQ(parsed, turn.triple) << turn.text;
      // Speakers never contradict their own persona.
      if (turn.triple)
        EXPECT_NE(entailment_oracle(w, *turn.triple, d.persona_of(turn.speaker)), Label::contradict) << turn.text;
    }
  }
  EXPECT_THROW(synthesize_dialogues(w, 3, 5, 1), ContractError);
}

TEST(Mapping, TenThousandRecordsRespectFilterAndLabels) {
  const World& w = reference_world();
  const auto records = build_training_records(w, 2000, 8, 11, 10000);
  ASSERT_EQ(records.size(), 10000u);
  std::size_t pos = 0, neg = 0;
  for (const auto& r : records) {
    ASSERT_NE(r.label, Label::neutral);
    ASSERT_EQ(r.reward, r.label == Label::entail ? 1 : -1);
    ASSERT_EQ(entailment_oracle(w, r.candidate_triple, r.persona), r.label) << r.candidate;
    ASSERT_EQ(parse_utterance(w, r.candidate), r.candidate_triple);
    (r.reward > 0 ? pos : neg)++;

    // Locate the inserted persona fact and check nothing else overlaps it.
    const PersonaFact* inserted = nullptr;
    for (const auto& f : r.persona.facts) {
      const bool match = r.label == Label::entail ? f.triple == r.candidate_triple
                                                  : entity_overlap(f.triple, r.candidate_triple) &&
                                                        f.triple.object != r.candidate_triple.object;
      if (match) inserted = &f;
    }
    ASSERT_NE(inserted, nullptr) << r.candidate;
    for (const auto& f : r.persona.facts)
      if (&f != inserted) ASSERT_FALSE(entity_overlap(f.triple, inserted->triple)) << r.candidate;
  }
  EXPECT_GT(pos, 0u);
  EXPECT_GT(neg, 0u);
}

TEST(Mapping, NeutralPairsDroppedAndUnmatchedCounted) {
  const World& w = reference_world();
  const auto dialogues = synthesize_dialogues(w, 50, 8, 21);
  auto pairs = generate_pairs(w, dialogues, 22);
  ASSERT_FALSE(pairs.empty());
  std::size_t neutral = 0;
  for (const auto& p : pairs) neutral += p.label == Label::neutral;
  NliPair orphan = *std::find_if(pairs.begin(), pairs.end(), [](const NliPair& p) { return p.label != Label::neutral; });
  orphan.sentence = "this sentence never occurs .";
  pairs.push_back(orphan);
  const MappingResult m = map_and_filter(w, dialogues, pairs);
  EXPECT_EQ(m.unmatched, 1u);
  EXPECT_GT(neutral, 0u);
  EXPECT_GE(m.neutral_dropped, neutral);
  for (const auto& r : m.records) EXPECT_NE(r.label, Label::neutral);
}

TEST(Mapping, EntailingPairGivesPositiveRecord) {
  const World& w = reference_world();
  const auto dialogues = synthesize_dialogues(w, 5, 8, 2);
  const Turn* turn = nullptr;
  for (const auto& d : dialogues)
    for (const auto& t : d.turns)
      if (t.triple && !turn) turn = &t;
  ASSERT_NE(turn, nullptr);
  NliPair p{turn->text, turn->text, Label::entail, *turn->triple, *turn->triple};
  const MappingResult m = map_and_filter(w, dialogues, {p});
  ASSERT_FALSE(m.records.empty());
  for (const auto& r : m.records) {
    EXPECT_EQ(r.reward, 1);
    EXPECT_TRUE(r.persona.contains(*turn->triple));
  }
}

TEST(Mapping, MislabelledPairIsRejected) {
  const World& w = reference_world();
  const auto dialogues = synthesize_dialogues(w, 5, 8, 2);
  const Turn* turn = nullptr;
  for (const auto& d : dialogues)
    for (const auto& t : d.turns)
      if (t.triple && !turn) turn = &t;
  ASSERT_NE(turn, nullptr);
  NliPair p{turn->text, turn->text, Label::contradict, *turn->triple, *turn->triple};
  EXPECT_THROW(map_and_filter(w, dialogues, {p}), DataError);
}

TEST(EvalSet, CompositionAndOracleAgreement) {
  const World& w = reference_world();
  const auto items = build_eval_set(w, 120, 3);
  ASSERT_EQ(items.size(), 120u);
  for (const auto& item : items) {
    ASSERT_EQ(item.candidates.size(), kEvalCandidates);
    std::map<Category, std::size_t> count;
    std::set<std::string> texts;
    const Triple* gold = nullptr;
    for (const auto& c : item.candidates) {
      ++count[c.category];
      texts.insert(c.text);
      EXPECT_EQ(parse_utterance(w, c.text), c.triple) << c.text;
      const Label l = entailment_oracle(w, c.triple, item.persona);
      switch (c.category) {
        case Category::gold:
          gold = &c.triple;
          [[fallthrough]];
        case Category::entail: EXPECT_EQ(l, Label::entail) << c.text; break;
        case Category::contradict: EXPECT_EQ(l, Label::contradict) << c.text; break;
        case Category::neutral: EXPECT_EQ(l, Label::neutral) << c.text; break;
      }
    }
    EXPECT_EQ(count[Category::gold], 1u);
    EXPECT_EQ(count[Category::entail], kEvalEntail);
    EXPECT_EQ(count[Category::neutral], kEvalNeutral);
    EXPECT_EQ(count[Category::contradict], kEvalContradict);
    EXPECT_EQ(texts.size(), kEvalCandidates);
    ASSERT_NE(gold, nullptr);
    EXPECT_TRUE(item.persona.contains(*gold));
    ASSERT_FALSE(item.context.empty());
    EXPECT_EQ(item.context.size() % 2, 1u);
  }
}

TEST(EvalSet, DeterministicPerSeed) {
  const World& w = reference_world();
  EXPECT_EQ(build_eval_set(w, 20, 5), build_eval_set(w, 20, 5));
  EXPECT_NE(build_eval_set(w, 20, 5), build_eval_set(w, 20, 6));
}

TEST(Persistence, RoundTripsAllFormats) {
  TempDir dir;
  const World& w = reference_world();
  const auto dialogues = synthesize_dialogues(w, 10, 6, 1);
  const auto records = build_training_records(w, 40, 8, 2, 50);
  const auto items = build_eval_set(w, 5, 3);
  save_world(dir / "world.json", w);
  save_dialogues(dir / "d.jsonl", dialogues);
  save_records(dir / "r.jsonl", records);
  save_eval_set(dir / "e.jsonl", items);
  EXPECT_EQ(load_world(dir / "world.json"), w);
  EXPECT_EQ(load_dialogues(dir / "d.jsonl"), dialogues);
  EXPECT_EQ(load_records(dir / "r.jsonl"), records);
  EXPECT_EQ(load_eval_set(dir / "e.jsonl"), items);
}

TEST(Persistence, EmptyFileIsEmptyList) {
  TempDir dir;
  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_TRUE(load_records(dir / "empty.jsonl").empty());
}

TEST(Persistence, CorruptLineReportsLocation) {
  TempDir dir;
  const auto records = build_training_records(reference_world(), 40, 8, 2, 5);
  save_records(dir / "r.jsonl", records);
  std::ifstream in(dir / "r.jsonl");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  lines[3] = lines[3].substr(0, lines[3].size() / 2);
  std::ofstream out(dir / "bad.jsonl");
  for (const auto& l : lines) out << l << "\n";
  out.close();
  try {
    load_records(dir / "bad.jsonl");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:4"), std::string::npos) << e.what();
  }
}

TEST(Persistence, RejectsNeutralAndMismatchedRecords) {
  TempDir dir;
  auto records = build_training_records(reference_world(), 40, 8, 2, 3);
  auto write = [&](const std::string& edit_from, const std::string& edit_to) {
    save_records(dir / "r.jsonl", records);
    std::ifstream in(dir / "r.jsonl");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    const auto at = text.find(edit_from);
    EXPECT_NE(at, std::string::npos);
    text.replace(at, edit_from.size(), edit_to);
    std::ofstream(dir / "r.jsonl") << text;
  };
  const std::string lbl = "\"label\":\"" + label_name(records[0].label) + "\"";
  write(lbl, "\"label\":\"neutral\"");
  EXPECT_THROW(load_records(dir / "r.jsonl"), DataError);
  write("\"reward\":" + std::to_string(records[0].reward), "\"reward\":" + std::to_string(-records[0].reward));
  EXPECT_THROW(load_records(dir / "r.jsonl"), DataError);
}

TEST(Persistence, WrongFileTypeAndMissingFile) {
  TempDir dir;
  save_eval_set(dir / "e.jsonl", build_eval_set(reference_world(), 2, 1));
  EXPECT_THROW(load_records(dir / "e.jsonl"), DataError);
  EXPECT_THROW(load_records(dir / "missing.jsonl"), DataError);
  EXPECT_THROW(load_world(dir / "missing.json"), DataError);
}

TEST(World, SmallWorldExamples) {
  const World a = build_world(7, 16, 6);
  EXPECT_EQ(a.entities.size(), 16u);
  EXPECT_EQ(a.relations.size(), 6u);
  EXPECT_EQ(a, build_world(7, 16, 6));
  EXPECT_NE(serialize_world(a), serialize_world(build_world(8, 16, 6)));
  EXPECT_THROW(build_world(7, 4, 6), ConfigError);
  for (const auto& r : a.relations) EXPECT_GE(r.templates.size(), 2u);
}

TEST(Persona, ThousandPersonasArePairwiseConsistent) {
  const World& w = reference_world();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const PersonaSet p = sample_persona(w, 3 + s % 3, s);
    for (std::size_t i = 0; i < p.facts.size(); ++i)
      for (std::size_t j = 0; j < p.facts.size(); ++j) {
        if (i == j) continue;
        const Label l = entailment_oracle(w, p.facts[i].triple, PersonaSet{{p.facts[j]}});
        ASSERT_EQ(l, Label::neutral) << "persona seed " << s;
      }
  }
}
