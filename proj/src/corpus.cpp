#include "pcrl/corpus.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "pcrl/common.hpp"

namespace pcrl {

namespace {

struct RelationSeed {
  const char* name;
  bool exclusive;
  const char* question;
  std::vector<const char*> templates;
  std::vector<const char*> objects;
};

// Object pools are disjoint across relations so a rendered sentence parses
// back to exactly one triple.
const std::vector<RelationSeed>& relation_pool() {
  static const std::vector<RelationSeed> pool = {
      {"live_in", true, "where do you live ?",
       {"i live in {o} .", "my home is in {o} .", "i am living in {o} now .",
        "these days i live in {o} .", "i reside in {o} ."},
       {"london", "paris", "tokyo", "berlin", "madrid", "chicago", "boston", "seattle", "denver",
        "toronto", "sydney", "dublin", "lisbon", "vienna", "oslo", "cairo"}},
      {"work_as", true, "what do you do for work ?",
       {"i work as a {o} .", "my job is {o} .", "i am a {o} by trade .",
        "i make a living as a {o} .", "for work i am a {o} ."},
       {"nurse", "teacher", "chef", "pilot", "lawyer", "farmer", "plumber", "dentist", "baker",
        "banker", "painter", "writer", "doctor", "cashier", "mechanic", "librarian"}},
      {"favorite_food", true, "what is your favorite food ?",
       {"my favorite food is {o} .", "i love {o} more than any food .",
        "nothing beats {o} for dinner .", "{o} is my favorite thing to eat .",
        "i could eat {o} every day ."},
       {"pizza", "sushi", "tacos", "pasta", "curry", "steak", "salad", "burgers", "ramen",
        "pancakes", "dumplings", "lasagna", "chili", "soup", "bagels", "waffles"}},
      {"favorite_color", true, "what is your favorite color ?",
       {"my favorite color is {o} .", "i love the color {o} .", "{o} is my favorite color .",
        "i always wear {o} .", "everything i own is {o} ."},
       {"red", "blue", "green", "purple", "orange", "yellow", "pink", "black", "white", "gray",
        "teal", "maroon", "gold", "silver", "navy", "beige"}},
      {"drive", true, "what do you drive ?",
       {"i drive a {o} .", "my car is a {o} .", "i get around in a {o} .",
        "i own a {o} that i drive daily .", "my ride is a {o} ."},
       {"truck", "sedan", "jeep", "minivan", "hatchback", "convertible", "coupe", "wagon",
        "pickup", "motorbike", "scooter", "van", "roadster", "limo", "tractor", "buggy"}},
      {"favorite_drink", true, "what do you like to drink ?",
       {"my favorite drink is {o} .", "i drink {o} all the time .", "i always order {o} .",
        "{o} is the only thing i drink ."},
       {"coffee", "tea", "soda", "juice", "milk", "lemonade", "cocoa", "cider", "espresso",
        "smoothies", "kombucha", "latte", "water", "milkshakes", "seltzer", "chai"}},
      {"study", true, "what do you study ?",
       {"i study {o} at college .", "my major is {o} .", "i am a {o} student .",
        "i am getting a degree in {o} ."},
       {"math", "history", "biology", "physics", "chemistry", "law", "economics", "nursing",
        "geology", "philosophy", "psychology", "astronomy", "accounting", "linguistics",
        "architecture", "statistics"}},
      {"have_pet", false, "do you have any pets ?",
       {"i have a pet {o} .", "i own a {o} .", "my {o} lives with me .", "i take care of my {o} .",
        "i adopted a {o} last year ."},
       {"dog", "cat", "parrot", "hamster", "rabbit", "turtle", "goldfish", "snake", "lizard",
        "ferret", "pony", "gecko", "mouse", "frog", "hedgehog", "canary"}},
      {"like_hobby", false, "what do you do for fun ?",
       {"i like {o} .", "{o} is one of my favorite hobbies .", "i enjoy {o} on weekends .",
        "i spend my free time {o} .", "i am really into {o} ."},
       {"hiking", "skiing", "hunting", "fishing", "swimming", "running", "cooking", "reading",
        "dancing", "gardening", "surfing", "knitting", "camping", "cycling", "bowling",
        "climbing"}},
      {"play_instrument", false, "do you play any instruments ?",
       {"i play the {o} .", "i know how to play the {o} .", "i practice the {o} every day .",
        "i am learning the {o} .", "i play the {o} in a band ."},
       {"guitar", "piano", "violin", "drums", "flute", "cello", "trumpet", "harp", "banjo",
        "saxophone", "ukulele", "clarinet", "oboe", "tuba", "bass", "organ"}},
      {"listen_to", false, "what music do you like ?",
       {"i listen to {o} music .", "i am a big fan of {o} music .", "i love {o} songs .",
        "{o} is all i listen to .", "i go to {o} concerts ."},
       {"jazz", "rock", "pop", "country", "blues", "metal", "punk", "reggae", "soul", "folk",
        "disco", "techno", "opera", "gospel", "rap", "funk"}},
      {"speak", false, "what languages do you speak ?",
       {"i speak {o} .", "i can speak {o} fluently .", "i grew up speaking {o} .",
        "i am fluent in {o} .", "i am taking classes in {o} ."},
       {"english", "spanish", "french", "german", "italian", "russian", "arabic", "hindi",
        "korean", "japanese", "dutch", "greek", "polish", "swedish", "turkish", "hebrew"}},
  };
  return pool;
}

const std::vector<std::string> kPrefixes = {"", "yes ,", "well ,", "oh ,", "haha ,", "honestly ,"};
const std::vector<std::string> kChitchat = {"that sounds fun .", "cool , tell me more .", "i see .",
                                            "nice to meet you .", "that is interesting .",
                                            "wow , really ?"};

constexpr std::size_t kTemplatesPerRelation = 3;

std::string pseudo_word(Rng& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  std::string w;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t i = 0; i < syllables; ++i) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
  }
  return w;
}

std::string with_prefix(const std::string& prefix, const std::string& sentence) {
  return prefix.empty() ? sentence : prefix + " " + sentence;
}

/// "" half the time, otherwise a uniform non-empty opener.
const std::string& draw_prefix(const World& w, Rng& rng) {
  if (rng.bernoulli(0.5)) return w.prefixes.front();
  return w.prefixes[1 + rng.below(w.prefixes.size() - 1)];
}

Triple random_triple(const World& w, const Relation& r, Rng& rng) {
  return Triple{w.subject, r.name, rng.pick(r.objects)};
}

std::string render_random(const World& w, const Triple& t, Rng& rng) {
  const Relation& r = w.relation(t.relation);
  return w.render(t, rng.below(r.templates.size()));
}

/// Triple for a statement that is neutral with respect to the persona, if one
/// exists.
std::optional<Triple> neutral_triple(const World& w, const PersonaSet& persona, Rng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Relation& r = rng.pick(w.relations);
    const PersonaFact* have = persona.find_relation(r.name);
    if (have && r.exclusive) continue;
    Triple t = random_triple(w, r, rng);
    if (entailment_oracle(w, t, persona) == Label::neutral) return t;
  }
  return std::nullopt;
}

/// Generates the next turn for `speaker` given the previous turn.
Turn next_turn(const World& w, int speaker, const PersonaSet& persona, const Turn* prev,
               std::set<std::size_t>& asserted, Rng& rng) {
  Turn turn;
  turn.speaker = speaker;

  auto assert_fact = [&](std::size_t idx) {
    const PersonaFact& f = persona.facts[idx];
    asserted.insert(idx);
    turn.kind = TurnKind::assert_fact;
    turn.triple = f.triple;
    turn.text = with_prefix(draw_prefix(w, rng), render_random(w, f.triple, rng));
  };
  auto remark_about = [&](const Triple& t) {
    turn.kind = TurnKind::remark;
    turn.triple = t;
    turn.text = with_prefix(draw_prefix(w, rng), render_random(w, t, rng));
  };

  if (prev && prev->kind == TurnKind::ask) {
    for (std::size_t i = 0; i < persona.facts.size(); ++i) {
      if (persona.facts[i].triple.relation == prev->topic) {
        assert_fact(i);
        return turn;
      }
    }
    remark_about(random_triple(w, w.relation(prev->topic), rng));
    return turn;
  }

  const double u = rng.uniform();
  if (u < 0.40) {
    std::vector<std::size_t> fresh;
    for (std::size_t i = 0; i < persona.facts.size(); ++i)
      if (!asserted.count(i)) fresh.push_back(i);
    assert_fact(fresh.empty() ? rng.below(persona.facts.size()) : rng.pick(fresh));
  } else if (u < 0.65) {
    const Relation& r = rng.pick(w.relations);
    turn.kind = TurnKind::ask;
    turn.topic = r.name;
    turn.text = r.question;
  } else if (u < 0.90) {
    if (auto t = neutral_triple(w, persona, rng)) {
      remark_about(*t);
    } else {
      turn.kind = TurnKind::remark;
      turn.text = rng.pick(w.chitchat);
    }
  } else {
    turn.kind = TurnKind::remark;
    turn.text = rng.pick(w.chitchat);
  }
  return turn;
}

PersonaSet draw_persona(const World& w, std::size_t k, Rng& rng) {
  if (k < 3 || k > 5) throw ContractError("persona size must be in [3, 5], got " + std::to_string(k));
  if (w.relations.size() < k)
    throw GenerationError("world has " + std::to_string(w.relations.size()) +
                          " relations; cannot draw " + std::to_string(k) + " conflict-free facts");
  std::vector<std::size_t> order(w.relations.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  PersonaSet p;
  for (std::size_t i = 0; i < k; ++i) {
    const Relation& r = w.relations[order[i]];
    if (r.objects.empty()) throw GenerationError("relation " + r.name + " has no objects");
    Triple t = random_triple(w, r, rng);
    p.facts.push_back({render_random(w, t, rng), std::move(t)});
  }
  return p;
}

std::vector<std::string> tokens_of_template(const std::string& tmpl) { return split_tokens(tmpl); }

}  // namespace

bool PersonaSet::contains(const Triple& t) const {
  return std::any_of(facts.begin(), facts.end(), [&](const PersonaFact& f) { return f.triple == t; });
}

const PersonaFact* PersonaSet::find_relation(const std::string& relation) const {
  for (const auto& f : facts)
    if (f.triple.relation == relation) return &f;
  return nullptr;
}

const Relation* World::find_relation(const std::string& name) const {
  for (const auto& r : relations)
    if (r.name == name) return &r;
  return nullptr;
}

const Relation& World::relation(const std::string& name) const {
  if (const Relation* r = find_relation(name)) return *r;
  throw DataError("unknown relation '" + name + "'");
}

bool World::has_entity(const std::string& name) const {
  return std::find(entities.begin(), entities.end(), name) != entities.end();
}

std::size_t World::persona_pool_size() const {
  std::size_t n = 0;
  for (const auto& r : relations) n += r.objects.size();
  return n;
}

std::string World::render(const Triple& t, std::size_t template_index) const {
  const Relation& r = relation(t.relation);
  const std::string& tmpl = r.templates.at(template_index);
  const auto pos = tmpl.find("{o}");
  return tmpl.substr(0, pos) + t.object + tmpl.substr(pos + 3);
}

World build_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations) {
  if (n_entities < 8) throw ConfigError("n_entities must be >= 8, got " + std::to_string(n_entities));
  if (n_relations < 4) throw ConfigError("n_relations must be >= 4, got " + std::to_string(n_relations));
  const auto& pool = relation_pool();
  if (n_relations > pool.size())
    throw ConfigError("n_relations must be <= " + std::to_string(pool.size()));

  Rng rng(derive_seed(seed, 1));
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  order.resize(n_relations);
  // Need at least one exclusive and one non-exclusive relation.
  auto count_excl = std::count_if(order.begin(), order.end(), [&](std::size_t i) { return pool[i].exclusive; });
  if (count_excl == 0 || count_excl == static_cast<long>(n_relations)) {
    const bool want = count_excl == 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool[i].exclusive == want && std::find(order.begin(), order.end(), i) == order.end()) {
        order.back() = i;
        break;
      }
    }
  }
  std::sort(order.begin(), order.end());

  World w;
  w.seed = seed;
  w.prefixes = kPrefixes;
  w.chitchat = kChitchat;
  w.entities.push_back(w.subject);

  const std::size_t n_objects = n_entities - 1;
  // Pseudo-words must not collide with any real object or surface token.
  std::set<std::string> used = {w.subject};
  for (const auto& rs : pool) {
    for (const char* o : rs.objects) used.insert(o);
    for (const char* t : rs.templates)
      for (auto& tok : split_tokens(t)) used.insert(tok);
    for (auto& tok : split_tokens(rs.question)) used.insert(tok);
  }
  for (const auto& text : kPrefixes)
    for (auto& tok : split_tokens(text)) used.insert(tok);
  for (const auto& text : kChitchat)
    for (auto& tok : split_tokens(text)) used.insert(tok);
  for (std::size_t j = 0; j < n_relations; ++j) {
    const RelationSeed& rs = pool[order[j]];
    Relation r;
    r.name = rs.name;
    r.exclusive = rs.exclusive;
    r.question = rs.question;
    std::vector<std::string> tmpls(rs.templates.begin(), rs.templates.end());
    rng.shuffle(tmpls);
    tmpls.resize(std::min(kTemplatesPerRelation, tmpls.size()));
    r.templates = std::move(tmpls);

    const std::size_t quota = n_objects / n_relations + (j < n_objects % n_relations ? 1 : 0);
    std::vector<std::string> objs(rs.objects.begin(), rs.objects.end());
    rng.shuffle(objs);
    for (std::size_t i = 0; i < quota; ++i) {
      std::string name;
      if (i < objs.size()) {
        name = objs[i];
      } else {
        do {
          name = pseudo_word(rng);
        } while (used.count(name));
      }
      used.insert(name);
      r.objects.push_back(name);
    }
    for (const auto& o : r.objects) w.entities.push_back(o);
    w.relations.push_back(std::move(r));
  }

  std::set<std::string> vocab;
  auto add = [&](const std::string& text) {
    for (auto& t : split_tokens(text))
      if (t != "{o}") vocab.insert(t);
  };
  for (const auto& e : w.entities) vocab.insert(e);
  for (const auto& r : w.relations) {
    for (const auto& t : r.templates) add(t);
    add(r.question);
  }
  for (const auto& p : w.prefixes) add(p);
  for (const auto& c : w.chitchat) add(c);
  w.vocab.assign(vocab.begin(), vocab.end());
  return w;
}

std::string label_name(Label l) {
  switch (l) {
    case Label::entail: return "entail";
    case Label::contradict: return "contradict";
    case Label::neutral: return "neutral";
  }
  return "?";
}

Label parse_label(const std::string& s) {
  if (s == "entail") return Label::entail;
  if (s == "contradict") return Label::contradict;
  if (s == "neutral") return Label::neutral;
  throw DataError("unknown label '" + s + "'");
}

std::string category_name(Category c) {
  switch (c) {
    case Category::gold: return "gold";
    case Category::entail: return "entail";
    case Category::neutral: return "neutral";
    case Category::contradict: return "contradict";
  }
  return "?";
}

Category parse_category(const std::string& s) {
  if (s == "gold") return Category::gold;
  if (s == "entail") return Category::entail;
  if (s == "neutral") return Category::neutral;
  if (s == "contradict") return Category::contradict;
  throw DataError("unknown category '" + s + "'");
}

namespace {
void check_triple(const World& world, const Triple& t) {
  if (!world.has_entity(t.subject)) throw DataError("unknown entity '" + t.subject + "'");
  if (!world.has_entity(t.object)) throw DataError("unknown entity '" + t.object + "'");
  world.relation(t.relation);
}
}  // namespace

Label entailment_oracle(const World& world, const Triple& candidate, const PersonaSet& persona) {
  check_triple(world, candidate);
  bool contradicts = false;
  for (const auto& f : persona.facts) {
    check_triple(world, f.triple);
    if (f.triple == candidate) return Label::entail;
    if (f.triple.subject == candidate.subject && f.triple.relation == candidate.relation &&
        f.triple.object != candidate.object && world.relation(candidate.relation).exclusive) {
      contradicts = true;
    }
  }
  return contradicts ? Label::contradict : Label::neutral;
}

bool entity_overlap(const Triple& a, const Triple& b) {
  return a.relation == b.relation && (a.subject == b.subject || a.object == b.object);
}

PersonaSet sample_persona(const World& world, std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 2));
  return draw_persona(world, k, rng);
}

std::vector<Dialogue> synthesize_dialogues(const World& world, std::size_t n, std::size_t turns,
                                           std::uint64_t seed) {
  if (n < 1) throw ContractError("synthesize_dialogues: n must be >= 1");
  if (turns < 4 || turns % 2) throw ContractError("synthesize_dialogues: turns must be even and >= 4");
  std::vector<Dialogue> out(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(seed, 1000 + i));
    Dialogue& d = out[i];
    // Training personas hold 3-4 facts so a mapped insertion stays within 5.
    d.persona_a = draw_persona(world, 3 + rng.below(2), rng);
    d.persona_b = draw_persona(world, 3 + rng.below(2), rng);
    std::set<std::size_t> asserted[2];
    for (std::size_t t = 0; t < turns; ++t) {
      const int speaker = static_cast<int>(t % 2);
      const Turn* prev = t ? &d.turns.back() : nullptr;
      d.turns.push_back(next_turn(world, speaker, d.persona_of(speaker), prev, asserted[speaker], rng));
    }
  });
  return out;
}

std::vector<NliPair> generate_pairs(const World& world, const std::vector<Dialogue>& dialogues,
                                    std::uint64_t seed) {
  std::vector<NliPair> pairs;
  std::unordered_set<std::string> seen;
  Rng rng(derive_seed(seed, 3));
  for (const auto& d : dialogues) {
    for (const auto& turn : d.turns) {
      // One pair per distinct sentence; the mapping fans it out to every occurrence.
      if (!turn.triple || !seen.insert(turn.text).second) continue;
      const Triple& t = *turn.triple;
      const Relation& r = world.relation(t.relation);
      NliPair p;
      p.sentence = turn.text;
      p.sentence_triple = t;
      const double u = rng.uniform();
      if (r.exclusive && r.objects.size() > 1 && u < 0.5) {
        Triple other = t;
        while (other.object == t.object) other.object = rng.pick(r.objects);
        p.label = Label::contradict;
        p.persona_triple = other;
      } else if (u < 0.85) {
        p.label = Label::entail;
        p.persona_triple = t;
      } else {
        // Unrelated persona line; the mapping filter discards it.
        Triple other;
        do {
          other = random_triple(world, rng.pick(world.relations), rng);
        } while (other.relation == t.relation);
        p.label = Label::neutral;
        p.persona_triple = other;
      }
      p.persona_sentence = render_random(world, p.persona_triple, rng);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

MappingResult map_and_filter(const World& world, const std::vector<Dialogue>& dialogues,
                             const std::vector<NliPair>& pairs) {
  std::unordered_map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> where;
  for (std::size_t i = 0; i < dialogues.size(); ++i)
    for (std::size_t j = 0; j < dialogues[i].turns.size(); ++j)
      where[dialogues[i].turns[j].text].emplace_back(i, j);

  MappingResult result;
  for (const auto& pair : pairs) {
    check_triple(world, pair.sentence_triple);
    check_triple(world, pair.persona_triple);
    if (pair.label == Label::neutral) {
      ++result.neutral_dropped;
      continue;
    }
    auto it = where.find(pair.sentence);
    if (it == where.end()) {
      ++result.unmatched;
      continue;
    }
    for (auto [di, ti] : it->second) {
      const Dialogue& d = dialogues[di];
      const Turn& turn = d.turns[ti];
      CandidateRecord rec;
      for (const auto& f : d.persona_of(turn.speaker).facts)
        if (!entity_overlap(f.triple, pair.persona_triple)) rec.persona.facts.push_back(f);
      const std::size_t pos =
          fnv1a(pair.sentence + "|" + pair.persona_sentence) % (rec.persona.facts.size() + 1);
      rec.persona.facts.insert(rec.persona.facts.begin() + static_cast<std::ptrdiff_t>(pos),
                               PersonaFact{pair.persona_sentence, pair.persona_triple});
      rec.context.assign(d.turns.begin(), d.turns.begin() + static_cast<std::ptrdiff_t>(ti));
      rec.candidate = turn.text;
      rec.candidate_triple = pair.sentence_triple;
      rec.label = pair.label;
      rec.reward = pair.label == Label::entail ? 1 : -1;
      if (entailment_oracle(world, rec.candidate_triple, rec.persona) != rec.label)
        throw DataError("pair label disagrees with triples for sentence '" + pair.sentence + "'");
      result.records.push_back(std::move(rec));
    }
  }
  return result;
}

std::vector<CandidateRecord> build_training_records(const World& world, std::size_t n_dialogues,
                                                    std::size_t turns, std::uint64_t seed,
                                                    std::size_t max_records) {
  std::vector<CandidateRecord> out;
  std::uint64_t round = 0;
  do {
    const auto dialogues = synthesize_dialogues(world, n_dialogues, turns, derive_seed(seed, 100 + round));
    const auto pairs = generate_pairs(world, dialogues, derive_seed(seed, 200 + round));
    auto mapped = map_and_filter(world, dialogues, pairs);
    for (auto& r : mapped.records) out.push_back(std::move(r));
    ++round;
  } while (max_records && out.size() < max_records);
  if (max_records && out.size() > max_records) out.resize(max_records);
  return out;
}

std::vector<EvalItem> build_eval_set(const World& world, std::size_t n_items, std::uint64_t seed) {
  std::vector<EvalItem> items(n_items);
  parallel_for(n_items, [&](std::size_t idx) {
    // Stream 7 is reserved for evaluation; training generators never use it.
    Rng rng(derive_seed(derive_seed(seed, 7), idx));
    for (int attempt = 0; attempt < 100; ++attempt) {
      EvalItem item;
      item.persona = draw_persona(world, 3 + rng.below(std::min<std::size_t>(3, world.relations.size() - 2)), rng);
      std::vector<std::size_t> exclusive_facts;
      for (std::size_t i = 0; i < item.persona.facts.size(); ++i)
        if (world.relation(item.persona.facts[i].triple.relation).exclusive) exclusive_facts.push_back(i);
      if (exclusive_facts.empty()) continue;
      const PersonaSet partner = draw_persona(world, 3 + rng.below(2), rng);

      // Odd-length history so the partner speaks last and the bot replies.
      const std::size_t n_ctx = 1 + 2 * rng.below(3);
      const int bot = static_cast<int>(n_ctx % 2);
      std::set<std::size_t> asserted[2];
      for (std::size_t t = 0; t + 1 < n_ctx; ++t) {
        const int sp = static_cast<int>(t % 2);
        const Turn* prev = t ? &item.context.back() : nullptr;
        item.context.push_back(next_turn(world, sp, sp == bot ? item.persona : partner, prev, asserted[sp], rng));
      }
      const PersonaFact* gold_fact = &item.persona.facts[rng.pick(exclusive_facts)];
      Turn last;
      if (rng.bernoulli(0.5)) {
        const Relation& r = world.relation(gold_fact->triple.relation);
        last.speaker = 1 - bot;
        last.kind = TurnKind::ask;
        last.topic = r.name;
        last.text = r.question;
      } else {
        const Turn* prev = item.context.empty() ? nullptr : &item.context.back();
        last = next_turn(world, 1 - bot, partner, prev, asserted[1 - bot], rng);
        if (last.kind == TurnKind::ask) {
          const PersonaFact* f = item.persona.find_relation(last.topic);
          if (!f) continue;
          gold_fact = f;
        }
      }
      item.context.push_back(std::move(last));

      std::set<std::string> seen;
      auto take = [&](const Triple& t, Category c) {
        const std::string text = with_prefix(draw_prefix(world, rng), render_random(world, t, rng));
        if (!seen.insert(text).second) return false;
        item.candidates.push_back({text, c, t});
        return true;
      };
      take(gold_fact->triple, Category::gold);

      std::size_t guard = 0;
      auto fill = [&](std::size_t want, Category c, auto&& draw) {
        std::size_t got = 0;
        while (got < want && guard++ < 20000)
          if (auto t = draw(); t && take(*t, c)) ++got;
        return got == want;
      };
      // Entailing distractors restate the other persona facts: consistent, but
      // not the reply the context calls for.
      const bool ok_entail = fill(kEvalEntail, Category::entail, [&]() -> std::optional<Triple> {
        const PersonaFact& f = rng.pick(item.persona.facts);
        if (&f == gold_fact) return std::nullopt;
        return f.triple;
      });
      // Contradictions target the gold fact when its relation is exclusive,
      // otherwise another exclusive persona fact.
      const PersonaFact* anchor = world.relation(gold_fact->triple.relation).exclusive
                                      ? gold_fact
                                      : &item.persona.facts[rng.pick(exclusive_facts)];
      const Relation& anchor_rel = world.relation(anchor->triple.relation);
      std::set<std::string> contra_objects;
      const bool ok_contra = fill(kEvalContradict, Category::contradict, [&]() -> std::optional<Triple> {
        const PersonaFact* f = anchor;
        if (contra_objects.size() + 1 >= anchor_rel.objects.size() || rng.bernoulli(0.2))
          f = &item.persona.facts[rng.pick(exclusive_facts)];
        const Relation& r = world.relation(f->triple.relation);
        if (r.objects.size() < 2) return std::nullopt;
        Triple t = f->triple;
        while (t.object == f->triple.object) t.object = rng.pick(r.objects);
        if (f == anchor && !contra_objects.insert(t.object).second &&
            contra_objects.size() + 1 < anchor_rel.objects.size())
          return std::nullopt;
        return t;
      });
      const bool ok_neutral = fill(kEvalNeutral, Category::neutral, [&]() { return neutral_triple(world, item.persona, rng); });
      if (!ok_entail || !ok_contra || !ok_neutral) continue;

      rng.shuffle(item.candidates);
      items[idx] = std::move(item);
      return;
    }
    throw GenerationError("could not build eval item " + std::to_string(idx) +
                          ": world too small for 10 distinct candidates per category");
  });
  return items;
}

std::optional<Triple> parse_utterance(const World& world, const std::string& text) {
  auto toks = split_tokens(text);
  // Strip a known opener.
  for (std::size_t p = 1; p < world.prefixes.size(); ++p) {
    auto pt = split_tokens(world.prefixes[p]);
    if (toks.size() > pt.size() && std::equal(pt.begin(), pt.end(), toks.begin())) {
      toks.erase(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(pt.size()));
      break;
    }
  }
  for (const auto& r : world.relations) {
    for (const auto& tmpl : r.templates) {
      const auto tt = tokens_of_template(tmpl);
      if (tt.size() != toks.size()) continue;
      std::optional<std::string> obj;
      bool match = true;
      for (std::size_t i = 0; i < tt.size() && match; ++i) {
        if (tt[i] == "{o}") {
          obj = toks[i];
        } else if (tt[i] != toks[i]) {
          match = false;
        }
      }
      if (match && obj && std::find(r.objects.begin(), r.objects.end(), *obj) != r.objects.end())
        return Triple{world.subject, r.name, *obj};
    }
  }
  return std::nullopt;
}

}  // namespace pcrl
