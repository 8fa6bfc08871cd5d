#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pcrl {

inline constexpr int kFormatVersion = 1;

/// (subject, relation, object) fact underlying an utterance or persona line.
struct Triple {
  std::string subject;
  std::string relation;
  std::string object;

  auto operator<=>(const Triple&) const = default;
};

struct Relation {
  std::string name;
  /// Two facts sharing subject+relation with different objects contradict.
  bool exclusive = false;
  /// Surface patterns; "{o}" marks the object slot.
  std::vector<std::string> templates;
  /// Object domain of the relation.
  std::vector<std::string> objects;
  /// Partner question that elicits this relation.
  std::string question;

  bool operator==(const Relation&) const = default;
};

struct PersonaFact {
  std::string text;
  Triple triple;

  bool operator==(const PersonaFact&) const = default;
};

struct PersonaSet {
  std::vector<PersonaFact> facts;

  bool operator==(const PersonaSet&) const = default;
  bool contains(const Triple& t) const;
  const PersonaFact* find_relation(const std::string& relation) const;
};

enum class TurnKind { assert_fact, ask, remark };

struct Turn {
  int speaker = 0;
  std::string text;
  std::optional<Triple> triple;
  TurnKind kind = TurnKind::remark;
  /// Relation asked about, for kind == ask.
  std::string topic;

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  PersonaSet persona_a;
  PersonaSet persona_b;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
  const PersonaSet& persona_of(int speaker) const { return speaker == 0 ? persona_a : persona_b; }
};

enum class Label { entail, contradict, neutral };

/// One offline training sample.
struct CandidateRecord {
  PersonaSet persona;
  std::vector<Turn> context;
  std::string candidate;
  Triple candidate_triple;
  Label label = Label::entail;
  int reward = 1;

  bool operator==(const CandidateRecord&) const = default;
};

enum class Category { gold, entail, neutral, contradict };

struct EvalCandidate {
  std::string text;
  Category category = Category::neutral;
  Triple triple;

  bool operator==(const EvalCandidate&) const = default;
};

struct EvalItem {
  PersonaSet persona;
  std::vector<Turn> context;
  std::vector<EvalCandidate> candidates;

  bool operator==(const EvalItem&) const = default;
};

inline constexpr std::size_t kEvalEntail = 10;
inline constexpr std::size_t kEvalNeutral = 10;
inline constexpr std::size_t kEvalContradict = 10;
inline constexpr std::size_t kEvalCandidates = 1 + kEvalEntail + kEvalNeutral + kEvalContradict;

/// Synthetic triple-grounded world: entities, relations and surface forms.
struct World {
  std::uint64_t seed = 0;
  /// Speaker entity; entities[0].
  std::string subject = "i";
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  /// Discourse openers placed before an asserted sentence ("" = none).
  std::vector<std::string> prefixes;
  /// Triple-free filler utterances.
  std::vector<std::string> chitchat;
  /// Content tokens, sorted.
  std::vector<std::string> vocab;

  bool operator==(const World&) const = default;

  const Relation* find_relation(const std::string& name) const;
  const Relation& relation(const std::string& name) const;
  bool has_entity(const std::string& name) const;
  /// Number of distinct single-triple persona facts.
  std::size_t persona_pool_size() const;
  std::string render(const Triple& t, std::size_t template_index) const;
};

World build_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations);

std::string label_name(Label l);
Label parse_label(const std::string& s);
std::string category_name(Category c);
Category parse_category(const std::string& s);

/// Exact triple entailment. Entail takes precedence over contradict.
Label entailment_oracle(const World& world, const Triple& candidate, const PersonaSet& persona);

/// Conservative "any entity overlap" between two triples: same relation and a
/// shared subject or object.
bool entity_overlap(const Triple& a, const Triple& b);

PersonaSet sample_persona(const World& world, std::size_t k, std::uint64_t seed);

std::vector<Dialogue> synthesize_dialogues(const World& world, std::size_t n, std::size_t turns,
                                           std::uint64_t seed);

/// A sentence pair in the style of a dialogue-NLI corpus.
struct NliPair {
  std::string sentence;
  std::string persona_sentence;
  Label label = Label::neutral;
  Triple sentence_triple;
  Triple persona_triple;
};

/// Synthetic sentence pairs drawn from the dialogues' triple-bearing turns.
std::vector<NliPair> generate_pairs(const World& world, const std::vector<Dialogue>& dialogues,
                                    std::uint64_t seed);

struct MappingResult {
  std::vector<CandidateRecord> records;
  std::size_t unmatched = 0;
  std::size_t neutral_dropped = 0;
};

/// Inserts each pair's persona sentence into the persona of every speaker who
/// uttered the pair's sentence, drops overlapping persona facts and neutral
/// pairs, and emits +1/-1 reward records.
MappingResult map_and_filter(const World& world, const std::vector<Dialogue>& dialogues,
                             const std::vector<NliPair>& pairs);

/// Dialogues -> pairs -> records, truncated to max_records when nonzero.
std::vector<CandidateRecord> build_training_records(const World& world, std::size_t n_dialogues,
                                                    std::size_t turns, std::uint64_t seed,
                                                    std::size_t max_records = 0);

std::vector<EvalItem> build_eval_set(const World& world, std::size_t n_items, std::uint64_t seed);

/// Maps a surface utterance back to its triple, if it renders one.
std::optional<Triple> parse_utterance(const World& world, const std::string& text);

// Persistence. Line-delimited JSON with a versioned header line.
void save_records(const std::filesystem::path& path, const std::vector<CandidateRecord>& records);
std::vector<CandidateRecord> load_records(const std::filesystem::path& path);
void save_eval_set(const std::filesystem::path& path, const std::vector<EvalItem>& items);
std::vector<EvalItem> load_eval_set(const std::filesystem::path& path);
void save_world(const std::filesystem::path& path, const World& world);
World load_world(const std::filesystem::path& path);
void save_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);
std::vector<Dialogue> load_dialogues(const std::filesystem::path& path);

std::string serialize_world(const World& world);

}  // namespace pcrl
