#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pcrl/common.hpp"
#include "pcrl/corpus.hpp"

namespace pcrl {

using nlohmann::json;

namespace {

json to_json(const Triple& t) { return {{"s", t.subject}, {"r", t.relation}, {"o", t.object}}; }

Triple triple_from(const json& j) {
  return {j.at("s").get<std::string>(), j.at("r").get<std::string>(), j.at("o").get<std::string>()};
}

json to_json(const PersonaSet& p) {
  json arr = json::array();
  for (const auto& f : p.facts) arr.push_back({{"text", f.text}, {"triple", to_json(f.triple)}});
  return arr;
}

PersonaSet persona_from(const json& j) {
  PersonaSet p;
  for (const auto& f : j) p.facts.push_back({f.at("text").get<std::string>(), triple_from(f.at("triple"))});
  return p;
}

const char* kind_name(TurnKind k) {
  switch (k) {
    case TurnKind::assert_fact: return "assert";
    case TurnKind::ask: return "ask";
    case TurnKind::remark: return "remark";
  }
  return "?";
}

TurnKind kind_from(const std::string& s) {
  if (s == "assert") return TurnKind::assert_fact;
  if (s == "ask") return TurnKind::ask;
  if (s == "remark") return TurnKind::remark;
  throw DataError("unknown turn kind '" + s + "'");
}

json to_json(const std::vector<Turn>& turns) {
  json arr = json::array();
  for (const auto& t : turns) {
    json j = {{"speaker", t.speaker}, {"text", t.text}, {"kind", kind_name(t.kind)}};
    if (t.triple) j["triple"] = to_json(*t.triple);
    if (!t.topic.empty()) j["topic"] = t.topic;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<Turn> turns_from(const json& j) {
  std::vector<Turn> out;
  for (const auto& t : j) {
    Turn turn;
    turn.speaker = t.at("speaker").get<int>();
    turn.text = t.at("text").get<std::string>();
    turn.kind = kind_from(t.value("kind", std::string("remark")));
    if (t.contains("triple")) turn.triple = triple_from(t.at("triple"));
    turn.topic = t.value("topic", std::string());
    out.push_back(std::move(turn));
  }
  return out;
}

json to_json(const CandidateRecord& r) {
  return {{"persona", to_json(r.persona)}, {"context", to_json(r.context)}, {"candidate", r.candidate},
          {"triple", to_json(r.candidate_triple)}, {"label", label_name(r.label)}, {"reward", r.reward}};
}

CandidateRecord record_from(const json& j) {
  CandidateRecord r;
  r.persona = persona_from(j.at("persona"));
  r.context = turns_from(j.at("context"));
  r.candidate = j.at("candidate").get<std::string>();
  r.candidate_triple = triple_from(j.at("triple"));
  r.label = parse_label(j.at("label").get<std::string>());
  r.reward = j.at("reward").get<int>();
  if (r.label == Label::neutral) throw DataError("neutral records are not valid training data");
  if (r.reward != (r.label == Label::entail ? 1 : -1)) throw DataError("reward does not match label");
  return r;
}

json to_json(const EvalItem& item) {
  json cands = json::array();
  for (const auto& c : item.candidates)
    cands.push_back({{"text", c.text}, {"category", category_name(c.category)}, {"triple", to_json(c.triple)}});
  return {{"persona", to_json(item.persona)}, {"context", to_json(item.context)}, {"candidates", cands}};
}

EvalItem eval_from(const json& j) {
  EvalItem item;
  item.persona = persona_from(j.at("persona"));
  item.context = turns_from(j.at("context"));
  for (const auto& c : j.at("candidates"))
    item.candidates.push_back(
        {c.at("text").get<std::string>(), parse_category(c.at("category").get<std::string>()), triple_from(c.at("triple"))});
  return item;
}

json to_json(const Dialogue& d) {
  return {{"persona_a", to_json(d.persona_a)}, {"persona_b", to_json(d.persona_b)}, {"turns", to_json(d.turns)}};
}

Dialogue dialogue_from(const json& j) {
  return {persona_from(j.at("persona_a")), persona_from(j.at("persona_b")), turns_from(j.at("turns"))};
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  return out;
}

template <typename T, typename ToJson>
void save_lines(const std::filesystem::path& path, const std::string& type, const std::vector<T>& items,
                ToJson&& to) {
  auto out = open_out(path);
  out << json{{"format_version", kFormatVersion}, {"type", type}, {"count", items.size()}}.dump() << '\n';
  for (const auto& it : items) out << to(it).dump() << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

// Empty file -> empty list. Otherwise the first line is the header.
template <typename T, typename FromJson>
std::vector<T> load_lines(const std::filesystem::path& path, const std::string& type, FromJson&& from) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      if (!have_header) {
        if (j.value("format_version", -1) != kFormatVersion)
          throw DataError("unsupported format_version");
        if (j.value("type", std::string()) != type)
          throw DataError("expected a '" + type + "' file");
        expected = j.value("count", std::size_t{0});
        have_header = true;
        continue;
      }
      out.push_back(from(j));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed line: " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (have_header && out.size() != expected)
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(expected) +
                    " records, found " + std::to_string(out.size()));
  return out;
}

json world_json(const World& w) {
  json rels = json::array();
  for (const auto& r : w.relations)
    rels.push_back({{"name", r.name}, {"exclusive", r.exclusive}, {"templates", r.templates},
                    {"objects", r.objects}, {"question", r.question}});
  return {{"format_version", kFormatVersion}, {"type", "world"}, {"seed", w.seed},
          {"subject", w.subject}, {"entities", w.entities}, {"relations", rels},
          {"prefixes", w.prefixes}, {"chitchat", w.chitchat}, {"vocab", w.vocab},
          {"persona_pool_size", w.persona_pool_size()}};
}

}  // namespace

void save_records(const std::filesystem::path& path, const std::vector<CandidateRecord>& records) {
  save_lines(path, "corpus", records, [](const CandidateRecord& r) { return to_json(r); });
}

std::vector<CandidateRecord> load_records(const std::filesystem::path& path) {
  return load_lines<CandidateRecord>(path, "corpus", record_from);
}

void save_eval_set(const std::filesystem::path& path, const std::vector<EvalItem>& items) {
  save_lines(path, "eval", items, [](const EvalItem& i) { return to_json(i); });
}

std::vector<EvalItem> load_eval_set(const std::filesystem::path& path) {
  return load_lines<EvalItem>(path, "eval", eval_from);
}

void save_dialogues(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  save_lines(path, "dialogues", dialogues, [](const Dialogue& d) { return to_json(d); });
}

std::vector<Dialogue> load_dialogues(const std::filesystem::path& path) {
  return load_lines<Dialogue>(path, "dialogues", dialogue_from);
}

std::string serialize_world(const World& world) { return world_json(world).dump(2); }

void save_world(const std::filesystem::path& path, const World& world) {
  auto out = open_out(path);
  out << serialize_world(world) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

World load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    const json j = json::parse(ss.str());
    if (j.value("format_version", -1) != kFormatVersion)
      throw DataError(path.string() + ": unsupported format_version");
    World w;
    w.seed = j.at("seed").get<std::uint64_t>();
    w.subject = j.at("subject").get<std::string>();
    w.entities = j.at("entities").get<std::vector<std::string>>();
    for (const auto& r : j.at("relations")) {
      Relation rel;
      rel.name = r.at("name").get<std::string>();
      rel.exclusive = r.at("exclusive").get<bool>();
      rel.templates = r.at("templates").get<std::vector<std::string>>();
      rel.objects = r.at("objects").get<std::vector<std::string>>();
      rel.question = r.at("question").get<std::string>();
      if (rel.templates.empty()) throw DataError("relation " + rel.name + " has no templates");
      w.relations.push_back(std::move(rel));
    }
    w.prefixes = j.at("prefixes").get<std::vector<std::string>>();
    w.chitchat = j.at("chitchat").get<std::vector<std::string>>();
    w.vocab = j.at("vocab").get<std::vector<std::string>>();
    return w;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed world file: " + e.what());
  }
}

}  // namespace pcrl
