#include "pcrl/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pcrl/common.hpp"

namespace pcrl {

using nlohmann::json;
namespace fs = std::filesystem;

StagedDir::StagedDir(fs::path dir, bool force) : dir_(std::move(dir)) {
  if (dir_.empty()) throw ConfigError("output directory not given");
  if (fs::exists(dir_) && !force)
    throw ConfigError("refusing to overwrite existing output '" + dir_.string() + "' (pass --force)");
  tmp_ = dir_;
  tmp_ += ".partial";
  fs::remove_all(tmp_);
  fs::create_directories(tmp_);
}

StagedDir::~StagedDir() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
  }
}

void StagedDir::commit() {
  if (committed_) return;
  fs::remove_all(dir_);
  if (dir_.has_parent_path()) fs::create_directories(dir_.parent_path());
  fs::rename(tmp_, dir_);
  committed_ = true;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

void split_by_reward(const std::vector<CandidateRecord>& mixed, std::vector<CandidateRecord>& pos,
                     std::vector<CandidateRecord>& neg) {
  pos.clear();
  neg.clear();
  for (const auto& r : mixed) (r.reward > 0 ? pos : neg).push_back(r);
}

GenSummary generate_data(const GenConfig& cfg, const fs::path& dir) {
  const World world = build_world(cfg.seed, cfg.entities, cfg.relations);
  const std::uint64_t corpus_seed = derive_seed(cfg.seed, 1);
  // Round 0 of build_training_records: the dialogues the records are mapped onto.
  const auto dialogues = synthesize_dialogues(world, cfg.dialogues, cfg.turns, derive_seed(corpus_seed, 100));
  const auto records = build_training_records(world, cfg.dialogues, cfg.turns, corpus_seed, cfg.records);
  const auto items = build_eval_set(world, cfg.eval_items, derive_seed(cfg.seed, 2));

  std::vector<CandidateRecord> pool = build_training_records(world, cfg.heldout_dialogues, cfg.turns,
                                                             derive_seed(cfg.seed, 3), 0);
  std::vector<CandidateRecord> pos, neg, heldout;
  split_by_reward(pool, pos, neg);
  if (pos.size() < cfg.heldout_per_sign || neg.size() < cfg.heldout_per_sign)
    throw GenerationError("held-out pool too small: " + std::to_string(pos.size()) + " positives, " +
                          std::to_string(neg.size()) + " negatives; raise heldout_dialogues");
  heldout.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(cfg.heldout_per_sign));
  heldout.insert(heldout.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(cfg.heldout_per_sign));

  save_world(dir / "world.json", world);
  save_dialogues(dir / "dialogues.jsonl", dialogues);
  save_records(dir / "corpus.jsonl", records);
  save_eval_set(dir / "eval.jsonl", items);
  save_records(dir / "heldout.jsonl", heldout);

  GenSummary s;
  s.dialogues = dialogues.size();
  s.records = records.size();
  for (const auto& r : records) (r.reward > 0 ? s.positives : s.negatives)++;
  s.eval_items = items.size();
  s.heldout_pos = s.heldout_neg = cfg.heldout_per_sign;
  s.corpus_hash = file_hash(dir / "corpus.jsonl");

  json j = {{"seed", cfg.seed},
            {"dialogues", s.dialogues},
            {"records", s.records},
            {"positive_records", s.positives},
            {"negative_records", s.negatives},
            {"neutral_records", 0},
            {"eval_items", s.eval_items},
            {"heldout_positive", s.heldout_pos},
            {"heldout_negative", s.heldout_neg},
            {"corpus_hash", s.corpus_hash},
            {"eval_hash", file_hash(dir / "eval.jsonl")},
            {"world_hash", file_hash(dir / "world.json")}};
  std::ofstream(dir / "gen.json") << j.dump(2) << "\n";
  return s;
}

MleLog pretrain(const World& world, const std::vector<Dialogue>& dialogues, const PretrainConfig& cfg,
                const fs::path& dir, std::ostream& log) {
  if (dialogues.empty()) throw ContractError("pretrain: no dialogues");
  PolicyModel model = PolicyModel::create(world, cfg.seed);
  AdamState opt = make_adam(model, cfg.lr);
  const auto examples = dialogue_examples(model, dialogues);
  MleOptions o;
  o.epochs = cfg.epochs;
  o.batch_size = cfg.batch_size;
  o.seed = cfg.seed;
  o.checkpoint_dir = dir / "epochs";
  o.on_epoch = [&](std::size_t epoch, double nll) {
    log << "  mle epoch " << epoch << "  train NLL/token " << std::fixed << std::setprecision(4) << nll << "\n"
        << std::defaultfloat << std::flush;
  };
  log << "  mle: " << examples.size() << " examples, " << model.net.num_params() << " parameters\n" << std::flush;
  const MleLog result = mle_train(model, examples, opt, o);
  save_checkpoint(dir / "model.ckpt", model, opt);
  std::ofstream csv(dir / "mle_log.csv");
  csv << "epoch,train_nll\n";
  char buf[64];
  for (std::size_t e = 0; e < result.epoch_nll.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g\n", e, result.epoch_nll[e]);
    csv << buf;
  }
  return result;
}

std::vector<Prompt> prompts_from_records(const std::vector<CandidateRecord>& records, std::size_t limit) {
  std::vector<Prompt> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : records) {
    if (limit && out.size() >= limit) break;
    std::string persona, context;
    for (const auto& f : r.persona.facts) persona += f.text + "|";
    for (const auto& t : r.context) context += t.text + "|";
    if (seen.emplace(persona, context).second) out.push_back({r.persona, r.context});
  }
  return out;
}

namespace {

json train_config_json(const TrainConfig& c) {
  return {{"method", method_name(c.method)}, {"lr", c.lr},       {"alpha", c.alpha}, {"gamma", c.gamma},
          {"epochs", c.epochs},              {"batch", c.batch_size}, {"seed", c.seed}};
}

}  // namespace

TrajectoryLog train_policy(const World& world, const fs::path& mle_ckpt, const std::vector<CandidateRecord>& records,
                           const std::vector<CandidateRecord>& heldout, const TrainConfig& cfg,
                           std::size_t online_prompts, const fs::path& dir, std::ostream& log) {
  if (mle_ckpt.empty() || !fs::exists(mle_ckpt))
    throw ConfigError("RL training requires an MLE-initialized policy: checkpoint '" + mle_ckpt.string() +
                      "' not found (run `pcrl pretrain` first)");
  const Vocab vocab(world.vocab);
  Checkpoint ck = load_checkpoint(mle_ckpt, vocab);
  std::vector<CandidateRecord> pos, neg;
  split_by_reward(heldout, pos, neg);

  TrainHooks hooks;
  hooks.dump_dir = dir;
  hooks.on_epoch = [&](const TrajectoryRow& r) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "  %s epoch %zu  pos NLL %.4f  neg NLL %.4f  mean w %.4f  CoV %.4f  reward %.4f\n",
                  method_name(cfg.method).c_str(), r.epoch, r.pos_nll, r.neg_nll, r.mean_weight, r.weight_cov,
                  r.mean_reward);
    log << buf << std::flush;
  };
  TrajectoryLog traj;
  if (cfg.method == Method::online)
    traj = online_train(ck.model, world, prompts_from_records(records, online_prompts), cfg, pos, neg, hooks);
  else
    traj = offline_train(ck.model, records, cfg, pos, neg, hooks);

  save_checkpoint(dir / "model.ckpt", ck.model, AdamState{});
  write_trajectory_csv(dir / "trajectory.csv", traj);
  json run = train_config_json(cfg);
  run["mle_checkpoint_hash"] = file_hash(mle_ckpt);
  run["records"] = records.size();
  if (cfg.method == Method::online) run["online_prompts"] = online_prompts;
  std::ofstream(dir / "run.json") << run.dump(2) << "\n";
  return traj;
}

Report evaluate_checkpoint(const World& world, const fs::path& ckpt, const std::vector<EvalItem>& items,
                           const std::string& tag) {
  const Checkpoint ck = load_checkpoint(ckpt, Vocab(world.vocab));
  Report r;
  r.metrics = compute_metrics(rank_items(ck.model, items), tag);
  check_partition(r.metrics);
  return r;
}

std::vector<WeightStats> variance_stats(const World& world, const fs::path& ckpt,
                                        const std::vector<CandidateRecord>& records, const std::vector<Method>& methods,
                                        double alpha, std::size_t bootstrap_n, std::uint64_t seed) {
  const Checkpoint ck = load_checkpoint(ckpt, Vocab(world.vocab));
  std::vector<WeightStats> out;
  for (Method m : methods) out.push_back(weight_stats(ck.model, records, m, alpha, bootstrap_n, seed));
  return out;
}

std::string manifest_to_json(const Manifest& m) {
  json methods = json::array(), vmethods = json::array();
  for (Method x : m.methods) methods.push_back(method_name(x));
  for (Method x : m.variance_methods) vmethods.push_back(method_name(x));
  json j = {
      {"format_version", kFormatVersion},
      {"gen",
       {{"seed", m.gen.seed},
        {"entities", m.gen.entities},
        {"relations", m.gen.relations},
        {"dialogues", m.gen.dialogues},
        {"turns", m.gen.turns},
        {"records", m.gen.records},
        {"eval_items", m.gen.eval_items},
        {"heldout_dialogues", m.gen.heldout_dialogues},
        {"heldout_per_sign", m.gen.heldout_per_sign}}},
      {"pretrain",
       {{"epochs", m.pretrain.epochs}, {"lr", m.pretrain.lr}, {"batch", m.pretrain.batch_size}, {"seed", m.pretrain.seed}}},
      {"train",
       {{"methods", methods},
        {"lr", m.train.lr},
        {"alpha", m.train.alpha},
        {"gamma", m.train.gamma},
        {"epochs", m.train.epochs},
        {"batch", m.train.batch_size},
        {"seed", m.train.seed},
        {"online_lr", m.online_lr},
        {"online_prompts", m.online_prompts}}},
      {"variance", {{"methods", vmethods}, {"bootstrap_n", m.bootstrap_n}, {"seed", m.bootstrap_seed}}}};
  return j.dump(2) + "\n";
}

namespace {

template <typename T>
void read_field(const json& obj, const char* section, const char* key, T& into, std::set<std::string>& used) {
  used.insert(key);
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("manifest: ") + section + "." + key + " has the wrong type");
  }
}

void reject_unknown(const json& obj, const char* section, const std::set<std::string>& used) {
  for (const auto& [k, v] : obj.items())
    if (!used.count(k)) throw ConfigError(std::string("manifest: unknown key ") + section + "." + k);
}

std::vector<Method> read_methods(const json& obj, const char* key, std::vector<Method> dflt, std::set<std::string>& used) {
  used.insert(key);
  if (!obj.contains(key)) return dflt;
  std::vector<Method> out;
  for (const auto& v : obj.at(key)) out.push_back(parse_method(v.get<std::string>()));
  return out;
}

}  // namespace

Manifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("manifest must be a JSON object");
  Manifest m;
  std::set<std::string> top = {"format_version"};
  if (j.contains("format_version") && j["format_version"] != kFormatVersion)
    throw ConfigError("manifest format_version " + j["format_version"].dump() + " is not supported");
  auto section = [&](const char* name) -> json {
    top.insert(name);
    if (!j.contains(name)) return json::object();
    if (!j[name].is_object()) throw ConfigError(std::string("manifest: ") + name + " must be an object");
    return j[name];
  };
  {
    const json s = section("gen");
    std::set<std::string> used;
    read_field(s, "gen", "seed", m.gen.seed, used);
    read_field(s, "gen", "entities", m.gen.entities, used);
    read_field(s, "gen", "relations", m.gen.relations, used);
    read_field(s, "gen", "dialogues", m.gen.dialogues, used);
    read_field(s, "gen", "turns", m.gen.turns, used);
    read_field(s, "gen", "records", m.gen.records, used);
    read_field(s, "gen", "eval_items", m.gen.eval_items, used);
    read_field(s, "gen", "heldout_dialogues", m.gen.heldout_dialogues, used);
    read_field(s, "gen", "heldout_per_sign", m.gen.heldout_per_sign, used);
    reject_unknown(s, "gen", used);
  }
  {
    const json s = section("pretrain");
    std::set<std::string> used;
    read_field(s, "pretrain", "epochs", m.pretrain.epochs, used);
    read_field(s, "pretrain", "lr", m.pretrain.lr, used);
    read_field(s, "pretrain", "batch", m.pretrain.batch_size, used);
    read_field(s, "pretrain", "seed", m.pretrain.seed, used);
    reject_unknown(s, "pretrain", used);
  }
  {
    const json s = section("train");
    std::set<std::string> used;
    m.methods = read_methods(s, "methods", m.methods, used);
    read_field(s, "train", "lr", m.train.lr, used);
    read_field(s, "train", "alpha", m.train.alpha, used);
    read_field(s, "train", "gamma", m.train.gamma, used);
    read_field(s, "train", "epochs", m.train.epochs, used);
    read_field(s, "train", "batch", m.train.batch_size, used);
    read_field(s, "train", "seed", m.train.seed, used);
    read_field(s, "train", "online_lr", m.online_lr, used);
    read_field(s, "train", "online_prompts", m.online_prompts, used);
    reject_unknown(s, "train", used);
  }
  {
    const json s = section("variance");
    std::set<std::string> used;
    m.variance_methods = read_methods(s, "methods", m.variance_methods, used);
    read_field(s, "variance", "bootstrap_n", m.bootstrap_n, used);
    read_field(s, "variance", "seed", m.bootstrap_seed, used);
    reject_unknown(s, "variance", used);
  }
  reject_unknown(j, "(top level)", top);

  for (Method x : m.methods)
    if (x == Method::mle) throw ConfigError("manifest: train.methods must not contain mle (it is the pretrain stage)");
  TrainConfig probe = m.train;
  probe.validate();
  if (!(m.online_lr > 0.0)) throw ConfigError("manifest: train.online_lr must be positive");
  if (!(m.pretrain.lr > 0.0)) throw ConfigError("manifest: pretrain.lr must be positive");
  if (m.pretrain.batch_size == 0) throw ConfigError("manifest: pretrain.batch must be positive");
  return m;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_json(ss.str());
}

void run_pipeline(const Manifest& m, const fs::path& out, bool force, std::ostream& log) {
  StagedDir stage(out, force);
  const fs::path root = stage.path();
  std::ofstream(root / "manifest.json") << manifest_to_json(m);

  log << "[gen] world seed " << m.gen.seed << "\n" << std::flush;
  const fs::path data = root / "data";
  fs::create_directories(data);
  const GenSummary gs = generate_data(m.gen, data);
  log << "  " << gs.dialogues << " dialogues, " << gs.records << " records (" << gs.positives << " +1, "
      << gs.negatives << " -1), " << gs.eval_items << " eval items, corpus " << gs.corpus_hash << "\n";

  const World world = load_world(data / "world.json");
  const auto records = load_records(data / "corpus.jsonl");
  const auto heldout = load_records(data / "heldout.jsonl");
  const auto items = load_eval_set(data / "eval.jsonl");

  log << "[pretrain]\n" << std::flush;
  fs::create_directories(root / "mle");
  pretrain(world, load_dialogues(data / "dialogues.jsonl"), m.pretrain, root / "mle", log);
  const fs::path mle_ckpt = root / "mle" / "model.ckpt";

  std::vector<std::pair<std::string, std::optional<TrajectoryLog>>> models = {{"mle", std::nullopt}};
  for (Method method : m.methods) {
    const std::string tag = method_name(method);
    log << "[train " << tag << "]\n" << std::flush;
    TrainConfig cfg = m.train;
    cfg.method = method;
    if (method == Method::online) cfg.lr = m.online_lr;
    fs::create_directories(root / tag);
    models.emplace_back(tag, train_policy(world, mle_ckpt, records, heldout, cfg, m.online_prompts, root / tag, log));
  }

  log << "[variance]\n" << std::flush;
  std::vector<WeightStats> weights;
  if (!m.variance_methods.empty()) {
    weights = variance_stats(world, mle_ckpt, heldout, m.variance_methods, m.train.alpha, m.bootstrap_n,
                             m.bootstrap_seed);
    fs::create_directories(root / "variance");
    json arr = json::array();
    for (const auto& w : weights) arr.push_back(json::parse(report_to_json(Report{{}, std::nullopt, {w}}))["weights"][0]);
    std::ofstream(root / "variance" / "variance.json") << arr.dump(2) << "\n";
    std::ofstream(root / "variance" / "variance.txt") << format_weight_table(weights);
    log << format_weight_table(weights);
  }

  log << "[eval]\n" << std::flush;
  std::vector<MetricsReport> metrics;
  for (const auto& [tag, traj] : models) {
    const fs::path ckpt = tag == "mle" ? mle_ckpt : root / tag / "model.ckpt";
    Report r = evaluate_checkpoint(world, ckpt, items, tag);
    r.trajectory = traj;
    if (tag == "mle") r.weights = weights;
    write_report(root / "eval" / tag, r);
    metrics.push_back(r.metrics);
  }
  const std::vector<MetricsReport> others(metrics.begin() + 1, metrics.end());
  const std::string table = format_comparison(metrics.front(), others);
  std::ofstream(root / "eval" / "comparison.txt") << table;
  log << table << std::flush;

  stage.commit();
  log << "[done] " << out.string() << "\n" << std::flush;
}

}  // namespace pcrl
