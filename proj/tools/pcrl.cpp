// pcrl: generate data, pretrain, fine-tune, evaluate and inspect persona-consistent policies.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcrl/common.hpp"
#include "pcrl/corpus.hpp"
#include "pcrl/evaluation.hpp"
#include "pcrl/pipeline.hpp"
#include "pcrl/policy.hpp"
#include "pcrl/training.hpp"

using namespace pcrl;
namespace fs = std::filesystem;

namespace {

// Input files default to the layout written by `pcrl gen` under --data.
struct Inputs {
  fs::path data, world, dialogues, corpus, eval, heldout;

  void add(CLI::App* app, bool dialogues_flag, bool corpus_flag, bool eval_flag, bool heldout_flag) {
    app->add_option("--data", data, "Directory written by `pcrl gen`; fills in the file defaults below");
    app->add_option("--world", world, "World file (world.json)");
    if (dialogues_flag) app->add_option("--dialogues", dialogues, "Dialogue file (dialogues.jsonl)");
    if (corpus_flag) app->add_option("--corpus", corpus, "Training records (corpus.jsonl)");
    if (eval_flag) app->add_option("--eval", eval, "Evaluation items (eval.jsonl)");
    if (heldout_flag) app->add_option("--heldout", heldout, "Held-out mixed records (heldout.jsonl)");
  }

  static fs::path resolve(const fs::path& given, const fs::path& data, const char* file, const char* flag) {
    fs::path p = given;
    if (p.empty()) {
      if (data.empty()) throw ConfigError(std::string("missing input: pass ") + flag + " or --data");
      p = data / file;
    }
    if (!fs::exists(p)) throw ConfigError(std::string("input ") + flag + " '" + p.string() + "' does not exist");
    return p;
  }
  fs::path world_path() const { return resolve(world, data, "world.json", "--world"); }
  fs::path dialogues_path() const { return resolve(dialogues, data, "dialogues.jsonl", "--dialogues"); }
  fs::path corpus_path() const { return resolve(corpus, data, "corpus.jsonl", "--corpus"); }
  fs::path eval_path() const { return resolve(eval, data, "eval.jsonl", "--eval"); }
  fs::path heldout_path() const { return resolve(heldout, data, "heldout.jsonl", "--heldout"); }
};

fs::path existing(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string("missing required ") + flag);
  if (!fs::exists(p)) throw ConfigError(std::string(flag) + " '" + p.string() + "' does not exist");
  return p;
}

struct Quiet {
  bool on = false;
  std::ostringstream sink;
  std::ostream& log() { return on ? static_cast<std::ostream&>(sink) : std::cerr; }
};

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(parse_method(item));
  if (out.empty()) throw ConfigError("empty method list");
  return out;
}

// "<dir>/model.ckpt" is tagged by its directory, anything else by its stem.
std::string tag_for(const fs::path& ckpt) {
  if (ckpt.stem() == "model" && ckpt.has_parent_path()) return fs::absolute(ckpt).parent_path().filename().string();
  return ckpt.stem().string();
}

std::optional<TrajectoryLog> trajectory_beside(const fs::path& ckpt) {
  const fs::path dir = ckpt.parent_path();
  if (!fs::exists(dir / "trajectory.csv") || !fs::exists(dir / "run.json")) return std::nullopt;
  std::ifstream in(dir / "run.json");
  const auto run = nlohmann::json::parse(in, nullptr, false);
  if (run.is_discarded() || !run.contains("method")) return std::nullopt;
  return read_trajectory_csv(dir / "trajectory.csv", parse_method(run["method"].get<std::string>()));
}

// --- subcommands -----------------------------------------------------------

struct GenArgs {
  GenConfig cfg;
  fs::path out;
  bool force = false;
};

void cmd_gen(const GenArgs& a) {
  StagedDir stage(a.out, a.force);
  const GenSummary s = generate_data(a.cfg, stage.path());
  stage.commit();
  std::printf("wrote %s\n", a.out.string().c_str());
  std::printf("  dialogues     %zu\n", s.dialogues);
  std::printf("  records       %zu  (+1: %zu, -1: %zu, neutral: 0)\n", s.records, s.positives, s.negatives);
  std::printf("  eval items    %zu\n", s.eval_items);
  std::printf("  held-out      %zu positive, %zu negative\n", s.heldout_pos, s.heldout_neg);
  std::printf("  corpus hash   %s\n", s.corpus_hash.c_str());
}

struct PretrainArgs {
  Inputs in;
  PretrainConfig cfg;
  fs::path out;
  bool force = false;
};

void cmd_pretrain(const PretrainArgs& a, std::ostream& log) {
  const World world = load_world(a.in.world_path());
  const auto dialogues = load_dialogues(a.in.dialogues_path());
  StagedDir stage(a.out, a.force);
  const MleLog m = pretrain(world, dialogues, a.cfg, stage.path(), log);
  stage.commit();
  std::printf("wrote %s (train NLL/token %.4f -> %.4f)\n", (a.out / "model.ckpt").string().c_str(),
              m.epoch_nll.front(), m.epoch_nll.back());
}

struct TrainArgs {
  Inputs in;
  TrainConfig cfg;
  std::string method = "varmi";
  fs::path ckpt, out;
  std::size_t online_prompts = 2000;
  bool force = false;
};

void cmd_train(TrainArgs a, std::ostream& log) {
  a.cfg.method = parse_method(a.method);
  if (a.cfg.method == Method::mle) throw ConfigError("--method mle is the pretrain stage; use `pcrl pretrain`");
  a.cfg.validate();
  const World world = load_world(a.in.world_path());
  const auto records = load_records(a.in.corpus_path());
  const auto heldout = load_records(a.in.heldout_path());
  if (a.ckpt.empty() || !fs::exists(a.ckpt))
    throw ConfigError("RL training requires an MLE-initialized policy: checkpoint '" + a.ckpt.string() +
                      "' not found (run `pcrl pretrain` first and pass its model.ckpt via --ckpt)");
  StagedDir stage(a.out, a.force);
  const TrajectoryLog t = train_policy(world, a.ckpt, records, heldout, a.cfg, a.online_prompts, stage.path(), log);
  stage.commit();
  const auto& first = t.rows.front();
  const auto& last = t.rows.back();
  std::printf("wrote %s\n", (a.out / "model.ckpt").string().c_str());
  std::printf("  held-out NLL  positive %.4f -> %.4f   negative %.4f -> %.4f\n", first.pos_nll, last.pos_nll,
              first.neg_nll, last.neg_nll);
}

struct EvalArgs {
  Inputs in;
  std::vector<fs::path> ckpts;
  std::vector<std::string> tags;
  fs::path out;
  bool force = false;
};

void cmd_eval(const EvalArgs& a) {
  if (a.ckpts.empty()) throw ConfigError("pass at least one --ckpt");
  if (!a.tags.empty() && a.tags.size() != a.ckpts.size()) throw ConfigError("--tag must be given once per --ckpt");
  const World world = load_world(a.in.world_path());
  const auto items = load_eval_set(a.in.eval_path());
  std::vector<std::string> tags;
  for (std::size_t i = 0; i < a.ckpts.size(); ++i) {
    existing(a.ckpts[i], "--ckpt");
    tags.push_back(a.tags.empty() ? tag_for(a.ckpts[i]) : a.tags[i]);
  }
  for (std::size_t i = 0; i < tags.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (tags[i] == tags[j]) throw ConfigError("duplicate model tag '" + tags[i] + "'; disambiguate with --tag");

  StagedDir stage(a.out, a.force);
  std::vector<MetricsReport> metrics;
  for (std::size_t i = 0; i < a.ckpts.size(); ++i) {
    Report r = evaluate_checkpoint(world, a.ckpts[i], items, tags[i]);
    r.trajectory = trajectory_beside(a.ckpts[i]);
    write_report(stage.path() / tags[i], r);
    metrics.push_back(r.metrics);
  }
  const std::string table =
      format_comparison(metrics.front(), std::vector<MetricsReport>(metrics.begin() + 1, metrics.end()));
  std::ofstream(stage.path() / "comparison.txt") << table;
  stage.commit();
  std::cout << table;
}

struct VarianceArgs {
  Inputs in;
  fs::path ckpt, out;
  std::string methods = "gold,varmi";
  double alpha = 0.05;
  std::size_t bootstrap_n = 1000;
  std::uint64_t seed = 17;
  bool force = false;
};

void cmd_variance(const VarianceArgs& a) {
  const World world = load_world(a.in.world_path());
  const auto records = load_records(a.in.heldout_path());
  existing(a.ckpt, "--ckpt");
  const auto stats = variance_stats(world, a.ckpt, records, parse_methods(a.methods), a.alpha, a.bootstrap_n, a.seed);
  StagedDir stage(a.out, a.force);
  Report r;
  r.weights = stats;
  const auto j = nlohmann::json::parse(report_to_json(r));
  std::ofstream(stage.path() / "variance.json") << j["weights"].dump(2) << "\n";
  const std::string table = format_weight_table(stats);
  std::ofstream(stage.path() / "variance.txt") << table;
  stage.commit();
  std::cout << table;
}

struct ChatArgs {
  Inputs in;
  fs::path ckpt, transcript = "transcript.txt";
  std::uint64_t seed = 0;
  std::size_t persona_size = 4;
  double temperature = 0.0;
  std::size_t top_k = 0;
};

void cmd_chat(const ChatArgs& a) {
  const World world = load_world(a.in.world_path());
  const Checkpoint ck = load_checkpoint(existing(a.ckpt, "--ckpt"), Vocab(world.vocab));
  const PersonaSet persona = sample_persona(world, a.persona_size, a.seed);
  DecodingConfig dc;
  if (a.top_k > 0) {
    dc.mode = DecodingConfig::Mode::top_k;
    dc.k = a.top_k;
    dc.temperature = a.temperature > 0.0 ? a.temperature : 1.0;
  } else if (a.temperature > 0.0) {
    dc.mode = DecodingConfig::Mode::temperature;
    dc.temperature = a.temperature;
  }

  std::vector<Turn> context;
  std::vector<std::string> lines;
  std::cout << "chatting with " << a.ckpt.string() << " (blank line or /quit ends the session)\n";
  std::string line;
  while (true) {
    std::cout << "you> " << std::flush;
    if (!std::getline(std::cin, line) || line == "/quit" || line.empty()) break;
    try {
      ck.model.vocab.encode(line);
    } catch (const DataError& e) {
      std::cout << "  (" << e.what() << "; the bot only knows its world's vocabulary)\n";
      continue;
    }
    Turn user;
    user.speaker = 1;
    user.text = line;
    user.triple = parse_utterance(world, line);
    context.push_back(user);
    lines.push_back("user: " + line);

    dc.seed = derive_seed(a.seed, context.size());
    const TokenSeq reply = sample_utterance(ck.model, encode_state(ck.model, persona, context), dc);
    Turn bot;
    bot.speaker = 0;
    bot.text = ck.model.vocab.decode(reply);
    bot.triple = parse_utterance(world, bot.text);
    std::string tag = "no-triple";
    if (bot.triple) tag = label_name(entailment_oracle(world, *bot.triple, persona));
    context.push_back(bot);
    lines.push_back("bot:  " + bot.text + "  [" + tag + "]");
    std::cout << "bot> " << bot.text << "  [" << tag << "]\n";
  }

  std::cout << "\nthe bot's persona was:\n";
  for (const auto& f : persona.facts) std::cout << "  " << f.text << "\n";
  std::ofstream out(a.transcript);
  if (!out) throw DataError("cannot write transcript " + a.transcript.string());
  out << "# checkpoint " << a.ckpt.string() << "\n# seed " << a.seed << "\n";
  out << "# tags: oracle label of each bot reply against its persona (debugging aid)\n";
  for (const auto& l : lines) out << l << "\n";
  out << "# persona\n";
  for (const auto& f : persona.facts) out << "persona: " << f.text << "\n";
  std::cout << "transcript written to " << a.transcript.string() << "\n";
}

struct RunArgs {
  fs::path manifest, out;
  bool force = false;
  bool print_manifest = false;
};

void cmd_run(const RunArgs& a, std::ostream& log) {
  const Manifest m = a.manifest.empty() ? Manifest{} : load_manifest(existing(a.manifest, "--manifest"));
  if (a.print_manifest) {
    std::cout << manifest_to_json(m);
    return;
  }
  if (a.out.empty()) throw ConfigError("missing required --out");
  run_pipeline(m, a.out, a.force, log);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline policy-gradient training for persona-consistent dialogue on a synthetic world"};
  app.require_subcommand(1);
  Quiet quiet;
  app.add_flag("-q,--quiet", quiet.on, "Suppress progress output on stderr");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate world, dialogues, training records, eval and held-out sets");
  g->add_option("--seed", gen.cfg.seed, "World seed")->capture_default_str();
  g->add_option("--entities", gen.cfg.entities, "Number of entities")->capture_default_str();
  g->add_option("--relations", gen.cfg.relations, "Number of relations")->capture_default_str();
  g->add_option("--dialogues", gen.cfg.dialogues, "Dialogues per generation round")->capture_default_str();
  g->add_option("--turns", gen.cfg.turns, "Turns per dialogue")->capture_default_str();
  g->add_option("--records", gen.cfg.records, "Training records (0 keeps every mapped record)")->capture_default_str();
  g->add_option("--eval-items", gen.cfg.eval_items, "Evaluation items")->capture_default_str();
  g->add_option("--heldout-dialogues", gen.cfg.heldout_dialogues, "Dialogues behind the held-out pool")
      ->capture_default_str();
  g->add_option("--heldout-per-sign", gen.cfg.heldout_per_sign, "Held-out records per reward sign")
      ->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--force", gen.force, "Replace an existing output directory");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "MLE pretraining on the generated dialogues");
  pre.in.add(p, true, false, false, false);
  p->add_option("--epochs", pre.cfg.epochs, "Epochs")->capture_default_str();
  p->add_option("--lr", pre.cfg.lr, "Adam learning rate")->capture_default_str();
  p->add_option("--batch", pre.cfg.batch_size, "Batch size")->capture_default_str();
  p->add_option("--seed", pre.cfg.seed, "Initialization and shuffling seed")->capture_default_str();
  p->add_option("--out", pre.out, "Output directory")->required();
  p->add_flag("--force", pre.force, "Replace an existing output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "RL fine-tuning from an MLE checkpoint");
  tr.in.add(t, false, true, false, true);
  t->add_option("--ckpt", tr.ckpt, "MLE checkpoint to start from")->required();
  t->add_option("--method", tr.method, "gold, varmi, reward_only or online")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs, "Epochs")->capture_default_str();
  t->add_option("--lr", tr.cfg.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--alpha", tr.cfg.alpha, "Importance-weight floor")->capture_default_str();
  t->add_option("--gamma", tr.cfg.gamma, "Discount (applied as gamma^0 per utterance)")->capture_default_str();
  t->add_option("--batch", tr.cfg.batch_size, "Batch size")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed, "Shuffling and sampling seed")->capture_default_str();
  t->add_option("--online-prompts", tr.online_prompts, "Prompts per epoch for --method online")->capture_default_str();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_flag("--force", tr.force, "Replace an existing output directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Rank the evaluation set; the first --ckpt is the comparison baseline");
  ev.in.add(e, false, false, true, false);
  e->add_option("--ckpt", ev.ckpts, "Checkpoint(s) to evaluate")->required();
  e->add_option("--tag", ev.tags, "Model tag per checkpoint (default: checkpoint directory name)");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_flag("--force", ev.force, "Replace an existing output directory");

  VarianceArgs va;
  auto* v = app.add_subcommand("variance", "Importance-weight dispersion with bootstrap CIs");
  va.in.add(v, false, false, false, true);
  v->add_option("--ckpt", va.ckpt, "Checkpoint whose token probabilities define the weights")->required();
  v->add_option("--methods", va.methods, "Comma-separated weighting schemes")->capture_default_str();
  v->add_option("--alpha", va.alpha, "Importance-weight floor")->capture_default_str();
  v->add_option("--bootstrap-n", va.bootstrap_n, "Bootstrap resamples (>= 100)")->capture_default_str();
  v->add_option("--seed", va.seed, "Bootstrap seed")->capture_default_str();
  v->add_option("--out", va.out, "Output directory")->required();
  v->add_flag("--force", va.force, "Replace an existing output directory");

  ChatArgs ch;
  auto* c = app.add_subcommand("chat", "Talk to a checkpoint; replies are tagged by the oracle");
  ch.in.add(c, false, false, false, false);
  c->add_option("--ckpt", ch.ckpt, "Checkpoint")->required();
  c->add_option("--seed", ch.seed, "Persona and sampling seed")->capture_default_str();
  c->add_option("--persona-size", ch.persona_size, "Facts in the bot persona (3-5)")->capture_default_str();
  c->add_option("--temperature", ch.temperature, "Sampling temperature (0 = greedy)")->capture_default_str();
  c->add_option("--top-k", ch.top_k, "Sample from the k most likely tokens (0 = off)")->capture_default_str();
  c->add_option("--transcript", ch.transcript, "Where to save the transcript")->capture_default_str();

  RunArgs ru;
  auto* r = app.add_subcommand("run", "Full pipeline: gen, pretrain, train, variance, eval");
  r->add_option("--manifest", ru.manifest, "Manifest JSON (default: built-in reference configuration)");
  r->add_option("--out", ru.out, "Output directory");
  r->add_flag("--force", ru.force, "Replace an existing output directory");
  r->add_flag("--print-manifest", ru.print_manifest, "Print the effective manifest and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }

  try {
    std::ostream& log = quiet.log();
    if (*g) cmd_gen(gen);
    else if (*p) cmd_pretrain(pre, log);
    else if (*t) cmd_train(tr, log);
    else if (*e) cmd_eval(ev);
    else if (*v) cmd_variance(va);
    else if (*c) cmd_chat(ch);
    else if (*r) cmd_run(ru, log);
    return 0;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
}
