#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pcrl/corpus.hpp"
#include "pcrl/evaluation.hpp"
#include "pcrl/policy.hpp"
#include "pcrl/training.hpp"

namespace pcrl {

/// Output directory that only appears under its final name once complete.
class StagedDir {
 public:
  /// Refuses an existing `dir` unless force is set.
  StagedDir(std::filesystem::path dir, bool force);
  ~StagedDir();
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  const std::filesystem::path& path() const { return tmp_; }
  std::filesystem::path operator/(const std::string& name) const { return tmp_ / name; }
  void commit();

 private:
  std::filesystem::path dir_, tmp_;
  bool committed_ = false;
};

struct GenConfig {
  std::uint64_t seed = 7;
  std::size_t entities = 200;
  std::size_t relations = 12;
  std::size_t dialogues = 2000;
  std::size_t turns = 8;
  /// 0 keeps every mapped record.
  std::size_t records = 8000;
  std::size_t eval_items = 542;
  std::size_t heldout_dialogues = 400;
  std::size_t heldout_per_sign = 300;

  bool operator==(const GenConfig&) const = default;
};

struct GenSummary {
  std::size_t dialogues = 0;
  std::size_t records = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t eval_items = 0;
  std::size_t heldout_pos = 0;
  std::size_t heldout_neg = 0;
  std::string corpus_hash;
};

/// world.json, dialogues.jsonl, corpus.jsonl, eval.jsonl, heldout.jsonl and
/// gen.json under dir (which must already exist).
GenSummary generate_data(const GenConfig& cfg, const std::filesystem::path& dir);

std::string file_hash(const std::filesystem::path& path);

struct PretrainConfig {
  std::size_t epochs = 16;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 11;

  bool operator==(const PretrainConfig&) const = default;
};

/// MLE pretraining on dialogues; writes model.ckpt, mle_log.csv and one
/// checkpoint per epoch under dir/epochs.
MleLog pretrain(const World& world, const std::vector<Dialogue>& dialogues, const PretrainConfig& cfg,
                const std::filesystem::path& dir, std::ostream& log);

std::vector<Prompt> prompts_from_records(const std::vector<CandidateRecord>& records, std::size_t limit);

/// Splits a mixed record set by reward sign.
void split_by_reward(const std::vector<CandidateRecord>& mixed, std::vector<CandidateRecord>& pos,
                     std::vector<CandidateRecord>& neg);

/// RL fine-tuning from an MLE checkpoint; writes model.ckpt, trajectory.csv
/// and run.json under dir.
TrajectoryLog train_policy(const World& world, const std::filesystem::path& mle_ckpt,
                           const std::vector<CandidateRecord>& records, const std::vector<CandidateRecord>& heldout,
                           const TrainConfig& cfg, std::size_t online_prompts, const std::filesystem::path& dir,
                           std::ostream& log);

Report evaluate_checkpoint(const World& world, const std::filesystem::path& ckpt, const std::vector<EvalItem>& items,
                           const std::string& tag);

std::vector<WeightStats> variance_stats(const World& world, const std::filesystem::path& ckpt,
                                        const std::vector<CandidateRecord>& records, const std::vector<Method>& methods,
                                        double alpha, std::size_t bootstrap_n, std::uint64_t seed);

struct Manifest {
  GenConfig gen;
  PretrainConfig pretrain;
  TrainConfig train;
  std::vector<Method> methods = {Method::gold, Method::varmi, Method::online};
  double online_lr = 1e-4;
  std::size_t online_prompts = 2000;
  std::vector<Method> variance_methods = {Method::gold, Method::varmi};
  std::size_t bootstrap_n = 1000;
  std::uint64_t bootstrap_seed = 17;

  bool operator==(const Manifest&) const = default;
};

std::string manifest_to_json(const Manifest& m);
/// Missing keys keep their defaults; unknown keys are rejected.
Manifest manifest_from_json(const std::string& text);
Manifest load_manifest(const std::filesystem::path& path);

/// gen -> pretrain -> train (each method) -> eval -> variance under out.
void run_pipeline(const Manifest& m, const std::filesystem::path& out, bool force, std::ostream& log);

}  // namespace pcrl
