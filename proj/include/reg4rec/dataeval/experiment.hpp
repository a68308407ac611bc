#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/dataeval/data.hpp"
#include "reg4rec/decode/decode.hpp"
#include "reg4rec/grpo/grpo.hpp"
#include "reg4rec/ladq/ladq.hpp"
#include "reg4rec/mpq/mpq.hpp"
#include "reg4rec/seqmodel/seqmodel.hpp"

namespace reg4rec::dataeval {

// Tokens, gates and categories of every catalog item.
struct ItemTable {
  std::map<std::string, mpq::TokenSet> tokens;
  std::map<std::string, std::size_t> category;
  std::vector<decode::CatalogItem> catalog;  // id order

  // Throws "unknown-item" when a logged item has no token record.
  static ItemTable build(std::span<const mpq::TokenRecord> records, const InteractionLog& log);
  const mpq::TokenSet& at(const std::string& item) const;
  std::size_t num_codebooks() const;
};

// One example per training position t >= 1: history = train[0, t), target = train[t].
std::vector<seqmodel::Example> pretrain_examples(const EvalSplit& split, const ItemTable& table);

// One context per training position t >= 1 with window train[t, t + horizon).
std::vector<grpo::Context> posttrain_contexts(const EvalSplit& split, const ItemTable& table, std::size_t horizon,
                                              double w);

enum class SplitPart { valid, test };

struct EvalCase {
  std::string user;
  std::vector<mpq::TokenSet> history;
  std::string target;
};

// valid: history = train, target = valid; test: history = train + valid.
std::vector<EvalCase> eval_cases(const EvalSplit& split, const ItemTable& table, SplitPart part);

struct DecodeSettings {
  decode::Mode mode = decode::Mode::greedy;
  decode::ReflectionConfig reflection;
  std::size_t drop = 1;  // d lowest-confidence tokens dropped before retrieval
  std::size_t top_n = 10;
  std::vector<std::size_t> ks{5, 10};

  void validate() const;
  std::size_t depth() const;  // max(top_n, max K)
};

void to_json(nlohmann::json& j, const DecodeSettings& c);
void from_json(const nlohmann::json& j, DecodeSettings& c);

struct UserResult {
  std::string user;
  std::string target;
  bool pruned = false;
  std::size_t rank = 0;  // 1-based rank of the target within the retrieved list, 0 if absent
  std::vector<double> recall, ndcg;  // per K
  decode::ReasoningPath path;
  std::vector<std::string> ranked;
};

struct MetricsReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall, ndcg;  // unweighted means over users, per K
  std::size_t users = 0;
  std::size_t pruned = 0;
  std::vector<UserResult> per_user;

  double recall_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
  nlohmann::json metrics_json() const;
};

// Decodes one path per case with reflection, retrieves the top items and
// scores them. Pruned paths count as misses. Each user draws from its own
// substream of `seed`, so results do not depend on evaluation order.
MetricsReport evaluate(const seqmodel::SeqModel& model, const decode::RetrievalIndex& index,
                       std::span<const EvalCase> cases, const DecodeSettings& settings, std::uint64_t seed);

using ScorerFactory = std::function<std::unique_ptr<decode::PathScorer>(const EvalCase&)>;
MetricsReport evaluate(const ScorerFactory& scorer_for, const decode::RetrievalIndex& index,
                       std::span<const EvalCase> cases, const DecodeSettings& settings, std::uint64_t seed);

decode::RetrievalIndex build_index(const std::vector<numerics::Tensor>& codebooks, const ItemTable& table);

struct DataConfig {
  std::string interactions;
  std::string features;
  std::string tokens;  // token map JSONL
  std::size_t min_interactions = 5;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  SynthConfig synth;
  mpq::MpqConfig mpq;
  seqmodel::SeqConfig seq;
  grpo::GrpoConfig grpo;
  ladq::LadqConfig ladq;
  DecodeSettings decode;
  std::string checkpoint;  // SEQ1 checkpoint evaluated by run_experiment
  std::string split = "test";

  // Copies `seed` into every stage configuration.
  void set_seed(std::uint64_t s);
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Parses TOML (".toml") or JSON into a JSON tree. Throws "invalid-config".
nlohmann::json load_config_json(const std::filesystem::path& path);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// CRC-32 of the canonical JSON serialization, as 8 hex digits.
std::string config_hash(const nlohmann::json& j);
std::string git_describe();

// Loads data, token map and checkpoint named by `cfg`, evaluates the chosen
// split and writes report.json and per_user.csv to `out_dir`. Fails fast with
// "missing-checkpoint" before touching data when the checkpoint is absent.
MetricsReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

void write_report(const std::filesystem::path& out_dir, const MetricsReport& report, const ExperimentConfig& cfg);

// Stage helpers shared by the CLI and the end-to-end checks.
struct TokenizeResult {
  mpq::MpqModel model;
  std::vector<mpq::TokenRecord> records;
  mpq::MpqTrainResult train;
};
TokenizeResult tokenize(const InteractionLog& log, const mpq::MpqConfig& cfg);

// Pretrains on the split's training prefixes with the tokenizer's codebooks
// attached for retrieval. Uses LADQ when cfg.ladq.enabled.
seqmodel::PretrainResult pretrain_stage(const EvalSplit& split, const ItemTable& table,
                                        const std::vector<numerics::Tensor>& codebooks, const ExperimentConfig& cfg,
                                        const std::filesystem::path& plan_log = {});

// GRPO post-training with early stopping on validation R@max(K).
grpo::PosttrainResult posttrain_stage(const seqmodel::SeqModel& init, const EvalSplit& split, const ItemTable& table,
                                      const ExperimentConfig& cfg, rewards::RewardTrace* trace = nullptr);

}  // namespace reg4rec::dataeval
