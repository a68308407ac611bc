#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/mpq/token_set.hpp"
#include "reg4rec/numerics/rng.hpp"
#include "reg4rec/numerics/tensor.hpp"

namespace reg4rec::dataeval {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t ts = 0;
  std::size_t category = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct ItemInfo {
  std::size_t category = 0;
  std::vector<double> features;
  friend bool operator==(const ItemInfo&, const ItemInfo&) = default;
};

struct InteractionLog {
  std::vector<Interaction> records;
  std::map<std::string, ItemInfo> items;

  std::size_t num_categories() const;
  std::size_t feature_dim() const;
  // Per-user item ids ordered by timestamp; equal timestamps keep file order.
  std::map<std::string, std::vector<std::string>> sequences() const;
  // Items in id order and their features as a matrix (items x feature_dim).
  std::vector<std::string> item_ids() const;
  numerics::Tensor feature_matrix() const;
};

enum class Format { csv, jsonl };

// Chooses by extension: ".csv" or ".jsonl"/".json". Throws "invalid-format".
Format format_from_path(const std::filesystem::path& path);

// Interactions have columns user,item,ts,category. Item features are JSON
// lines {"item": id, "category": c, "features": [...]}. Errors carry the
// offending line number: "invalid-schema", "duplicate-record",
// "unknown-item", "category-mismatch"; "io-error" for unreadable files.
InteractionLog load_interactions(const std::filesystem::path& path, Format format,
                                 const std::filesystem::path& features_path);
std::map<std::string, ItemInfo> load_item_features(const std::filesystem::path& path);
void save_interactions(const std::filesystem::path& path, const InteractionLog& log, Format format);
void save_item_features(const std::filesystem::path& path, const InteractionLog& log);

struct SynthConfig {
  std::size_t n_users = 500;
  std::size_t n_items = 200;
  std::size_t n_categories = 8;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  double p = 0.8;  // probability of following the planted successor
  std::size_t num_codebooks = 4;
  std::size_t codebook_size = 16;
  std::size_t block_dim = 8;  // feature dims per codebook block
  double noise = 0.05;
  double stickiness = 0.6;  // self-transition mass of the category chain

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SynthCorpus {
  InteractionLog log;
  std::map<std::string, mpq::TokenSet> planted;     // ground-truth token sets
  std::map<std::string, std::string> successor;     // planted next item
  std::vector<numerics::Tensor> block_codewords;    // per codebook: D x block_dim
};

// Items lie on a hidden chain where neighbours share at least ceil(M/2)
// planted tokens. Each user starts at a random item; with probability p the
// next item is the current item's chain successor, otherwise the next
// category follows a sticky Markov chain and the item is drawn uniformly
// from that category (excluding the current item). Features are the
// concatenation of per-codebook block codewords plus Gaussian noise.
SynthCorpus synth_corpus(const SynthConfig& cfg, numerics::RngStream& rng);

struct UserSplit {
  std::string user;
  std::vector<std::string> train;
  std::string valid;
  std::string test;
};

struct EvalSplit {
  std::vector<UserSplit> users;  // ordered by user id
  std::size_t dropped = 0;       // users below the interaction minimum
};

// Last item is test, second-to-last validation, the rest training. Users
// with fewer than `min_interactions` records are dropped. Throws
// "empty-split" when no user qualifies.
EvalSplit leave_one_out(const InteractionLog& log, std::size_t min_interactions = 5);

// 1 if target is within the first k entries. Throws "invalid-k" for k == 0.
double recall_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k);
// 1 / log2(rank + 1) for a 1-based rank <= k, else 0.
double ndcg_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k);

}  // namespace reg4rec::dataeval
