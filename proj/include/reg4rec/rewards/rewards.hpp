#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/decode/decode.hpp"

namespace reg4rec::rewards {

using decode::ReasoningPath;
using decode::RetrievalIndex;
using mpq::TokenSet;

// A ground-truth item: its id, tokens and category.
struct Target {
  std::string item;
  TokenSet tokens;
  std::size_t category = 0;
};

// Future items i_{t+1}..i_{t+h} with decay w.
struct FutureWindow {
  std::vector<Target> items;
  double w = 0.8;
};

enum class JsMode { normalized, raw };

struct RewardConfig {
  bool msra = true;
  std::size_t h = 3;
  double w = 0.8;
  std::size_t top_n = 10;
  std::size_t drop = 1;  // d
  JsMode js_mode = JsMode::normalized;
  bool use_step = true;
  bool use_cate = true;
  bool use_js = true;
  bool use_path = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const RewardConfig& c);
void from_json(const nlohmann::json& j, RewardConfig& c);

struct RewardBreakdown {
  double step = 0.0;
  double cate = 0.0;
  double js = 0.0;
  double path = 0.0;
  double msra_step = 0.0;
  double msra_cate = 0.0;
  double msra_path = 0.0;
  double total = 0.0;
};

// Fraction of path tokens matching the target's token on the same codebook.
// Throws "incomplete-path".
double step_hit(const ReasoningPath& path, const TokenSet& target);
// Fraction of steps whose arg-max category equals the target. Throws
// "no-category" and "incomplete-path".
double category_hit(const ReasoningPath& path, std::size_t target_category);
// 1 - mean JS divergence of adjacent step category distributions (divided by
// ln 2 in normalized mode). Throws "short-path" and "invalid-distribution".
double step_consistency(const ReasoningPath& path, JsMode mode = JsMode::normalized);

// Tokens kept at reward time: up to d tokens that disagree with the target are
// dropped, lowest confidence first.
std::vector<mpq::Token> retain_for_target(const ReasoningPath& path, const TokenSet& target, std::size_t d);
// 1 if the target is among the N items nearest the retained-token query.
double global_path(const ReasoningPath& path, const Target& target, const RetrievalIndex& index, std::size_t n,
                   std::size_t d);

// Decay-weighted means over the window. Throw "empty-window" and "invalid-decay".
double msra_step(const ReasoningPath& path, const FutureWindow& window);
double msra_cate(const ReasoningPath& path, const FutureWindow& window);
double msra_path(const ReasoningPath& path, const FutureWindow& window, const RetrievalIndex& index, std::size_t n,
                 std::size_t d);
// sum_j w^{j-1} r_j / sum_j w^{j-1}.
double decay_mean(std::span<const double> per_item, double w);

// The first window item is the next-item target. With msra enabled the window
// is truncated to h items; otherwise the msra fields equal the single-step
// values.
RewardBreakdown total_reward(const ReasoningPath& path, const FutureWindow& window, const RetrievalIndex& index,
                             const RewardConfig& cfg);

// Reward-trace CSV: one row per rollout.
class RewardTrace {
 public:
  explicit RewardTrace(const std::filesystem::path& path);
  void append(const std::string& user, const RewardBreakdown& r);

 private:
  std::ofstream out_;
};

}  // namespace reg4rec::rewards
