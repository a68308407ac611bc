#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "reg4rec/mpq/token_set.hpp"
#include "reg4rec/numerics/rng.hpp"
#include "reg4rec/numerics/tensor.hpp"
#include "reg4rec/seqmodel/seqmodel.hpp"

namespace reg4rec::decode {

using mpq::Token;
using mpq::TokenSet;
using numerics::RngStream;
using numerics::Tensor;
using seqmodel::StepOutputs;

// Scores the next decoding position given the tokens generated so far.
class PathScorer {
 public:
  virtual ~PathScorer() = default;
  virtual std::size_t num_codebooks() const = 0;
  virtual std::size_t codebook_size() const = 0;
  virtual StepOutputs score(std::span<const Token> prefix) const = 0;
};

// Scorer backed by a sequence model conditioned on one user's history.
class ModelScorer final : public PathScorer {
 public:
  ModelScorer(const seqmodel::SeqModel& model, std::span<const TokenSet> history);
  std::size_t num_codebooks() const override { return model_.num_codebooks(); }
  std::size_t codebook_size() const override { return model_.codebook_size(); }
  StepOutputs score(std::span<const Token> prefix) const override;
  const seqmodel::Memory& memory() const { return memory_; }

 private:
  const seqmodel::SeqModel& model_;
  seqmodel::Memory memory_;
};

struct PathStep {
  std::size_t codebook = 0;
  std::size_t code = 0;
  double confidence = 0.0;        // softmax probability of `code` under its codebook head
  std::vector<double> category;   // p~ at this step
};

enum class PathStatus { alive, pruned, complete };

struct RollbackEvent {
  std::size_t at_step = 0;  // number of steps when the violation was detected
  std::size_t kept = 0;     // steps kept after rolling back
  double js = 0.0;
};

struct ReasoningPath {
  std::vector<PathStep> steps;
  std::vector<std::size_t> active;  // unused codebooks, ascending
  PathStatus status = PathStatus::alive;
  std::vector<RollbackEvent> rollbacks;

  static ReasoningPath start(std::size_t num_codebooks);
  std::size_t num_codebooks() const { return steps.size() + active.size(); }
  std::vector<Token> prefix() const;
  // Throws "incomplete-path" unless every codebook has been decoded.
  TokenSet token_set() const;
  // Sum of log confidences.
  double log_prob() const;
  // Truncates to the first `keep` steps and restores their codebooks to the active set.
  void truncate(std::size_t keep);
};

enum class Mode { greedy, sample };

// One CRSS step: scores every active codebook and appends the most confident
// (codebook, token). Greedy ties go to the lower codebook, then the lower
// token. Sample mode draws a token per active codebook and keeps the codebook
// whose draw has the highest probability. Throws "decode-failure" when every
// active codebook has non-finite logits and "path-finished" on a full path.
void crss_next(const PathScorer& scorer, ReasoningPath& path, Mode mode = Mode::greedy, RngStream* rng = nullptr);

// Throws "missing-rng" for sample mode without a stream.
ReasoningPath generate_path(const PathScorer& scorer, Mode mode, RngStream* rng = nullptr);

struct CorpDecision {
  bool rollback = false;
  std::size_t keep = 0;  // steps to keep when rolling back
  double js = 0.0;
};

// Compares the newest step with the one s steps earlier. Throws
// "invalid-distribution", "invalid-threshold" and "short-path".
CorpDecision corp_check(const ReasoningPath& path, double theta, std::size_t s);

struct ReflectionConfig {
  double theta = 0.06;
  std::size_t period = 1;  // s
  std::size_t retry_budget = 2;
};

// generate_path with a CORP check after every s-th step. Rollbacks regenerate
// by sampling from a fresh substream of `rng` per retry; once the budget is
// spent the path is returned with status pruned.
ReasoningPath generate_with_reflection(const PathScorer& scorer, Mode mode, const ReflectionConfig& cfg,
                                       RngStream& rng);

struct CatalogItem {
  std::string id;
  TokenSet tokens;
  std::vector<double> gates;
};

struct Ranked {
  std::string id;
  std::size_t index = 0;
  double distance = 0.0;
};

// Exact L2 index over gate-weighted codeword sums of catalog items.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  // Throws "empty-catalog", "duplicate-item" and "unknown-token".
  RetrievalIndex(std::vector<Tensor> codebooks, std::vector<CatalogItem> items);

  std::size_t size() const { return items_.size(); }
  const CatalogItem& item(std::size_t i) const { return items_.at(i); }
  std::span<const double> vector(std::size_t i) const { return vectors_.row_span(i); }
  std::optional<std::size_t> find(const std::string& id) const;
  const std::vector<Tensor>& codebooks() const { return codebooks_; }

  // Uniform mean of the codewords of the given tokens.
  std::vector<double> query(std::span<const Token> tokens) const;
  // N nearest items by L2, ascending distance, ties by item id.
  std::vector<Ranked> nearest(std::span<const double> z, std::size_t n) const;

 private:
  std::vector<Tensor> codebooks_;
  std::vector<CatalogItem> items_;
  Tensor vectors_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

// The M - d steps kept after dropping the d lowest-confidence ones (ties drop
// the later step).
std::vector<Token> retain_confident(const ReasoningPath& path, std::size_t d);

// Throws "empty-catalog" and "invalid-drop" (d >= M).
std::vector<Ranked> retrieve_topn(const ReasoningPath& path, const RetrievalIndex& index, std::size_t n,
                                  std::size_t d);

}  // namespace reg4rec::decode
