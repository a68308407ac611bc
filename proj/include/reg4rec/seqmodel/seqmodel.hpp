#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/dataeval/checkpoint.hpp"
#include "reg4rec/mpq/token_set.hpp"
#include "reg4rec/numerics/autodiff.hpp"
#include "reg4rec/numerics/rng.hpp"

namespace reg4rec::seqmodel {

using mpq::Token;
using mpq::TokenSet;
using numerics::Parameter;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct SeqConfig {
  std::size_t num_codebooks = 4;    // M
  std::size_t codebook_size = 16;   // D
  std::size_t num_categories = 2;   // size of the category vocabulary
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;      // feed-forward width
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 2;
  std::size_t max_context = 50;
  double lambda_c = 0.5;
  double lr = 3e-3;
  double clip_norm = 5.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SeqConfig& c);
void from_json(const nlohmann::json& j, SeqConfig& c);

// History items in timestamp order, each with its token set and category.
struct UserSequence {
  std::string user;
  std::vector<TokenSet> items;
  std::vector<std::size_t> categories;
};

struct Memory {
  Tensor states;           // T x embed_dim
  bool truncated = false;  // history exceeded max_context
};

struct DecoderState {
  Memory memory;
  std::vector<Token> prefix;  // tokens generated so far, in generation order
};

struct StepDistribution {
  std::vector<double> logits;    // D token logits for the requested codebook
  std::vector<double> category;  // category distribution p~
};

// Outputs of one decoder position for every codebook at once.
struct StepOutputs {
  Tensor logits;                 // M x D
  std::vector<double> category;  // p~ for this step
};

// Named group of parameters; the unit that LADQ assigns precisions to.
struct Layer {
  std::string name;
  std::vector<Parameter*> params;
};

class SeqModel {
 public:
  SeqModel() = default;
  SeqModel(const SeqConfig& cfg, numerics::RngStream& rng);

  const SeqConfig& config() const { return cfg_; }
  std::size_t num_codebooks() const { return cfg_.num_codebooks; }
  std::size_t codebook_size() const { return cfg_.codebook_size; }

  // Sum of per-codebook token embeddings plus codebook-id embeddings (1 x E).
  // Throws "unknown-token" when a code is outside the vocabulary.
  Tensor embed_token_set(const TokenSet& tokens) const;

  // Keeps the most recent max_context items. Throws "empty-history".
  Memory encode_history(std::span<const TokenSet> history) const;

  // Outputs for the next decoder position given the prefix.
  StepOutputs step_outputs(const Memory& memory, std::span<const Token> prefix) const;
  // Throws "codebook-consumed" when r already appears in the prefix.
  StepDistribution decode_step(const DecoderState& state, std::size_t r) const;

  // Graph builders. Non-const overloads record gradients into the model's
  // parameters; const overloads read parameters as constants.
  Var memory_graph(Tape& tape, std::span<const TokenSet> history);
  Var memory_graph(Tape& tape, std::span<const TokenSet> history) const;
  // Decoder hidden states for positions 0..prefix.size() (rows x E).
  Var hidden_graph(Tape& tape, Var memory, std::span<const Token> prefix);
  Var hidden_graph(Tape& tape, Var memory, std::span<const Token> prefix) const;
  // Token logits of codebook r for every row of hidden (rows x D).
  Var token_logits_graph(Tape& tape, Var hidden, std::size_t r);
  Var token_logits_graph(Tape& tape, Var hidden, std::size_t r) const;
  Var category_logits_graph(Tape& tape, Var hidden);
  Var category_logits_graph(Tape& tape, Var hidden) const;

  std::vector<Parameter*> parameters();
  std::vector<Layer> layers();

  // Frozen codewords carried with the model for retrieval (not trained here).
  const std::vector<Tensor>& codebooks() const { return codebooks_; }
  void set_codebooks(std::vector<Tensor> codebooks) { codebooks_ = std::move(codebooks); }

  dataeval::Checkpoint to_checkpoint() const;
  static SeqModel from_checkpoint(const dataeval::Checkpoint& ckpt);

  struct Attention {
    Parameter wq, wk, wv, wo;
  };
  struct FeedForward {
    Parameter w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Attention self;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Attention self, cross;
    FeedForward ffn;
  };

 private:
  template <typename Self>
  friend struct Graph;

  std::vector<Parameter*> all_params();

  SeqConfig cfg_;
  Parameter tok_emb_, cb_emb_, bos_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  std::vector<Parameter> head_w_, head_b_;
  Parameter cat_w_, cat_b_;
  std::vector<Tensor> codebooks_;
};

// Sinusoidal position encoding for positions 0..n-1 (n x dim).
Tensor position_encoding(std::size_t n, std::size_t dim);

// One pretraining example: predict `target` from `history`.
struct Example {
  std::vector<TokenSet> history;
  TokenSet target;
  std::size_t category = 0;
};

struct LossBreakdown {
  double token = 0.0;  // mean over examples of sum_i -log p(c_i | prefix)
  double cate = 0.0;   // mean over examples of sum_i -log p~(g)
  double total = 0.0;  // token + lambda_c * cate
};

// Teacher-forced loss over a batch in canonical codebook order 0..M-1.
Var pretrain_loss(Tape& tape, SeqModel& model, std::span<const Example* const> batch, double lambda_c,
                  LossBreakdown* parts = nullptr);
LossBreakdown evaluate_loss(const SeqModel& model, std::span<const Example> examples, double lambda_c);
// Fraction of teacher-forced tokens whose arg-max equals the target.
double token_accuracy(const SeqModel& model, std::span<const Example> examples);

struct EpochMetrics {
  std::size_t epoch = 0;
  double token_loss = 0.0;
  double cate_loss = 0.0;
  double total = 0.0;
};

struct PretrainResult {
  SeqModel model;
  LossBreakdown initial;
  LossBreakdown final;
  std::vector<EpochMetrics> metrics;
};

// Optional callbacks around each optimizer step. `before_step` runs before
// gradients are zeroed and the batch forward pass; `before_update` runs after
// backward and before the parameter update.
struct StepHooks {
  std::function<void(SeqModel&, std::size_t step, std::span<const Example* const> batch)> before_step;
  std::function<void(SeqModel&)> before_update;
};

// Trains from a fresh model (or `init` when given). Throws "empty-corpus" and
// "pretrain-diverged".
PretrainResult pretrain(std::span<const Example> examples, const SeqConfig& cfg, const SeqModel* init = nullptr,
                        const StepHooks& hooks = {});

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> metrics);

}  // namespace reg4rec::seqmodel
