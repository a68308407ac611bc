#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/dataeval/checkpoint.hpp"
#include "reg4rec/mpq/token_set.hpp"
#include "reg4rec/numerics/autodiff.hpp"
#include "reg4rec/numerics/rng.hpp"

namespace reg4rec::mpq {

using numerics::Parameter;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct MpqConfig {
  std::size_t feature_dim = 32;
  std::size_t latent_dim = 8;
  std::size_t num_codebooks = 4;   // M
  std::size_t codebook_size = 16;  // D
  std::size_t decoder_hidden = 32;
  double alpha = 0.001;  // orthogonality weight
  double beta = 0.25;    // commitment weight
  double ema_decay = 0.99;
  double lr = 5e-3;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  std::size_t kmeans_iters = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MpqConfig& c);
void from_json(const nlohmann::json& j, MpqConfig& c);

struct Codebook {
  Tensor codewords;  // D x latent

  std::size_t size() const { return codewords.empty() ? 0 : codewords.rows(); }
  std::size_t dim() const { return codewords.empty() ? 0 : codewords.cols(); }
  std::span<const double> codeword(std::size_t j) const { return codewords.row_span(j); }
};

struct Nearest {
  std::size_t index = 0;
  double distance = 0.0;  // L2, not squared
};

// Nearest codeword by L2 distance; ties go to the lowest index.
// Throws "empty-codebook" and "shape-mismatch".
Nearest quantize_nearest(std::span<const double> latent, const Codebook& codebook);

// Shared decoder: tanh(q A1 + a1) A2 + a2.
struct Decoder {
  Parameter w1, b1, w2, b2;

  std::size_t input_dim() const { return w1.value.rows(); }
  std::size_t output_dim() const { return w2.value.cols(); }
  std::vector<double> apply(std::span<const double> q) const;
  Var apply(Tape& tape, Var q);
};

// ||features - decoder(q)||^2. Throws "decoder-shape" on dimension mismatch.
double recon_loss(std::span<const double> features, std::span<const double> q, const Decoder& decoder);

// Squared Frobenius distance of the normalized concatenation's Gram matrix from
// identity. Throws "degenerate-projection" on a zero column and
// "shape-mismatch" when projections disagree in shape.
double orth_loss(std::span<const Tensor> projections);
Var orth_loss(Tape& tape, std::span<const Var> projections);

struct EncodedItem {
  TokenSet tokens;
  std::vector<double> gates;  // routing weights, sum to 1
  std::vector<double> q;      // gate-weighted sum of selected codewords
};

// Per-item quantization decision held fixed while a loss graph is built:
// codes[i][r] plus the straight-through offset (z - e) for each codebook.
struct Selection {
  std::vector<std::vector<std::size_t>> codes;  // items x M
  std::vector<Tensor> offsets;                  // M tensors of items x latent
  std::vector<Tensor> selected;                 // M tensors of items x latent (z)
};

struct LossParts {
  double recon = 0.0;   // mean over items
  double orth = 0.0;
  double commit = 0.0;  // mean over items
  double total = 0.0;   // recon + alpha * orth (the reported objective)
};

class MpqModel {
 public:
  MpqModel() = default;
  MpqModel(const MpqConfig& cfg, numerics::RngStream& rng);

  const MpqConfig& config() const { return cfg_; }
  std::size_t num_codebooks() const { return cfg_.num_codebooks; }

  const Codebook& codebook(std::size_t r) const { return codebooks_.at(r); }
  Codebook& codebook(std::size_t r) { return codebooks_.at(r); }
  const std::vector<Codebook>& codebooks() const { return codebooks_; }
  const Decoder& decoder() const { return decoder_; }
  Decoder& decoder() { return decoder_; }
  Parameter& projection(std::size_t r) { return enc_w_.at(r); }
  const Parameter& projection(std::size_t r) const { return enc_w_.at(r); }

  std::vector<Parameter*> parameters();
  std::vector<Tensor> projections() const;

  // Expert latents e^r for every row of features: M tensors of items x latent.
  std::vector<Tensor> latents(const Tensor& features) const;
  // Gate weights h(v) for every row: items x M.
  Tensor gates(const Tensor& features) const;

  // Throws "invalid-features" on non-finite input or a dimension mismatch.
  EncodedItem encode(std::span<const double> features) const;
  std::vector<EncodedItem> encode_all(const Tensor& features) const;

  // Nearest-codeword selection at the current parameters.
  Selection select(const Tensor& features) const;

  // Builds the straight-through training objective on the tape:
  //   mean_i ||v_i - dec(q_i)||^2 + alpha * L_orth + beta * mean_i sum_r ||e_ir - z_ir||^2
  // with q_i = sum_r h_r(v_i) (e_ir + offset_ir). Codeword choice and offsets
  // come from `sel` and are constants of the graph.
  Var training_loss(Tape& tape, const Tensor& features, const Selection& sel, double alpha, double beta,
                    LossParts* parts = nullptr);

  // Exponential-moving-average codeword update from a batch's assignments.
  void ema_update(const std::vector<Tensor>& latents, const Selection& sel);
  // Initializes codebooks by k-means on expert latents; codewords beyond the
  // number of distinct latents fall back to random unit vectors.
  void init_codebooks(const Tensor& features, numerics::RngStream& rng);
  // Re-seeds codewords whose usage count is zero to random latents.
  std::size_t reseed_dead(const std::vector<std::vector<std::size_t>>& usage, const Tensor& features,
                          numerics::RngStream& rng);

  dataeval::Checkpoint to_checkpoint() const;
  static MpqModel from_checkpoint(const dataeval::Checkpoint& ckpt);

 private:
  MpqConfig cfg_;
  std::vector<Parameter> enc_w_, enc_b_;
  Parameter gate_w_, gate_b_;
  Decoder decoder_;
  std::vector<Codebook> codebooks_;
  std::vector<std::vector<double>> ema_size_;
  std::vector<Tensor> ema_sum_;
};

// L_recon + alpha * L_orth, averaged over the rows of features.
double total_loss(const Tensor& features, const MpqModel& model, double alpha);
LossParts loss_parts(const Tensor& features, const MpqModel& model, double alpha);

struct MpqTrainResult {
  MpqModel model;
  double initial_loss = 0.0;
  std::vector<double> loss_curve;  // mean total loss after each epoch
  std::vector<double> recon_curve;
  double initial_recon = 0.0;
  std::size_t reseeded = 0;
};

// Trains encoders, gate and decoder with Adam, codebooks with EMA. Returns
// the parameters of the best epoch (never worse than initialization).
// Throws "mpq-diverged" on a non-finite loss, "empty-corpus" on no items.
MpqTrainResult train_mpq(const Tensor& items, const MpqConfig& cfg);

struct TokenRecord {
  std::string item;
  TokenSet tokens;
  std::vector<double> gates;
  friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

std::vector<TokenRecord> export_tokens(const MpqModel& model, std::span<const std::string> item_ids,
                                       const Tensor& features);
// JSON-lines: {"item": ..., "tokens": [[r, c], ...], "gates": [...]}
void write_token_map(const std::filesystem::path& path, std::span<const TokenRecord> records);
std::vector<TokenRecord> read_token_map(const std::filesystem::path& path);
std::string token_record_to_json(const TokenRecord& rec);
TokenRecord token_record_from_json(const std::string& line);

}  // namespace reg4rec::mpq
