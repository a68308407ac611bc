#include "reg4rec/mpq/mpq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/optim.hpp"
#include "reg4rec/numerics/prob.hpp"

namespace reg4rec::mpq {

namespace ops = numerics::ops;
using numerics::RngStream;

void MpqConfig::validate() const {
  if (feature_dim == 0 || latent_dim == 0 || decoder_hidden == 0) throw Error("invalid-config", "dimensions must be positive");
  if (num_codebooks == 0) throw Error("invalid-config", "need at least one codebook");
  if (codebook_size < 2) throw Error("invalid-config", "codebook size must be at least 2");
  if (alpha < 0.0 || beta < 0.0) throw Error("invalid-config", "loss weights must be nonnegative");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw Error("invalid-config", "ema decay must be in (0, 1)");
  if (batch_size == 0) throw Error("invalid-config", "batch size must be positive");
}

void to_json(nlohmann::json& j, const MpqConfig& c) {
  j = {{"feature_dim", c.feature_dim}, {"latent_dim", c.latent_dim},     {"num_codebooks", c.num_codebooks},
       {"codebook_size", c.codebook_size}, {"decoder_hidden", c.decoder_hidden}, {"alpha", c.alpha},
       {"beta", c.beta},                 {"ema_decay", c.ema_decay},       {"lr", c.lr},
       {"epochs", c.epochs},             {"batch_size", c.batch_size},     {"kmeans_iters", c.kmeans_iters},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MpqConfig& c) {
  MpqConfig d;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.num_codebooks = j.value("num_codebooks", d.num_codebooks);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.kmeans_iters = j.value("kmeans_iters", d.kmeans_iters);
  c.seed = j.value("seed", d.seed);
}

Nearest quantize_nearest(std::span<const double> latent, const Codebook& codebook) {
  if (codebook.size() == 0) throw Error("empty-codebook");
  if (latent.size() != codebook.dim())
    throw Error("shape-mismatch", "latent dim " + std::to_string(latent.size()) + " vs codeword dim " +
                                      std::to_string(codebook.dim()));
  Nearest best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t j = 0; j < codebook.size(); ++j) {
    const double d = numerics::squared_distance(latent, codebook.codeword(j));
    if (d < best.distance) best = {j, d};
  }
  best.distance = std::sqrt(best.distance);
  return best;
}

namespace {

Tensor random_normal(RngStream& rng, std::size_t r, std::size_t c, double scale) {
  auto t = Tensor::matrix(r, c);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

std::vector<double> random_unit(RngStream& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n == 0.0) {
    n = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      n += x * x;
    }
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

void require_features(const Tensor& features, std::size_t dim) {
  if (features.empty() || features.cols() != dim)
    throw Error("invalid-features", "expected " + std::to_string(dim) + " features per item, got " +
                                        (features.empty() ? std::string("none") : std::to_string(features.cols())));
  if (!features.all_finite()) throw Error("invalid-features", "features must be finite");
}

// Decoder graph; works for const (read-only) and mutable decoders.
template <typename Dec>
Var decoder_graph(Tape& tape, Dec& d, Var q) {
  auto h = ops::tanh(ops::add_row(ops::matmul(q, tape.param(d.w1)), tape.param(d.b1)));
  return ops::add_row(ops::matmul(h, tape.param(d.w2)), tape.param(d.b2));
}

Var identity_like(Tape& tape, std::size_t n) {
  auto eye = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
  return tape.constant(std::move(eye));
}

}  // namespace

std::vector<double> Decoder::apply(std::span<const double> q) const {
  Tape tape(false);
  auto out = decoder_graph(tape, *this, tape.constant(Tensor::row(q)));
  const auto& v = out.value();
  return {v.data().begin(), v.data().end()};
}

Var Decoder::apply(Tape& tape, Var q) { return decoder_graph(tape, *this, q); }

double recon_loss(std::span<const double> features, std::span<const double> q, const Decoder& decoder) {
  if (q.size() != decoder.input_dim() || features.size() != decoder.output_dim())
    throw Error("decoder-shape", "decoder maps " + std::to_string(decoder.input_dim()) + " -> " +
                                     std::to_string(decoder.output_dim()) + ", got q of " + std::to_string(q.size()) +
                                     " and features of " + std::to_string(features.size()));
  return numerics::squared_distance(features, decoder.apply(q));
}

Var orth_loss(Tape& tape, std::span<const Var> projections) {
  if (projections.empty()) throw Error("shape-mismatch", "no projections");
  const auto rows = projections[0].rows(), cols = projections[0].cols();
  for (const auto& p : projections) {
    if (p.rows() != rows || p.cols() != cols) throw Error("shape-mismatch", "projection matrices differ in shape");
  }
  auto w = ops::normalize_cols(ops::concat_cols(projections));
  auto gram = ops::matmul(ops::transpose(w), w);
  return ops::sum(ops::square(ops::sub(gram, identity_like(tape, gram.rows()))));
}

double orth_loss(std::span<const Tensor> projections) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const auto& p : projections) vars.push_back(tape.constant(p));
  return orth_loss(tape, vars).item();
}

MpqModel::MpqModel(const MpqConfig& cfg, RngStream& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto F = cfg_.feature_dim, L = cfg_.latent_dim, M = cfg_.num_codebooks, D = cfg_.codebook_size;
  const auto H = cfg_.decoder_hidden;
  for (std::size_t r = 0; r < M; ++r) {
    enc_w_.emplace_back("enc_w." + std::to_string(r), random_normal(rng, F, L, 1.0 / std::sqrt(double(F))));
    enc_b_.emplace_back("enc_b." + std::to_string(r), Tensor::matrix(1, L));
  }
  gate_w_ = Parameter("gate_w", random_normal(rng, F, M, 0.01));
  gate_b_ = Parameter("gate_b", Tensor::matrix(1, M));
  decoder_.w1 = Parameter("dec_w1", random_normal(rng, L, H, 1.0 / std::sqrt(double(L))));
  decoder_.b1 = Parameter("dec_b1", Tensor::matrix(1, H));
  decoder_.w2 = Parameter("dec_w2", random_normal(rng, H, F, 1.0 / std::sqrt(double(H))));
  decoder_.b2 = Parameter("dec_b2", Tensor::matrix(1, F));
  for (std::size_t r = 0; r < M; ++r) {
    auto cw = Tensor::matrix(D, L);
    for (std::size_t j = 0; j < D; ++j) {
      auto u = random_unit(rng, L);
      std::copy(u.begin(), u.end(), cw.row_span(j).begin());
    }
    codebooks_.push_back({cw});
    ema_size_.emplace_back(D, 1.0);
    ema_sum_.push_back(cw);
  }
}

std::vector<Parameter*> MpqModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : enc_w_) out.push_back(&p);
  for (auto& p : enc_b_) out.push_back(&p);
  out.insert(out.end(), {&gate_w_, &gate_b_, &decoder_.w1, &decoder_.b1, &decoder_.w2, &decoder_.b2});
  return out;
}

std::vector<Tensor> MpqModel::projections() const {
  std::vector<Tensor> out;
  for (const auto& p : enc_w_) out.push_back(p.value);
  return out;
}

std::vector<Tensor> MpqModel::latents(const Tensor& features) const {
  require_features(features, cfg_.feature_dim);
  std::vector<Tensor> out;
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    auto e = numerics::matmul(features, enc_w_[r].value);
    for (std::size_t i = 0; i < e.rows(); ++i)
      for (std::size_t j = 0; j < e.cols(); ++j) e(i, j) += enc_b_[r].value[j];
    out.push_back(std::move(e));
  }
  return out;
}

Tensor MpqModel::gates(const Tensor& features) const {
  require_features(features, cfg_.feature_dim);
  auto logits = numerics::matmul(features, gate_w_.value);
  auto out = Tensor::matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row_span(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += gate_b_.value[j];
    auto p = numerics::softmax(row);
    std::copy(p.begin(), p.end(), out.row_span(i).begin());
  }
  return out;
}

Selection MpqModel::select(const Tensor& features) const {
  auto lat = latents(features);
  const auto n = features.rows(), M = cfg_.num_codebooks, L = cfg_.latent_dim;
  Selection sel;
  sel.codes.assign(n, std::vector<std::size_t>(M));
  for (std::size_t r = 0; r < M; ++r) {
    auto off = Tensor::matrix(n, L), z = Tensor::matrix(n, L);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = quantize_nearest(lat[r].row_span(i), codebooks_[r]).index;
      sel.codes[i][r] = j;
      const auto cw = codebooks_[r].codeword(j);
      for (std::size_t k = 0; k < L; ++k) {
        z(i, k) = cw[k];
        off(i, k) = cw[k] - lat[r](i, k);
      }
    }
    sel.offsets.push_back(std::move(off));
    sel.selected.push_back(std::move(z));
  }
  return sel;
}

EncodedItem MpqModel::encode(std::span<const double> features) const {
  if (features.size() != cfg_.feature_dim)
    throw Error("invalid-features", "expected " + std::to_string(cfg_.feature_dim) + " features, got " +
                                        std::to_string(features.size()));
  for (double v : features) {
    if (!std::isfinite(v)) throw Error("invalid-features", "features must be finite");
  }
  return encode_all(Tensor::row(features)).front();
}

std::vector<EncodedItem> MpqModel::encode_all(const Tensor& features) const {
  const auto sel = select(features);
  const auto g = gates(features);
  const auto n = features.rows(), M = cfg_.num_codebooks, L = cfg_.latent_dim;
  std::vector<EncodedItem> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& item = out[i];
    item.tokens = TokenSet(sel.codes[i]);
    item.gates.assign(g.row_span(i).begin(), g.row_span(i).end());
    item.q.assign(L, 0.0);
    for (std::size_t r = 0; r < M; ++r) {
      const auto cw = codebooks_[r].codeword(sel.codes[i][r]);
      for (std::size_t k = 0; k < L; ++k) item.q[k] += item.gates[r] * cw[k];
    }
  }
  return out;
}

namespace {

template <typename Model, typename Enc, typename GateP, typename Dec>
Var build_training_loss(Tape& tape, const Model& cfg_holder, std::vector<Enc>& enc_w, std::vector<Enc>& enc_b,
                        GateP& gate_w, GateP& gate_b, Dec& decoder, const Tensor& features, const Selection& sel,
                        double alpha, double beta, LossParts* parts) {
  const auto& cfg = cfg_holder;
  const auto n = features.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  auto v = tape.constant(features);
  auto h = ops::softmax_rows(ops::add_row(ops::matmul(v, tape.param(gate_w)), tape.param(gate_b)));
  Var q, commit;
  std::vector<Var> projections;
  for (std::size_t r = 0; r < cfg.num_codebooks; ++r) {
    auto w = tape.param(enc_w[r]);
    projections.push_back(w);
    auto e = ops::add_row(ops::matmul(v, w), tape.param(enc_b[r]));
    // Straight-through: value is the codeword, gradient flows to e.
    auto st = ops::add(e, tape.constant(sel.offsets[r]));
    auto term = ops::mul_col(st, ops::slice_cols(h, r, 1));
    q = r == 0 ? term : ops::add(q, term);
    auto c = ops::sum(ops::square(ops::sub(e, tape.constant(sel.selected[r]))));
    commit = r == 0 ? c : ops::add(commit, c);
  }
  auto recon = ops::scale(ops::sum(ops::square(ops::sub(v, decoder_graph(tape, decoder, q)))), inv_n);
  auto orth = orth_loss(tape, projections);
  commit = ops::scale(commit, inv_n);
  auto total = ops::add(recon, ops::scale(orth, alpha));
  if (parts) {
    parts->recon = recon.item();
    parts->orth = orth.item();
    parts->commit = commit.item();
    parts->total = total.item();
  }
  return beta == 0.0 ? total : ops::add(total, ops::scale(commit, beta));
}

}  // namespace

Var MpqModel::training_loss(Tape& tape, const Tensor& features, const Selection& sel, double alpha, double beta,
                            LossParts* parts) {
  require_features(features, cfg_.feature_dim);
  return build_training_loss(tape, cfg_, enc_w_, enc_b_, gate_w_, gate_b_, decoder_, features, sel, alpha, beta,
                             parts);
}

LossParts loss_parts(const Tensor& features, const MpqModel& model, double alpha) {
  if (alpha < 0.0) throw Error("invalid-config", "alpha must be nonnegative");
  const auto sel = model.select(features);
  // A copy keeps the const model untouched; the tape only reads values.
  MpqModel scratch = model;
  Tape tape(false);
  LossParts parts;
  scratch.training_loss(tape, features, sel, alpha, 0.0, &parts);
  return parts;
}

double total_loss(const Tensor& features, const MpqModel& model, double alpha) {
  return loss_parts(features, model, alpha).total;
}

void MpqModel::ema_update(const std::vector<Tensor>& lat, const Selection& sel) {
  const auto D = cfg_.codebook_size, L = cfg_.latent_dim;
  const double decay = cfg_.ema_decay, eps = 1e-5;
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    std::vector<double> counts(D, 0.0);
    auto sums = Tensor::matrix(D, L);
    for (std::size_t i = 0; i < sel.codes.size(); ++i) {
      const auto j = sel.codes[i][r];
      counts[j] += 1.0;
      for (std::size_t k = 0; k < L; ++k) sums(j, k) += lat[r](i, k);
    }
    auto& size = ema_size_[r];
    auto& sum = ema_sum_[r];
    double total = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      size[j] = decay * size[j] + (1.0 - decay) * counts[j];
      total += size[j];
      for (std::size_t k = 0; k < L; ++k) sum(j, k) = decay * sum(j, k) + (1.0 - decay) * sums(j, k);
    }
    auto& cw = codebooks_[r].codewords;
    for (std::size_t j = 0; j < D; ++j) {
      const double smoothed = (size[j] + eps) / (total + static_cast<double>(D) * eps) * total;
      for (std::size_t k = 0; k < L; ++k) cw(j, k) = sum(j, k) / smoothed;
    }
  }
}

void MpqModel::init_codebooks(const Tensor& features, RngStream& rng) {
  const auto lat = latents(features);
  const auto n = features.rows(), D = cfg_.codebook_size, L = cfg_.latent_dim;
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    const auto& x = lat[r];
    // k-means++ seeding over the batch latents.
    std::vector<std::size_t> centers;
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    centers.push_back(rng.index(n));
    while (centers.size() < std::min(D, n)) {
      const auto last = x.row_span(centers.back());
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], numerics::squared_distance(x.row_span(i), last));
        total += d2[i];
      }
      if (!(total > 0.0)) break;  // remaining latents duplicate existing centers
      centers.push_back(rng.categorical(d2));
    }
    const auto k = centers.size();
    auto cw = Tensor::matrix(D, L);
    for (std::size_t c = 0; c < k; ++c) std::copy_n(x.row_span(centers[c]).begin(), L, cw.row_span(c).begin());
    Codebook partial{Tensor::matrix(k, L)};
    for (std::size_t c = 0; c < k; ++c) std::copy_n(cw.row_span(c).begin(), L, partial.codewords.row_span(c).begin());
    for (std::size_t it = 0; it < cfg_.kmeans_iters; ++it) {
      auto sums = Tensor::matrix(k, L);
      std::vector<double> counts(k, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto j = quantize_nearest(x.row_span(i), partial).index;
        counts[j] += 1.0;
        for (std::size_t d = 0; d < L; ++d) sums(j, d) += x(i, d);
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0.0) continue;
        for (std::size_t d = 0; d < L; ++d) partial.codewords(c, d) = sums(c, d) / counts[c];
      }
    }
    for (std::size_t c = 0; c < k; ++c) std::copy_n(partial.codewords.row_span(c).begin(), L, cw.row_span(c).begin());
    for (std::size_t c = k; c < D; ++c) {
      auto u = random_unit(rng, L);
      std::copy(u.begin(), u.end(), cw.row_span(c).begin());
    }
    codebooks_[r].codewords = cw;
    ema_sum_[r] = cw;
    ema_size_[r].assign(D, 1.0);
  }
}

std::size_t MpqModel::reseed_dead(const std::vector<std::vector<std::size_t>>& usage, const Tensor& features,
                                  RngStream& rng) {
  const auto lat = latents(features);
  const auto L = cfg_.latent_dim;
  std::size_t reseeded = 0;
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    for (std::size_t j = 0; j < cfg_.codebook_size; ++j) {
      if (usage[r][j] != 0) continue;
      const auto src = lat[r].row_span(rng.index(features.rows()));
      std::copy_n(src.begin(), L, codebooks_[r].codewords.row_span(j).begin());
      std::copy_n(src.begin(), L, ema_sum_[r].row_span(j).begin());
      ema_size_[r][j] = 1.0;
      ++reseeded;
    }
  }
  return reseeded;
}

dataeval::Checkpoint MpqModel::to_checkpoint() const {
  dataeval::Checkpoint ckpt;
  ckpt.magic = "MPQ1";
  ckpt.meta = {{"config", cfg_}};
  for (const auto& p : enc_w_) ckpt.tensors.emplace_back(p.name, p.value);
  for (const auto& p : enc_b_) ckpt.tensors.emplace_back(p.name, p.value);
  for (const auto* p : {&gate_w_, &gate_b_, &decoder_.w1, &decoder_.b1, &decoder_.w2, &decoder_.b2})
    ckpt.tensors.emplace_back(p->name, p->value);
  for (std::size_t r = 0; r < codebooks_.size(); ++r) {
    const auto suffix = "." + std::to_string(r);
    ckpt.tensors.emplace_back("codebook" + suffix, codebooks_[r].codewords);
    ckpt.tensors.emplace_back("ema_size" + suffix, Tensor({ema_size_[r].size()}, ema_size_[r]));
    ckpt.tensors.emplace_back("ema_sum" + suffix, ema_sum_[r]);
  }
  return ckpt;
}

MpqModel MpqModel::from_checkpoint(const dataeval::Checkpoint& ckpt) {
  if (ckpt.magic != "MPQ1") throw Error("incompatible-checkpoint", "not an MPQ checkpoint");
  MpqModel m;
  m.cfg_ = ckpt.meta.at("config").get<MpqConfig>();
  m.cfg_.validate();
  auto load = [&](Parameter& p, const std::string& name) {
    p = Parameter(name, ckpt.tensor(name));
  };
  m.enc_w_.resize(m.cfg_.num_codebooks);
  m.enc_b_.resize(m.cfg_.num_codebooks);
  for (std::size_t r = 0; r < m.cfg_.num_codebooks; ++r) {
    const auto suffix = "." + std::to_string(r);
    load(m.enc_w_[r], "enc_w" + suffix);
    load(m.enc_b_[r], "enc_b" + suffix);
    m.codebooks_.push_back({ckpt.tensor("codebook" + suffix)});
    const auto& size = ckpt.tensor("ema_size" + suffix);
    m.ema_size_.emplace_back(size.data().begin(), size.data().end());
    m.ema_sum_.push_back(ckpt.tensor("ema_sum" + suffix));
  }
  load(m.gate_w_, "gate_w");
  load(m.gate_b_, "gate_b");
  load(m.decoder_.w1, "dec_w1");
  load(m.decoder_.b1, "dec_b1");
  load(m.decoder_.w2, "dec_w2");
  load(m.decoder_.b2, "dec_b2");
  return m;
}

MpqTrainResult train_mpq(const Tensor& items, const MpqConfig& cfg) {
  cfg.validate();
  if (items.empty()) throw Error("empty-corpus", "no items to tokenize");
  require_features(items, cfg.feature_dim);
  const auto n = items.rows();
  RngStream root(cfg.seed);
  auto init_rng = root.substream("init");
  auto order_rng = root.substream("order");
  auto reseed_rng = root.substream("reseed");

  MpqTrainResult result;
  result.model = MpqModel(cfg, init_rng);
  auto& model = result.model;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto gather = [&](std::size_t begin, std::size_t count) {
    auto b = Tensor::matrix(count, cfg.feature_dim);
    for (std::size_t i = 0; i < count; ++i)
      std::copy_n(items.row_span(order[begin + i]).begin(), cfg.feature_dim, b.row_span(i).begin());
    return b;
  };

  order_rng.shuffle(order.begin(), order.end());
  model.init_codebooks(gather(0, std::min(cfg.batch_size, n)), init_rng);

  const auto initial = loss_parts(items, model, cfg.alpha);
  result.initial_loss = initial.total;
  result.initial_recon = initial.recon;
  MpqModel best = model;
  double best_loss = initial.total;

  numerics::Adam opt(model.parameters(), numerics::AdamConfig{.lr = cfg.lr, .clip_norm = 10.0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> usage(cfg.num_codebooks, std::vector<std::size_t>(cfg.codebook_size, 0));
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const auto batch = gather(begin, std::min(cfg.batch_size, n - begin));
      const auto sel = model.select(batch);
      const auto lat = model.latents(batch);
      for (const auto& codes : sel.codes)
        for (std::size_t r = 0; r < codes.size(); ++r) ++usage[r][codes[r]];
      opt.zero_grad();
      Tape tape;
      auto loss = model.training_loss(tape, batch, sel, cfg.alpha, cfg.beta);
      if (!std::isfinite(loss.item())) throw Error("mpq-diverged", "non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      opt.step();
      model.ema_update(lat, sel);
    }
    result.reseeded += model.reseed_dead(usage, items, reseed_rng);
    const auto parts = loss_parts(items, model, cfg.alpha);
    if (!std::isfinite(parts.total)) throw Error("mpq-diverged", "non-finite loss at epoch " + std::to_string(epoch));
    result.loss_curve.push_back(parts.total);
    result.recon_curve.push_back(parts.recon);
    if (parts.total < best_loss) {
      best_loss = parts.total;
      best = model;
    }
  }
  result.model = std::move(best);
  return result;
}

std::vector<TokenRecord> export_tokens(const MpqModel& model, std::span<const std::string> item_ids,
                                       const Tensor& features) {
  if (item_ids.size() != features.rows())
    throw Error("invalid-features", "got " + std::to_string(item_ids.size()) + " ids for " +
                                        std::to_string(features.rows()) + " feature rows");
  const auto encoded = model.encode_all(features);
  std::vector<TokenRecord> out;
  out.reserve(encoded.size());
  for (std::size_t i = 0; i < encoded.size(); ++i) out.push_back({item_ids[i], encoded[i].tokens, encoded[i].gates});
  return out;
}

std::string token_record_to_json(const TokenRecord& rec) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& t : rec.tokens.tokens()) tokens.push_back({t.codebook, t.code});
  nlohmann::json j = {{"item", rec.item}, {"tokens", tokens}, {"gates", rec.gates}};
  return j.dump();
}

TokenRecord token_record_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  TokenRecord rec;
  rec.item = j.at("item").get<std::string>();
  std::vector<Token> tokens;
  for (const auto& t : j.at("tokens")) tokens.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>()});
  rec.tokens = TokenSet::from_tokens(tokens, tokens.size());
  rec.gates = j.at("gates").get<std::vector<double>>();
  return rec;
}

void write_token_map(const std::filesystem::path& path, std::span<const TokenRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  for (const auto& rec : records) out << token_record_to_json(rec) << '\n';
  if (!out) throw Error("io-error", "short write to " + path.string());
}

std::vector<TokenRecord> read_token_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open " + path.string());
  std::vector<TokenRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(token_record_from_json(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error("invalid-token-map", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace reg4rec::mpq
