#include "reg4rec/seqmodel/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/optim.hpp"
#include "reg4rec/numerics/prob.hpp"

namespace reg4rec::seqmodel {

namespace ops = numerics::ops;
using numerics::RngStream;

void SeqConfig::validate() const {
  if (num_codebooks == 0 || codebook_size < 2) throw Error("invalid-config", "need M >= 1 and D >= 2");
  if (num_categories < 2) throw Error("invalid-config", "category vocabulary needs at least 2 labels");
  if (embed_dim == 0 || hidden_dim == 0) throw Error("invalid-config", "dimensions must be positive");
  if (max_context == 0) throw Error("invalid-config", "max_context must be positive");
  if (lambda_c < 0.0) throw Error("invalid-config", "lambda_c must be nonnegative");
  if (batch_size == 0) throw Error("invalid-config", "batch size must be positive");
}

void to_json(nlohmann::json& j, const SeqConfig& c) {
  j = {{"num_codebooks", c.num_codebooks}, {"codebook_size", c.codebook_size}, {"num_categories", c.num_categories},
       {"embed_dim", c.embed_dim},         {"hidden_dim", c.hidden_dim},       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers}, {"max_context", c.max_context},   {"lambda_c", c.lambda_c},
       {"lr", c.lr},                       {"clip_norm", c.clip_norm},         {"epochs", c.epochs},
       {"batch_size", c.batch_size},       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SeqConfig& c) {
  SeqConfig d;
  c.num_codebooks = j.value("num_codebooks", d.num_codebooks);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.num_categories = j.value("num_categories", d.num_categories);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.max_context = j.value("max_context", d.max_context);
  c.lambda_c = j.value("lambda_c", d.lambda_c);
  c.lr = j.value("lr", d.lr);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
}

Tensor position_encoding(std::size_t n, std::size_t dim) {
  auto pe = Tensor::matrix(n, dim);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(pos) * freq;
      pe(pos, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

namespace {

Parameter normal_param(std::string name, RngStream& rng, std::size_t r, std::size_t c, double scale) {
  auto t = Tensor::matrix(r, c);
  for (auto& v : t.data()) v = scale * rng.normal();
  return Parameter(std::move(name), std::move(t));
}

Parameter zero_param(std::string name, std::size_t r, std::size_t c) {
  return Parameter(std::move(name), Tensor::matrix(r, c));
}

SeqModel::Attention make_attention(const std::string& prefix, RngStream& rng, std::size_t e) {
  const double s = 1.0 / std::sqrt(static_cast<double>(e));
  return {normal_param(prefix + ".wq", rng, e, e, s), normal_param(prefix + ".wk", rng, e, e, s),
          normal_param(prefix + ".wv", rng, e, e, s), normal_param(prefix + ".wo", rng, e, e, s)};
}

SeqModel::FeedForward make_ffn(const std::string& prefix, RngStream& rng, std::size_t e, std::size_t h) {
  return {normal_param(prefix + ".w1", rng, e, h, std::sqrt(2.0 / static_cast<double>(e))),
          zero_param(prefix + ".b1", 1, h),
          normal_param(prefix + ".w2", rng, h, e, 1.0 / std::sqrt(static_cast<double>(h))),
          zero_param(prefix + ".b2", 1, e)};
}

void check_token(const Token& t, const SeqConfig& cfg) {
  if (t.codebook >= cfg.num_codebooks || t.code >= cfg.codebook_size)
    throw Error("unknown-token", "token (" + std::to_string(t.codebook) + ", " + std::to_string(t.code) +
                                     ") outside vocabulary of " + std::to_string(cfg.num_codebooks) + " x " +
                                     std::to_string(cfg.codebook_size));
}

void check_set(const TokenSet& s, const SeqConfig& cfg) {
  if (s.size() != cfg.num_codebooks)
    throw Error("unknown-token", "token set has " + std::to_string(s.size()) + " tokens, model expects " +
                                     std::to_string(cfg.num_codebooks));
  for (std::size_t r = 0; r < s.size(); ++r) check_token({r, s.code(r)}, cfg);
}

}  // namespace

// Forward graph shared by the mutable (gradient-recording) and const views.
template <typename Self>
struct Graph {
  Self& m;
  Tape& t;

  template <typename P>
  Var p(P& param) {
    return t.param(param);
  }

  template <typename A>
  Var attend(A& a, Var xq, Var xkv, bool causal) {
    const double s = 1.0 / std::sqrt(static_cast<double>(m.cfg_.embed_dim));
    auto q = ops::matmul(xq, p(a.wq));
    auto k = ops::matmul(xkv, p(a.wk));
    auto v = ops::matmul(xkv, p(a.wv));
    auto w = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), s), causal);
    return ops::matmul(ops::matmul(w, v), p(a.wo));
  }

  template <typename F>
  Var ffn(F& f, Var x) {
    auto h = ops::relu(ops::add_row(ops::matmul(x, p(f.w1)), p(f.b1)));
    return ops::add_row(ops::matmul(h, p(f.w2)), p(f.b2));
  }

  Var memory(std::span<const TokenSet> history) {
    if (history.empty()) throw Error("empty-history", "user history has no items");
    if (history.size() > m.cfg_.max_context) history = history.subspan(history.size() - m.cfg_.max_context);
    const auto T = history.size(), M = m.cfg_.num_codebooks, D = m.cfg_.codebook_size;
    std::vector<std::size_t> idx;
    idx.reserve(T * M);
    auto pool = Tensor::matrix(T, T * M);
    for (std::size_t i = 0; i < T; ++i) {
      check_set(history[i], m.cfg_);
      for (std::size_t r = 0; r < M; ++r) {
        pool(i, idx.size()) = 1.0;
        idx.push_back(r * D + history[i].code(r));
      }
    }
    auto x = ops::matmul(t.constant(std::move(pool)), ops::gather_rows(p(m.tok_emb_), idx));
    x = ops::add_row(x, ops::sum_rows(p(m.cb_emb_)));
    x = ops::add(x, t.constant(position_encoding(T, m.cfg_.embed_dim)));
    for (auto& layer : m.enc_) {
      auto n = ops::layer_norm_rows(x);
      x = ops::add(x, attend(layer.self, n, n, false));
      x = ops::add(x, ffn(layer.ffn, ops::layer_norm_rows(x)));
    }
    return ops::layer_norm_rows(x);
  }

  Var hidden(Var memory, std::span<const Token> prefix) {
    const auto D = m.cfg_.codebook_size;
    Var x = p(m.bos_);
    if (!prefix.empty()) {
      std::vector<std::size_t> tok, cb;
      for (const auto& tk : prefix) {
        check_token(tk, m.cfg_);
        tok.push_back(tk.codebook * D + tk.code);
        cb.push_back(tk.codebook);
      }
      auto steps = ops::add(ops::gather_rows(p(m.tok_emb_), tok), ops::gather_rows(p(m.cb_emb_), cb));
      std::vector<Var> parts{x, steps};
      x = ops::concat_rows(parts);
    }
    x = ops::add(x, t.constant(position_encoding(prefix.size() + 1, m.cfg_.embed_dim)));
    for (auto& layer : m.dec_) {
      auto n = ops::layer_norm_rows(x);
      x = ops::add(x, attend(layer.self, n, n, true));
      x = ops::add(x, attend(layer.cross, ops::layer_norm_rows(x), memory, false));
      x = ops::add(x, ffn(layer.ffn, ops::layer_norm_rows(x)));
    }
    return ops::layer_norm_rows(x);
  }

  Var token_logits(Var h, std::size_t r) {
    if (r >= m.cfg_.num_codebooks) throw Error("unknown-token", "codebook " + std::to_string(r) + " out of range");
    return ops::add_row(ops::matmul(h, p(m.head_w_[r])), p(m.head_b_[r]));
  }

  Var category_logits(Var h) { return ops::add_row(ops::matmul(h, p(m.cat_w_)), p(m.cat_b_)); }
};

template <typename Self>
Graph(Self&, Tape&) -> Graph<Self>;

SeqModel::SeqModel(const SeqConfig& cfg, RngStream& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto M = cfg_.num_codebooks, D = cfg_.codebook_size, E = cfg_.embed_dim, H = cfg_.hidden_dim;
  const double emb = 1.0 / std::sqrt(static_cast<double>(M));
  tok_emb_ = normal_param("tok_emb", rng, M * D, E, emb);
  cb_emb_ = normal_param("cb_emb", rng, M, E, emb);
  bos_ = normal_param("bos", rng, 1, E, 1.0);
  for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
    const auto p = "enc." + std::to_string(l);
    enc_.push_back({make_attention(p + ".self", rng, E), make_ffn(p + ".ffn", rng, E, H)});
  }
  for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
    const auto p = "dec." + std::to_string(l);
    dec_.push_back({make_attention(p + ".self", rng, E), make_attention(p + ".cross", rng, E),
                    make_ffn(p + ".ffn", rng, E, H)});
  }
  for (std::size_t r = 0; r < M; ++r) {
    head_w_.push_back(zero_param("head_w." + std::to_string(r), E, D));
    head_b_.push_back(zero_param("head_b." + std::to_string(r), 1, D));
  }
  cat_w_ = zero_param("cat_w", E, cfg_.num_categories);
  cat_b_ = zero_param("cat_b", 1, cfg_.num_categories);
}

Tensor SeqModel::embed_token_set(const TokenSet& tokens) const {
  check_set(tokens, cfg_);
  auto out = Tensor::matrix(1, cfg_.embed_dim);
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    const auto tok = tok_emb_.value.row_span(r * cfg_.codebook_size + tokens.code(r));
    const auto cb = cb_emb_.value.row_span(r);
    for (std::size_t k = 0; k < cfg_.embed_dim; ++k) out[k] += tok[k] + cb[k];
  }
  return out;
}

Memory SeqModel::encode_history(std::span<const TokenSet> history) const {
  Tape tape(false);
  Memory mem;
  mem.truncated = history.size() > cfg_.max_context;
  mem.states = memory_graph(tape, history).value();
  return mem;
}

StepOutputs SeqModel::step_outputs(const Memory& memory, std::span<const Token> prefix) const {
  if (prefix.size() >= cfg_.num_codebooks) throw Error("codebook-consumed", "every codebook is already decoded");
  Tape tape(false);
  auto h = hidden_graph(tape, tape.constant(memory.states), prefix);
  auto last = ops::slice_rows(h, prefix.size(), 1);
  StepOutputs out;
  out.logits = Tensor::matrix(cfg_.num_codebooks, cfg_.codebook_size);
  for (std::size_t r = 0; r < cfg_.num_codebooks; ++r) {
    const auto& lv = token_logits_graph(tape, last, r).value();
    std::copy(lv.data().begin(), lv.data().end(), out.logits.row_span(r).begin());
  }
  out.category = numerics::softmax(category_logits_graph(tape, last).value().data());
  return out;
}

StepDistribution SeqModel::decode_step(const DecoderState& state, std::size_t r) const {
  if (r >= cfg_.num_codebooks) throw Error("unknown-token", "codebook " + std::to_string(r) + " out of range");
  for (const auto& t : state.prefix) {
    if (t.codebook == r) throw Error("codebook-consumed", "codebook " + std::to_string(r) + " already decoded");
  }
  auto out = step_outputs(state.memory, state.prefix);
  const auto row = out.logits.row_span(r);
  return {{row.begin(), row.end()}, std::move(out.category)};
}

Var SeqModel::memory_graph(Tape& tape, std::span<const TokenSet> history) {
  return Graph{*this, tape}.memory(history);
}
Var SeqModel::memory_graph(Tape& tape, std::span<const TokenSet> history) const {
  return Graph{*this, tape}.memory(history);
}
Var SeqModel::hidden_graph(Tape& tape, Var memory, std::span<const Token> prefix) {
  return Graph{*this, tape}.hidden(memory, prefix);
}
Var SeqModel::hidden_graph(Tape& tape, Var memory, std::span<const Token> prefix) const {
  return Graph{*this, tape}.hidden(memory, prefix);
}
Var SeqModel::token_logits_graph(Tape& tape, Var hidden, std::size_t r) {
  return Graph{*this, tape}.token_logits(hidden, r);
}
Var SeqModel::token_logits_graph(Tape& tape, Var hidden, std::size_t r) const {
  return Graph{*this, tape}.token_logits(hidden, r);
}
Var SeqModel::category_logits_graph(Tape& tape, Var hidden) { return Graph{*this, tape}.category_logits(hidden); }
Var SeqModel::category_logits_graph(Tape& tape, Var hidden) const {
  return Graph{*this, tape}.category_logits(hidden);
}

std::vector<Layer> SeqModel::layers() {
  std::vector<Layer> out;
  out.push_back({"embed", {&tok_emb_, &cb_emb_, &bos_}});
  auto attn = [](Attention& a, std::vector<Parameter*>& ps) { ps.insert(ps.end(), {&a.wq, &a.wk, &a.wv, &a.wo}); };
  auto ff = [](FeedForward& f, std::vector<Parameter*>& ps) { ps.insert(ps.end(), {&f.w1, &f.b1, &f.w2, &f.b2}); };
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    Layer layer{"enc." + std::to_string(l), {}};
    attn(enc_[l].self, layer.params);
    ff(enc_[l].ffn, layer.params);
    out.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    Layer layer{"dec." + std::to_string(l), {}};
    attn(dec_[l].self, layer.params);
    attn(dec_[l].cross, layer.params);
    ff(dec_[l].ffn, layer.params);
    out.push_back(std::move(layer));
  }
  Layer heads{"heads", {}};
  for (auto& p : head_w_) heads.params.push_back(&p);
  for (auto& p : head_b_) heads.params.push_back(&p);
  heads.params.insert(heads.params.end(), {&cat_w_, &cat_b_});
  out.push_back(std::move(heads));
  return out;
}

std::vector<Parameter*> SeqModel::all_params() {
  std::vector<Parameter*> out;
  for (auto& layer : layers()) out.insert(out.end(), layer.params.begin(), layer.params.end());
  return out;
}

std::vector<Parameter*> SeqModel::parameters() { return all_params(); }

dataeval::Checkpoint SeqModel::to_checkpoint() const {
  dataeval::Checkpoint ckpt;
  ckpt.magic = "SEQ1";
  ckpt.meta = {{"config", cfg_}, {"codebooks", codebooks_.size()}};
  for (const auto* p : const_cast<SeqModel*>(this)->all_params()) ckpt.tensors.emplace_back(p->name, p->value);
  for (std::size_t r = 0; r < codebooks_.size(); ++r)
    ckpt.tensors.emplace_back("codebook." + std::to_string(r), codebooks_[r]);
  return ckpt;
}

SeqModel SeqModel::from_checkpoint(const dataeval::Checkpoint& ckpt) {
  if (ckpt.magic != "SEQ1") throw Error("incompatible-checkpoint", "not a sequence-model checkpoint");
  const auto cfg = ckpt.meta.at("config").get<SeqConfig>();
  RngStream rng(0);
  SeqModel m(cfg, rng);
  for (auto* p : m.all_params()) {
    const auto& t = ckpt.tensor(p->name);
    if (t.shape() != p->value.shape())
      throw Error("incompatible-checkpoint", "tensor '" + p->name + "' has shape " + t.shape_string() +
                                                 ", expected " + p->value.shape_string());
    *p = Parameter(p->name, t);
  }
  const auto n = ckpt.meta.value("codebooks", std::size_t{0});
  for (std::size_t r = 0; r < n; ++r) m.codebooks_.push_back(ckpt.tensor("codebook." + std::to_string(r)));
  return m;
}

namespace {

std::vector<Token> canonical_prefix(const TokenSet& target) {
  auto toks = target.tokens();
  toks.pop_back();
  return toks;
}

template <typename Model>
Var example_loss(Tape& tape, Model& model, const Example& ex, double lambda_c, double& token, double& cate) {
  const auto& cfg = model.config();
  check_set(ex.target, cfg);
  if (ex.category >= cfg.num_categories)
    throw Error("unknown-category", "category " + std::to_string(ex.category) + " outside vocabulary");
  auto mem = model.memory_graph(tape, ex.history);
  auto h = model.hidden_graph(tape, mem, canonical_prefix(ex.target));
  Var tok_nll;
  for (std::size_t r = 0; r < cfg.num_codebooks; ++r) {
    auto lp = ops::log_softmax_rows(model.token_logits_graph(tape, ops::slice_rows(h, r, 1), r));
    auto term = ops::pick(lp, 0, ex.target.code(r));
    tok_nll = r == 0 ? term : ops::add(tok_nll, term);
  }
  tok_nll = ops::scale(tok_nll, -1.0);
  auto lc = ops::log_softmax_rows(model.category_logits_graph(tape, h));
  auto cat_nll = ops::scale(ops::sum(ops::slice_cols(lc, ex.category, 1)), -1.0);
  token += tok_nll.item();
  cate += cat_nll.item();
  return lambda_c == 0.0 ? tok_nll : ops::add(tok_nll, ops::scale(cat_nll, lambda_c));
}

}  // namespace

Var pretrain_loss(Tape& tape, SeqModel& model, std::span<const Example* const> batch, double lambda_c,
                  LossBreakdown* parts) {
  if (batch.empty()) throw Error("empty-corpus", "empty batch");
  double token = 0.0, cate = 0.0;
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto l = example_loss(tape, model, *batch[i], lambda_c, token, cate);
    total = i == 0 ? l : ops::add(total, l);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total = ops::scale(total, inv);
  if (parts) *parts = {token * inv, cate * inv, total.item()};
  return total;
}

LossBreakdown evaluate_loss(const SeqModel& model, std::span<const Example> examples, double lambda_c) {
  if (examples.empty()) throw Error("empty-corpus", "no examples");
  double token = 0.0, cate = 0.0;
  for (const auto& ex : examples) {
    Tape tape(false);
    example_loss(tape, model, ex, lambda_c, token, cate);
  }
  const double inv = 1.0 / static_cast<double>(examples.size());
  return {token * inv, cate * inv, (token + lambda_c * cate) * inv};
}

double token_accuracy(const SeqModel& model, std::span<const Example> examples) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0, total = 0;
  for (const auto& ex : examples) {
    Tape tape(false);
    auto mem = model.memory_graph(tape, ex.history);
    auto h = model.hidden_graph(tape, mem, canonical_prefix(ex.target));
    for (std::size_t r = 0; r < model.num_codebooks(); ++r) {
      const auto& lv = model.token_logits_graph(tape, ops::slice_rows(h, r, 1), r).value();
      hits += numerics::argmax(lv.data()) == ex.target.code(r);
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

PretrainResult pretrain(std::span<const Example> examples, const SeqConfig& cfg, const SeqModel* init,
                        const StepHooks& hooks) {
  cfg.validate();
  if (examples.empty()) throw Error("empty-corpus", "no pretraining examples");
  RngStream root(cfg.seed);
  auto init_rng = root.substream("seq-init");
  auto order_rng = root.substream("seq-order");
  PretrainResult result;
  result.model = init ? *init : SeqModel(cfg, init_rng);
  auto& model = result.model;
  result.initial = evaluate_loss(model, examples, cfg.lambda_c);

  numerics::Adam opt(model.parameters(), numerics::AdamConfig{.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  std::vector<const Example*> order;
  for (const auto& ex : examples) order.push_back(&ex);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    EpochMetrics em{epoch + 1, 0.0, 0.0, 0.0};
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const auto n = std::min(cfg.batch_size, order.size() - begin);
      std::span<const Example* const> batch(order.data() + begin, n);
      if (hooks.before_step) hooks.before_step(model, step, batch);
      ++step;
      opt.zero_grad();
      Tape tape;
      LossBreakdown parts;
      auto loss = pretrain_loss(tape, model, batch, cfg.lambda_c, &parts);
      if (!std::isfinite(parts.total))
        throw Error("pretrain-diverged", "non-finite loss in epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      if (hooks.before_update) hooks.before_update(model);
      opt.step();
      const double w = static_cast<double>(n) / static_cast<double>(order.size());
      em.token_loss += w * parts.token;
      em.cate_loss += w * parts.cate;
      em.total += w * parts.total;
    }
    result.metrics.push_back(em);
  }
  result.final = evaluate_loss(model, examples, cfg.lambda_c);
  if (!std::isfinite(result.final.total)) throw Error("pretrain-diverged", "non-finite final loss");
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> metrics) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  out << "epoch,token_loss,cate_loss,total\n" << std::setprecision(17);
  for (const auto& m : metrics) out << m.epoch << ',' << m.token_loss << ',' << m.cate_loss << ',' << m.total << '\n';
  if (!out) throw Error("io-error", "short write to " + path.string());
}

}  // namespace reg4rec::seqmodel
