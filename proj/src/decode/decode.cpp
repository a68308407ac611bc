#include "reg4rec/decode/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/prob.hpp"

namespace reg4rec::decode {

ModelScorer::ModelScorer(const seqmodel::SeqModel& model, std::span<const TokenSet> history)
    : model_(model), memory_(model.encode_history(history)) {}

StepOutputs ModelScorer::score(std::span<const Token> prefix) const { return model_.step_outputs(memory_, prefix); }

ReasoningPath ReasoningPath::start(std::size_t num_codebooks) {
  ReasoningPath p;
  p.active.resize(num_codebooks);
  std::iota(p.active.begin(), p.active.end(), std::size_t{0});
  return p;
}

std::vector<Token> ReasoningPath::prefix() const {
  std::vector<Token> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back({s.codebook, s.code});
  return out;
}

TokenSet ReasoningPath::token_set() const {
  if (!active.empty() || steps.empty()) throw Error("incomplete-path", std::to_string(active.size()) + " codebooks left");
  const auto toks = prefix();
  return TokenSet::from_tokens(toks, toks.size());
}

double ReasoningPath::log_prob() const {
  double lp = 0.0;
  for (const auto& s : steps) lp += std::log(s.confidence);
  return lp;
}

void ReasoningPath::truncate(std::size_t keep) {
  while (steps.size() > keep) {
    active.push_back(steps.back().codebook);
    steps.pop_back();
  }
  std::sort(active.begin(), active.end());
  if (status == PathStatus::complete) status = PathStatus::alive;
}

namespace {

bool finite_row(std::span<const double> row) {
  return std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

void crss_next(const PathScorer& scorer, ReasoningPath& path, Mode mode, RngStream* rng) {
  if (path.active.empty()) throw Error("path-finished", "no active codebooks left");
  if (mode == Mode::sample && rng == nullptr) throw Error("missing-rng", "sample mode needs a random stream");
  auto out = scorer.score(path.prefix());
  bool found = false;
  PathStep best;
  for (const auto r : path.active) {
    const auto row = out.logits.row_span(r);
    if (!finite_row(row)) continue;
    const auto probs = numerics::softmax(row);
    std::size_t c = 0;
    if (mode == Mode::greedy) {
      c = numerics::argmax(probs);
    } else {
      c = rng->categorical(probs);
    }
    if (!found || probs[c] > best.confidence) {
      best = {r, c, probs[c], {}};
      found = true;
    }
  }
  if (!found) throw Error("decode-failure", "all active codebooks produced non-finite logits");
  best.category = std::move(out.category);
  path.active.erase(std::find(path.active.begin(), path.active.end(), best.codebook));
  path.steps.push_back(std::move(best));
  if (path.active.empty()) path.status = PathStatus::complete;
}

ReasoningPath generate_path(const PathScorer& scorer, Mode mode, RngStream* rng) {
  if (mode == Mode::sample && rng == nullptr) throw Error("missing-rng", "sample mode needs a random stream");
  auto path = ReasoningPath::start(scorer.num_codebooks());
  while (!path.active.empty()) crss_next(scorer, path, mode, rng);
  return path;
}

CorpDecision corp_check(const ReasoningPath& path, double theta, std::size_t s) {
  if (!(theta > 0.0)) throw Error("invalid-threshold", "theta must be positive");
  if (s == 0) throw Error("invalid-threshold", "reflection period must be positive");
  const auto n = path.steps.size();
  if (n < s + 1) throw Error("short-path", "need at least " + std::to_string(s + 1) + " steps");
  const auto& newer = path.steps[n - 1].category;
  const auto earlier = n - 1 - s;
  const auto& older = path.steps[earlier].category;
  numerics::validate_distribution(older, 1e-9);
  numerics::validate_distribution(newer, 1e-9);
  CorpDecision d;
  d.js = numerics::js_divergence(older, newer);
  if (d.js > theta) {
    d.rollback = true;
    d.keep = earlier;
  }
  return d;
}

ReasoningPath generate_with_reflection(const PathScorer& scorer, Mode mode, const ReflectionConfig& cfg,
                                       RngStream& rng) {
  auto path = ReasoningPath::start(scorer.num_codebooks());
  const bool enabled = std::isfinite(cfg.theta);
  RngStream stream = rng;
  std::size_t retries = 0;
  while (!path.active.empty()) {
    crss_next(scorer, path, mode, &stream);
    const auto n = path.steps.size();
    if (!enabled || n <= cfg.period || n % cfg.period != 0) continue;
    const auto d = corp_check(path, cfg.theta, cfg.period);
    if (!d.rollback) continue;
    path.rollbacks.push_back({n, d.keep, d.js});
    if (retries == cfg.retry_budget) {
      path.status = PathStatus::pruned;
      return path;
    }
    ++retries;
    path.truncate(d.keep);
    mode = Mode::sample;
    stream = rng.substream(retries);
  }
  return path;
}

RetrievalIndex::RetrievalIndex(std::vector<Tensor> codebooks, std::vector<CatalogItem> items)
    : codebooks_(std::move(codebooks)), items_(std::move(items)) {
  if (items_.empty()) throw Error("empty-catalog", "retrieval index needs at least one item");
  if (codebooks_.empty()) throw Error("empty-catalog", "retrieval index needs codebooks");
  const auto M = codebooks_.size(), L = codebooks_[0].cols();
  vectors_ = Tensor::matrix(items_.size(), L);
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& it = items_[i];
    if (!by_id_.emplace(it.id, i).second) throw Error("duplicate-item", "item '" + it.id + "' indexed twice");
    if (it.tokens.size() != M || it.gates.size() != M)
      throw Error("unknown-token", "item '" + it.id + "' does not have one token and gate per codebook");
    auto row = vectors_.row_span(i);
    for (std::size_t r = 0; r < M; ++r) {
      if (it.tokens.code(r) >= codebooks_[r].rows())
        throw Error("unknown-token", "item '" + it.id + "' uses code " + std::to_string(it.tokens.code(r)) +
                                         " outside codebook " + std::to_string(r));
      const auto cw = codebooks_[r].row_span(it.tokens.code(r));
      for (std::size_t k = 0; k < L; ++k) row[k] += it.gates[r] * cw[k];
    }
  }
}

std::optional<std::size_t> RetrievalIndex::find(const std::string& id) const {
  if (auto it = by_id_.find(id); it != by_id_.end()) return it->second;
  return std::nullopt;
}

std::vector<double> RetrievalIndex::query(std::span<const Token> tokens) const {
  if (codebooks_.empty()) throw Error("empty-catalog", "index is empty");
  const auto L = codebooks_[0].cols();
  std::vector<double> z(L, 0.0);
  if (tokens.empty()) return z;
  const double w = 1.0 / static_cast<double>(tokens.size());
  for (const auto& t : tokens) {
    if (t.codebook >= codebooks_.size() || t.code >= codebooks_[t.codebook].rows())
      throw Error("unknown-token", "token outside the index codebooks");
    const auto cw = codebooks_[t.codebook].row_span(t.code);
    for (std::size_t k = 0; k < L; ++k) z[k] += w * cw[k];
  }
  return z;
}

std::vector<Ranked> RetrievalIndex::nearest(std::span<const double> z, std::size_t n) const {
  if (items_.empty()) throw Error("empty-catalog", "index is empty");
  std::vector<std::pair<double, std::size_t>> d(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) d[i] = {numerics::squared_distance(z, vectors_.row_span(i)), i};
  const auto cmp = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return items_[a.second].id < items_[b.second].id;
  };
  n = std::min(n, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), d.end(), cmp);
  std::vector<Ranked> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({items_[d[i].second].id, d[i].second, std::sqrt(d[i].first)});
  return out;
}

std::vector<Token> retain_confident(const ReasoningPath& path, std::size_t d) {
  std::vector<std::size_t> order(path.steps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return path.steps[a].confidence > path.steps[b].confidence;
  });
  order.resize(order.size() - std::min(d, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<Token> out;
  for (auto i : order) out.push_back({path.steps[i].codebook, path.steps[i].code});
  return out;
}

std::vector<Ranked> retrieve_topn(const ReasoningPath& path, const RetrievalIndex& index, std::size_t n,
                                  std::size_t d) {
  if (index.size() == 0) throw Error("empty-catalog", "index is empty");
  if (n == 0) throw Error("invalid-topn", "N must be at least 1");
  if (d >= path.num_codebooks()) throw Error("invalid-drop", "d must be smaller than M");
  const auto z = index.query(retain_confident(path, d));
  return index.nearest(z, n);
}

}  // namespace reg4rec::decode
