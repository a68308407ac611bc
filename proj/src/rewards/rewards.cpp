#include "reg4rec/rewards/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/prob.hpp"

namespace reg4rec::rewards {

void RewardConfig::validate() const {
  if (h == 0) throw Error("invalid-config", "msra horizon must be at least 1");
  if (!(w > 0.0 && w <= 1.0)) throw Error("invalid-decay", "w must lie in (0, 1]");
  if (top_n == 0) throw Error("invalid-config", "top_n must be at least 1");
}

void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = {{"msra", c.msra},         {"h", c.h},
       {"w", c.w},               {"top_n", c.top_n},
       {"drop", c.drop},         {"js_mode", c.js_mode == JsMode::normalized ? "normalized" : "raw"},
       {"use_step", c.use_step}, {"use_cate", c.use_cate},
       {"use_js", c.use_js},     {"use_path", c.use_path}};
}

void from_json(const nlohmann::json& j, RewardConfig& c) {
  RewardConfig d;
  c.msra = j.value("msra", d.msra);
  c.h = j.value("h", d.h);
  c.w = j.value("w", d.w);
  c.top_n = j.value("top_n", d.top_n);
  c.drop = j.value("drop", d.drop);
  const auto mode = j.value("js_mode", std::string("normalized"));
  if (mode != "normalized" && mode != "raw") throw Error("invalid-config", "js_mode must be normalized or raw");
  c.js_mode = mode == "raw" ? JsMode::raw : JsMode::normalized;
  c.use_step = j.value("use_step", d.use_step);
  c.use_cate = j.value("use_cate", d.use_cate);
  c.use_js = j.value("use_js", d.use_js);
  c.use_path = j.value("use_path", d.use_path);
}

namespace {

void require_complete(const ReasoningPath& path) {
  if (path.steps.empty() || !path.active.empty())
    throw Error("incomplete-path", std::to_string(path.active.size()) + " codebooks not yet decoded");
}

void require_window(const FutureWindow& window) {
  if (window.items.empty()) throw Error("empty-window", "future window has no items");
  if (!(window.w > 0.0 && window.w <= 1.0)) throw Error("invalid-decay", "w must lie in (0, 1]");
}

template <typename F>
double over_window(const FutureWindow& window, F&& per_item) {
  require_window(window);
  std::vector<double> r;
  r.reserve(window.items.size());
  for (const auto& t : window.items) r.push_back(per_item(t));
  return decay_mean(r, window.w);
}

}  // namespace

double step_hit(const ReasoningPath& path, const TokenSet& target) {
  require_complete(path);
  if (target.size() != path.steps.size())
    throw Error("incomplete-path", "path has " + std::to_string(path.steps.size()) + " steps, target " +
                                       std::to_string(target.size()) + " tokens");
  std::size_t hits = 0;
  for (const auto& s : path.steps) hits += target.contains({s.codebook, s.code});
  return static_cast<double>(hits) / static_cast<double>(path.steps.size());
}

double category_hit(const ReasoningPath& path, std::size_t target_category) {
  require_complete(path);
  std::size_t hits = 0;
  for (const auto& s : path.steps) {
    if (s.category.empty()) throw Error("no-category", "step has no category distribution");
    hits += numerics::argmax(s.category) == target_category;
  }
  return static_cast<double>(hits) / static_cast<double>(path.steps.size());
}

double step_consistency(const ReasoningPath& path, JsMode mode) {
  const auto n = path.steps.size();
  if (n < 2) throw Error("short-path", "consistency needs at least two steps");
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    numerics::validate_distribution(path.steps[i].category);
    numerics::validate_distribution(path.steps[i + 1].category);
    double js = numerics::js_divergence(path.steps[i].category, path.steps[i + 1].category);
    if (mode == JsMode::normalized) js /= std::log(2.0);
    sum += js;
  }
  return std::clamp(1.0 - sum / static_cast<double>(n - 1), 0.0, 1.0);
}

std::vector<mpq::Token> retain_for_target(const ReasoningPath& path, const TokenSet& target, std::size_t d) {
  std::vector<std::size_t> wrong;
  for (std::size_t i = 0; i < path.steps.size(); ++i)
    if (!target.contains({path.steps[i].codebook, path.steps[i].code})) wrong.push_back(i);
  std::stable_sort(wrong.begin(), wrong.end(), [&](std::size_t a, std::size_t b) {
    return path.steps[a].confidence < path.steps[b].confidence;
  });
  wrong.resize(std::min(d, wrong.size()));
  std::vector<mpq::Token> out;
  for (std::size_t i = 0; i < path.steps.size(); ++i)
    if (std::find(wrong.begin(), wrong.end(), i) == wrong.end())
      out.push_back({path.steps[i].codebook, path.steps[i].code});
  return out;
}

double global_path(const ReasoningPath& path, const Target& target, const RetrievalIndex& index, std::size_t n,
                   std::size_t d) {
  require_complete(path);
  if (d >= path.steps.size()) throw Error("invalid-drop", "d must be smaller than M");
  if (index.size() == 0) throw Error("empty-catalog", "index is empty");
  if (!index.find(target.item)) return 0.0;
  const auto z = index.query(retain_for_target(path, target.tokens, d));
  for (const auto& r : index.nearest(z, n))
    if (r.id == target.item) return 1.0;
  return 0.0;
}

double decay_mean(std::span<const double> per_item, double w) {
  if (per_item.empty()) throw Error("empty-window", "no per-item rewards");
  if (!(w > 0.0 && w <= 1.0)) throw Error("invalid-decay", "w must lie in (0, 1]");
  double num = 0.0, den = 0.0, wj = 1.0;
  for (double r : per_item) {
    num += wj * r;
    den += wj;
    wj *= w;
  }
  return num / den;
}

double msra_step(const ReasoningPath& path, const FutureWindow& window) {
  return over_window(window, [&](const Target& t) { return step_hit(path, t.tokens); });
}

double msra_cate(const ReasoningPath& path, const FutureWindow& window) {
  return over_window(window, [&](const Target& t) { return category_hit(path, t.category); });
}

double msra_path(const ReasoningPath& path, const FutureWindow& window, const RetrievalIndex& index, std::size_t n,
                 std::size_t d) {
  return over_window(window, [&](const Target& t) { return global_path(path, t, index, n, d); });
}

RewardBreakdown total_reward(const ReasoningPath& path, const FutureWindow& window, const RetrievalIndex& index,
                             const RewardConfig& cfg) {
  cfg.validate();
  require_window(window);
  const auto& next = window.items.front();
  RewardBreakdown r;
  r.step = step_hit(path, next.tokens);
  r.cate = category_hit(path, next.category);
  r.js = path.steps.size() >= 2 ? step_consistency(path, cfg.js_mode) : 1.0;
  r.path = cfg.use_path ? global_path(path, next, index, cfg.top_n, cfg.drop) : 0.0;
  if (cfg.msra) {
    FutureWindow win{{window.items.begin(), window.items.begin() + static_cast<std::ptrdiff_t>(
                                                                       std::min(cfg.h, window.items.size()))},
                     cfg.w};
    r.msra_step = msra_step(path, win);
    r.msra_cate = msra_cate(path, win);
    r.msra_path = cfg.use_path ? msra_path(path, win, index, cfg.top_n, cfg.drop) : 0.0;
  } else {
    r.msra_step = r.step;
    r.msra_cate = r.cate;
    r.msra_path = r.path;
  }
  if (cfg.use_step) r.total += r.msra_step;
  if (cfg.use_cate) r.total += r.msra_cate;
  if (cfg.use_js) r.total += r.js;
  if (cfg.use_path) r.total += r.msra_path;
  return r;
}

RewardTrace::RewardTrace(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw Error("io-error", "cannot open " + path.string() + " for writing");
  out_ << "user,step,cate,js,path,msra_step,msra_cate,msra_path,total\n" << std::setprecision(17);
}

void RewardTrace::append(const std::string& user, const RewardBreakdown& r) {
  out_ << user << ',' << r.step << ',' << r.cate << ',' << r.js << ',' << r.path << ',' << r.msra_step << ','
       << r.msra_cate << ',' << r.msra_path << ',' << r.total << '\n';
  if (!out_) throw Error("io-error", "short write to reward trace");
}

}  // namespace reg4rec::rewards
