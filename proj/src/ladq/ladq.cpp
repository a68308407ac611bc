#include "reg4rec/ladq/ladq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/autodiff.hpp"

namespace reg4rec::ladq {

namespace {

struct Format {
  int mantissa_bits;  // stored fraction bits
  int min_exp;        // exponent of the smallest normal
  double max_value;
};

Format format_of(Precision p) {
  switch (p) {
    case Precision::bf16:
      return {7, -126, std::ldexp(2.0 - std::ldexp(1.0, -7), 127)};
    case Precision::fp8:
      return {3, -6, 448.0};
    case Precision::f32:
      break;
  }
  return {52, -1022, std::numeric_limits<double>::max()};
}

}  // namespace

std::string to_string(Precision p) {
  switch (p) {
    case Precision::f32:
      return "f32";
    case Precision::bf16:
      return "bf16";
    case Precision::fp8:
      return "fp8";
  }
  return "f32";
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "bf16") return Precision::bf16;
  if (s == "fp8") return Precision::fp8;
  throw Error("invalid-precision", "unknown precision tag '" + s + "'");
}

double quantize_value(double x, Precision p) {
  if (p == Precision::f32 || x == 0.0 || !std::isfinite(x)) return x;
  const auto f = format_of(p);
  const double a = std::fabs(x);
  if (a >= f.max_value) return std::copysign(f.max_value, x);
  int k = 0;
  std::frexp(a, &k);  // a = m * 2^k, m in [0.5, 1)
  const int e = std::max(k - 1, f.min_exp);
  const double quantum = std::ldexp(1.0, e - f.mantissa_bits);
  // Scaling by a power of two is exact, so a single rounding happens here.
  const double r = std::min(std::nearbyint(a / quantum) * quantum, f.max_value);
  return std::copysign(r, x);
}

Tensor quantize_sim(const Tensor& t, Precision p) {
  if (p == Precision::f32) return t;
  Tensor out = t;
  for (auto& v : out.data()) v = quantize_value(v, p);
  return out;
}

double unit_roundoff(Precision p) {
  if (p == Precision::f32) return 0.0;
  return std::ldexp(1.0, -(format_of(p).mantissa_bits + 1));
}

double min_normal(Precision p) { return std::ldexp(1.0, format_of(p).min_exp); }

double max_finite(Precision p) { return format_of(p).max_value; }

ProbeResult score_layers(std::span<const Layer> layers, std::size_t step) {
  if (layers.empty()) throw Error("empty-model", "no trainable layers");
  ProbeResult out;
  std::size_t total = 0;
  for (const auto& l : layers)
    for (const auto* p : l.params) total += p->size();
  if (total == 0) throw Error("empty-model", "layers have no parameters");
  bool any_grad = false;
  for (const auto& l : layers) {
    double g2 = 0.0, w2 = 0.0;
    std::size_t n = 0;
    for (const auto* p : l.params) {
      for (double g : p->grad.data()) g2 += g * g;
      for (double w : p->value.data()) w2 += w * w;
      n += p->size();
    }
    LayerSensitivity s;
    s.layer = l.name;
    s.probed_step = step;
    if (n > 0) {
      const double dn = static_cast<double>(n);
      s.score = (g2 / dn) * (w2 / dn);
      s.latency = dn / static_cast<double>(total);
    }
    any_grad = any_grad || g2 > 0.0;
    out.layers.push_back(std::move(s));
  }
  out.zero_gradient = !any_grad;
  return out;
}

ProbeResult probe_sensitivity(seqmodel::SeqModel& model, std::span<const seqmodel::Example* const> batch,
                              double lambda_c, std::size_t step) {
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  {
    numerics::Tape tape;
    auto loss = seqmodel::pretrain_loss(tape, model, batch, lambda_c);
    tape.backward(loss);
  }
  const auto layers = model.layers();
  auto out = score_layers(layers, step);
  for (auto* p : params) p->zero_grad();
  return out;
}

double CostFactors::of(Precision p) const {
  switch (p) {
    case Precision::bf16:
      return bf16;
    case Precision::fp8:
      return fp8;
    case Precision::f32:
      break;
  }
  return f32;
}

namespace {

void validate_layers(std::span<const LayerSensitivity> sens) {
  if (sens.empty()) throw Error("invalid-layers", "no layers to plan");
  double sum = 0.0;
  for (const auto& s : sens) {
    if (!std::isfinite(s.score) || s.score < 0.0) throw Error("invalid-layers", "bad score for " + s.layer);
    if (!(s.latency >= 0.0)) throw Error("invalid-layers", "bad latency for " + s.layer);
    sum += s.latency;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw Error("invalid-layers", "latency weights sum to " + std::to_string(sum));
}

constexpr double kCostTol = 1e-12;

Precision lower(Precision p) { return p == Precision::f32 ? Precision::bf16 : Precision::fp8; }

}  // namespace

double plan_cost(std::span<const LayerSensitivity> sens, const std::map<std::string, Precision>& tags,
                 const CostFactors& factors) {
  double c = 0.0;
  for (const auto& s : sens) {
    const auto it = tags.find(s.layer);
    c += s.latency * factors.of(it == tags.end() ? Precision::f32 : it->second);
  }
  return c;
}

PrecisionPlan assign_precision(std::span<const LayerSensitivity> sens, double budget, const CostFactors& factors) {
  if (!(budget > 0.0 && budget <= 1.0)) throw Error("invalid-budget", "budget must lie in (0, 1]");
  validate_layers(sens);
  std::vector<std::size_t> order(sens.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto ratio = [&](std::size_t i) {
    return sens[i].latency > 0.0 ? sens[i].score / sens[i].latency : std::numeric_limits<double>::infinity();
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ra = ratio(a), rb = ratio(b);
    if (ra != rb) return ra < rb;
    return sens[a].layer < sens[b].layer;
  });
  PrecisionPlan plan;
  for (const auto& s : sens) plan.tags[s.layer] = Precision::f32;
  plan.est_cost = plan_cost(sens, plan.tags, factors);
  for (std::size_t i : order) {
    auto& tag = plan.tags[sens[i].layer];
    while (plan.est_cost > budget + kCostTol && tag != Precision::fp8) {
      tag = lower(tag);
      plan.est_cost = plan_cost(sens, plan.tags, factors);
    }
    if (plan.est_cost <= budget + kCostTol) break;
  }
  plan.budget_unmet = plan.est_cost > budget + kCostTol;
  plan.est_speedup = 1.0 / plan.est_cost;
  return plan;
}

ScopedPrecision::ScopedPrecision(std::span<const Layer> layers, const PrecisionPlan& plan) {
  for (const auto& l : layers) {
    const auto it = plan.tags.find(l.name);
    if (it == plan.tags.end() || it->second == Precision::f32) continue;
    for (auto* p : l.params) {
      auto q = quantize_sim(p->value, it->second);
      saved_.emplace_back(p, std::move(p->value));
      p->value = std::move(q);
    }
  }
}

ScopedPrecision::~ScopedPrecision() { restore(); }

void ScopedPrecision::restore() {
  for (auto it = saved_.rbegin(); it != saved_.rend(); ++it) it->first->value = std::move(it->second);
  saved_.clear();
}

void LadqConfig::validate() const {
  if (!(budget > 0.0 && budget <= 1.0)) throw Error("invalid-budget", "budget must lie in (0, 1]");
  if (period == 0) throw Error("invalid-config", "ladq period must be at least 1");
  for (double f : {factors.f32, factors.bf16, factors.fp8})
    if (!(f > 0.0) || !std::isfinite(f)) throw Error("invalid-config", "cost factors must be positive");
}

void to_json(nlohmann::json& j, const LadqConfig& c) {
  nlohmann::json fixed = nlohmann::json::object();
  for (const auto& [k, v] : c.fixed_plan) fixed[k] = to_string(v);
  j = {{"enabled", c.enabled},
       {"budget", c.budget},
       {"period", c.period},
       {"cost", {{"f32", c.factors.f32}, {"bf16", c.factors.bf16}, {"fp8", c.factors.fp8}}},
       {"fixed_plan", fixed}};
}

void from_json(const nlohmann::json& j, LadqConfig& c) {
  LadqConfig d;
  c.enabled = j.value("enabled", d.enabled);
  c.budget = j.value("budget", d.budget);
  c.period = j.value("period", d.period);
  c.factors = d.factors;
  if (j.contains("cost")) {
    const auto& f = j.at("cost");
    c.factors.f32 = f.value("f32", d.factors.f32);
    c.factors.bf16 = f.value("bf16", d.factors.bf16);
    c.factors.fp8 = f.value("fp8", d.factors.fp8);
  }
  c.fixed_plan.clear();
  if (j.contains("fixed_plan"))
    for (const auto& [k, v] : j.at("fixed_plan").items()) c.fixed_plan[k] = parse_precision(v.get<std::string>());
}

Controller::Controller(LadqConfig cfg, const std::filesystem::path& plan_log) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (!plan_log.empty()) {
    log_.open(plan_log, std::ios::trunc);
    if (!log_) throw Error("io-error", "cannot open " + plan_log.string() + " for writing");
  }
}

const PrecisionPlan& Controller::on_step(seqmodel::SeqModel& model, std::size_t step,
                                         std::span<const seqmodel::Example* const> batch, double lambda_c) {
  if (step % cfg_.period != 0) return plan_;
  const auto layers = model.layers();
  if (!cfg_.fixed_plan.empty()) {
    if (probes_ == 0) {
      for (const auto& [name, tag] : cfg_.fixed_plan)
        if (std::none_of(layers.begin(), layers.end(), [&](const Layer& l) { return l.name == name; }))
          throw Error("invalid-plan", "unknown layer '" + name + "'");
      plan_ = {};
      for (const auto& l : layers) {
        const auto it = cfg_.fixed_plan.find(l.name);
        plan_.tags[l.name] = it == cfg_.fixed_plan.end() ? Precision::f32 : it->second;
      }
      // Latency shares only; scores are irrelevant for a fixed plan.
      const auto sens = score_layers(layers, step).layers;
      plan_.est_cost = plan_cost(sens, plan_.tags, cfg_.factors);
      plan_.est_speedup = 1.0 / plan_.est_cost;
      ++probes_;
      log(step);
    }
    return plan_;
  }
  const auto probe = probe_sensitivity(model, batch, lambda_c, step);
  plan_ = assign_precision(probe.layers, cfg_.budget, cfg_.factors);
  zero_gradient_ = probe.zero_gradient;
  ++probes_;
  log(step);
  return plan_;
}

void Controller::log(std::size_t step) {
  if (!log_.is_open()) return;
  nlohmann::json plan = nlohmann::json::object();
  for (const auto& [k, v] : plan_.tags) plan[k] = to_string(v);
  nlohmann::json line = {{"step", step}, {"plan", plan}, {"est_cost", plan_.est_cost}};
  if (plan_.budget_unmet) line["flag"] = "budget-unmet";
  if (zero_gradient_) line["zero_gradient"] = true;
  log_ << line.dump() << '\n';
  log_.flush();
  if (!log_) throw Error("io-error", "short write to plan log");
}

seqmodel::PretrainResult pretrain_with_ladq(std::span<const seqmodel::Example> examples,
                                            const seqmodel::SeqConfig& cfg, Controller& controller,
                                            const seqmodel::SeqModel* init) {
  std::unique_ptr<ScopedPrecision> active;
  seqmodel::StepHooks hooks;
  hooks.before_step = [&](seqmodel::SeqModel& model, std::size_t step,
                          std::span<const seqmodel::Example* const> batch) {
    const auto& plan = controller.on_step(model, step, batch, cfg.lambda_c);
    active = std::make_unique<ScopedPrecision>(model.layers(), plan);
  };
  hooks.before_update = [&](seqmodel::SeqModel&) { active.reset(); };
  return seqmodel::pretrain(examples, cfg, init, hooks);
}

}  // namespace reg4rec::ladq
