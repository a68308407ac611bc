#include "reg4rec/grpo/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/optim.hpp"
#include "reg4rec/numerics/prob.hpp"

namespace reg4rec::grpo {

namespace ops = numerics::ops;
using numerics::Tensor;

namespace {

// exp() of anything above this overflows to infinity.
constexpr double kMaxLogRatio = 700.0;
constexpr double kStdFloor = 1e-8;

std::vector<mpq::Token> decoder_inputs(const ReasoningPath& path) {
  auto p = path.prefix();
  if (!p.empty()) p.pop_back();
  return p;
}

}  // namespace

std::vector<std::vector<double>> step_log_probs(const SeqModel& model, const seqmodel::Memory& memory,
                                                const ReasoningPath& path) {
  Tape tape(false);
  auto h = model.hidden_graph(tape, tape.constant(memory.states), decoder_inputs(path));
  std::vector<std::vector<double>> out;
  out.reserve(path.steps.size());
  for (std::size_t j = 0; j < path.steps.size(); ++j) {
    const auto& lv = model.token_logits_graph(tape, ops::slice_rows(h, j, 1), path.steps[j].codebook).value();
    out.push_back(numerics::log_softmax(lv.data()));
  }
  return out;
}

double path_log_prob(const SeqModel& model, const seqmodel::Memory& memory, const ReasoningPath& path) {
  const auto lps = step_log_probs(model, memory, path);
  double lp = 0.0;
  for (std::size_t j = 0; j < path.steps.size(); ++j) lp += lps[j][path.steps[j].code];
  return lp;
}

RolloutGroup sample_group(const Context& ctx, const SeqModel& policy, std::size_t group_size, RngStream& rng,
                          const decode::RetrievalIndex& index, const rewards::RewardConfig& reward_cfg,
                          const SampleConfig& sample_cfg) {
  if (group_size < 2) throw Error("invalid-group", "group size must be at least 2");
  decode::ModelScorer scorer(policy, ctx.history);
  RolloutGroup group;
  group.context = &ctx;
  const bool reflect = std::isfinite(sample_cfg.theta);
  const decode::ReflectionConfig refl{sample_cfg.theta, sample_cfg.period, sample_cfg.retry_budget};
  const auto max_attempts = group_size * std::max<std::size_t>(1, sample_cfg.max_attempts_factor);
  for (std::size_t attempt = 0; group.rollouts.size() < group_size; ++attempt) {
    if (attempt == max_attempts)
      throw Error("sampling-exhausted", "only " + std::to_string(group.rollouts.size()) + " of " +
                                            std::to_string(group_size) + " paths survived reflection");
    auto stream = rng.substream(attempt);
    auto path = reflect ? decode::generate_with_reflection(scorer, decode::Mode::sample, refl, stream)
                        : decode::generate_path(scorer, decode::Mode::sample, &stream);
    if (path.status == decode::PathStatus::pruned) {
      ++group.resampled;
      continue;
    }
    Rollout ro;
    ro.reward = rewards::total_reward(path, ctx.window, index, reward_cfg);
    ro.old_step_log_probs = step_log_probs(policy, scorer.memory(), path);
    for (std::size_t j = 0; j < path.steps.size(); ++j) ro.old_log_prob += ro.old_step_log_probs[j][path.steps[j].code];
    ro.path = std::move(path);
    group.rollouts.push_back(std::move(ro));
  }
  return group;
}

std::vector<double> advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw Error("invalid-group", "advantages need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std::max(sd, kStdFloor);
  return out;
}

double clipped_surrogate(double rho, double advantage, double epsilon) {
  return std::min(rho * advantage, std::clamp(rho, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

Var clipped_objective(Tape& tape, SeqModel& policy, const RolloutGroup& group, std::span<const double> adv,
                      double epsilon, double kl_beta, ObjectiveParts* parts, bool clip) {
  if (!(epsilon > 0.0)) throw Error("invalid-config", "epsilon must be positive");
  if (kl_beta < 0.0) throw Error("invalid-config", "kl_beta must be nonnegative");
  if (group.context == nullptr || adv.size() != group.rollouts.size())
    throw Error("invalid-group", "advantages do not match the group");
  ObjectiveParts local;
  auto& p = parts ? *parts : local;
  p = {};
  auto mem = policy.memory_graph(tape, group.context->history);
  Var surrogate, kl;
  std::size_t used = 0;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const auto& ro = group.rollouts[i];
    const auto& steps = ro.path.steps;
    auto h = policy.hidden_graph(tape, mem, decoder_inputs(ro.path));
    Var lp, kl_i;
    for (std::size_t j = 0; j < steps.size(); ++j) {
      auto lsm = ops::log_softmax_rows(policy.token_logits_graph(tape, ops::slice_rows(h, j, 1), steps[j].codebook));
      auto pick = ops::pick(lsm, 0, steps[j].code);
      lp = j == 0 ? pick : ops::add(lp, pick);
      if (kl_beta > 0.0) {
        auto old = tape.constant(Tensor({1, ro.old_step_log_probs[j].size()}, ro.old_step_log_probs[j]));
        auto term = ops::sum(ops::mul(ops::exp(lsm), ops::sub(lsm, old)));
        kl_i = j == 0 ? term : ops::add(kl_i, term);
      }
    }
    auto log_ratio = ops::add_scalar(lp, -ro.old_log_prob);
    if (!(log_ratio.item() < kMaxLogRatio)) {
      ++p.skipped;
      p.ratios.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    auto rho = ops::exp(log_ratio);
    p.ratios.push_back(rho.item());
    auto unclipped = ops::scale(rho, adv[i]);
    auto term = clip ? ops::minimum(unclipped, ops::scale(ops::clamp(rho, 1.0 - epsilon, 1.0 + epsilon), adv[i]))
                     : unclipped;
    surrogate = used == 0 ? term : ops::add(surrogate, term);
    if (kl_beta > 0.0) kl = used == 0 ? kl_i : ops::add(kl, kl_i);
    ++used;
  }
  if (used == 0) return tape.constant(Tensor::scalar(0.0));
  const double inv = 1.0 / static_cast<double>(used);
  surrogate = ops::scale(surrogate, inv);
  Var objective = surrogate;
  p.surrogate = surrogate.item();
  if (kl_beta > 0.0) {
    kl = ops::scale(kl, inv);
    p.kl = kl.item();
    objective = ops::sub(surrogate, ops::scale(kl, kl_beta));
  }
  p.objective = objective.item();
  return objective;
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw Error("invalid-config", "group size must be at least 2");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error("invalid-config", "epsilon must lie in (0, 1)");
  if (kl_beta < 0.0) throw Error("invalid-config", "kl_beta must be nonnegative");
  if (users_per_iter == 0 || snapshot_period == 0 || inner_steps == 0 || eval_every == 0)
    throw Error("invalid-config", "iteration counts must be positive");
  if (lr < 0.0) throw Error("invalid-config", "learning rate must be nonnegative");
  reward.validate();
}

void to_json(nlohmann::json& j, const GrpoConfig& c) {
  j = {{"iterations", c.iterations},
       {"users_per_iter", c.users_per_iter},
       {"group_size", c.group_size},
       {"epsilon", c.epsilon},
       {"kl_beta", c.kl_beta},
       {"snapshot_period", c.snapshot_period},
       {"inner_steps", c.inner_steps},
       {"lr", c.lr},
       {"clip_norm", c.clip_norm},
       {"eval_every", c.eval_every},
       {"reward", c.reward},
       {"theta", std::isfinite(c.sample.theta) ? nlohmann::json(c.sample.theta) : nlohmann::json(nullptr)},
       {"reflect_period", c.sample.period},
       {"retry_budget", c.sample.retry_budget},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GrpoConfig& c) {
  GrpoConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.users_per_iter = j.value("users_per_iter", d.users_per_iter);
  c.group_size = j.value("group_size", d.group_size);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.kl_beta = j.value("kl_beta", d.kl_beta);
  c.snapshot_period = j.value("snapshot_period", d.snapshot_period);
  c.inner_steps = j.value("inner_steps", d.inner_steps);
  c.lr = j.value("lr", d.lr);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.reward = j.contains("reward") ? j.at("reward").get<rewards::RewardConfig>() : d.reward;
  c.sample.theta = j.contains("theta") && !j.at("theta").is_null() ? j.at("theta").get<double>() : d.sample.theta;
  c.sample.period = j.value("reflect_period", d.sample.period);
  c.sample.retry_budget = j.value("retry_budget", d.sample.retry_budget);
  c.seed = j.value("seed", d.seed);
}

PosttrainResult policy_update(const SeqModel& init, std::span<const Context> contexts,
                              const decode::RetrievalIndex& index, const GrpoConfig& cfg, const Validator& validator,
                              rewards::RewardTrace* trace) {
  cfg.validate();
  if (contexts.empty()) throw Error("empty-corpus", "no post-training contexts");
  RngStream root(cfg.seed);
  auto pick_rng = root.substream("pars-users");
  auto sample_rng = root.substream("pars-rollouts");

  PosttrainResult result;
  SeqModel model = init;
  SeqModel snapshot = init;
  result.model = init;
  if (validator) result.best_validation = validator(init);

  numerics::Adam opt(model.parameters(), numerics::AdamConfig{.lr = cfg.lr, .clip_norm = cfg.clip_norm});
  std::vector<std::size_t> order(contexts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    if ((it - 1) % cfg.snapshot_period == 0) snapshot = model;
    std::vector<RolloutGroup> groups;
    IterLog log;
    log.iter = it;
    std::size_t n_rollouts = 0;
    for (std::size_t u = 0; u < cfg.users_per_iter && u < contexts.size(); ++u) {
      if (cursor == order.size()) {
        pick_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const auto& ctx = contexts[order[cursor++]];
      auto stream = sample_rng.substream(it).substream(u);
      groups.push_back(sample_group(ctx, snapshot, cfg.group_size, stream, index, cfg.reward, cfg.sample));
      for (const auto& ro : groups.back().rollouts) {
        log.mean_reward += ro.reward.total;
        log.mean_step += ro.reward.msra_step;
        log.mean_cate += ro.reward.msra_cate;
        log.mean_js += ro.reward.js;
        log.mean_path += ro.reward.msra_path;
        ++n_rollouts;
        if (trace) trace->append(ctx.user, ro.reward);
      }
    }
    const double inv_r = 1.0 / static_cast<double>(n_rollouts);
    log.mean_reward *= inv_r;
    log.mean_step *= inv_r;
    log.mean_cate *= inv_r;
    log.mean_js *= inv_r;
    log.mean_path *= inv_r;

    std::vector<std::vector<double>> adv;
    for (const auto& g : groups) {
      std::vector<double> r;
      for (const auto& ro : g.rollouts) r.push_back(ro.reward.total);
      adv.push_back(advantages(r));
    }
    for (std::size_t step = 0; step < cfg.inner_steps; ++step) {
      opt.zero_grad();
      Tape tape;
      Var total;
      double objective = 0.0, kl = 0.0;
      for (std::size_t g = 0; g < groups.size(); ++g) {
        ObjectiveParts parts;
        auto j = clipped_objective(tape, model, groups[g], adv[g], cfg.epsilon, cfg.kl_beta, &parts);
        total = g == 0 ? j : ops::add(total, j);
        objective += parts.objective;
        kl += parts.kl;
      }
      const double inv_g = 1.0 / static_cast<double>(groups.size());
      log.objective = objective * inv_g;
      log.kl = kl * inv_g;
      if (!std::isfinite(log.objective)) throw Error("pars-diverged", "non-finite objective at iteration " + std::to_string(it));
      tape.backward(ops::scale(total, -inv_g));
      opt.step();
    }
    if (validator && it % cfg.eval_every == 0) {
      log.validation = validator(model);
      if (log.validation > result.best_validation) {
        result.best_validation = log.validation;
        result.best_iter = it;
        result.model = model;
      }
    }
    result.log.push_back(log);
  }
  if (!validator) {
    result.model = std::move(model);
    result.best_iter = cfg.iterations;
  }
  return result;
}

void write_log_csv(const std::filesystem::path& path, std::span<const IterLog> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  out << "iter,mean_reward,mean_step,mean_cate,mean_js,mean_path,kl,objective,validation\n" << std::setprecision(17);
  for (const auto& l : log) {
    out << l.iter << ',' << l.mean_reward << ',' << l.mean_step << ',' << l.mean_cate << ',' << l.mean_js << ','
        << l.mean_path << ',' << l.kl << ',' << l.objective << ',';
    if (std::isfinite(l.validation)) out << l.validation;
    out << '\n';
  }
  if (!out) throw Error("io-error", "short write to " + path.string());
}

}  // namespace reg4rec::grpo
