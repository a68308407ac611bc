#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "reg4rec/decode/decode.hpp"
#include "reg4rec/rewards/rewards.hpp"
#include "reg4rec/seqmodel/seqmodel.hpp"

namespace reg4rec::grpo {

using decode::ReasoningPath;
using mpq::TokenSet;
using numerics::RngStream;
using numerics::Tape;
using numerics::Var;
using seqmodel::SeqModel;

// One training context: a user's history and the future items that follow it.
struct Context {
  std::string user;
  std::vector<TokenSet> history;
  rewards::FutureWindow window;
};

struct Rollout {
  ReasoningPath path;
  rewards::RewardBreakdown reward;
  double old_log_prob = 0.0;
  // Old-policy log-probabilities over the chosen codebook's D tokens, per step.
  std::vector<std::vector<double>> old_step_log_probs;
};

struct RolloutGroup {
  const Context* context = nullptr;
  std::vector<Rollout> rollouts;
  std::size_t resampled = 0;  // pruned paths that were discarded and redrawn
};

struct SampleConfig {
  double theta = std::numeric_limits<double>::infinity();  // CORP disabled by default
  std::size_t period = 1;
  std::size_t retry_budget = 2;
  std::size_t max_attempts_factor = 8;  // give up after G * factor draws
};

// Samples G complete paths under `policy` and scores them. Pruned paths are
// discarded and redrawn. Throws "invalid-group" for G < 2 and
// "sampling-exhausted" when too many draws are pruned.
RolloutGroup sample_group(const Context& ctx, const SeqModel& policy, std::size_t group_size, RngStream& rng,
                          const decode::RetrievalIndex& index, const rewards::RewardConfig& reward_cfg,
                          const SampleConfig& sample_cfg = {});

// Per-step log-probabilities of the chosen codebook's tokens under `model`.
std::vector<std::vector<double>> step_log_probs(const SeqModel& model, const seqmodel::Memory& memory,
                                                const ReasoningPath& path);
// Sum over steps of the chosen tokens' log-probabilities.
double path_log_prob(const SeqModel& model, const seqmodel::Memory& memory, const ReasoningPath& path);

// A_i = (r_i - mean) / max(std, 1e-8), population std. Constant rewards give
// zeros. Throws "invalid-group" for fewer than two rewards.
std::vector<double> advantages(std::span<const double> rewards);

// min(rho * A, clip(rho, 1 - eps, 1 + eps) * A).
double clipped_surrogate(double rho, double advantage, double epsilon);

struct ObjectiveParts {
  double objective = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
  std::size_t skipped = 0;  // paths dropped for ratio overflow
  std::vector<double> ratios;
};

// J = mean_i min(rho_i A_i, clip(rho_i) A_i) - kl_beta * KL(pi || pi_old),
// where KL is summed over each path's decisions and averaged over the group.
// Builds the graph for gradient ascent; old-policy terms are constants. When
// `clip` is false the unclipped surrogate rho_i A_i is used.
Var clipped_objective(Tape& tape, SeqModel& policy, const RolloutGroup& group, std::span<const double> adv,
                      double epsilon, double kl_beta, ObjectiveParts* parts = nullptr, bool clip = true);

struct GrpoConfig {
  std::size_t iterations = 50;
  std::size_t users_per_iter = 16;
  std::size_t group_size = 8;
  double epsilon = 0.15;
  double kl_beta = 0.01;
  std::size_t snapshot_period = 1;  // iterations between old-policy refreshes
  std::size_t inner_steps = 2;      // gradient steps per batch of groups
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::size_t eval_every = 5;       // validation period for early stopping
  rewards::RewardConfig reward;
  SampleConfig sample;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const GrpoConfig& c);
void from_json(const nlohmann::json& j, GrpoConfig& c);

struct IterLog {
  std::size_t iter = 0;
  double mean_reward = 0.0;
  double mean_step = 0.0;
  double mean_cate = 0.0;
  double mean_js = 0.0;
  double mean_path = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
};

struct PosttrainResult {
  SeqModel model;
  std::vector<IterLog> log;
  std::size_t best_iter = 0;  // 0 means the input model was kept
  double best_validation = std::numeric_limits<double>::quiet_NaN();
};

// Higher is better; evaluated on held-out targets for early stopping.
using Validator = std::function<double(const SeqModel&)>;

// GRPO loop. When `validator` is set, returns the checkpoint with the best
// validation score among iteration 0 and every eval_every-th iteration.
// Throws "pars-diverged" on a non-finite objective and "empty-corpus".
PosttrainResult policy_update(const SeqModel& init, std::span<const Context> contexts,
                              const decode::RetrievalIndex& index, const GrpoConfig& cfg,
                              const Validator& validator = {}, rewards::RewardTrace* trace = nullptr);

void write_log_csv(const std::filesystem::path& path, std::span<const IterLog> log);

}  // namespace reg4rec::grpo
