#include <gtest/gtest.h>

#include <cmath>

#include "reg4rec/error.hpp"
#include "reg4rec/grpo/grpo.hpp"
#include "reg4rec/numerics/grad_check.hpp"
#include "reg4rec/numerics/optim.hpp"
#include "reg4rec/numerics/prob.hpp"

using namespace reg4rec;
using namespace reg4rec::grpo;
using numerics::Tensor;

namespace {

struct World {
  seqmodel::SeqConfig cfg;
  SeqModel model;
  decode::RetrievalIndex index;
  std::vector<decode::CatalogItem> items;
  std::vector<Context> contexts;
};

World make_world(std::uint64_t seed, std::size_t M = 2, std::size_t D = 4, double head_scale = 0.5) {
  World w;
  w.cfg.num_codebooks = M;
  w.cfg.codebook_size = D;
  w.cfg.num_categories = 2;
  w.cfg.embed_dim = 8;
  w.cfg.hidden_dim = 8;
  RngStream rng(seed);
  w.model = SeqModel(w.cfg, rng);
  for (auto* p : w.model.parameters())
    if (p->name.rfind("head", 0) == 0 || p->name.rfind("cat", 0) == 0)
      for (auto& v : p->value.data()) v = head_scale * rng.normal();
  std::vector<Tensor> cbs;
  for (std::size_t r = 0; r < M; ++r) {
    auto t = Tensor::matrix(D, 3);
    for (auto& v : t.data()) v = rng.normal();
    cbs.push_back(t);
  }
  for (std::size_t i = 0; i < 12; ++i) {
    std::vector<std::size_t> codes(M);
    for (auto& c : codes) c = rng.index(D);
    w.items.push_back({"it" + std::to_string(10 + i), TokenSet(codes), std::vector<double>(M, 1.0 / M)});
  }
  w.index = decode::RetrievalIndex(cbs, w.items);
  for (std::size_t u = 0; u < 6; ++u) {
    Context c;
    c.user = "u" + std::to_string(u);
    for (int k = 0; k < 3; ++k) c.history.push_back(w.items[rng.index(12)].tokens);
    for (int k = 0; k < 3; ++k) {
      const auto& it = w.items[rng.index(12)];
      c.window.items.push_back({it.id, it.tokens, rng.index(2)});
    }
    w.contexts.push_back(std::move(c));
  }
  return w;
}

rewards::RewardConfig reward_cfg() {
  rewards::RewardConfig r;
  r.top_n = 3;
  return r;
}

}  // namespace

TEST(Advantages, Examples) {
  const auto a = advantages(std::vector<double>{1, 2, 3});
  EXPECT_NEAR(a[0], -1.2247448713915890, 1e-7);
  EXPECT_EQ(a[1], 0.0);
  EXPECT_NEAR(a[2], 1.2247448713915890, 1e-7);
  for (double v : advantages(std::vector<double>{0.1, 0.1, 0.1})) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(advantages(std::vector<double>{1.0}), Error);
}

TEST(Advantages, Standardized) {
  RngStream rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> r(2 + rng.index(31));
    for (auto& v : r) v = rng.uniform(0, 4);
    const auto a = advantages(r);
    double m = 0, v = 0;
    for (double x : a) m += x;
    m /= static_cast<double>(a.size());
    for (double x : a) v += (x - m) * (x - m);
    v /= static_cast<double>(a.size());
    ASSERT_NEAR(m, 0.0, 1e-10);
    ASSERT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(ClippedSurrogate, Examples) {
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 1.0, 0.15), 1.15);
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, -1.0, 0.15), -1.5);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, 1.0, 0.15), 0.5);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, 0.15), -0.85);
  EXPECT_EQ(clipped_surrogate(1.1, 2.0, 0.15), 1.1 * 2.0);
}

TEST(SampleGroup, DeterministicAndLogProbsRecompute) {
  auto w = make_world(2);
  RngStream a(5), b(5);
  const auto g1 = sample_group(w.contexts[0], w.model, 8, a, w.index, reward_cfg());
  const auto g2 = sample_group(w.contexts[0], w.model, 8, b, w.index, reward_cfg());
  ASSERT_EQ(g1.rollouts.size(), 8u);
  const auto mem = w.model.encode_history(w.contexts[0].history);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(g1.rollouts[i].path.prefix(), g2.rollouts[i].path.prefix());
    EXPECT_EQ(g1.rollouts[i].old_log_prob, g2.rollouts[i].old_log_prob);
    EXPECT_NEAR(path_log_prob(w.model, mem, g1.rollouts[i].path), g1.rollouts[i].old_log_prob, 1e-10);
    EXPECT_NEAR(g1.rollouts[i].path.log_prob(), g1.rollouts[i].old_log_prob, 1e-10);
  }
  RngStream c(5);
  EXPECT_THROW(sample_group(w.contexts[0], w.model, 1, c, w.index, reward_cfg()), Error);
}

TEST(ClippedObjective, IdentityPolicyIsZero) {
  auto w = make_world(3);
  RngStream rng(1);
  const auto g = sample_group(w.contexts[1], w.model, 8, rng, w.index, reward_cfg());
  std::vector<double> r;
  for (const auto& ro : g.rollouts) r.push_back(ro.reward.total);
  const auto adv = advantages(r);
  numerics::Tape tape;
  ObjectiveParts parts;
  clipped_objective(tape, w.model, g, adv, 0.15, 0.01, &parts);
  for (double rho : parts.ratios) EXPECT_NEAR(rho, 1.0, 1e-12);
  EXPECT_NEAR(parts.objective, 0.0, 1e-12);
  EXPECT_NEAR(parts.kl, 0.0, 1e-12);
}

TEST(ClippedObjective, AgreesWithUnclippedInsideTrustRegion) {
  auto w = make_world(4);
  RngStream rng(2);
  const auto g = sample_group(w.contexts[2], w.model, 8, rng, w.index, reward_cfg());
  std::vector<double> r;
  for (const auto& ro : g.rollouts) r.push_back(ro.reward.total);
  const auto adv = advantages(r);
  auto policy = w.model;
  for (auto* p : policy.parameters())
    for (auto& v : p->value.data()) v += 1e-3 * rng.normal();
  numerics::Tape t1, t2;
  ObjectiveParts a, b;
  clipped_objective(t1, policy, g, adv, 0.15, 0.0, &a, true);
  clipped_objective(t2, policy, g, adv, 0.15, 0.0, &b, false);
  for (double rho : a.ratios) ASSERT_TRUE(rho > 0.85 && rho < 1.15);
  EXPECT_EQ(a.objective, b.objective);
}

TEST(ClippedObjective, GradCheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto w = make_world(10 + seed);
    RngStream rng(seed);
    const auto g = sample_group(w.contexts[seed % 6], w.model, 4, rng, w.index, reward_cfg());
    std::vector<double> r;
    for (std::size_t i = 0; i < g.rollouts.size(); ++i) r.push_back(static_cast<double>(i % 3));
    const auto adv = advantages(r);
    auto policy = w.model;
    for (auto* p : policy.parameters())
      for (auto& v : p->value.data()) v += 0.05 * rng.normal();
    auto params = policy.parameters();
    const auto report = numerics::grad_check(
        [&](numerics::Tape& tape) { return clipped_objective(tape, policy, g, adv, 0.15, 0.1); }, params, 1e-3);
    EXPECT_TRUE(report.passed) << "seed " << seed << " rel " << report.max_rel_error;
  }
}

TEST(ClippedObjective, BanditStepFavorsBestPath) {
  // Single decision step: one codebook, reward 1 for one token only.
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto w = make_world(seed, 1, 5, 0.3);
    RngStream rng(seed + 1000);
    const auto& ctx = w.contexts[0];
    auto rc = reward_cfg();
    rc.drop = 0;
    const auto g = sample_group(ctx, w.model, 8, rng, w.index, rc);
    std::vector<double> r;
    const std::size_t good = g.rollouts[0].path.steps[0].code;
    for (const auto& ro : g.rollouts) r.push_back(ro.path.steps[0].code == good ? 1.0 : 0.0);
    const auto adv = advantages(r);
    if (std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; })) {
      ++improved;  // nothing to learn from a uniform group
      continue;
    }
    const auto mem = w.model.encode_history(ctx.history);
    const double before = path_log_prob(w.model, mem, g.rollouts[0].path);
    auto policy = w.model;
    numerics::Adam opt(policy.parameters(), numerics::AdamConfig{.lr = 1e-3});
    numerics::Tape tape;
    auto j = clipped_objective(tape, policy, g, adv, 1e9, 0.0);
    tape.backward(numerics::ops::scale(j, -1.0));
    opt.step();
    const double after = path_log_prob(policy, policy.encode_history(ctx.history), g.rollouts[0].path);
    improved += after > before;
  }
  EXPECT_EQ(improved, 100);
}

TEST(PolicyUpdate, ZeroLearningRateAndDeterminism) {
  auto w = make_world(6);
  GrpoConfig cfg;
  cfg.iterations = 3;
  cfg.users_per_iter = 3;
  cfg.group_size = 4;
  cfg.reward = reward_cfg();
  cfg.lr = 0.0;
  const auto frozen = policy_update(w.model, w.contexts, w.index, cfg);
  EXPECT_EQ(dataeval::encode_checkpoint(frozen.model.to_checkpoint()),
            dataeval::encode_checkpoint(w.model.to_checkpoint()));
  cfg.lr = 1e-2;
  const auto a = policy_update(w.model, w.contexts, w.index, cfg);
  const auto b = policy_update(w.model, w.contexts, w.index, cfg);
  EXPECT_EQ(dataeval::encode_checkpoint(a.model.to_checkpoint()), dataeval::encode_checkpoint(b.model.to_checkpoint()));
  EXPECT_NE(dataeval::encode_checkpoint(a.model.to_checkpoint()), dataeval::encode_checkpoint(w.model.to_checkpoint()));
  ASSERT_EQ(a.log.size(), 3u);
  EXPECT_THROW(policy_update(w.model, {}, w.index, cfg), Error);
}

TEST(PolicyUpdate, RaisesStepReward) {
  // Every context shares one target, so the reward is learnable by the heads.
  auto w = make_world(7, 2, 4, 0.0);
  for (auto& c : w.contexts) c.window.items = {{w.items[0].id, w.items[0].tokens, 1}};
  GrpoConfig cfg;
  cfg.iterations = 50;
  cfg.users_per_iter = 4;
  cfg.group_size = 8;
  cfg.lr = 2e-2;
  cfg.reward = reward_cfg();
  const auto res = policy_update(w.model, w.contexts, w.index, cfg);
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 10; ++i) early += res.log[i].mean_step / 10;
  for (std::size_t i = 40; i < 50; ++i) late += res.log[i].mean_step / 10;
  EXPECT_GT(late, early);
  EXPECT_GT(late, 0.8);
}

TEST(PolicyUpdate, EarlyStoppingKeepsBestValidation) {
  auto w = make_world(8);
  GrpoConfig cfg;
  cfg.iterations = 4;
  cfg.users_per_iter = 2;
  cfg.group_size = 4;
  cfg.eval_every = 2;
  cfg.reward = reward_cfg();
  cfg.lr = 1e-2;
  // A validator that prefers the untouched input model.
  const auto init_bytes = dataeval::encode_checkpoint(w.model.to_checkpoint());
  int calls = 0;
  const auto res = policy_update(w.model, w.contexts, w.index, cfg, [&](const SeqModel& m) {
    ++calls;
    return dataeval::encode_checkpoint(m.to_checkpoint()) == init_bytes ? 1.0 : 0.0;
  });
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(res.best_iter, 0u);
  EXPECT_EQ(dataeval::encode_checkpoint(res.model.to_checkpoint()), init_bytes);
}
