#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "reg4rec/error.hpp"
#include "reg4rec/numerics/autodiff.hpp"
#include "reg4rec/numerics/grad_check.hpp"
#include "reg4rec/numerics/optim.hpp"
#include "reg4rec/numerics/prob.hpp"
#include "reg4rec/numerics/rng.hpp"

using namespace reg4rec;
using namespace reg4rec::numerics;

namespace {

template <typename F>
std::string error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

Tensor random_matrix(RngStream& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  auto t = Tensor::matrix(r, c);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Tensor, RejectsNonFiniteAndBadShapes) {
  EXPECT_EQ(error_code([] { Tensor({2}, {1.0, NAN}); }), "non-finite");
  EXPECT_EQ(error_code([] { Tensor({2}, {1.0, INFINITY}); }), "non-finite");
  EXPECT_EQ(error_code([] { Tensor({2, 2}, {1.0, 2.0, 3.0}); }), "invalid-shape");
  EXPECT_EQ(error_code([] { Tensor({0}, {}); }), "invalid-shape");
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_DOUBLE_EQ(t(1, 2), 6.0);
}

TEST(Softmax, Examples) {
  const double two[] = {0.0, 0.0};
  auto p = softmax(two);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);

  for (double x : {-1e300, -3.0, 0.0, 42.0, 1e300}) {
    const double one[] = {x};
    EXPECT_EQ(softmax(one)[0], 1.0);
  }

  // Straight-line reference evaluation.
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e1 + e2 + e3;
  const double three[] = {1.0, 2.0, 3.0};
  auto q = softmax(three);
  EXPECT_NEAR(q[0], e1 / z, 1e-15);
  EXPECT_NEAR(q[1], e2 / z, 1e-15);
  EXPECT_NEAR(q[2], e3 / z, 1e-15);

  EXPECT_EQ(error_code([] { softmax(std::span<const double>{}); }), "empty-logits");
}

TEST(Softmax, DistributionArgmaxAndShiftProperties) {
  RngStream rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(40);
    std::vector<double> x(n);
    for (auto& v : x) v = 30.0 * rng.normal();
    auto p = softmax(x);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (double v : p) EXPECT_GE(v, 0.0);
    EXPECT_EQ(argmax(p), argmax(x));
    std::vector<double> shifted(x);
    for (auto& v : shifted) v += 17.25;
    auto ps = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ps[i], p[i], 1e-12);
  }
  // Moderate logits keep every entry strictly positive.
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(8);
    for (auto& v : x) v = 5.0 * rng.normal();
    for (double v : softmax(x)) EXPECT_GT(v, 0.0);
  }
}

TEST(CrossEntropy, Examples) {
  const double certain[] = {1.0};
  EXPECT_EQ(cross_entropy(certain, 0).loss, 0.0);
  const double half[] = {0.5, 0.5};
  EXPECT_NEAR(cross_entropy(half, 1).loss, std::numbers::ln2, 1e-15);
  const double quarter[] = {0.25, 0.25, 0.25, 0.25};
  EXPECT_NEAR(cross_entropy(quarter, 2).loss, std::log(4.0), 1e-15);

  const double zero_target[] = {1.0, 0.0};
  auto ce = cross_entropy(zero_target, 1);
  EXPECT_TRUE(ce.clamped);
  EXPECT_NEAR(ce.loss, -std::log(kProbFloor), 1e-12);
  EXPECT_EQ(error_code([&] { cross_entropy(half, 2); }), "target-out-of-range");
}

TEST(JsDivergence, SymmetricBoundedAndZeroIffEqual) {
  RngStream rng(11);
  auto random_dist = [&](std::size_t n) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    w[rng.index(n)] += 0.1;
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= s;
    return w;
  };
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng.index(10);
    auto p = random_dist(n), q = random_dist(n);
    const double pq = js_divergence(p, q), qp = js_divergence(q, p);
    EXPECT_EQ(pq, qp);
    EXPECT_GE(pq, 0.0);
    EXPECT_LE(pq, std::numbers::ln2);
    EXPECT_NEAR(js_divergence(p, p), 0.0, 1e-12);
    if (p != q) EXPECT_GT(pq, 0.0);
  }
  const double a[] = {1.0, 0.0}, b[] = {0.0, 1.0};
  EXPECT_NEAR(js_divergence(a, b), std::numbers::ln2, 1e-15);
  const double bad[] = {0.7, 0.7};
  EXPECT_EQ(error_code([&] { js_divergence(a, bad); }), "invalid-distribution");
}

TEST(Rng, DeterministicAndSubstreamsIndependent) {
  RngStream a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  auto s1 = RngStream(5).substream(1), s2 = RngStream(5).substream(2);
  EXPECT_NE(s1.next_u64(), s2.next_u64());
  EXPECT_EQ(RngStream(5).substream("mpq").next_u64(), RngStream(5).substream("mpq").next_u64());
  RngStream u(3);
  double mean = 0.0;
  for (int i = 0; i < 100000; ++i) mean += u.uniform();
  EXPECT_NEAR(mean / 100000, 0.5, 0.01);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) ++counts[u.index(5)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(GradCheck, Examples) {
  auto sum_sq = [](Tape&, Var x) { return ops::sum(ops::square(x)); };
  auto r = grad_check(sum_sq, Tensor({1, 2}, {1.0, 2.0}), 1e-6);
  EXPECT_TRUE(r.passed);
  EXPECT_DOUBLE_EQ(r.analytic[0], 2.0);
  EXPECT_DOUBLE_EQ(r.analytic[1], 4.0);
  EXPECT_NEAR(r.numeric[0], 2.0, 1e-6);
  EXPECT_NEAR(r.numeric[1], 4.0, 1e-6);

  auto constant = [](Tape& t, Var x) { return ops::add(ops::scale(ops::sum(x), 0.0), t.constant(Tensor::scalar(3.0))); };
  auto c = grad_check(constant, Tensor({1, 3}, {1.0, -2.0, 0.5}), 1e-6);
  EXPECT_TRUE(c.passed);
  for (double g : c.analytic) EXPECT_EQ(g, 0.0);

  auto blowup = [](Tape&, Var x) { return ops::sum(ops::log(ops::scale(x, 0.0))); };
  EXPECT_EQ(error_code([&] { grad_check(blowup, Tensor({1, 1}, {1.0}), 1e-4); }), "non-finite-objective");
}

// Every differentiable op, checked at 100 random points.
TEST(GradCheck, EveryOpAtRandomPoints) {
  RngStream rng(2024);
  std::vector<std::pair<std::string, PointObjective>> cases;
  auto W = random_matrix(rng, 3, 4);
  auto R = random_matrix(rng, 1, 3);
  auto C = random_matrix(rng, 3, 1);
  auto wsum = [](Var v) {
    // Weighted sum so the downstream gradient is not uniform.
    Tape& t = *v.tape();
    auto w = Tensor::matrix(v.rows(), v.cols());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return ops::sum(ops::mul(v, t.constant(std::move(w))));
  };
  cases.push_back({"matmul", [&](Tape& t, Var x) { return wsum(ops::matmul(x, t.constant(W))); }});
  cases.push_back({"matmul_rhs", [&](Tape& t, Var x) { return wsum(ops::matmul(t.constant(W), x)); }});
  cases.push_back({"matmul_nt", [&](Tape& t, Var x) { return wsum(ops::matmul_nt(x, t.constant(transpose(W)))); }});
  cases.push_back({"matmul_nt_self", [&](Tape&, Var x) { return wsum(ops::matmul_nt(x, x)); }});
  cases.push_back({"transpose", [&](Tape&, Var x) { return wsum(ops::transpose(x)); }});
  cases.push_back({"add_sub_mul", [&](Tape&, Var x) { return wsum(ops::mul(ops::add(x, x), ops::sub(x, ops::scale(x, 0.5)))); }});
  cases.push_back({"add_row", [&](Tape& t, Var x) { return wsum(ops::add_row(ops::square(x), ops::slice_rows(x, 0, 1))); }});
  cases.push_back({"add_row_const", [&](Tape& t, Var x) { return wsum(ops::add_row(x, t.constant(R))); }});
  cases.push_back({"mul_col", [&](Tape&, Var x) { return wsum(ops::mul_col(x, ops::slice_cols(x, 1, 1))); }});
  cases.push_back({"tanh", [&](Tape&, Var x) { return wsum(ops::tanh(x)); }});
  cases.push_back({"exp_add_scalar", [&](Tape&, Var x) { return wsum(ops::exp(ops::add_scalar(ops::scale(x, 0.3), 0.1))); }});
  cases.push_back({"log", [&](Tape&, Var x) { return wsum(ops::log(ops::add_scalar(ops::square(x), 0.5))); }});
  cases.push_back({"mean", [&](Tape&, Var x) { return ops::mean(ops::square(x)); }});
  cases.push_back({"sum_rows", [&](Tape&, Var x) { return wsum(ops::square(ops::sum_rows(x))); }});
  cases.push_back({"softmax", [&](Tape&, Var x) { return wsum(ops::softmax_rows(x)); }});
  cases.push_back({"softmax_causal", [&](Tape& t, Var x) {
                     auto sq = ops::slice_cols(x, 0, 3);
                     return wsum(ops::softmax_rows(ops::slice_rows(sq, 0, 3), true));
                   }});
  cases.push_back({"log_softmax", [&](Tape&, Var x) { return wsum(ops::log_softmax_rows(x)); }});
  cases.push_back({"pick", [&](Tape&, Var x) { return ops::pick(ops::log_softmax_rows(x), 2, 1); }});
  cases.push_back({"gather_rows", [&](Tape&, Var x) {
                     const std::size_t idx[] = {3, 0, 3, 1};
                     return wsum(ops::gather_rows(x, idx));
                   }});
  cases.push_back({"concat", [&](Tape&, Var x) {
                     Var parts[] = {ops::slice_rows(x, 1, 2), ops::tanh(x), ops::slice_rows(x, 0, 1)};
                     Var cols[] = {ops::slice_cols(x, 0, 1), ops::square(x)};
                     return ops::add(wsum(ops::concat_rows(parts)), wsum(ops::concat_cols(cols)));
                   }});
  cases.push_back({"layer_norm", [&](Tape&, Var x) { return wsum(ops::layer_norm_rows(x)); }});
  cases.push_back({"normalize_cols", [&](Tape&, Var x) { return wsum(ops::normalize_cols(x)); }});
  cases.push_back({"relu", [&](Tape&, Var x) { return wsum(ops::relu(x)); }});
  cases.push_back({"clamp", [&](Tape&, Var x) { return wsum(ops::clamp(x, -0.7, 0.9)); }});
  cases.push_back({"minimum", [&](Tape&, Var x) { return wsum(ops::minimum(x, ops::scale(x, -0.5))); }});

  for (const auto& [name, fn] : cases) {
    int failures = 0;
    for (int k = 0; k < 100; ++k) {
      auto point = random_matrix(rng, 4, 3);
      auto r = grad_check(fn, point, 1e-4);
      if (!r.passed) {
        // relu/clamp/minimum have kinks; a point within the FD step of one is
        // not a gradient error.
        bool near_kink = false;
        for (double v : point.data())
          near_kink = near_kink || std::abs(v) < 1e-4 || std::abs(v + 0.7) < 1e-4 || std::abs(v - 0.9) < 1e-4;
        if (!near_kink) ++failures;
      }
    }
    EXPECT_EQ(failures, 0) << name;
  }
}

TEST(Tape, UnusedOutputsHaveZeroGradientAndNodesVisitedOnce) {
  Tape t;
  auto x = t.variable(Tensor({1, 2}, {1.0, 2.0}));
  auto unused = t.variable(Tensor({1, 2}, {3.0, 4.0}));
  auto dead = ops::square(unused);
  (void)dead;
  auto y = ops::sum(ops::mul(x, x));
  t.backward(y);
  EXPECT_EQ(t.grad(x)[0], 2.0);
  EXPECT_THROW(t.grad(unused), Error);
  // Shared subexpression: d/dx (u + u) with u = x^2 is 4x, accumulated once per use.
  Tape t2;
  auto a = t2.variable(Tensor::scalar(3.0));
  auto u = ops::square(a);
  t2.backward(ops::add(u, u));
  EXPECT_DOUBLE_EQ(t2.grad(a)[0], 12.0);
}

TEST(Tape, ParameterGradientsAccumulate) {
  Parameter p("w", Tensor({1, 2}, {1.0, -1.0}));
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(ops::sum(ops::square(t.param(p))));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -4.0);
  Tape inference(false);
  auto v = ops::sum(ops::square(inference.param(p)));
  EXPECT_DOUBLE_EQ(v.item(), 2.0);
  EXPECT_EQ(error_code([&] { inference.backward(v); }), "not-recording");
}

TEST(Adam, MinimizesQuadratic) {
  Parameter p("x", Tensor({1, 3}, {3.0, -2.0, 1.0}));
  Adam opt({&p}, AdamConfig{.lr = 0.1});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    Tape t;
    t.backward(ops::sum(ops::square(t.param(p))));
    opt.step();
  }
  for (double v : p.value.data()) EXPECT_NEAR(v, 0.0, 1e-2);
}
