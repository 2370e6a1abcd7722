#include <doctest.h>

#include <cmath>
#include <random>

#include "mstd/error.hpp"
#include "mstd/losses.hpp"
#include "oracles.hpp"

using namespace mstd;

namespace {

float scalar(Graph& g, Var v) { return g.value(v).data.at(0); }

Tensor probs_of(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

}  // namespace

TEST_CASE("KL of a distribution with itself is zero") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> d(0.0f, 3.0f);
  Tensor logits({6, 7});
  for (float& v : logits.data) v = d(rng);
  Graph g;
  SoftDist p = soften(g.input(logits), 2.0f);
  CHECK(std::fabs(scalar(g, kl_divergence(p, p))) <= 1e-9);
}

TEST_CASE("KL refuses mismatched temperatures") {
  Graph g;
  Var x = g.input(Tensor({1, 3}, {1, 2, 3}));
  CHECK_THROWS_AS(kl_divergence(soften(x, 1.0f), soften(x, 2.0f)), Error);
}

TEST_CASE("cross entropy of uniform logits is ln C") {
  Graph g;
  const std::vector<int> labels{0, 3, 9, 5};
  Var ce = cross_entropy(g.input(Tensor({4, 10}, 0.25f)), labels);
  CHECK(std::fabs(scalar(g, ce) - std::log(10.0)) <= 1e-6);
}

TEST_CASE("lb kl variant is zero at uniform and grows under any small shift") {
  for (int n = 2; n <= 6; ++n) {
    CAPTURE(n);
    {
      Graph g;
      Var lb = lb_loss(g.input(probs_of(std::vector<float>(static_cast<std::size_t>(n), 1.0f / static_cast<float>(n)))), LbVariant::kKl);
      CHECK(std::fabs(scalar(g, lb)) <= 1e-9);
    }
    for (int from = 0; from < n; ++from) {
      for (int to = 0; to < n; ++to) {
        if (from == to) continue;
        std::vector<double> c(static_cast<std::size_t>(n), 1.0 / n);
        c[static_cast<std::size_t>(from)] -= 0.01;
        c[static_cast<std::size_t>(to)] += 0.01;
        Graph g;
        Var lb = lb_loss(g.input(probs_of(std::vector<float>(c.begin(), c.end()))), LbVariant::kKl);
        CHECK(scalar(g, lb) > 0.0f);
        const oracle::Vec u(static_cast<std::size_t>(n), 1.0 / n);
        CHECK(scalar(g, lb) == doctest::Approx(oracle::kl(u, c)).epsilon(1e-3));
      }
    }
  }
}

TEST_CASE("lb cv variant") {
  Graph g;
  CHECK(std::fabs(scalar(g, lb_loss(g.input(probs_of({0.5f, 0.5f, 0.0f, 0.0f})), LbVariant::kCv)) - 1.0) <= 1e-6);
  CHECK(std::fabs(scalar(g, lb_loss(g.input(probs_of({0.25f, 0.25f, 0.25f, 0.25f})), LbVariant::kCv))) <= 1e-9);
  CHECK(parse_lb_variant("cv") == LbVariant::kCv);
  CHECK_THROWS_AS(parse_lb_variant("entropy"), Error);
}

TEST_CASE("lb rejects a routing vector that is not a distribution") {
  Graph g;
  try {
    lb_loss(g.input(probs_of({0.5f, 0.7f})), LbVariant::kKl);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvariant);
  }
}

TEST_CASE("lambda schedules step exactly at their boundaries") {
  const DecaySchedule l1 = DecaySchedule::halve_every(30);
  const DecaySchedule l2 = DecaySchedule::multiply_every(0.9, 10);
  const int e1[] = {0, 29, 30, 59, 60};
  const float v1[] = {1.0f, 1.0f, 0.5f, 0.5f, 0.25f};
  for (int i = 0; i < 5; ++i) CHECK(schedule_value(l1, e1[i]) == v1[i]);
  const int e2[] = {0, 9, 10, 20};
  const float v2[] = {1.0f, 1.0f, 0.9f, static_cast<float>(0.9 * 0.9)};
  for (int i = 0; i < 4; ++i) CHECK(schedule_value(l2, e2[i]) == v2[i]);
  CHECK(schedule_value(DecaySchedule::constant(3.0), 1000) == 3.0f);
  CHECK_THROWS_AS(schedule_value(l1, -1), Error);
}

TEST_CASE("stage 1 loss: every member's CE plus both KL directions per pair") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> d(0.0f, 1.0f);
  const std::vector<int> labels{1, 0, 2};
  std::vector<Tensor> raw(3, Tensor({3, 3}));
  for (auto& t : raw) {
    for (float& v : t.data) v = d(rng);
  }
  Graph g;
  std::vector<Var> logits;
  for (const auto& t : raw) logits.push_back(g.input(t));
  const auto terms = stage1_loss(logits, labels, DistillOptions{2.0f, false}, false);
  CHECK(terms.kl_terms == 6);

  double ce = 0.0, align = 0.0;
  std::vector<oracle::Vec> soft;
  for (const auto& t : raw) {
    const auto p1 = oracle::softmax_rows(oracle::to_f64(t), 3, 3, 1.0);
    for (int r = 0; r < 3; ++r) ce -= std::log(p1[r * 3 + labels[r]]) / 3.0;
    soft.push_back(oracle::softmax_rows(oracle::to_f64(t), 3, 3, 2.0));
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      for (int r = 0; r < 3; ++r) {
        oracle::Vec p(soft[i].begin() + r * 3, soft[i].begin() + r * 3 + 3), q(soft[j].begin() + r * 3, soft[j].begin() + r * 3 + 3);
        align += oracle::kl(p, q) / 3.0;
      }
    }
  }
  CHECK(scalar(g, terms.task) == doctest::Approx(ce).epsilon(1e-5));
  CHECK(scalar(g, terms.align) == doctest::Approx(align).epsilon(1e-4));
  CHECK(scalar(g, terms.total) == doctest::Approx(ce + align).epsilon(1e-5));
  CHECK_THROWS_AS(stage1_loss(std::span<const Var>(logits.data(), 1), labels, {}, false), Error);
}

TEST_CASE("detach_align keeps each KL's first argument constant") {
  Graph g;
  Var a = g.input(Tensor({1, 3}, {1.0f, 0.0f, -1.0f}));
  Var b = g.input(Tensor({1, 3}, {0.0f, 0.5f, 0.0f}));
  const std::vector<int> labels{0};
  const std::vector<Var> both{a, b};
  auto attached = stage1_loss(both, labels, {}, false);
  auto detached = stage1_loss(both, labels, {}, true);
  CHECK(scalar(g, attached.total) == scalar(g, detached.total));
  Graph g1, g2;
  auto grads = [&](Graph& gg, bool detach) {
    Var x = gg.input(Tensor({1, 3}, {1.0f, 0.0f, -1.0f}));
    Var y = gg.input(Tensor({1, 3}, {0.0f, 0.5f, 0.0f}));
    const std::vector<Var> v{x, y};
    gg.backward(stage1_loss(v, labels, {}, detach).align);
    return gg.grad(x);
  };
  const auto full = grads(g1, false), half = grads(g2, true);
  // Detached: x only learns from KL(y || x), so its gradient differs.
  CHECK(full != half);
  double n = 0.0;
  for (float v : half) n += std::fabs(v);
  CHECK(n > 0.0);
}

TEST_CASE("stage 2 loss never sends gradient to the student") {
  Graph g;
  Var s = g.input(Tensor({2, 3}, {1, 2, 3, 0, 0, 1}));
  Var t = g.input(Tensor({2, 3}, {0, 1, 0, 2, 1, 0}));
  Var loss = stage2_loss(soften(s, 2.0f), soften(t, 2.0f));
  g.backward(loss);
  for (float v : g.grad(s)) CHECK(v == 0.0f);
  double mag = 0.0;
  for (float v : g.grad(t)) mag += std::fabs(v);
  CHECK(mag > 0.0);
}

TEST_CASE("dkd sums the selected teachers and honours weights and tau squared") {
  Graph g;
  Var student = g.input(Tensor({2, 3}, {0.1f, 0.2f, 0.3f, 1.0f, -1.0f, 0.0f}));
  SoftDist s = soften(student, 2.0f);
  SoftDist t1 = soften(g.constant(Tensor({2, 3}, {2, 0, 0, 0, 2, 0})), 2.0f);
  SoftDist t2 = soften(g.constant(Tensor({2, 3}, {0, 0, 1, 1, 0, 0})), 2.0f);
  const std::vector<SoftDist> one{t1}, two{t1, t2};
  const float k1 = scalar(g, dkd_loss(one, s));
  const float k2 = scalar(g, dkd_loss(std::vector<SoftDist>{t2}, s));
  CHECK(scalar(g, dkd_loss(two, s)) == doctest::Approx(k1 + k2).epsilon(1e-6));
  CHECK(scalar(g, dkd_loss(one, s, {}, DistillOptions{2.0f, true})) == doctest::Approx(4.0 * k1).epsilon(1e-6));
  const std::vector<Var> w{g.constant(Tensor({2}, {0.0f, 0.0f}))};
  CHECK(scalar(g, dkd_loss(one, s, w)) == 0.0f);
  CHECK_THROWS_AS(dkd_loss(std::vector<SoftDist>{}, s), Error);
  CHECK_THROWS_AS(dkd_loss(std::vector<SoftDist>{soften(g.constant(Tensor({2, 3})), 1.0f)}, s), Error);
}

TEST_CASE("stage 3 loss combines with the schedule weights") {
  Graph g;
  Var ce = g.constant(Tensor({1}, {1.5f})), dkd = g.constant(Tensor({1}, {2.0f})), lb = g.constant(Tensor({1}, {4.0f}));
  CHECK(scalar(g, stage3_loss(ce, dkd, lb, 0.5f, 0.25f)) == 3.5f);
  CHECK(scalar(g, stage3_loss(ce, dkd, lb, 0.0f, 0.0f)) == 1.5f);
  CHECK_THROWS_AS(stage3_loss(ce, dkd, lb, -1.0f, 0.0f), Error);
}
