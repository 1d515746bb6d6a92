#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nnleak/cema.hpp"
#include "nnleak/trace_sim.hpp"

using namespace nnleak;

namespace {

// Textbook Pearson in long double.
long double naive_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TraceSet noisy_mult(float w, std::size_t n, double sigma, std::uint64_t seed, InputMode mode = InputMode::wide) {
  SimOptions o;
  o.seed = seed;
  o.noise_sigma = sigma;
  o.inputs.mode = mode;
  return simulate_multiplication_set(w, n, 5, o);
}

std::vector<double> column(const TraceSet& ts, std::size_t s) {
  std::vector<double> c(ts.n_traces());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = ts.sample(i, s);
  return c;
}

}  // namespace

TEST(Pearson, MatchesNaiveOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const auto ts = noisy_mult(0.5f + 0.1f * float(rep), 500, 1.0 + rep, 100 + rep);
    std::vector<double> h(ts.n_traces());
    for (auto& v : h) v = g(rng) * 3.0 + 7.0;
    const auto r = pearson_column(h, ts, {0, ts.n_samples()});
    for (std::size_t s = 0; s < ts.n_samples(); ++s)
      EXPECT_NEAR(r[s], double(naive_pearson(h, column(ts, s))), 1e-10);
  }
}

TEST(Pearson, Errors) {
  const auto ts = noisy_mult(0.5f, 10, 1.0, 1);
  std::vector<double> constant(10, 2.0);
  EXPECT_THROW(pearson_column(constant, ts, {0, 1}), DegenerateError);
  std::vector<double> short_h(9, 1.0);
  EXPECT_THROW(pearson_column(short_h, ts, {0, 1}), DimensionError);
  std::vector<double> h(10);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = double(i);
  EXPECT_THROW(pearson_column(h, ts, {0, 9}), DimensionError);
  EXPECT_THROW(pearson_column(h, ts, {2, 2}), DimensionError);
}

TEST(Pearson, ConstantColumnGivesZero) {
  TraceSet ts(5, 1, 0);
  for (std::size_t i = 0; i < 5; ++i) ts.sample(i, 0) = 3.0f;
  std::vector<double> h = {1, 2, 3, 4, 5};
  EXPECT_EQ(pearson_column(h, ts, {0, 1})[0], 0.0);
}

TEST(Cema, BestSampleAgreesWithPearson) {
  const auto ts = noisy_mult(1.3f, 800, 2.0, 5);
  const auto x = ts.input_column(0);
  const TraceColumns cols(ts, {0, ts.n_samples()});
  for (float h : {1.3f, 0.7f, 2.9f}) {
    std::vector<float> pred(x.size());
    ProductPredictor{x}(h, pred);
    std::vector<double> hw(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) hw[i] = hamming_weight(pred[i]);
    const auto r = pearson_column(hw, ts, {0, ts.n_samples()});
    const auto e = best_sample(pred, cols);
    std::size_t arg = 0;
    for (std::size_t s = 1; s < r.size(); ++s)
      if (std::abs(r[s]) > std::abs(r[arg])) arg = s;
    EXPECT_EQ(e.sample, arg);
    EXPECT_NEAR(e.r, r[arg], 1e-10);
  }
}

TEST(Cema, TruthRanksFirstAtZeroNoise) {
  const float w = 0.6171875f;  // on the coarse grid
  const auto ts = noisy_mult(w, 1000, 0.0, 9);
  const auto x = ts.input_column(0);
  const TraceColumns cols(ts, {0, ts.n_samples()});
  const auto g = step1_grid(2.5, 5.0);
  const auto res = cema_rank(std::span<const float>(g.values), ProductPredictor{x}, cols, 5);
  ASSERT_EQ(res.ranked.size(), 5u);
  EXPECT_EQ(res.ranked[0].value, w);
  EXPECT_EQ(res.ranked[0].sample, 2u);
  EXPECT_NEAR(res.ranked[0].r, 1.0, 1e-12);
  EXPECT_EQ(res.evaluated, g.size());
  for (std::size_t k = 1; k < res.ranked.size(); ++k) EXPECT_FALSE(ranks_before(res.ranked[k], res.ranked[k - 1]));
}

TEST(Cema, ArgmaxInvariantUnderPositiveAffineTraceTransform) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> a(0.01, 50.0), b(-100.0, 100.0);
  const auto g = step1_grid(1.0, 2.0);
  for (int rep = 0; rep < 8; ++rep) {
    auto ts = noisy_mult(0.3f + 0.2f * float(rep), 600, 3.0, 300 + rep);
    const auto x = ts.input_column(0);
    const auto base = cema_rank(std::span<const float>(g.values), ProductPredictor{x}, TraceColumns(ts, {0, 5}), 5);
    const double scale = a(rng), shift = b(rng);
    for (std::size_t i = 0; i < ts.n_traces(); ++i)
      for (std::size_t s = 0; s < ts.n_samples(); ++s)
        ts.sample(i, s) = static_cast<float>(scale * ts.sample(i, s) + shift);
    const auto moved = cema_rank(std::span<const float>(g.values), ProductPredictor{x}, TraceColumns(ts, {0, 5}), 5);
    EXPECT_EQ(moved.ranked[0].value, base.ranked[0].value);
    EXPECT_EQ(moved.ranked[0].sample, base.ranked[0].sample);
  }
}

TEST(Cema, ThreadCountDoesNotChangeRanking) {
  const auto ts = noisy_mult(0.9f, 700, 4.0, 77);
  const auto x = ts.input_column(0);
  const TraceColumns cols(ts, {0, ts.n_samples()});
  const auto g = step1_grid(2.5, 5.0);
  std::vector<CorrEntry> all1, all4;
  const auto r1 = cema_rank(std::span<const float>(g.values), ProductPredictor{x}, cols, 5, 1, &all1);
  const auto r4 = cema_rank(std::span<const float>(g.values), ProductPredictor{x}, cols, 5, 4, &all4);
  ASSERT_EQ(r1.ranked.size(), r4.ranked.size());
  for (std::size_t k = 0; k < r1.ranked.size(); ++k) {
    EXPECT_EQ(r1.ranked[k].value, r4.ranked[k].value);
    EXPECT_EQ(r1.ranked[k].r, r4.ranked[k].r);
  }
  ASSERT_EQ(all1.size(), all4.size());
  for (std::size_t k = 0; k < all1.size(); ++k) ASSERT_EQ(all1[k].r, all4[k].r);
}

TEST(Cema, AbsorbedHypothesesScoreLikeFullEvaluation) {
  // Accumulate onto a large prefix: tiny hypotheses vanish and share a score.
  SimOptions o;
  o.seed = 4;
  o.noise_sigma = 1.0;
  o.inputs.mode = InputMode::wide;
  const std::vector<float> w = {3.0f, 0.01f};
  const auto ts = simulate_neuron_set(w, std::nullopt, 400, 20, o);
  const auto x0 = ts.input_column(0), x1 = ts.input_column(1);
  std::vector<float> prefix(ts.n_traces());
  for (std::size_t i = 0; i < prefix.size(); ++i) prefix[i] = 3.0f * x0[i];
  const TraceColumns cols(ts, {0, ts.n_samples()});
  const auto g = signed_pool(step1_grid(2.5, 5.0));
  const AccumulatePredictor fast{prefix, x1};
  ASSERT_GT(fast.absorb_limit(), 0.0);
  const FunctionPredictor slow{[&](float h, std::size_t i) {
    const float prod = h * x1[i];
    return prefix[i] + prod;
  }};
  std::vector<CorrEntry> a, b;
  cema_rank(std::span<const float>(g), fast, cols, 5, 1, &a);
  cema_rank(std::span<const float>(g), slow, cols, 5, 1, &b);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    ASSERT_EQ(a[k].value, b[k].value);
    ASSERT_EQ(a[k].r, b[k].r) << a[k].value;
    ASSERT_EQ(a[k].sample, b[k].sample);
  }
}

TEST(Cema, TieBreakPrefersSmallerHypothesisThenEarlierSample) {
  const CorrEntry a{0.5f, 0.8, 3}, b{0.25f, -0.8, 4}, c{0.25f, 0.8, 2};
  EXPECT_TRUE(ranks_before(b, a));
  EXPECT_TRUE(ranks_before(c, b));
  EXPECT_FALSE(ranks_before(a, a));
  const CorrEntry strong{4.0f, 0.9, 9};
  EXPECT_TRUE(ranks_before(strong, c));
}

TEST(Cema, ConstantPredictionsAreSkipped) {
  const auto ts = noisy_mult(0.9f, 50, 1.0, 1);
  const std::vector<float> zeros(ts.n_traces(), 0.0f);
  const TraceColumns cols(ts, {0, ts.n_samples()});
  const std::vector<float> hyps = {0.0f, 1.0f};
  const auto res = cema_rank(std::span<const float>(hyps), ProductPredictor{zeros}, cols, 2);
  EXPECT_EQ(res.skipped_constant, 2u);
  EXPECT_TRUE(res.ranked.empty());
  EXPECT_EQ(best_sample(zeros, cols).r, 0.0);
  EXPECT_THROW(cema_rank(std::span<const float>(hyps), ProductPredictor{zeros}, cols, 0), ConfigError);
}

TEST(Cema, KeepCountIsConserved) {
  const auto ts = noisy_mult(0.9f, 200, 1.0, 2);
  const auto x = ts.input_column(0);
  const TraceColumns cols(ts, {0, ts.n_samples()});
  const auto g = step1_grid(1.0, 1.0);
  for (std::size_t n : {1u, 3u, 7u, 50u})
    EXPECT_EQ(cema_rank(std::span<const float>(g.values), ProductPredictor{x}, cols, n).ranked.size(), n);
}

TEST(MonotonicWindow, Basics) {
  EXPECT_EQ(monotonic_window(-1, 10), (SampleRange{0, 10}));
  EXPECT_EQ(monotonic_window(4, 10), (SampleRange{5, 10}));
  EXPECT_THROW(monotonic_window(9, 10), WindowExhaustedError);
  EXPECT_THROW(monotonic_window(-2, 10), DimensionError);
}
