#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "nnleak/trace_sim.hpp"

using namespace nnleak;

namespace {

SimOptions quiet(std::uint64_t seed = 7) {
  SimOptions o;
  o.seed = seed;
  return o;
}

bool same_bits(const TraceSet& a, const TraceSet& b) {
  return a.traces().size() == b.traces().size() && a.inputs().size() == b.inputs().size() &&
         std::memcmp(a.traces().data(), b.traces().data(), a.traces().size() * 4) == 0 &&
         std::memcmp(a.inputs().data(), b.inputs().data(), a.inputs().size() * 4) == 0;
}

}  // namespace

TEST(StreamSeed, DistinctStreams) {
  EXPECT_NE(stream_seed(1, 0), stream_seed(1, 1));
  EXPECT_NE(stream_seed(1, 0), stream_seed(2, 0));
  EXPECT_NE(stream_seed(1, 0, 1), stream_seed(1, 1, 0));
  EXPECT_EQ(stream_seed(5, 3, 2), stream_seed(5, 3, 2));
}

TEST(InputDistribution, Ranges) {
  std::mt19937_64 rng(1);
  InputDistribution nonneg{InputMode::nonneg, 4.0, 8.0};
  InputDistribution sgn{InputMode::signed_values, 2.0, 8.0};
  InputDistribution wide{InputMode::wide, 4.0, 10.0};
  bool saw_negative = false;
  for (int i = 0; i < 10000; ++i) {
    const float a = nonneg.draw(rng);
    EXPECT_GE(a, 0.0f);
    EXPECT_LE(a, 4.0f);
    const float b = sgn.draw(rng);
    EXPECT_LE(std::abs(b), 2.0f);
    saw_negative = saw_negative || b < 0.0f;
    const float c = wide.draw(rng);
    EXPECT_GE(c, std::ldexp(1.0f, -10));
    EXPECT_LE(c, std::ldexp(1.0f, 10));
  }
  EXPECT_TRUE(saw_negative);
  EXPECT_EQ(input_mode_from_string("wide"), InputMode::wide);
  EXPECT_THROW(input_mode_from_string("gauss"), ConfigError);
}

TEST(SimulateMult, ZeroNoiseLeakIsHammingWeight) {
  const auto ts = simulate_multiplication_set(0.75f, 200, 5, quiet());
  ASSERT_EQ(ts.n_samples(), 5u);
  for (std::size_t i = 0; i < ts.n_traces(); ++i) {
    const float prod = 0.75f * ts.input(i, 0);
    EXPECT_EQ(ts.sample(i, 2), float(hamming_weight(prod)));
    for (std::size_t s : {0u, 1u, 3u, 4u}) {
      const float f = ts.sample(i, s);
      EXPECT_EQ(f, std::floor(f));
      EXPECT_GE(f, 0.0f);
      EXPECT_LE(f, 32.0f);
    }
  }
  ASSERT_TRUE(ts.meta().leakage);
  EXPECT_EQ(ts.meta().leakage->find(ValueKind::product, 0, 0, 0), std::optional<std::size_t>(2));
  EXPECT_EQ(ts.meta().info["protocol"], "mult");
}

TEST(SimulateMult, SampleCountRules) {
  EXPECT_THROW(simulate_multiplication_set(1.0f, 10, 4, quiet()), ConfigError);
  EXPECT_THROW(simulate_multiplication_set(1.0f, 10, 1, quiet()), ConfigError);
  EXPECT_THROW(simulate_multiplication_set(1.0f, 0, 3, quiet()), ConfigError);
  SimOptions bad = quiet();
  bad.averaging_factor = 0;
  EXPECT_THROW(simulate_multiplication_set(1.0f, 10, 3, bad), ConfigError);
}

TEST(SimulateMult, SameSeedSameBytes) {
  SimOptions o = quiet(42);
  o.noise_sigma = 1.0;
  EXPECT_TRUE(same_bits(simulate_multiplication_set(0.3f, 100, 3, o), simulate_multiplication_set(0.3f, 100, 3, o)));
  SimOptions p = o;
  p.seed = 43;
  EXPECT_FALSE(same_bits(simulate_multiplication_set(0.3f, 100, 3, o), simulate_multiplication_set(0.3f, 100, 3, p)));
}

TEST(SimulateMult, NoiseHasRequestedSpread) {
  SimOptions o = quiet(3);
  const auto clean = simulate_multiplication_set(0.3f, 20000, 3, o);
  o.noise_sigma = 2.0;
  const auto noisy = simulate_multiplication_set(0.3f, 20000, 3, o);
  // Same inputs and filler; only the Gaussian term differs.
  double s = 0.0, s2 = 0.0;
  const std::size_t n = clean.n_traces();
  for (std::size_t i = 0; i < n; ++i) {
    ASSERT_EQ(clean.input(i, 0), noisy.input(i, 0));
    const double d = double(noisy.sample(i, 1)) - clean.sample(i, 1);
    s += d;
    s2 += d * d;
  }
  const double mean = s / double(n);
  const double sd = std::sqrt(s2 / double(n) - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.1);
  EXPECT_NEAR(sd, 2.0, 0.05);
}

TEST(SimulateMult, AveragingScalesNoise) {
  SimOptions o = quiet(3);
  const auto clean = simulate_multiplication_set(0.3f, 20000, 3, o);
  o.noise_sigma = 2.0;
  o.averaging_factor = 16;
  const auto avg = simulate_multiplication_set(0.3f, 20000, 3, o);
  double s2 = 0.0;
  for (std::size_t i = 0; i < clean.n_traces(); ++i) {
    const double d = double(avg.sample(i, 1)) - clean.sample(i, 1);
    s2 += d * d;
  }
  EXPECT_NEAR(std::sqrt(s2 / double(clean.n_traces())), 0.5, 0.02);
  EXPECT_EQ(avg.meta().averaging_factor, 16);
}

TEST(SimulateMult, RawRepeatsAverageExecutions) {
  SimOptions o = quiet(3);
  o.noise_sigma = 2.0;
  o.averaging_factor = 4;
  o.raw_repeats = true;
  const auto ts = simulate_multiplication_set(0.3f, 5000, 3, o);
  // Leak sample: HW plus noise of spread sigma / 2; filler samples average four draws.
  double s2 = 0.0;
  for (std::size_t i = 0; i < ts.n_traces(); ++i) {
    const double d = ts.sample(i, 1) - hamming_weight(0.3f * ts.input(i, 0));
    s2 += d * d;
  }
  EXPECT_NEAR(std::sqrt(s2 / double(ts.n_traces())), 1.0, 0.05);
}

TEST(SimulateNeuron, PlacementsSpreadEvenly) {
  const std::vector<float> w = {0.5f, -0.25f, 0.125f};
  const auto ts = simulate_neuron_set(w, std::nullopt, 50, 50, quiet());
  const auto& spec = *ts.meta().leakage;
  // Three accumulations and one activation: centers of four equal slices.
  ASSERT_EQ(spec.placements.size(), 4u);
  EXPECT_EQ(spec.find(ValueKind::accumulator, 0, 0, 0), std::optional<std::size_t>(6));
  EXPECT_EQ(spec.find(ValueKind::accumulator, 0, 0, 1), std::optional<std::size_t>(18));
  EXPECT_EQ(spec.find(ValueKind::accumulator, 0, 0, 2), std::optional<std::size_t>(31));
  EXPECT_EQ(spec.find(ValueKind::activation_output, 0, 0), std::optional<std::size_t>(43));
  for (std::size_t i = 0; i < ts.n_traces(); ++i) {
    float acc = 0.0f;
    for (std::size_t j = 0; j < 3; ++j) {
      const float prod = w[j] * ts.input(i, j);
      acc = acc + prod;
    }
    EXPECT_EQ(ts.sample(i, 31), float(hamming_weight(acc)));
    EXPECT_EQ(ts.sample(i, 43), float(hamming_weight(relu_constant_time(acc))));
  }
}

TEST(SimulateNeuron, BiasAndProductsLeakWhenAsked) {
  const std::vector<float> w = {0.5f, 0.25f};
  SimOptions o = quiet();
  o.leak_products = true;
  const auto ts = simulate_neuron_set(w, 0.125f, 20, 60, o);
  const auto& spec = *ts.meta().leakage;
  EXPECT_EQ(spec.placements.size(), 6u);
  EXPECT_TRUE(spec.find(ValueKind::product, 0, 0, 1));
  EXPECT_TRUE(spec.find(ValueKind::bias_accumulator, 0, 0));
  EXPECT_EQ(ts.meta().info["protocol"], "bias-neuron");
  EXPECT_THROW(simulate_neuron_set(w, 0.125f, 20, 5, o), ConfigError);
}

TEST(SimulateModel, SlotLayout) {
  LayerParams a;
  a.n_in = 2;
  a.n_out = 2;
  a.weights = {0.5f, 0.5f, 0.25f, 0.75f};
  LayerParams b;
  b.n_in = 2;
  b.n_out = 1;
  b.weights = {1.0f, 2.0f};
  const MlpModel m({a, b});
  const auto ts = simulate_model_set(m, 30, 4, quiet());
  // Per neuron: one sample per input and one activation, 3 neurons x 3 values.
  EXPECT_EQ(ts.n_samples(), 9u * 4u);
  const auto& spec = *ts.meta().leakage;
  EXPECT_EQ(spec.find(ValueKind::accumulator, 0, 0, 0), std::optional<std::size_t>(2));
  EXPECT_EQ(spec.find(ValueKind::activation_output, 1, 0), std::optional<std::size_t>(8 * 4 + 2));
  EXPECT_EQ(spec.layer_region(1)->begin, 6u * 4u + 2u);
  EXPECT_EQ(ts.meta().info["ground_truth"]["layers"].size(), 2u);
  EXPECT_THROW(simulate_model_set(m, 30, 0, quiet()), ConfigError);
}
