#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nnleak/extraction.hpp"
#include "nnleak/trace_sim.hpp"

using namespace nnleak;

namespace {

SimOptions sim(double sigma2, std::uint64_t seed, InputMode mode = InputMode::wide) {
  SimOptions o;
  o.noise_sigma = std::sqrt(sigma2);
  o.seed = seed;
  o.inputs.mode = mode;
  o.inputs.wide_exponent = 32.0;
  return o;
}

ExtractionReport scored_neuron(const std::vector<float>& w, std::optional<float> b, double sigma2, std::size_t n,
                               std::uint64_t seed, bool is_signed) {
  const auto ts = simulate_neuron_set(w, b, n, 50, sim(sigma2, seed));
  auto r = b ? extract_bias_neuron(ts, w.size(), ExtractionConfig{})
             : extract_neuron(ts, w.size(), ExtractionConfig{}, is_signed);
  score_against(r, single_neuron_model(w, b));
  return r;
}

LayerParams dense(std::size_t n_in, std::size_t n_out, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  LayerParams p;
  p.n_in = n_in;
  p.n_out = n_out;
  for (std::size_t i = 0; i < n_in * n_out; ++i) p.weights.push_back(static_cast<float>(u(rng)));
  return p;
}

}  // namespace

TEST(ExtractionConfig, Defaults) {
  const ExtractionConfig c;
  EXPECT_EQ(c.keep, 5);
  EXPECT_EQ(c.d0, 5.0);
  EXPECT_EQ(c.center, 2.5);
  EXPECT_EQ(c.iterations, 3);
  EXPECT_EQ(c.lambda1, 100.0);
  EXPECT_EQ(c.lambda2, 50.0);
  EXPECT_EQ(c.per_center, 200);
  EXPECT_NO_THROW(c.validate());
}

TEST(ExtractionConfig, RejectsBadShrinkFactors) {
  try {
    config_from_json({{"lambda1", 10.0}, {"lambda2", 10.0}});
    FAIL() << "accepted lambda1 == lambda2";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "lambda1");
  }
  try {
    config_from_json({{"lambda2", 1.0}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "lambda2");
  }
}

TEST(ExtractionConfig, FieldErrors) {
  auto field_of = [](const nlohmann::json& j) {
    try {
      config_from_json(j);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string();
  };
  EXPECT_EQ(field_of({{"d0", 0.0}}), "d0");
  EXPECT_EQ(field_of({{"N", 0}}), "N");
  EXPECT_EQ(field_of({{"K", 1}}), "K");
  EXPECT_EQ(field_of({{"m", -1}}), "m");
  EXPECT_EQ(field_of({{"N", 2.5}}), "N");
  EXPECT_EQ(field_of({{"d0", "five"}}), "d0");
  EXPECT_EQ(field_of({{"gamma", 1}}), "gamma");
  EXPECT_EQ(field_of({{"delta", -0.1}}), "delta");
}

TEST(ExtractionConfig, JsonRoundtrip) {
  ExtractionConfig c;
  c.d0 = 2.0;
  c.center = 1.0;
  c.iterations = 4;
  c.keep = 3;
  c.per_center = 50;
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(back.d0, 2.0);
  EXPECT_EQ(back.center, 1.0);
  EXPECT_EQ(back.iterations, 4);
  EXPECT_EQ(back.keep, 3);
  EXPECT_EQ(back.per_center, 50);
}

TEST(ExtractValue, IntervalContractionAndKeepCount) {
  const auto ts = simulate_multiplication_set(0.4f, 500, 3, sim(1.0, 3));
  ExtractionConfig cfg;
  cfg.iterations = 5;
  cfg.keep = 4;
  const auto est = extract_value(ts, ProductPredictor{ts.input_column(0)}, cfg, {0, 3});
  ASSERT_EQ(est.iterations.size(), 6u);
  EXPECT_EQ(est.iterations[0].interval, cfg.d0);
  for (int i = 1; i <= 5; ++i) {
    const auto& it = est.iterations[static_cast<std::size_t>(i)];
    EXPECT_EQ(it.iteration, i);
    EXPECT_DOUBLE_EQ(it.interval, 5.0 / (100.0 * std::pow(50.0, i - 1)));
    EXPECT_EQ(it.kept.size(), 4u);
    EXPECT_LE(it.pool_size, 4u * (200u + 1u));
  }
  EXPECT_EQ(est.iterations[0].kept.size(), 4u);
  EXPECT_EQ(est.value, est.iterations.back().kept.front().value);
}

TEST(ExtractValue, ZeroIterationsReturnsGridWinner) {
  const float w = 0.6171875f;
  const auto ts = simulate_multiplication_set(w, 500, 3, sim(0.0, 3));
  ExtractionConfig cfg;
  cfg.iterations = 0;
  const auto est = extract_value(ts, ProductPredictor{ts.input_column(0)}, cfg, {0, 3});
  EXPECT_EQ(est.iterations.size(), 1u);
  EXPECT_EQ(est.value, w);
  EXPECT_EQ(est.leak_sample, 1u);
}

TEST(ExtractValue, RecordsEveryHypothesisOnRequest) {
  const auto ts = simulate_multiplication_set(0.4f, 300, 3, sim(1.0, 3));
  ExtractionConfig cfg;
  cfg.record_correlations = true;
  const auto est = extract_value(ts, ProductPredictor{ts.input_column(0)}, cfg, {0, 3});
  EXPECT_EQ(est.iterations[0].all.size(), est.iterations[0].pool_size);
}

TEST(ExtractMultiplication, FixtureSecretAtZeroNoise) {
  const auto ts = simulate_multiplication_set(0.793281f, 3000, 3, sim(0.0, 1));
  auto r = extract_multiplication(ts, ExtractionConfig{});
  const float w = 0.793281f;
  score_against(r, single_neuron_model(std::span<const float>(&w, 1), std::nullopt, Activation::none));
  ASSERT_EQ(r.params.size(), 1u);
  EXPECT_LE(*r.params[0].eps, 1e-7);
  EXPECT_EQ(r.params[0].leak_sample, 1);
}

TEST(ExtractMultiplication, GridPointIsExact) {
  for (float w : {0.33203125f, 1.5f, 4.25f, 0.0078125f}) {
    const auto ts = simulate_multiplication_set(w, 1000, 3, sim(0.0, 2));
    const auto r = extract_multiplication(ts, ExtractionConfig{});
    EXPECT_EQ(r.params[0].recovered, w);
  }
}

TEST(ExtractMultiplication, FullWindowWithoutPlacement) {
  auto ts = simulate_multiplication_set(0.5703125f, 1000, 7, sim(0.5, 2));
  ts.meta().leakage.reset();
  const auto r = extract_multiplication(ts, ExtractionConfig{});
  EXPECT_EQ(r.params[0].recovered, 0.5703125f);
  EXPECT_EQ(r.params[0].leak_sample, 3);
}

TEST(ExtractNeuron, PositiveFixtureAtZeroNoise) {
  const std::vector<float> w = {0.366193473339f, 0.90820813179f, 0.522847533226f, 0.00123456f};
  const auto r = scored_neuron(w, std::nullopt, 0.0, 3000, 5, false);
  ASSERT_EQ(r.params.size(), 4u);
  for (const auto& p : r.params) EXPECT_LE(*p.eps, 1e-7) << p.index;
}

TEST(ExtractNeuron, SignedFixture) {
  const std::vector<float> w = {-0.813444f, 0.0671324f, 0.107843f, 0.604393f};
  const auto r = scored_neuron(w, std::nullopt, 0.5, 3000, 6, true);
  ASSERT_EQ(r.neurons.size(), 1u);
  EXPECT_EQ(r.neurons[0].sign, SignStatus::resolved);
  EXPECT_TRUE(*r.neurons[0].all_signs_correct);
  for (const auto& p : r.params) {
    EXPECT_TRUE(*p.sign_match) << p.index;
    EXPECT_LE(*p.eps, 1e-5) << p.index;
  }
}

TEST(ExtractNeuron, AllPositiveInSignedMode) {
  const std::vector<float> w = {0.25f, 0.6f, 0.9f};
  const auto r = scored_neuron(w, std::nullopt, 0.5, 2000, 7, true);
  for (const auto& p : r.params) EXPECT_GT(p.recovered, 0.0f);
}

TEST(ExtractNeuron, ActivationSampleDecidesGlobalSign) {
  // Traces of w, except the activation sample, which is taken from the
  // negated neuron. Accumulators only fix weights up to a global sign, so
  // the recovered assignment must follow the activation sample.
  const std::vector<float> w = {0.7f, -0.3f, 0.45f};
  const std::vector<float> neg = {-0.7f, 0.3f, -0.45f};
  const auto a = simulate_neuron_set(w, std::nullopt, 2000, 50, sim(0.5, 8));
  const auto b = simulate_neuron_set(neg, std::nullopt, 2000, 50, sim(0.5, 8));
  const std::size_t act = *a.meta().leakage->find(ValueKind::activation_output, 0, 0);
  TraceSet mixed = a;
  for (std::size_t i = 0; i < mixed.n_traces(); ++i) mixed.sample(i, act) = b.sample(i, act);
  const auto ra = extract_neuron(a, 3, ExtractionConfig{}, true);
  const auto rm = extract_neuron(mixed, 3, ExtractionConfig{}, true);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(std::signbit(ra.params[j].recovered), std::signbit(w[j]));
    EXPECT_EQ(std::signbit(rm.params[j].recovered), std::signbit(neg[j]));
    EXPECT_EQ(std::abs(ra.params[j].recovered), std::abs(rm.params[j].recovered));
  }
}

TEST(ExtractNeuron, AllNegativeNeuronIsReportedNotGuessed) {
  const std::vector<float> w = {-0.7f, -0.3f};
  const auto r = scored_neuron(w, std::nullopt, 0.5, 2000, 9, true);
  EXPECT_TRUE(r.neurons[0].dead);
  EXPECT_EQ(r.neurons[0].sign, SignStatus::ambiguous);
  for (const auto& p : r.params) {
    EXPECT_TRUE(p.sign_ambiguous);
    EXPECT_FALSE(*p.sign_match);
    EXPECT_LE(std::abs(std::abs(p.recovered) - std::abs(*p.truth)), 1e-5);
  }
  EXPECT_FALSE(*r.neurons[0].all_signs_correct);
  EXPECT_FALSE(r.diagnostics.empty());
}

TEST(ExtractNeuron, ExactWindowsNeedPlacement) {
  const std::vector<float> w = {0.5f, 0.25f};
  auto ts = simulate_neuron_set(w, std::nullopt, 300, 20, sim(0.0, 1));
  LeakageSpec partial = *ts.meta().leakage;
  partial.placements.pop_back();  // drop the activation placement
  EXPECT_THROW(extract_neuron(ts, 2, ExtractionConfig{}, false, &partial), ConfigError);
  EXPECT_THROW(extract_neuron(ts, 3, ExtractionConfig{}, false), DimensionError);
}

TEST(ExtractNeuron, UnrecoverableWeightForZeroInput) {
  const std::vector<float> w = {0.5f, 0.25f, 0.75f};
  auto ts = simulate_neuron_set(w, std::nullopt, 500, 40, sim(0.0, 1));
  // Rebuild traces with input 1 forced to zero.
  TraceSet z(ts.n_traces(), ts.n_samples(), 3);
  z.meta() = ts.meta();
  const auto& spec = *ts.meta().leakage;
  for (std::size_t i = 0; i < z.n_traces(); ++i) {
    const float x[3] = {ts.input(i, 0), 0.0f, ts.input(i, 2)};
    float acc = 0.0f;
    for (std::size_t s = 0; s < z.n_samples(); ++s) z.sample(i, s) = ts.sample(i, s);
    for (int j = 0; j < 3; ++j) {
      z.input(i, static_cast<std::size_t>(j)) = x[j];
      const float prod = w[static_cast<std::size_t>(j)] * x[j];
      acc = acc + prod;
      z.sample(i, *spec.find(ValueKind::accumulator, 0, 0, j)) = float(hamming_weight(acc));
    }
    z.sample(i, *spec.find(ValueKind::activation_output, 0, 0)) = float(hamming_weight(relu_constant_time(acc)));
  }
  auto r = extract_neuron(z, 3, ExtractionConfig{}, false);
  score_against(r, single_neuron_model(w, std::nullopt));
  EXPECT_TRUE(r.params[1].unrecoverable);
  EXPECT_FALSE(r.params[0].unrecoverable);
  EXPECT_LE(*r.params[2].eps, 1e-6);
}

TEST(ExtractBiasNeuron, ZeroBiasAtZeroNoise) {
  const std::vector<float> w = {0.5f, 0.8f};
  const auto r = scored_neuron(w, 0.0f, 0.0, 2000, 10, true);
  ASSERT_EQ(r.params.size(), 3u);
  EXPECT_EQ(r.params[2].kind, ParamKind::bias);
  EXPECT_LE(*r.params[2].eps, 1e-6);
}

TEST(ExtractBiasNeuron, SeparateTables) {
  const std::vector<float> w = {0.5f, -0.8f};
  const auto r = scored_neuron(w, 0.3f, 0.5, 2000, 11, true);
  EXPECT_EQ(success_rates(r, ParamKind::weight).trials, 2u);
  EXPECT_EQ(success_rates(r, ParamKind::bias).trials, 1u);
  EXPECT_EQ(r.mode, "bias-neuron");
}

TEST(ExtractLayer, PositiveTwoByThree) {
  std::mt19937_64 rng(1);
  auto p = dense(3, 2, rng, 0.05, 1.0);
  const MlpModel m({p});
  const auto ts = simulate_model_set(m, 3000, 10, sim(0.5, 12));
  auto r = extract_layer(ts, 3, 2, ExtractionConfig{}, false);
  score_against(r, m);
  double mean = 0.0;
  for (const auto& q : r.params) mean += *q.eps;
  mean /= double(r.params.size());
  EXPECT_LE(mean, 1e-5);
  // Leak samples strictly increase through the layer.
  for (std::size_t k = 1; k < r.params.size(); ++k) EXPECT_GT(r.params[k].leak_sample, r.params[k - 1].leak_sample);
}

TEST(ExtractLayer, SignedFiveByFour) {
  std::mt19937_64 rng(2);
  auto p = dense(4, 5, rng, -1.0, 1.0);
  // Keep every neuron alive under non-negative inputs.
  for (std::size_t k = 0; k < 5; ++k) p.weights[k * 4] = std::abs(p.weights[k * 4]) + 0.5f;
  const MlpModel m({p});
  const auto ts = simulate_model_set(m, 3000, 10, sim(0.5, 13));
  auto r = extract_layer(ts, 4, 5, ExtractionConfig{}, true);
  score_against(r, m);
  ASSERT_EQ(r.params.size(), 20u);
  for (const auto& q : r.params) EXPECT_TRUE(*q.sign_match) << q.neuron << ":" << q.index;
}

TEST(ExtractLayer, SingleNeuronMatchesNeuronAttack) {
  const std::vector<float> w = {0.3f, 0.6f};
  const MlpModel m({single_neuron_model(w, std::nullopt).layer(0)});
  const auto ts = simulate_model_set(m, 1000, 8, sim(0.5, 14));
  const auto a = extract_layer(ts, 2, 1, ExtractionConfig{}, false);
  auto no_spec = ts;
  no_spec.meta().leakage.reset();
  const auto b = extract_neuron(no_spec, 2, ExtractionConfig{}, false);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t k = 0; k < a.params.size(); ++k) {
    EXPECT_EQ(a.params[k].recovered, b.params[k].recovered);
    EXPECT_EQ(a.params[k].leak_sample, b.params[k].leak_sample);
  }
}

TEST(ExtractLayer, WindowExhaustion) {
  const std::vector<float> w = {0.3f, 0.6f};
  auto ts = simulate_neuron_set(w, std::nullopt, 200, 4, sim(0.0, 15));
  ts.meta().leakage.reset();
  // Two neurons need at least six leak samples; four samples cannot hold them.
  EXPECT_THROW(extract_layer(ts, 2, 2, ExtractionConfig{}, false), WindowExhaustedError);
}

TEST(ExtractModel, SingleLayerEqualsLayerAttack) {
  std::mt19937_64 rng(3);
  const MlpModel m({dense(3, 2, rng, 0.05, 1.0)});
  const auto ts = simulate_model_set(m, 1000, 6, sim(0.5, 16));
  const auto a = extract_model(ts, ModelShape::of(m), ExtractionConfig{}, false);
  const auto b = extract_layer(ts, 3, 2, ExtractionConfig{}, false);
  ASSERT_EQ(a.report.params.size(), b.params.size());
  for (std::size_t k = 0; k < b.params.size(); ++k) EXPECT_EQ(a.report.params[k].recovered, b.params[k].recovered);
  EXPECT_EQ(a.recovered.layer(0).weights.size(), 6u);
}

TEST(ExtractModel, TwoLayersAtLowNoise) {
  std::mt19937_64 rng(4);
  const MlpModel m({dense(3, 3, rng, 0.05, 1.0), dense(3, 2, rng, 0.05, 1.0)});
  const auto ts = simulate_model_set(m, 2000, 6, sim(0.5, 17));
  auto out = extract_model(ts, ModelShape::of(m), ExtractionConfig{}, false);
  score_against(out.report, m);
  for (const auto& p : out.report.params) EXPECT_LT(*p.eps, 1e-4) << p.layer << ":" << p.neuron << ":" << p.index;
}

TEST(ExtractModel, ShapeMismatch) {
  std::mt19937_64 rng(5);
  const MlpModel m({dense(3, 2, rng, 0.05, 1.0)});
  const auto ts = simulate_model_set(m, 100, 6, sim(0.0, 18));
  ModelShape s = ModelShape::of(m);
  s.n_inputs = 4;
  EXPECT_THROW(extract_model(ts, s, ExtractionConfig{}, false), DimensionError);
  EXPECT_THROW(extract_model(ts, ModelShape{3, {}}, ExtractionConfig{}, false), DimensionError);
}

TEST(ExtractModel, ResidualBoundAborts) {
  std::mt19937_64 rng(6);
  const MlpModel m({dense(2, 2, rng, 0.05, 1.0), dense(2, 1, rng, 0.05, 1.0)});
  const auto ts = simulate_model_set(m, 500, 6, sim(25.0, 19));
  ExtractionConfig cfg;
  cfg.residual_bound = 1e-9;
  EXPECT_THROW(extract_model(ts, ModelShape::of(m), cfg, false), PropagatedError);
}

TEST(SuccessRates, MonotoneInThreshold) {
  ExtractionReport r;
  for (double e : {0.0, 1e-9, 5e-7, 2e-4, 0.05, 0.5}) {
    ParameterResult p;
    p.eps = e;
    p.sign_match = true;
    r.params.push_back(p);
  }
  const auto t = success_rates(r, ParamKind::weight);
  EXPECT_EQ(t.trials, 6u);
  for (std::size_t k = 1; k < t.rate.size(); ++k) EXPECT_LE(t.rate[k], t.rate[k - 1]);
  EXPECT_DOUBLE_EQ(t.rate[0], 100.0 * 5 / 6);
  EXPECT_DOUBLE_EQ(t.rate[7], 100.0 * 2 / 6);
  r.params[0].sign_match = false;
  EXPECT_EQ(success_rates(r, ParamKind::weight, true).trials, 5u);
}
