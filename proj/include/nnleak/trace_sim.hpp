#pragma once

// Synthetic leakage traces. Each trace runs one inference; the Hamming
// weight of selected intermediate values is written at their placement
// sample, every other sample holds a uniform integer in [0, 32], and
// Gaussian noise is added to every sample.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nnleak/error.hpp"
#include "nnleak/mlp.hpp"
#include "nnleak/trace_set.hpp"

namespace nnleak {

// Derives an independent 64-bit seed from a base seed and stream indices
// (splitmix64 finalizer chained over the indices).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

enum class InputMode {
  nonneg,  // uniform over [0, scale]
  signed_values,  // uniform over [-scale, scale]
  wide,    // 2^u with u uniform over [-wide_exponent, wide_exponent]
};

inline const char* to_string(InputMode m) {
  switch (m) {
    case InputMode::nonneg: return "nonneg";
    case InputMode::signed_values: return "signed";
    case InputMode::wide: return "wide";
  }
  return "?";
}

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "nonneg") return InputMode::nonneg;
  if (s == "signed") return InputMode::signed_values;
  if (s == "wide") return InputMode::wide;
  throw ConfigError("input_mode", "unknown input mode '" + s + "' (nonneg, signed, wide)");
}

struct InputDistribution {
  InputMode mode = InputMode::nonneg;
  double scale = 4.0;
  double wide_exponent = 32.0;

  template <class Rng>
  float draw(Rng& rng) const {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    switch (mode) {
      case InputMode::nonneg: return static_cast<float>(scale * u01(rng));
      case InputMode::signed_values: return static_cast<float>(scale * (2.0 * u01(rng) - 1.0));
      case InputMode::wide: return static_cast<float>(std::exp2(wide_exponent * (2.0 * u01(rng) - 1.0)));
    }
    return 0.0f;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"mode", to_string(mode)}};
    if (mode == InputMode::wide)
      j["wide_exponent"] = wide_exponent;
    else
      j["scale"] = scale;
    return j;
  }
};

struct SimOptions {
  double noise_sigma = 0.0;
  int averaging_factor = 1;
  // Emit `averaging_factor` raw executions per trace and average them
  // instead of scaling the noise down by sqrt(averaging_factor).
  bool raw_repeats = false;
  InputDistribution inputs;
  std::uint64_t seed = 0;
  // Also place a leakage sample for every product (stored values only by default).
  bool leak_products = false;
};

namespace detail {

struct LeakSlot {
  std::size_t transcript_index;
  std::size_t sample;
};

inline TraceSet simulate_from_model(const MlpModel& model, const std::vector<LeakSlot>& slots, std::size_t n_traces,
                                    std::size_t n_samples, const SimOptions& opt, LeakageSpec spec,
                                    nlohmann::json info) {
  if (opt.averaging_factor < 1) throw ConfigError("averaging_factor", "must be >= 1");
  if (!(opt.noise_sigma >= 0.0)) throw ConfigError("noise_sigma", "must be >= 0");
  const std::size_t d = model.n_inputs();
  TraceSet ts(n_traces, n_samples, d);
  const int repeats = opt.raw_repeats ? opt.averaging_factor : 1;
  const double sigma = opt.raw_repeats ? opt.noise_sigma : opt.noise_sigma / std::sqrt(double(opt.averaging_factor));

  std::vector<float> x(d);
  std::vector<double> acc(n_samples);
  std::vector<int> leak_hw(n_samples, -1);
  InferenceTranscript transcript;
  for (std::size_t i = 0; i < n_traces; ++i) {
    std::mt19937_64 rng(stream_seed(opt.seed, i));
    for (std::size_t j = 0; j < d; ++j) x[j] = opt.inputs.draw(rng);
    infer_into(model, x, transcript);
    std::fill(leak_hw.begin(), leak_hw.end(), -1);
    for (const auto& s : slots) leak_hw[s.sample] = hamming_weight(transcript[s.transcript_index].value);

    std::uniform_int_distribution<int> filler(0, 32);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int r = 0; r < repeats; ++r) {
      // Filler and noise are drawn for every sample so the random stream
      // does not depend on the placement or on sigma.
      for (std::size_t s = 0; s < n_samples; ++s) {
        const int f = filler(rng);
        acc[s] += leak_hw[s] >= 0 ? leak_hw[s] : f;
      }
      for (std::size_t s = 0; s < n_samples; ++s) acc[s] += sigma * gauss(rng);
    }
    for (std::size_t s = 0; s < n_samples; ++s) ts.sample(i, s) = static_cast<float>(acc[s] / repeats);
    for (std::size_t j = 0; j < d; ++j) ts.input(i, j) = x[j];
  }

  spec.shape = ModelShape::of(model);
  ts.meta().source = TraceSource::synthetic;
  ts.meta().seed = opt.seed;
  ts.meta().averaging_factor = opt.averaging_factor;
  ts.meta().leakage = std::move(spec);
  info["noise_sigma"] = opt.noise_sigma;
  info["raw_repeats"] = opt.raw_repeats;
  info["inputs"] = opt.inputs.to_json();
  info["ground_truth"] = model_to_json(model);
  ts.meta().info = std::move(info);
  ts.validate();
  return ts;
}

inline InferenceTranscript transcript_shape(const MlpModel& model) {
  std::vector<float> zeros(model.n_inputs(), 0.0f);
  return infer(model, zeros).transcript;
}

inline bool leaks(ValueKind k, bool leak_products) {
  return k != ValueKind::product || leak_products;
}

// L samples spread evenly over T: the centers of L equal slices.
inline std::size_t uniform_position(std::size_t k, std::size_t count, std::size_t n_samples) {
  return ((2 * k + 1) * n_samples) / (2 * count);
}

}  // namespace detail

inline MlpModel single_neuron_model(std::span<const float> weights, std::optional<float> bias,
                                    Activation act = Activation::relu) {
  LayerParams p;
  p.n_in = weights.size();
  p.n_out = 1;
  p.weights.assign(weights.begin(), weights.end());
  if (bias) p.biases = {*bias};
  p.activation = act;
  return MlpModel({p});
}

// One multiplication w * x per trace; its Hamming weight sits at the middle
// sample.
inline TraceSet simulate_multiplication_set(float w, std::size_t n_traces, std::size_t n_samples,
                                            const SimOptions& opt) {
  if (n_traces < 1) throw ConfigError("traces", "need at least one trace");
  if (n_samples < 3 || n_samples % 2 == 0) throw ConfigError("samples", "T must be odd and >= 3");
  const float wv[1] = {w};
  const MlpModel model = single_neuron_model(wv, std::nullopt, Activation::none);
  const std::size_t mid = n_samples / 2;
  LeakageSpec spec;
  spec.placements.push_back({ValueKind::product, 0, 0, 0, mid});
  return detail::simulate_from_model(model, {{0, mid}}, n_traces, n_samples, opt, std::move(spec),
                                     {{"protocol", "mult"}});
}

// One neuron: a leakage sample per accumulation, optionally one for the
// bias addition, and one for the ReLU output, spread evenly over T.
inline TraceSet simulate_neuron_set(std::span<const float> weights, std::optional<float> bias, std::size_t n_traces,
                                    std::size_t n_samples, const SimOptions& opt) {
  if (weights.empty()) throw ConfigError("weights", "neuron needs at least one weight");
  if (n_traces < 1) throw ConfigError("traces", "need at least one trace");
  const MlpModel model = single_neuron_model(weights, bias);
  const auto shape = detail::transcript_shape(model);
  std::vector<std::size_t> leaking;
  for (std::size_t e = 0; e < shape.size(); ++e)
    if (detail::leaks(shape[e].kind, opt.leak_products)) leaking.push_back(e);
  if (n_samples < leaking.size() + 1)
    throw ConfigError("samples", "T must be at least " + std::to_string(leaking.size() + 1) + " for this neuron");
  std::vector<detail::LeakSlot> slots;
  LeakageSpec spec;
  for (std::size_t k = 0; k < leaking.size(); ++k) {
    const std::size_t s = detail::uniform_position(k, leaking.size(), n_samples);
    const auto& v = shape[leaking[k]];
    slots.push_back({leaking[k], s});
    spec.placements.push_back({v.kind, v.layer, v.neuron, v.input_index, s});
  }
  return detail::simulate_from_model(model, slots, n_traces, n_samples, opt, std::move(spec),
                                     {{"protocol", bias ? "bias-neuron" : "neuron"}});
}

// Whole model: leaking transcript values laid out in schedule order, one
// slot of `samples_per_value` samples each, leakage at the slot center.
inline TraceSet simulate_model_set(const MlpModel& model, std::size_t n_traces, std::size_t samples_per_value,
                                   const SimOptions& opt) {
  if (n_traces < 1) throw ConfigError("traces", "need at least one trace");
  if (samples_per_value < 1) throw ConfigError("samples_per_value", "must be >= 1");
  const auto shape = detail::transcript_shape(model);
  std::vector<detail::LeakSlot> slots;
  LeakageSpec spec;
  for (std::size_t e = 0; e < shape.size(); ++e) {
    if (!detail::leaks(shape[e].kind, opt.leak_products)) continue;
    const std::size_t s = slots.size() * samples_per_value + samples_per_value / 2;
    slots.push_back({e, s});
    spec.placements.push_back({shape[e].kind, shape[e].layer, shape[e].neuron, shape[e].input_index, s});
  }
  const std::size_t n_samples = slots.size() * samples_per_value;
  return detail::simulate_from_model(model, slots, n_traces, n_samples, opt, std::move(spec),
                                     {{"protocol", "model"}, {"samples_per_value", samples_per_value}});
}

}  // namespace nnleak
