#pragma once

// Fully-connected ReLU model and an inference engine that reproduces the
// embedded schedule value by value: one single-precision multiply then one
// add per input, neurons top to bottom, inputs in ascending order.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nnleak/error.hpp"
#include "nnleak/float_codec.hpp"

namespace nnleak {

enum class Activation { relu, none };

// Where the bias enters the accumulation. Only `after_sum` is attacked.
enum class BiasSchedule { after_sum, initial };

struct LayerParams {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  std::vector<float> weights;  // row-major [n_out x n_in]
  std::vector<float> biases;   // [n_out], or empty for a bias-free layer
  Activation activation = Activation::relu;

  float weight(std::size_t neuron, std::size_t input) const { return weights[neuron * n_in + input]; }
  bool has_bias() const noexcept { return !biases.empty(); }
};

class MlpModel {
 public:
  MlpModel() = default;
  explicit MlpModel(std::vector<LayerParams> layers, BiasSchedule schedule = BiasSchedule::after_sum)
      : layers_(std::move(layers)), schedule_(schedule) {
    validate();
  }

  const std::vector<LayerParams>& layers() const noexcept { return layers_; }
  const LayerParams& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t n_inputs() const noexcept { return layers_.empty() ? 0 : layers_.front().n_in; }
  std::size_t n_outputs() const noexcept { return layers_.empty() ? 0 : layers_.back().n_out; }
  BiasSchedule bias_schedule() const noexcept { return schedule_; }

  std::size_t weight_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size();
    return n;
  }

 private:
  void validate() const {
    if (layers_.empty()) throw DimensionError("model has no layer");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& p = layers_[l];
      const std::string where = "layer " + std::to_string(l);
      if (p.n_in == 0 || p.n_out == 0) throw DimensionError(where + ": empty dimension");
      if (p.weights.size() != p.n_in * p.n_out) throw DimensionError(where + ": weight matrix is not n_out x n_in");
      if (!p.biases.empty() && p.biases.size() != p.n_out) throw DimensionError(where + ": bias vector is not n_out");
      if (l > 0 && p.n_in != layers_[l - 1].n_out)
        throw DimensionError(where + ": n_in does not match the previous layer's n_out");
      for (float w : p.weights)
        if (!in_usual_case(w)) throw OutOfModelError(where + ": weight is not finite and normalized-or-zero");
      for (float b : p.biases)
        if (!in_usual_case(b)) throw OutOfModelError(where + ": bias is not finite and normalized-or-zero");
    }
  }

  std::vector<LayerParams> layers_;
  BiasSchedule schedule_ = BiasSchedule::after_sum;
};

enum class ValueKind { product, accumulator, bias_accumulator, activation_output };

inline const char* to_string(ValueKind k) {
  switch (k) {
    case ValueKind::product: return "product";
    case ValueKind::accumulator: return "accumulator";
    case ValueKind::bias_accumulator: return "bias-accumulator";
    case ValueKind::activation_output: return "activation-output";
  }
  return "?";
}

inline ValueKind value_kind_from_string(const std::string& s) {
  if (s == "product") return ValueKind::product;
  if (s == "accumulator") return ValueKind::accumulator;
  if (s == "bias-accumulator") return ValueKind::bias_accumulator;
  if (s == "activation-output") return ValueKind::activation_output;
  throw FormatError("unknown value kind '" + s + "'");
}

struct IntermediateValue {
  ValueKind kind;
  int layer;
  int neuron;
  int input_index;  // -1 when not tied to an input
  float value;
};

using InferenceTranscript = std::vector<IntermediateValue>;

// Branch-free ReLU: the bit pattern is ANDed with an all-ones mask when the
// value is strictly positive and with zero otherwise, so -0.0 becomes +0.0.
inline float relu_constant_time(float v) noexcept {
  const std::int32_t sign = (v > 0.0f);
  const std::int32_t mask = 0 - sign;
  return from_bits(to_bits(v) & static_cast<std::uint32_t>(mask));
}

namespace detail {

// Single-precision neuron evaluation. `emit(kind, input_index, value)` sees
// every intermediate value in schedule order.
template <class Emit>
float evaluate_neuron(const LayerParams& p, std::size_t k, std::span<const float> in, BiasSchedule schedule,
                      Emit&& emit) {
  float acc = (schedule == BiasSchedule::initial && p.has_bias()) ? p.biases[k] : 0.0f;
  const float* w = p.weights.data() + k * p.n_in;
  for (std::size_t j = 0; j < p.n_in; ++j) {
    const float prod = w[j] * in[j];
    emit(ValueKind::product, static_cast<int>(j), prod);
    acc = acc + prod;
    emit(ValueKind::accumulator, static_cast<int>(j), acc);
  }
  if (schedule == BiasSchedule::after_sum && p.has_bias()) {
    acc = acc + p.biases[k];
    emit(ValueKind::bias_accumulator, -1, acc);
  }
  const float out = p.activation == Activation::relu ? relu_constant_time(acc) : acc;
  emit(ValueKind::activation_output, -1, out);
  return out;
}

}  // namespace detail

// Appends the transcript of one inference to `transcript` (cleared first) and
// returns the output vector.
inline std::vector<float> infer_into(const MlpModel& model, std::span<const float> input,
                                     InferenceTranscript& transcript) {
  if (input.size() != model.n_inputs())
    throw DimensionError("infer: input has " + std::to_string(input.size()) + " values, model expects " +
                         std::to_string(model.n_inputs()));
  transcript.clear();
  std::vector<float> cur(input.begin(), input.end());
  std::vector<float> next;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const auto& p = model.layers()[l];
    next.assign(p.n_out, 0.0f);
    for (std::size_t k = 0; k < p.n_out; ++k) {
      next[k] = detail::evaluate_neuron(p, k, cur, model.bias_schedule(), [&](ValueKind kind, int j, float v) {
        transcript.push_back({kind, static_cast<int>(l), static_cast<int>(k), j, v});
      });
    }
    cur.swap(next);
  }
  return cur;
}

struct InferenceResult {
  std::vector<float> output;
  InferenceTranscript transcript;
};

inline InferenceResult infer(const MlpModel& model, std::span<const float> input) {
  InferenceResult r;
  r.output = infer_into(model, input, r.transcript);
  return r;
}

// Output of a single layer without a transcript.
inline void layer_forward(const LayerParams& p, std::span<const float> in, std::span<float> out,
                          BiasSchedule schedule = BiasSchedule::after_sum) {
  for (std::size_t k = 0; k < p.n_out; ++k)
    out[k] = detail::evaluate_neuron(p, k, in, schedule, [](ValueKind, int, float) {});
}

// ---------------------------------------------------------------------------
// Model file: decimal values for reading, 32-bit patterns for exactness.

inline std::string float_to_hex(float v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08X", to_bits(v));
  return buf;
}

inline float float_from_hex(const std::string& s) {
  std::string_view sv = s;
  if (sv.starts_with("0x") || sv.starts_with("0X")) sv.remove_prefix(2);
  std::uint32_t bits = 0;
  auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), bits, 16);
  if (ec != std::errc{} || p != sv.data() + sv.size() || sv.size() != 8)
    throw FormatError("bad 32-bit hex pattern '" + s + "'");
  return from_bits(bits);
}

// Shortest decimal that reads back to the same float.
inline double float_to_decimal(float v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::stod(std::string(buf, p));
}

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "none") return Activation::none;
  throw FormatError("unknown activation '" + s + "' (expected relu or none)");
}

inline nlohmann::json model_to_json(const MlpModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& p : model.layers()) {
    nlohmann::json w = nlohmann::json::array(), wh = nlohmann::json::array();
    for (std::size_t k = 0; k < p.n_out; ++k) {
      nlohmann::json row = nlohmann::json::array(), rowh = nlohmann::json::array();
      for (std::size_t j = 0; j < p.n_in; ++j) {
        row.push_back(float_to_decimal(p.weight(k, j)));
        rowh.push_back(float_to_hex(p.weight(k, j)));
      }
      w.push_back(std::move(row));
      wh.push_back(std::move(rowh));
    }
    nlohmann::json b = nlohmann::json::array(), bh = nlohmann::json::array();
    for (float v : p.biases) {
      b.push_back(float_to_decimal(v));
      bh.push_back(float_to_hex(v));
    }
    layers.push_back({{"weights", w},
                      {"weights_hex", wh},
                      {"biases", b},
                      {"biases_hex", bh},
                      {"activation", to_string(p.activation)}});
  }
  nlohmann::json j = {{"layers", layers}};
  if (model.bias_schedule() == BiasSchedule::initial) j["bias_schedule"] = "initial";
  return j;
}

inline MlpModel model_from_json(const nlohmann::json& j) {
  try {
    std::vector<LayerParams> layers;
    for (const auto& jl : j.at("layers")) {
      LayerParams p;
      const bool hex = jl.contains("weights_hex");
      const auto& rows = hex ? jl.at("weights_hex") : jl.at("weights");
      p.n_out = rows.size();
      p.n_in = p.n_out ? rows.at(0).size() : 0;
      for (const auto& row : rows) {
        if (row.size() != p.n_in) throw DimensionError("model file: ragged weight matrix");
        for (const auto& v : row) p.weights.push_back(hex ? float_from_hex(v.get<std::string>()) : v.get<float>());
      }
      if (jl.contains("biases_hex")) {
        for (const auto& v : jl.at("biases_hex")) p.biases.push_back(float_from_hex(v.get<std::string>()));
      } else if (jl.contains("biases")) {
        for (const auto& v : jl.at("biases")) p.biases.push_back(v.get<float>());
      }
      p.activation = activation_from_string(jl.value("activation", std::string("relu")));
      layers.push_back(std::move(p));
    }
    const auto schedule = j.value("bias_schedule", std::string("after_sum")) == "initial" ? BiasSchedule::initial
                                                                                      : BiasSchedule::after_sum;
    return MlpModel(std::move(layers), schedule);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
}

inline MlpModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open model file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model file " + path + ": " + e.what());
  }
  return model_from_json(j);
}

inline void save_model(const MlpModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write model file " + path);
  out << model_to_json(model).dump(2) << '\n';
}

}  // namespace nnleak
