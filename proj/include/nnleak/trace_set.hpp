#pragma once

// Trace-set container, leakage placement description, and the SCNT binary
// file format:
//
//   offset  size  field
//   0       4     magic "SCNT"
//   4       4     format version (u32 LE, currently 1)
//   8       8     N, number of traces (u64 LE)
//   16      8     T, samples per trace (u64 LE)
//   24      8     D, input values per trace (u64 LE)
//   32      8     L, metadata length in bytes (u64 LE)
//   40      L     metadata, UTF-8 JSON
//   40+L    4NT   samples, row-major, f32 LE
//   ...     4ND   inputs, row-major, f32 LE
//
// Nothing may follow the input block.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nnleak/error.hpp"
#include "nnleak/mlp.hpp"

namespace nnleak {

// Half-open sample interval [begin, end).
struct SampleRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  bool empty() const noexcept { return end <= begin; }
  bool contains(std::size_t s) const noexcept { return s >= begin && s < end; }
  SampleRange intersect(const SampleRange& o) const noexcept {
    SampleRange r{std::max(begin, o.begin), std::min(end, o.end)};
    if (r.end < r.begin) r.end = r.begin;
    return r;
  }
  friend bool operator==(const SampleRange&, const SampleRange&) = default;
};

struct LayerShape {
  std::size_t n_out = 0;
  Activation activation = Activation::relu;
  bool has_bias = false;
};

struct ModelShape {
  std::size_t n_inputs = 0;
  std::vector<LayerShape> layers;

  std::size_t layer_inputs(std::size_t l) const { return l == 0 ? n_inputs : layers.at(l - 1).n_out; }

  static ModelShape of(const MlpModel& m) {
    ModelShape s;
    s.n_inputs = m.n_inputs();
    for (const auto& l : m.layers()) s.layers.push_back({l.n_out, l.activation, l.has_bias()});
    return s;
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) n += layer_inputs(l) * layers[l].n_out;
    return n;
  }
};

struct Placement {
  ValueKind kind = ValueKind::accumulator;
  int layer = 0;
  int neuron = 0;
  int input_index = -1;
  std::size_t sample = 0;
};

// Where each leaking intermediate value sits in the trace.
struct LeakageSpec {
  std::vector<Placement> placements;
  std::optional<ModelShape> shape;

  std::optional<std::size_t> find(ValueKind kind, int layer, int neuron, int input_index = -1) const {
    for (const auto& p : placements)
      if (p.kind == kind && p.layer == layer && p.neuron == neuron && p.input_index == input_index) return p.sample;
    return std::nullopt;
  }

  std::optional<SampleRange> neuron_region(int layer, int neuron) const {
    std::optional<SampleRange> r;
    for (const auto& p : placements) {
      if (p.layer != layer || p.neuron != neuron) continue;
      if (!r)
        r = SampleRange{p.sample, p.sample + 1};
      else
        r = SampleRange{std::min(r->begin, p.sample), std::max(r->end, p.sample + 1)};
    }
    return r;
  }

  std::optional<SampleRange> layer_region(int layer) const {
    std::optional<SampleRange> r;
    for (const auto& p : placements) {
      if (p.layer != layer) continue;
      if (!r)
        r = SampleRange{p.sample, p.sample + 1};
      else
        r = SampleRange{std::min(r->begin, p.sample), std::max(r->end, p.sample + 1)};
    }
    return r;
  }

  void validate(std::size_t n_samples) const {
    for (const auto& p : placements) {
      if (p.sample >= n_samples)
        throw FormatError("leakage spec: sample " + std::to_string(p.sample) + " outside [0, " +
                          std::to_string(n_samples) + ")");
      if (shape) {
        if (p.layer < 0 || static_cast<std::size_t>(p.layer) >= shape->layers.size())
          throw FormatError("leakage spec: layer index out of the declared shape");
        const auto& ls = shape->layers[static_cast<std::size_t>(p.layer)];
        if (p.neuron < 0 || static_cast<std::size_t>(p.neuron) >= ls.n_out)
          throw FormatError("leakage spec: neuron index out of the declared shape");
        if (p.input_index >= static_cast<int>(shape->layer_inputs(static_cast<std::size_t>(p.layer))))
          throw FormatError("leakage spec: input index out of the declared shape");
      }
    }
  }
};

enum class TraceSource { synthetic, imported };

struct TraceMeta {
  TraceSource source = TraceSource::synthetic;
  std::optional<std::uint64_t> seed;
  std::optional<LeakageSpec> leakage;
  int averaging_factor = 1;
  // Free-form provenance (protocol, noise, input distribution, ground truth).
  nlohmann::json info = nlohmann::json::object();
};

class TraceSet {
 public:
  TraceSet() = default;
  TraceSet(std::size_t n, std::size_t t, std::size_t d)
      : n_(n), t_(t), d_(d), traces_(n * t, 0.0f), inputs_(n * d, 0.0f) {}
  TraceSet(std::size_t n, std::size_t t, std::size_t d, std::vector<float> traces, std::vector<float> inputs,
           TraceMeta meta = {})
      : n_(n), t_(t), d_(d), traces_(std::move(traces)), inputs_(std::move(inputs)), meta_(std::move(meta)) {
    validate();
  }

  std::size_t n_traces() const noexcept { return n_; }
  std::size_t n_samples() const noexcept { return t_; }
  std::size_t n_inputs() const noexcept { return d_; }

  float sample(std::size_t i, std::size_t s) const { return traces_[i * t_ + s]; }
  float& sample(std::size_t i, std::size_t s) { return traces_[i * t_ + s]; }
  float input(std::size_t i, std::size_t j) const { return inputs_[i * d_ + j]; }
  float& input(std::size_t i, std::size_t j) { return inputs_[i * d_ + j]; }

  std::span<const float> trace(std::size_t i) const { return {traces_.data() + i * t_, t_}; }
  std::span<const float> input_row(std::size_t i) const { return {inputs_.data() + i * d_, d_}; }
  const std::vector<float>& traces() const noexcept { return traces_; }
  const std::vector<float>& inputs() const noexcept { return inputs_; }

  std::vector<float> input_column(std::size_t j) const {
    std::vector<float> c(n_);
    for (std::size_t i = 0; i < n_; ++i) c[i] = inputs_[i * d_ + j];
    return c;
  }

  const TraceMeta& meta() const noexcept { return meta_; }
  TraceMeta& meta() noexcept { return meta_; }

  void validate() const {
    if (t_ < 1) throw DimensionError("trace set: T must be at least 1");
    if (traces_.size() != n_ * t_) throw DimensionError("trace set: sample matrix is not N x T");
    if (inputs_.size() != n_ * d_) throw DimensionError("trace set: input matrix is not N x D");
    for (float v : traces_)
      if (!std::isfinite(v)) throw DimensionError("trace set: non-finite sample");
    if (meta_.averaging_factor < 1) throw DimensionError("trace set: averaging factor must be >= 1");
    if (meta_.leakage) meta_.leakage->validate(t_);
  }

 private:
  std::size_t n_ = 0, t_ = 1, d_ = 0;
  std::vector<float> traces_;
  std::vector<float> inputs_;
  TraceMeta meta_;
};

// ---------------------------------------------------------------------------
// JSON for shapes, leakage specs and metadata.

inline nlohmann::json shape_to_json(const ModelShape& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers)
    layers.push_back({{"n_out", l.n_out}, {"activation", to_string(l.activation)}, {"has_bias", l.has_bias}});
  return {{"n_inputs", s.n_inputs}, {"layers", layers}};
}

inline ModelShape shape_from_json(const nlohmann::json& j) {
  ModelShape s;
  s.n_inputs = j.at("n_inputs").get<std::size_t>();
  for (const auto& l : j.at("layers"))
    s.layers.push_back({l.at("n_out").get<std::size_t>(),
                        activation_from_string(l.value("activation", std::string("relu"))),
                        l.value("has_bias", false)});
  return s;
}

inline nlohmann::json leakage_to_json(const LeakageSpec& spec) {
  nlohmann::json pl = nlohmann::json::array();
  for (const auto& p : spec.placements) {
    nlohmann::json e = {{"kind", to_string(p.kind)}, {"layer", p.layer}, {"neuron", p.neuron}, {"sample", p.sample}};
    if (p.input_index >= 0) e["input_index"] = p.input_index;
    pl.push_back(std::move(e));
  }
  nlohmann::json j = {{"placements", pl}};
  if (spec.shape) j["shape"] = shape_to_json(*spec.shape);
  return j;
}

inline LeakageSpec leakage_from_json(const nlohmann::json& j) {
  LeakageSpec spec;
  for (const auto& e : j.at("placements")) {
    Placement p;
    p.kind = value_kind_from_string(e.at("kind").get<std::string>());
    p.layer = e.value("layer", 0);
    p.neuron = e.value("neuron", 0);
    p.input_index = e.value("input_index", -1);
    p.sample = e.at("sample").get<std::size_t>();
    spec.placements.push_back(p);
  }
  if (j.contains("shape")) spec.shape = shape_from_json(j.at("shape"));
  return spec;
}

inline nlohmann::json meta_to_json(const TraceMeta& m) {
  nlohmann::json j;
  j["source"] = m.source == TraceSource::synthetic ? "synthetic" : "imported";
  if (m.seed) j["seed"] = *m.seed;
  j["averaging_factor"] = m.averaging_factor;
  if (m.leakage) j["leakage_spec"] = leakage_to_json(*m.leakage);
  j["info"] = m.info;
  return j;
}

inline TraceMeta meta_from_json(const nlohmann::json& j) {
  TraceMeta m;
  const auto src = j.value("source", std::string("imported"));
  if (src == "synthetic")
    m.source = TraceSource::synthetic;
  else if (src == "imported")
    m.source = TraceSource::imported;
  else
    throw FormatError("trace metadata: unknown source '" + src + "'");
  if (j.contains("seed") && !j["seed"].is_null()) m.seed = j["seed"].get<std::uint64_t>();
  m.averaging_factor = j.value("averaging_factor", 1);
  if (j.contains("leakage_spec")) m.leakage = leakage_from_json(j["leakage_spec"]);
  if (j.contains("info")) m.info = j["info"];
  return m;
}

// ---------------------------------------------------------------------------
// SCNT binary I/O.

inline constexpr char kScntMagic[4] = {'S', 'C', 'N', 'T'};
inline constexpr std::uint32_t kScntVersion = 1;

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <class U>
U get_le(std::istream& in, const char* what) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof b)) throw FormatError(std::string("SCNT: truncated ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void put_floats(std::ostream& out, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float f : v) put_le<std::uint32_t>(out, to_bits(f));
  }
}

inline void get_floats(std::istream& in, std::vector<float>& v, const char* what) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float))))
      throw FormatError(std::string("SCNT: truncated ") + what);
  } else {
    for (auto& f : v) f = from_bits(get_le<std::uint32_t>(in, what));
  }
}

}  // namespace detail

inline void write_traceset(const TraceSet& ts, std::ostream& out) {
  ts.validate();
  const std::string meta = meta_to_json(ts.meta()).dump();
  out.write(kScntMagic, 4);
  detail::put_le<std::uint32_t>(out, kScntVersion);
  detail::put_le<std::uint64_t>(out, ts.n_traces());
  detail::put_le<std::uint64_t>(out, ts.n_samples());
  detail::put_le<std::uint64_t>(out, ts.n_inputs());
  detail::put_le<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put_floats(out, ts.traces());
  detail::put_floats(out, ts.inputs());
  if (!out) throw FormatError("SCNT: write failed");
}

inline TraceSet read_traceset(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("SCNT: truncated header");
  if (std::memcmp(magic, kScntMagic, 4) != 0) throw FormatError("SCNT: bad magic (not a trace-set file)");
  const auto version = detail::get_le<std::uint32_t>(in, "header");
  if (version != kScntVersion) throw FormatError("SCNT: unsupported format version " + std::to_string(version));
  const auto n = detail::get_le<std::uint64_t>(in, "header");
  const auto t = detail::get_le<std::uint64_t>(in, "header");
  const auto d = detail::get_le<std::uint64_t>(in, "header");
  const auto len = detail::get_le<std::uint64_t>(in, "header");
  if (t < 1) throw FormatError("SCNT: T must be at least 1");
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 40;
  if (n > kLimit || t > kLimit || d > kLimit || len > kLimit || (n && (t > kLimit / n || d > kLimit / n)))
    throw FormatError("SCNT: implausible dimensions");
  std::string meta(len, '\0');
  if (len && !in.read(meta.data(), static_cast<std::streamsize>(len))) throw FormatError("SCNT: truncated metadata");
  TraceMeta m;
  try {
    m = meta_from_json(nlohmann::json::parse(meta));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("SCNT: metadata is not valid JSON: ") + e.what());
  }
  std::vector<float> traces(n * t), inputs(n * d);
  detail::get_floats(in, traces, "sample block");
  detail::get_floats(in, inputs, "input block");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("SCNT: trailing bytes after input block");
  try {
    return TraceSet(n, t, d, std::move(traces), std::move(inputs), std::move(m));
  } catch (const DimensionError& e) {
    throw FormatError(std::string("SCNT: ") + e.what());
  }
}

inline void write_traceset(const TraceSet& ts, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  write_traceset(ts, out);
}

inline TraceSet read_traceset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_traceset(in);
}

// CSV with header t0..t{T-1},x0..x{D-1}; one trace per row.
inline TraceSet import_csv(std::istream& in, int averaging_factor = 1) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("CSV: empty file");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
      out.push_back(cell);
    }
    return out;
  };
  const auto header = split(line);
  std::size_t t = 0, d = 0;
  for (const auto& h : header) {
    if (h == "t" + std::to_string(t) && d == 0)
      ++t;
    else if (h == "x" + std::to_string(d))
      ++d;
    else
      throw FormatError("CSV: unexpected header column '" + h + "' (expected t0..t{T-1}, x0..x{D-1})");
  }
  if (t == 0) throw FormatError("CSV: no sample column");
  std::vector<float> traces, inputs;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    if (cells.size() != t + d)
      throw FormatError("CSV: row " + std::to_string(n + 1) + " has " + std::to_string(cells.size()) +
                        " columns, expected " + std::to_string(t + d));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      float v = 0.0f;
      try {
        std::size_t used = 0;
        v = std::stof(cells[c], &used);
        if (used != cells[c].size()) throw std::invalid_argument(cells[c]);
      } catch (const std::exception&) {
        throw FormatError("CSV: row " + std::to_string(n + 1) + ": bad number '" + cells[c] + "'");
      }
      (c < t ? traces : inputs).push_back(v);
    }
    ++n;
  }
  TraceMeta meta;
  meta.source = TraceSource::imported;
  meta.averaging_factor = averaging_factor;
  try {
    return TraceSet(n, t, d, std::move(traces), std::move(inputs), std::move(meta));
  } catch (const DimensionError& e) {
    throw FormatError(std::string("CSV: ") + e.what());
  }
}

inline TraceSet import_csv(const std::string& path, int averaging_factor = 1) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return import_csv(in, averaging_factor);
}

}  // namespace nnleak
