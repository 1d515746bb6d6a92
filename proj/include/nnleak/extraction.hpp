#pragma once

// Weight extraction from Hamming-weight leakage.
//
// A single value is recovered in two steps. Step 1 ranks the coarse grid
// (every exponent with the 8 leading mantissa bits) inside
// [C - d0/2, C + d0/2] and keeps the N best hypotheses. Step 2 resamples K
// evenly spaced values around each survivor on an interval of size
// d0/lambda1, re-ranks the merged set down to N, and repeats m times with the
// interval divided by lambda2 each round.
//
// A neuron is attacked one accumulation at a time: the prediction for weight
// j is the accumulator after j multiply-adds, computed with the weights
// already recovered. Signs are recovered relative to the first weight, and
// the global sign is picked by correlating both candidate ReLU outputs with
// the activation sample. Layers run neuron by neuron with the leak samples
// forced to increase; models run layer by layer, feeding reconstructed
// activations forward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nnleak/cema.hpp"
#include "nnleak/error.hpp"
#include "nnleak/float_codec.hpp"
#include "nnleak/mlp.hpp"
#include "nnleak/trace_set.hpp"

namespace nnleak {

struct ExtractionConfig {
  double d0 = 5.0;            // initial interval size
  double center = 2.5;        // initial interval center C
  double lambda1 = 100.0;     // shrink factor of the first refinement
  double lambda2 = 50.0;      // shrink factor of later refinements
  int iterations = 3;         // m, refinement rounds
  int keep = 5;               // N, hypotheses kept after every ranking
  int per_center = 200;       // K, samples per kept hypothesis in a refinement
  double sign_margin = 0.02;  // relative |r| gap below which the global sign is ambiguous
  double residual_bound = 0.5;  // largest tolerated 1 - |r| at a reconstructed activation
  double dead_z = 4.0;        // activation |r| below dead_z / sqrt(traces) counts as no dependence
  int jobs = 1;               // threads per ranking pass
  bool record_correlations = false;

  // Interval size used by refinement round i (1-based).
  double interval(int i) const { return d0 / (lambda1 * std::pow(lambda2, i - 1)); }

  void validate() const {
    if (!(d0 > 0.0) || !std::isfinite(d0)) throw ConfigError("d0", "must be a positive finite number");
    if (!std::isfinite(center)) throw ConfigError("C", "must be finite");
    if (!(lambda2 > 1.0)) throw ConfigError("lambda2", "must be greater than 1");
    if (!(lambda1 > lambda2)) throw ConfigError("lambda1", "must be greater than lambda2");
    if (iterations < 0) throw ConfigError("m", "must be >= 0");
    if (keep < 1) throw ConfigError("N", "must be >= 1");
    if (per_center < 2) throw ConfigError("K", "must be >= 2");
    if (!(sign_margin >= 0.0)) throw ConfigError("delta", "must be >= 0");
    if (!(residual_bound > 0.0)) throw ConfigError("residual_bound", "must be > 0");
    if (!(dead_z >= 0.0)) throw ConfigError("dead_z", "must be >= 0");
    if (jobs < 1) throw ConfigError("jobs", "must be >= 1");
  }
};

inline nlohmann::json config_to_json(const ExtractionConfig& c) {
  return {{"d0", c.d0},       {"C", c.center}, {"lambda1", c.lambda1},
          {"lambda2", c.lambda2}, {"m", c.iterations}, {"N", c.keep},
          {"K", c.per_center}, {"delta", c.sign_margin}, {"residual_bound", c.residual_bound},
          {"dead_z", c.dead_z}};
}

inline ExtractionConfig config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"d0", "C", "lambda1", "lambda2", "m", "N", "K", "delta", "residual_bound", "dead_z", "jobs"};
  ExtractionConfig c;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known))
      throw ConfigError(it.key(), "unknown attack parameter");
  auto num = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw ConfigError(key, "must be a number");
    dst = j[key].get<double>();
  };
  auto integer = [&](const char* key, int& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) throw ConfigError(key, "must be an integer");
    dst = j[key].get<int>();
  };
  num("d0", c.d0);
  num("C", c.center);
  num("lambda1", c.lambda1);
  num("lambda2", c.lambda2);
  integer("m", c.iterations);
  integer("N", c.keep);
  integer("K", c.per_center);
  num("delta", c.sign_margin);
  num("residual_bound", c.residual_bound);
  num("dead_z", c.dead_z);
  integer("jobs", c.jobs);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Single value.

struct IterationRecord {
  int iteration = 0;        // 0 = coarse grid, 1..m = refinement rounds
  double interval = 0.0;    // d0 for the grid, d_i afterwards
  std::size_t pool_size = 0;
  std::vector<CorrEntry> kept;
  std::vector<CorrEntry> all;  // only with record_correlations
};

struct ValueEstimate {
  float value = 0.0f;
  std::size_t leak_sample = 0;
  double r = 0.0;
  std::vector<IterationRecord> iterations;
};

namespace detail {

// Refinement pool around signed centers; each center is refined on its own
// side of zero.
inline std::vector<float> refine_pool(const std::vector<CorrEntry>& kept, double width, int per_center) {
  std::vector<float> pos, neg;
  for (const auto& e : kept) (e.value < 0.0f ? neg : pos).push_back(std::abs(e.value));
  std::vector<float> pool;
  if (!neg.empty()) {
    const auto g = refinement_grid(neg, width, per_center);
    for (auto it = g.values.rbegin(); it != g.values.rend(); ++it) pool.push_back(-*it);
  }
  if (!pos.empty()) {
    const auto g = refinement_grid(pos, width, per_center);
    pool.insert(pool.end(), g.values.begin(), g.values.end());
  }
  return pool;
}

}  // namespace detail

// Two-step extraction over a prepared window. With `signed_hypotheses`, both
// signs of every grid value compete.
template <class Predict>
ValueEstimate extract_value(const TraceColumns& cols, const Predict& predict, const ExtractionConfig& cfg,
                            bool signed_hypotheses = false) {
  cfg.validate();
  ValueEstimate est;
  const auto grid = step1_grid(cfg.center, cfg.d0);
  std::vector<float> pool = signed_hypotheses ? signed_pool(grid) : grid.values;
  const auto keep = static_cast<std::size_t>(cfg.keep);

  auto rank = [&](int it, double interval, const std::vector<float>& hyps) {
    IterationRecord rec;
    rec.iteration = it;
    rec.interval = interval;
    rec.pool_size = hyps.size();
    auto res = cema_rank(std::span<const float>(hyps), predict, cols, keep, cfg.jobs,
                         cfg.record_correlations ? &rec.all : nullptr);
    if (res.ranked.empty())
      throw DegenerateError("extract_value: every hypothesis predicts a constant Hamming weight");
    rec.kept = std::move(res.ranked);
    est.iterations.push_back(std::move(rec));
  };

  rank(0, cfg.d0, pool);
  for (int i = 1; i <= cfg.iterations; ++i) {
    const double width = cfg.interval(i);
    pool = detail::refine_pool(est.iterations.back().kept, width, cfg.per_center);
    rank(i, width, pool);
  }
  const auto& best = est.iterations.back().kept.front();
  est.value = best.value;
  est.leak_sample = best.sample;
  est.r = best.r;
  return est;
}

template <class Predict>
ValueEstimate extract_value(const TraceSet& ts, const Predict& predict, const ExtractionConfig& cfg,
                            SampleRange window, bool signed_hypotheses = false) {
  if (ts.n_traces() == 0) throw DegenerateError("extract_value: empty trace set");
  const TraceColumns cols(ts, window);
  return extract_value(cols, predict, cfg, signed_hypotheses);
}

// ---------------------------------------------------------------------------
// Reports.

enum class ParamKind { weight, bias };

inline const char* to_string(ParamKind k) { return k == ParamKind::weight ? "weight" : "bias"; }

enum class SignStatus { not_checked, resolved, ambiguous };

inline const char* to_string(SignStatus s) {
  switch (s) {
    case SignStatus::not_checked: return "not-checked";
    case SignStatus::resolved: return "resolved";
    case SignStatus::ambiguous: return "ambiguous";
  }
  return "?";
}

struct ParameterResult {
  ParamKind kind = ParamKind::weight;
  int layer = 0;
  int neuron = 0;
  int index = -1;  // input index for weights, -1 for biases
  float recovered = 0.0f;
  std::ptrdiff_t leak_sample = -1;
  double corr = 0.0;
  bool unrecoverable = false;   // input never non-zero (dead upstream neuron)
  bool sign_ambiguous = false;  // global sign left undecided
  std::vector<IterationRecord> iterations;  // only with record_correlations

  // Filled by score_against().
  std::optional<float> truth;
  std::optional<double> eps;      // |truth - recovered|
  std::optional<double> rel_err;  // eps / |truth|
  std::optional<bool> sign_match;
};

struct NeuronResult {
  int layer = 0;
  int neuron = 0;
  SignStatus sign = SignStatus::not_checked;
  double r_chosen = 0.0;  // activation-sample correlation of the kept assignment
  double r_other = 0.0;   // same for the sign-flipped assignment
  std::ptrdiff_t activation_sample = -1;
  bool dead = false;  // reconstructed output is zero for every trace
  std::optional<bool> all_signs_correct;
};

inline constexpr std::array<double, 8> kSrThresholds = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8};

struct SrTable {
  std::array<double, 8> rate{};  // percent, per threshold of kSrThresholds
  std::size_t trials = 0;
};

struct ExtractionReport {
  std::string mode;
  std::vector<ParameterResult> params;
  std::vector<NeuronResult> neurons;
  std::vector<std::string> diagnostics;

  void append(const ExtractionReport& o) {
    params.insert(params.end(), o.params.begin(), o.params.end());
    neurons.insert(neurons.end(), o.neurons.begin(), o.neurons.end());
    diagnostics.insert(diagnostics.end(), o.diagnostics.begin(), o.diagnostics.end());
  }
};

// Fills truth, error and sign columns from the model the traces came from.
inline void score_against(ExtractionReport& report, const MlpModel& truth) {
  for (auto& p : report.params) {
    const auto& layer = truth.layer(static_cast<std::size_t>(p.layer));
    const float t = p.kind == ParamKind::weight
                        ? layer.weight(static_cast<std::size_t>(p.neuron), static_cast<std::size_t>(p.index))
                        : (layer.has_bias() ? layer.biases[static_cast<std::size_t>(p.neuron)] : 0.0f);
    p.truth = t;
    p.eps = std::abs(double(t) - double(p.recovered));
    p.rel_err = t != 0.0f ? std::optional<double>(*p.eps / std::abs(double(t))) : std::nullopt;
    p.sign_match = !p.sign_ambiguous && !p.unrecoverable && std::signbit(t) == std::signbit(p.recovered);
  }
  for (auto& n : report.neurons) {
    bool all = true;
    for (const auto& p : report.params)
      if (p.kind == ParamKind::weight && p.layer == n.layer && p.neuron == n.neuron) all = all && *p.sign_match;
    n.all_signs_correct = all;
  }
}

// Percentage of scored parameters of `kind` whose error is within each
// threshold. With `sign_correct_only`, the population is restricted to
// parameters whose sign was recovered.
inline SrTable success_rates(const ExtractionReport& report, ParamKind kind, bool sign_correct_only = false) {
  SrTable t;
  std::array<std::size_t, 8> hits{};
  for (const auto& p : report.params) {
    if (p.kind != kind || !p.eps) continue;
    if (sign_correct_only && !p.sign_match.value_or(false)) continue;
    ++t.trials;
    for (std::size_t k = 0; k < kSrThresholds.size(); ++k)
      if (*p.eps <= kSrThresholds[k]) ++hits[k];
  }
  for (std::size_t k = 0; k < hits.size(); ++k)
    t.rate[k] = t.trials ? 100.0 * double(hits[k]) / double(t.trials) : 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// Neurons, layers and models.

enum class WindowPolicy {
  exact,      // use the placement recorded for each value
  monotonic,  // search every sample after the previous leak
};

struct AttackOptions {
  bool signed_weights = false;
  WindowPolicy policy = WindowPolicy::exact;
};

namespace detail {

struct NeuronTask {
  const TraceSet* ts = nullptr;
  const LeakageSpec* spec = nullptr;  // may be null
  int layer = 0;
  int neuron = 0;
  // One column per input, N values each.
  const std::vector<std::vector<float>>* inputs = nullptr;
  Activation activation = Activation::relu;
  bool has_bias = false;
  AttackOptions opts;
  SampleRange region;  // samples this neuron may leak in (monotonic policy)
};

struct NeuronOutcome {
  std::vector<float> weights;  // signed, after the global-sign decision
  std::optional<float> bias;
  std::vector<float> activation;  // reconstructed output per trace
  std::ptrdiff_t last_sample = -1;
};

inline constexpr double kEchoRatio = 0.5;

inline SampleRange earliest_strong(const std::vector<double>& peaks, SampleRange w) {
  const double best = peaks.empty() ? 0.0 : *std::max_element(peaks.begin(), peaks.end());
  if (best == 0.0) return w;
  for (std::size_t c = 0; c < peaks.size(); ++c)
    if (peaks[c] >= kEchoRatio * best) return {w.begin + c, w.begin + c + 1};
  return w;
}

class WindowCursor {
 public:
  WindowCursor(const NeuronTask& t, std::ptrdiff_t previous) : task_(t), previous_(previous) {}

  SampleRange next(ValueKind kind, int input_index) const {
    if (task_.opts.policy == WindowPolicy::exact) {
      if (!task_.spec)
        throw ConfigError("policy", "exact leak windows need a leakage spec (trace metadata or profiling file)");
      const auto s = task_.spec->find(kind, task_.layer, task_.neuron, input_index);
      if (!s)
        throw ConfigError("leakage_spec", std::string("no placement for ") + to_string(kind) + " of layer " +
                                              std::to_string(task_.layer) + " neuron " +
                                              std::to_string(task_.neuron));
      return {*s, *s + 1};
    }
    const auto w = monotonic_window(previous_, task_.ts->n_samples()).intersect(task_.region);
    if (w.empty())
      throw WindowExhaustedError("no sample left for " + std::string(to_string(kind)) + " of layer " +
                                 std::to_string(task_.layer) + " neuron " + std::to_string(task_.neuron));
    return w;
  }

  // A forward search sees every later value computed from the one sought
  // (the activation repeats the complete sum whenever it is positive), so
  // the leak is the earliest sample about as strong as the best one.
  template <class Predict>
  SampleRange locate(SampleRange w, const Predict& predict, const ExtractionConfig& cfg, bool signed_hyps) const {
    if (task_.opts.policy == WindowPolicy::exact || w.size() == 1) return w;
    const auto grid = step1_grid(cfg.center, cfg.d0);
    const auto pool = signed_hyps ? signed_pool(grid) : grid.values;
    std::vector<double> peaks;
    cema_rank(std::span<const float>(pool), predict, TraceColumns(*task_.ts, w), 1, cfg.jobs, nullptr, &peaks);
    return earliest_strong(peaks, w);
  }

  SampleRange locate_output(SampleRange w, std::span<const float> a, std::span<const float> b) const {
    if (task_.opts.policy == WindowPolicy::exact || w.size() == 1) return w;
    const TraceColumns cols(*task_.ts, w);
    std::vector<double> peaks(w.size(), 0.0);
    Scratch sc(cols.n());
    for (auto v : {a, b}) {
      std::copy(v.begin(), v.end(), sc.pred.begin());
      CorrEntry e{0.0f, 0.0, w.begin};
      score_prediction(sc, cols, e, peaks.data());
    }
    return earliest_strong(peaks, w);
  }

  void advance(std::size_t sample) { previous_ = static_cast<std::ptrdiff_t>(sample); }
  std::ptrdiff_t previous() const noexcept { return previous_; }

 private:
  const NeuronTask& task_;
  std::ptrdiff_t previous_;
};

inline std::vector<float> activation_of(std::span<const float> acc, Activation act, float sign) {
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const float v = sign * acc[i];
    out[i] = act == Activation::relu ? relu_constant_time(v) : v;
  }
  return out;
}

inline bool all_zero(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; });
}

inline NeuronOutcome attack_neuron(const NeuronTask& task, const ExtractionConfig& cfg, std::ptrdiff_t previous,
                                   ExtractionReport& report) {
  const TraceSet& ts = *task.ts;
  const std::size_t n = ts.n_traces();
  const auto& cols_in = *task.inputs;
  WindowCursor cursor(task, previous);
  NeuronOutcome out;
  std::vector<float> prefix(n, 0.0f);
  const std::size_t first_row = report.params.size();
  bool have_reference = false;

  for (std::size_t j = 0; j < cols_in.size(); ++j) {
    ParameterResult row;
    row.kind = ParamKind::weight;
    row.layer = task.layer;
    row.neuron = task.neuron;
    row.index = static_cast<int>(j);
    const auto& x = cols_in[j];
    if (all_zero(x)) {
      // The product is zero on every trace: nothing about this weight leaks.
      row.unrecoverable = true;
      out.weights.push_back(0.0f);
      report.diagnostics.push_back("layer " + std::to_string(task.layer) + " neuron " + std::to_string(task.neuron) +
                                   " weight " + std::to_string(j) + ": input is always zero, weight unrecoverable");
      report.params.push_back(std::move(row));
      continue;
    }
    // The first recovered weight is the sign reference; later ones compete
    // with both signs.
    const bool signed_pool = task.opts.signed_weights && have_reference;
    const AccumulatePredictor predict{prefix, x};
    const SampleRange window = cursor.locate(cursor.next(ValueKind::accumulator, static_cast<int>(j)), predict, cfg,
                                             signed_pool);
    const TraceColumns cols(ts, window);
    const auto est = extract_value(cols, predict, cfg, signed_pool);
    have_reference = true;
    for (std::size_t i = 0; i < n; ++i) {
      const float prod = est.value * x[i];
      prefix[i] = prefix[i] + prod;
    }
    cursor.advance(est.leak_sample);
    row.recovered = est.value;
    row.leak_sample = static_cast<std::ptrdiff_t>(est.leak_sample);
    row.corr = est.r;
    if (cfg.record_correlations) row.iterations = est.iterations;
    out.weights.push_back(est.value);
    report.params.push_back(std::move(row));
  }

  if (task.has_bias) {
    const OffsetPredictor predict{prefix};
    const SampleRange window = cursor.locate(cursor.next(ValueKind::bias_accumulator, -1), predict, cfg, true);
    const TraceColumns cols(ts, window);
    const auto est = extract_value(cols, predict, cfg, /*signed_hypotheses=*/true);
    for (std::size_t i = 0; i < n; ++i) prefix[i] = prefix[i] + est.value;
    cursor.advance(est.leak_sample);
    ParameterResult row;
    row.kind = ParamKind::bias;
    row.layer = task.layer;
    row.neuron = task.neuron;
    row.recovered = est.value;
    row.leak_sample = static_cast<std::ptrdiff_t>(est.leak_sample);
    row.corr = est.r;
    if (cfg.record_correlations) row.iterations = est.iterations;
    out.bias = est.value;
    report.params.push_back(std::move(row));
  }

  // Activation output: the kept assignment and its global negation give the
  // same |accumulator| everywhere, so only this sample separates them.
  NeuronResult nr;
  nr.layer = task.layer;
  nr.neuron = task.neuron;
  auto act_keep = activation_of(prefix, task.activation, 1.0f);
  auto act_flip = activation_of(prefix, task.activation, -1.0f);
  const SampleRange window = cursor.locate_output(cursor.next(ValueKind::activation_output, -1), act_keep, act_flip);
  const TraceColumns cols(ts, window);
  const CorrEntry keep_r = best_sample(act_keep, cols);
  const CorrEntry flip_r = best_sample(act_flip, cols);
  float sign = 1.0f;
  CorrEntry chosen = keep_r;
  const double a = keep_r.abs_r(), b = flip_r.abs_r();
  const auto where = "layer " + std::to_string(task.layer) + " neuron " + std::to_string(task.neuron);
  // Neither candidate explains the activation sample: the output is taken as
  // constant zero and the global sign is left undecided.
  const bool silent = std::max(a, b) < cfg.dead_z / std::sqrt(double(n));
  if (silent) {
    nr.dead = true;
    if (task.opts.signed_weights) nr.sign = SignStatus::ambiguous;
    report.diagnostics.push_back(where + ": activation sample shows no dependence on the output (|r| " +
                                 std::to_string(std::max(a, b)) + "), treated as a dead neuron");
  } else if (task.opts.signed_weights) {
    if (std::abs(a - b) <= cfg.sign_margin * std::max(a, b)) {
      nr.sign = SignStatus::ambiguous;
      report.diagnostics.push_back(where + ": global sign ambiguous (|r| " + std::to_string(a) + " vs " +
                                   std::to_string(b) + ")");
    } else {
      nr.sign = SignStatus::resolved;
      if (b > a) {
        sign = -1.0f;
        chosen = flip_r;
      }
    }
  }
  nr.r_chosen = chosen.r;
  nr.r_other = (sign > 0 ? flip_r : keep_r).r;
  nr.activation_sample = static_cast<std::ptrdiff_t>(chosen.sample);
  // A silent output pins no sample; the next search resumes after the sum.
  if (!silent) cursor.advance(chosen.sample);

  if (sign < 0.0f) {
    for (auto& w : out.weights) w = -w;
    if (out.bias) out.bias = -*out.bias;
  }
  for (std::size_t k = first_row; k < report.params.size(); ++k) {
    auto& row = report.params[k];
    if (sign < 0.0f) row.recovered = -row.recovered;
    row.sign_ambiguous = nr.sign == SignStatus::ambiguous;
  }
  if (silent) {
    out.activation.assign(n, 0.0f);
  } else {
    out.activation = sign > 0.0f ? std::move(act_keep) : std::move(act_flip);
    nr.dead = all_zero(out.activation);
    if (nr.dead) report.diagnostics.push_back(where + ": reconstructed output is zero on every trace (dead neuron)");
  }
  out.last_sample = cursor.previous();
  report.neurons.push_back(nr);
  return out;
}

inline std::vector<std::vector<float>> input_columns(const TraceSet& ts) {
  std::vector<std::vector<float>> cols;
  for (std::size_t j = 0; j < ts.n_inputs(); ++j) cols.push_back(ts.input_column(j));
  return cols;
}

inline const LeakageSpec* spec_of(const TraceSet& ts, const LeakageSpec* override_spec) {
  if (override_spec) return override_spec;
  return ts.meta().leakage ? &*ts.meta().leakage : nullptr;
}

inline SampleRange full_range(const TraceSet& ts) { return {0, ts.n_samples()}; }

struct LayerOutcome {
  LayerParams params;
  std::vector<std::vector<float>> activations;  // one column per neuron
  double residual = 0.0;                        // worst 1 - |r| over live neurons
};

inline LayerOutcome attack_layer(const TraceSet& ts, const LeakageSpec* spec, int layer, std::size_t n_out,
                                 const std::vector<std::vector<float>>& inputs, Activation act, bool has_bias,
                                 const ExtractionConfig& cfg, const AttackOptions& opts, ExtractionReport& report) {
  LayerOutcome out;
  out.params.n_in = inputs.size();
  out.params.n_out = n_out;
  out.params.activation = act;
  std::optional<SampleRange> layer_region = spec ? spec->layer_region(layer) : std::nullopt;
  std::ptrdiff_t previous = -1;
  if (opts.policy == WindowPolicy::monotonic && layer_region)
    previous = static_cast<std::ptrdiff_t>(layer_region->begin) - 1;
  for (std::size_t k = 0; k < n_out; ++k) {
    NeuronTask task;
    task.ts = &ts;
    task.spec = spec;
    task.layer = layer;
    task.neuron = static_cast<int>(k);
    task.inputs = &inputs;
    task.activation = act;
    task.has_bias = has_bias;
    task.opts = opts;
    // Neuron-level profiling when the placement is known, else the layer,
    // else the whole trace.
    const auto region = spec ? spec->neuron_region(layer, static_cast<int>(k)) : std::nullopt;
    task.region = region ? *region : layer_region ? *layer_region : full_range(ts);
    const std::size_t before = report.neurons.size();
    auto res = attack_neuron(task, cfg, previous, report);
    previous = res.last_sample;
    out.params.weights.insert(out.params.weights.end(), res.weights.begin(), res.weights.end());
    if (res.bias) out.params.biases.push_back(*res.bias);
    const auto& nr = report.neurons[before];
    if (!nr.dead) out.residual = std::max(out.residual, 1.0 - std::abs(nr.r_chosen));
    out.activations.push_back(std::move(res.activation));
  }
  return out;
}

}  // namespace detail

// Secret operand of an isolated multiplication w * x_0. Searches the
// recorded product sample when known, else every sample.
inline ExtractionReport extract_multiplication(const TraceSet& ts, const ExtractionConfig& cfg,
                                               const LeakageSpec* profile = nullptr) {
  cfg.validate();
  if (ts.n_inputs() < 1) throw DimensionError("extract_multiplication: traces carry no input");
  const LeakageSpec* spec = detail::spec_of(ts, profile);
  SampleRange window = detail::full_range(ts);
  if (spec)
    if (const auto s = spec->find(ValueKind::product, 0, 0, 0)) window = {*s, *s + 1};
  const auto x = ts.input_column(0);
  const auto est = extract_value(ts, ProductPredictor{x}, cfg, window);
  ParameterResult row;
  row.index = 0;
  row.recovered = est.value;
  row.leak_sample = static_cast<std::ptrdiff_t>(est.leak_sample);
  row.corr = est.r;
  if (cfg.record_correlations) row.iterations = est.iterations;
  ExtractionReport report;
  report.mode = "mult";
  report.params.push_back(std::move(row));
  return report;
}

// Weights (and the bias when the trace metadata declares one) of a single
// neuron fed directly by the trace inputs.
inline ExtractionReport extract_neuron(const TraceSet& ts, std::size_t n_inputs, const ExtractionConfig& cfg,
                                       bool signed_weights, const LeakageSpec* profile = nullptr,
                                       std::optional<bool> with_bias = std::nullopt) {
  cfg.validate();
  if (n_inputs == 0 || n_inputs > ts.n_inputs())
    throw DimensionError("extract_neuron: neuron has " + std::to_string(n_inputs) + " inputs, traces carry " +
                         std::to_string(ts.n_inputs()));
  const LeakageSpec* spec = detail::spec_of(ts, profile);
  auto inputs = detail::input_columns(ts);
  inputs.resize(n_inputs);
  bool has_bias = false;
  if (with_bias)
    has_bias = *with_bias;
  else if (spec && spec->shape && !spec->shape->layers.empty())
    has_bias = spec->shape->layers.front().has_bias;
  AttackOptions opts{signed_weights, spec ? WindowPolicy::exact : WindowPolicy::monotonic};
  detail::NeuronTask task;
  task.ts = &ts;
  task.spec = spec;
  task.inputs = &inputs;
  task.has_bias = has_bias;
  task.opts = opts;
  task.region = detail::full_range(ts);
  ExtractionReport report;
  report.mode = has_bias ? "bias-neuron" : "neuron";
  detail::attack_neuron(task, cfg, -1, report);
  return report;
}

// Weights and bias of a neuron whose bias is added after the weighted sum.
// The bias prediction is the recovered weighted sum plus the hypothesis.
inline ExtractionReport extract_bias_neuron(const TraceSet& ts, std::size_t n_inputs, const ExtractionConfig& cfg,
                                            const LeakageSpec* profile = nullptr) {
  auto r = extract_neuron(ts, n_inputs, cfg, /*signed_weights=*/true, profile, /*with_bias=*/true);
  r.mode = "bias-neuron";
  return r;
}

// One layer fed by the trace inputs, neurons attacked top to bottom. Every
// leak sample must come after the previous one.
inline ExtractionReport extract_layer(const TraceSet& ts, std::size_t n_inputs, std::size_t n_out,
                                      const ExtractionConfig& cfg, bool signed_weights,
                                      const LeakageSpec* profile = nullptr, Activation act = Activation::relu,
                                      bool has_bias = false) {
  cfg.validate();
  if (n_inputs == 0 || n_inputs > ts.n_inputs()) throw DimensionError("extract_layer: input count mismatch");
  if (n_out == 0) throw DimensionError("extract_layer: layer has no neuron");
  auto inputs = detail::input_columns(ts);
  inputs.resize(n_inputs);
  ExtractionReport report;
  report.mode = "layer";
  detail::attack_layer(ts, detail::spec_of(ts, profile), 0, n_out, inputs, act, has_bias, cfg,
                       {signed_weights, WindowPolicy::monotonic}, report);
  return report;
}

struct ModelExtraction {
  ExtractionReport report;
  MlpModel recovered;
};

// Layer l is attacked with inputs rebuilt from the already recovered layers
// 0..l-1. Throws PropagatedError when a reconstructed layer no longer
// explains its activation samples (1 - |r| above cfg.residual_bound).
inline ModelExtraction extract_model(const TraceSet& ts, const ModelShape& shape, const ExtractionConfig& cfg,
                                     bool signed_weights, const LeakageSpec* profile = nullptr,
                                     WindowPolicy policy = WindowPolicy::monotonic) {
  cfg.validate();
  if (shape.layers.empty()) throw DimensionError("extract_model: empty shape");
  if (shape.n_inputs != ts.n_inputs()) throw DimensionError("extract_model: shape input count differs from traces");
  const LeakageSpec* spec = detail::spec_of(ts, profile);
  ModelExtraction out;
  out.report.mode = "model";
  std::vector<LayerParams> layers;
  auto inputs = detail::input_columns(ts);
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    const auto& ls = shape.layers[l];
    auto res = detail::attack_layer(ts, spec, static_cast<int>(l), ls.n_out, inputs, ls.activation, ls.has_bias, cfg,
                                    {signed_weights, policy}, out.report);
    if (res.residual > cfg.residual_bound)
      throw PropagatedError("layer " + std::to_string(l) + ": reconstructed outputs drifted from the leakage (1 - |r| = " +
                            std::to_string(res.residual) + " > " + std::to_string(cfg.residual_bound) + ")");
    layers.push_back(std::move(res.params));
    inputs = std::move(res.activations);
  }
  out.recovered = MlpModel(std::move(layers));
  return out;
}

}  // namespace nnleak
