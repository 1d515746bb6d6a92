#pragma once

// Experiment orchestration: scaled reproductions of the success-rate
// tables, config-driven simulate/attack runs, and report emission.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "nnleak/cema.hpp"
#include "nnleak/error.hpp"
#include "nnleak/extraction.hpp"
#include "nnleak/mlp.hpp"
#include "nnleak/trace_set.hpp"
#include "nnleak/trace_sim.hpp"

namespace nnleak {

// Runs fn(i) for i in [0, n) on `jobs` threads. Results must be stored by
// index; scheduling order is irrelevant.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Report emission.

struct Provenance {
  std::string protocol;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise_sigma;
  std::string config_hash;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"protocol", protocol}, {"config_hash", config_hash}};
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    j["noise_sigma"] = noise_sigma ? nlohmann::json(*noise_sigma) : nlohmann::json(nullptr);
    return j;
  }
};

inline std::string threshold_label(double t) {
  std::ostringstream os;
  os << std::setprecision(1) << std::scientific << t;
  std::string s = os.str();  // "1.0e-06"
  const auto e = s.find('e');
  std::string mant = s.substr(0, e);
  if (mant.ends_with(".0")) mant.resize(mant.size() - 2);
  int exp = std::stoi(s.substr(e + 1));
  return mant + "e" + std::to_string(exp);
}

inline nlohmann::json sr_to_json(const SrTable& t) {
  nlohmann::json rates = nlohmann::json::object();
  for (std::size_t k = 0; k < kSrThresholds.size(); ++k) rates[threshold_label(kSrThresholds[k])] = t.rate[k];
  return {{"trials", t.trials}, {"sr", rates}};
}

inline nlohmann::json param_to_json(const ParameterResult& p, const Provenance& prov) {
  auto opt = [](const auto& o) { return o ? nlohmann::json(*o) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"kind", to_string(p.kind)},
                      {"layer", p.layer},
                      {"neuron", p.neuron},
                      {"index", p.index},
                      {"recovered", float_to_decimal(p.recovered)},
                      {"recovered_hex", float_to_hex(p.recovered)},
                      {"leak_sample", p.leak_sample},
                      {"corr", p.corr},
                      {"unrecoverable", p.unrecoverable},
                      {"sign_ambiguous", p.sign_ambiguous},
                      {"eps_rr", opt(p.eps)},
                      {"rel_err", opt(p.rel_err)},
                      {"sign_match", opt(p.sign_match)},
                      {"provenance", prov.to_json()}};
  j["truth"] = p.truth ? nlohmann::json(float_to_decimal(*p.truth)) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json report_to_json(const ExtractionReport& r, const Provenance& prov) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : r.params) params.push_back(param_to_json(p, prov));
  nlohmann::json neurons = nlohmann::json::array();
  for (const auto& n : r.neurons) {
    nlohmann::json j = {{"layer", n.layer},
                        {"neuron", n.neuron},
                        {"sign", to_string(n.sign)},
                        {"r_chosen", n.r_chosen},
                        {"r_other", n.r_other},
                        {"activation_sample", n.activation_sample},
                        {"dead", n.dead}};
    j["all_signs_correct"] = n.all_signs_correct ? nlohmann::json(*n.all_signs_correct) : nlohmann::json(nullptr);
    neurons.push_back(std::move(j));
  }
  nlohmann::json sr = {{"weight", sr_to_json(success_rates(r, ParamKind::weight))},
                       {"weight_sign_correct", sr_to_json(success_rates(r, ParamKind::weight, true))}};
  const bool any_bias =
      std::any_of(r.params.begin(), r.params.end(), [](const auto& p) { return p.kind == ParamKind::bias; });
  if (any_bias) {
    sr["bias"] = sr_to_json(success_rates(r, ParamKind::bias));
    sr["bias_sign_correct"] = sr_to_json(success_rates(r, ParamKind::bias, true));
  }
  return {{"mode", r.mode},     {"provenance", prov.to_json()}, {"parameters", params},
          {"neurons", neurons}, {"success_rates", sr},          {"diagnostics", r.diagnostics}};
}

// kind,population,threshold,sr_percent,trials
inline std::string sr_csv(const ExtractionReport& r) {
  std::ostringstream os;
  os << "kind,population,threshold,sr_percent,trials\n";
  auto rows = [&](ParamKind kind, bool sign_only) {
    const auto t = success_rates(r, kind, sign_only);
    if (t.trials == 0) return;
    for (std::size_t k = 0; k < kSrThresholds.size(); ++k)
      os << to_string(kind) << ',' << (sign_only ? "sign-correct" : "all") << ','
         << threshold_label(kSrThresholds[k]) << ',' << t.rate[k] << ',' << t.trials << '\n';
  };
  rows(ParamKind::weight, false);
  rows(ParamKind::weight, true);
  rows(ParamKind::bias, false);
  rows(ParamKind::bias, true);
  return os.str();
}

// Correlation of every hypothesis of every round, one row per hypothesis:
// param,iteration,hypothesis,best_r,best_sample
inline std::string correlations_csv(const ExtractionReport& r) {
  std::ostringstream os;
  os << "param,iteration,hypothesis,best_r,best_sample\n";
  os << std::setprecision(9);
  for (std::size_t p = 0; p < r.params.size(); ++p)
    for (const auto& it : r.params[p].iterations)
      for (const auto& e : it.all)
        os << p << ',' << it.iteration << ',' << e.value << ',' << std::setprecision(17) << e.r
           << std::setprecision(9) << ',' << e.sample << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Table reproduction.

enum class TableId { T2, T5, T7 };

inline const char* to_string(TableId t) {
  switch (t) {
    case TableId::T2: return "T2";
    case TableId::T5: return "T5";
    case TableId::T7: return "T7";
  }
  return "?";
}

inline TableId table_id_from_string(const std::string& s) {
  if (s == "T2" || s == "t2" || s == "2") return TableId::T2;
  if (s == "T5" || s == "t5" || s == "5") return TableId::T5;
  if (s == "T7" || s == "t7" || s == "7") return TableId::T7;
  throw ConfigError("table", "unknown table '" + s + "' (T2, T5, T7)");
}

using SrRow = std::array<double, 8>;

// Reference success rates (percent, thresholds 1e-1 .. 1e-8).
namespace reference {
inline constexpr std::array<double, 4> kT2Sigma2 = {0.5, 1.0, 25.0, 100.0};
inline constexpr std::array<SrRow, 4> kT2 = {{{100, 100, 98.4, 98.3, 96.4, 94.2, 81.8, 77.1},
                                             {100, 99.9, 98.8, 98.6, 96.9, 94.8, 81.2, 75.4},
                                             {99.9, 99.2, 97.0, 96.8, 94.9, 91.6, 78.0, 73.2},
                                             {99.9, 98.2, 94.3, 93.0, 89.8, 86.5, 69.6, 62.4}}};
inline constexpr SrRow kT5 = {99.9, 99.1, 96.2, 92.8, 86.5, 79.3, 65.4, 61.0};
inline constexpr double kT5WeightSign = 91.6;
inline constexpr double kT5NeuronAllSigns = 78.8;
inline constexpr SrRow kT7Weight = {99.9, 99.5, 96.8, 93.7, 87.2, 79.8, 64.9, 61.3};
inline constexpr SrRow kT7Bias = {81.7, 56.3, 35.8, 19.7, 7.44, 2.6, 0.7, 0.2};
inline constexpr double kT7WeightSign = 93.25;
inline constexpr double kT7BiasSign = 92.14;
}  // namespace reference

// Secret distributions of the table protocols.
struct TrialDistributions {
  double secret_max = 5.0;        // multiplication secrets: uniform over (0, secret_max)
  double weight_max = 1.0;        // neuron weights: sign * uniform(0, weight_max)
  double bias_max = 1.0;          // biases: sign * uniform(0, bias_max)
  int min_inputs = 2;             // neuron fan-in drawn uniformly in [min_inputs, max_inputs]
  int max_inputs = 8;
  // Inputs spread over the float32 exponent range: 2^U[-120, 120].
  InputDistribution mult_inputs{InputMode::wide, 4.0, 120.0};
  InputDistribution neuron_inputs{InputMode::wide, 4.0, 120.0};
  InputDistribution bias_inputs{InputMode::wide, 4.0, 120.0};

  nlohmann::json to_json() const {
    return {{"secret_max", secret_max},       {"weight_max", weight_max},
            {"bias_max", bias_max},           {"min_inputs", min_inputs},
            {"max_inputs", max_inputs},       {"mult_inputs", mult_inputs.to_json()},
            {"neuron_inputs", neuron_inputs.to_json()}, {"bias_inputs", bias_inputs.to_json()}};
  }
};

struct TableOptions {
  double scale = 0.1;   // fraction of the full 5,000 secrets/neurons
  std::optional<std::size_t> count;  // overrides scale
  std::uint64_t seed = 1;
  int jobs = 1;
  std::optional<std::size_t> traces;   // overrides the protocol's trace count
  std::vector<double> sigma2;          // T2 noise ladder; empty = {0.5, 1, 25, 100}
  double neuron_sigma2 = 0.5;
  ExtractionConfig attack;
  TrialDistributions dist;

  std::size_t trials() const {
    if (count) return *count;
    if (!(scale > 0.0 && scale <= 1.0)) throw ConfigError("scale", "must be in (0, 1]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale * 5000.0)));
  }
};

struct TableRow {
  std::string label;
  SrTable measured;
  std::optional<SrRow> reference;

  std::array<double, 8> deviation() const {
    std::array<double, 8> d{};
    if (reference)
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = measured.rate[k] - (*reference)[k];
    return d;
  }
};

struct RateLine {
  std::string name;
  double measured = 0.0;  // percent
  std::size_t population = 0;
  std::optional<double> reference;
};

struct TableResult {
  TableId id = TableId::T2;
  std::size_t trials = 0;
  std::vector<TableRow> rows;
  std::vector<RateLine> rates;
  std::vector<std::string> warnings;
  std::vector<ExtractionReport> reports;  // per trial (per row for T2)

  const TableRow& row(const std::string& label) const {
    for (const auto& r : rows)
      if (r.label == label) return r;
    throw Error("table has no row '" + label + "'");
  }
  const RateLine& rate(const std::string& name) const {
    for (const auto& r : rates)
      if (r.name == name) return r;
    throw Error("table has no rate '" + name + "'");
  }
};

namespace detail {

inline float positive_uniform(std::mt19937_64& rng, double hi) {
  std::uniform_real_distribution<double> u(0.0, hi);
  for (;;) {
    const float v = static_cast<float>(u(rng));
    if (v >= std::numeric_limits<float>::min()) return v;
  }
}

inline float signed_uniform(std::mt19937_64& rng, double hi) {
  const float mag = positive_uniform(rng, hi);
  return std::bernoulli_distribution(0.5)(rng) ? -mag : mag;
}

// Stream tags keep secret draws and trace draws of different protocols apart.
enum : std::uint64_t { kTagSecret = 1, kTagTraces = 2 };

inline ExtractionReport mult_trial(std::uint64_t seed, std::size_t i, double sigma2, std::size_t traces,
                                   const TableOptions& o) {
  std::mt19937_64 rng(stream_seed(seed, kTagSecret, i));
  const float w = positive_uniform(rng, o.dist.secret_max);
  SimOptions sim;
  sim.noise_sigma = std::sqrt(sigma2);
  sim.inputs = o.dist.mult_inputs;
  // Same traces at every noise level apart from the noise amplitude.
  sim.seed = stream_seed(seed, kTagTraces, i);
  const auto ts = simulate_multiplication_set(w, traces, 3, sim);
  auto r = extract_multiplication(ts, o.attack);
  score_against(r, single_neuron_model(std::span<const float>(&w, 1), std::nullopt, Activation::none));
  return r;
}

inline ExtractionReport neuron_trial(std::uint64_t seed, std::size_t i, bool with_bias, std::size_t traces,
                                     const TableOptions& o) {
  std::mt19937_64 rng(stream_seed(seed, kTagSecret, i));
  const int m = std::uniform_int_distribution<int>(o.dist.min_inputs, o.dist.max_inputs)(rng);
  std::vector<float> w(static_cast<std::size_t>(m));
  for (auto& v : w) v = signed_uniform(rng, o.dist.weight_max);
  std::optional<float> b;
  if (with_bias) b = signed_uniform(rng, o.dist.bias_max);
  SimOptions sim;
  sim.noise_sigma = std::sqrt(o.neuron_sigma2);
  sim.inputs = with_bias ? o.dist.bias_inputs : o.dist.neuron_inputs;
  sim.seed = stream_seed(seed, kTagTraces, i);
  const auto ts = simulate_neuron_set(w, b, traces, 50, sim);
  auto r = with_bias ? extract_bias_neuron(ts, w.size(), o.attack) : extract_neuron(ts, w.size(), o.attack, true);
  score_against(r, single_neuron_model(w, b));
  return r;
}

inline double percent(std::size_t hits, std::size_t total) {
  return total ? 100.0 * double(hits) / double(total) : 0.0;
}

}  // namespace detail

inline TableResult reproduce_table(TableId id, const TableOptions& o) {
  o.attack.validate();
  TableResult res;
  res.id = id;
  res.trials = o.trials();
  const std::size_t n = res.trials;
  // Threads go to independent trials; each ranking runs single-threaded.
  TableOptions inner = o;
  inner.attack.jobs = 1;

  if (id == TableId::T2) {
    const std::size_t traces = o.traces.value_or(1000);
    std::vector<double> ladder = o.sigma2;
    if (ladder.empty()) ladder.assign(reference::kT2Sigma2.begin(), reference::kT2Sigma2.end());
    for (double s2 : ladder) {
      if (!(s2 >= 0.0)) throw ConfigError("sigma2", "must be >= 0");
      std::vector<ExtractionReport> per(n);
      parallel_for(n, o.jobs, [&](std::size_t i) { per[i] = detail::mult_trial(o.seed, i, s2, traces, inner); });
      ExtractionReport merged;
      merged.mode = "mult";
      for (const auto& r : per) merged.append(r);
      TableRow row;
      std::ostringstream label;
      label << "sigma2=" << s2;
      row.label = label.str();
      row.measured = success_rates(merged, ParamKind::weight);
      for (std::size_t k = 0; k < reference::kT2Sigma2.size(); ++k)
        if (reference::kT2Sigma2[k] == s2) row.reference = reference::kT2[k];
      res.rows.push_back(row);
      res.reports.push_back(std::move(merged));
    }
  } else {
    const bool bias = id == TableId::T7;
    const std::size_t traces = o.traces.value_or(bias ? 5000 : 3000);
    std::vector<ExtractionReport> per(n);
    parallel_for(n, o.jobs, [&](std::size_t i) { per[i] = detail::neuron_trial(o.seed, i, bias, traces, inner); });
    ExtractionReport merged;
    merged.mode = bias ? "bias-neuron" : "neuron";
    for (const auto& r : per) merged.append(r);

    std::size_t w_total = 0, w_sign = 0, b_total = 0, b_sign = 0, n_all = 0, n_amb = 0, n_dead = 0;
    for (const auto& p : merged.params) {
      auto& total = p.kind == ParamKind::weight ? w_total : b_total;
      auto& good = p.kind == ParamKind::weight ? w_sign : b_sign;
      ++total;
      if (p.sign_match.value_or(false)) ++good;
    }
    for (const auto& nr : merged.neurons) {
      if (nr.all_signs_correct.value_or(false)) ++n_all;
      if (nr.sign == SignStatus::ambiguous) ++n_amb;
      if (nr.dead) ++n_dead;
    }
    if (bias) {
      res.rows.push_back({"weight", success_rates(merged, ParamKind::weight, true), reference::kT7Weight});
      res.rows.push_back({"bias", success_rates(merged, ParamKind::bias, true), reference::kT7Bias});
      res.rates.push_back({"weight_sign", detail::percent(w_sign, w_total), w_total, reference::kT7WeightSign});
      res.rates.push_back({"bias_sign", detail::percent(b_sign, b_total), b_total, reference::kT7BiasSign});
    } else {
      res.rows.push_back({"weight", success_rates(merged, ParamKind::weight, true), reference::kT5});
      res.rates.push_back({"weight_sign", detail::percent(w_sign, w_total), w_total, reference::kT5WeightSign});
    }
    res.rates.push_back({"neuron_all_signs", detail::percent(n_all, n), n,
                         bias ? std::nullopt : std::optional<double>(reference::kT5NeuronAllSigns)});
    res.rates.push_back({"neuron_ambiguous", detail::percent(n_amb, n), n, std::nullopt});
    res.rates.push_back({"neuron_dead", detail::percent(n_dead, n), n, std::nullopt});
    res.reports.push_back(std::move(merged));
  }
  if (n < 100)
    res.warnings.push_back("only " + std::to_string(n) + " trials: success rates carry several points of sampling error");
  return res;
}

inline nlohmann::json table_to_json(const TableResult& t, const TableOptions& o) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json j = {{"label", r.label}, {"trials", r.measured.trials}};
    nlohmann::json m = nlohmann::json::object(), ref = nlohmann::json::object(), dev = nlohmann::json::object();
    const auto d = r.deviation();
    for (std::size_t k = 0; k < kSrThresholds.size(); ++k) {
      const auto key = threshold_label(kSrThresholds[k]);
      m[key] = r.measured.rate[k];
      if (r.reference) {
        ref[key] = (*r.reference)[k];
        dev[key] = d[k];
      }
    }
    j["measured"] = m;
    j["reference"] = r.reference ? ref : nlohmann::json(nullptr);
    j["deviation"] = r.reference ? dev : nlohmann::json(nullptr);
    rows.push_back(std::move(j));
  }
  nlohmann::json rates = nlohmann::json::array();
  for (const auto& r : t.rates)
    rates.push_back({{"name", r.name},
                     {"measured", r.measured},
                     {"population", r.population},
                     {"reference", r.reference ? nlohmann::json(*r.reference) : nlohmann::json(nullptr)}});
  return {{"table", to_string(t.id)},
          {"trials", t.trials},
          {"seed", o.seed},
          {"attack", config_to_json(o.attack)},
          {"distributions", o.dist.to_json()},
          {"rows", rows},
          {"rates", rates},
          {"warnings", t.warnings}};
}

// table,row,threshold,measured,reference,deviation
inline std::string table_csv(const TableResult& t) {
  std::ostringstream os;
  os << "table,row,threshold,measured,reference,deviation\n";
  for (const auto& r : t.rows) {
    const auto d = r.deviation();
    for (std::size_t k = 0; k < kSrThresholds.size(); ++k) {
      os << to_string(t.id) << ',' << r.label << ',' << threshold_label(kSrThresholds[k]) << ',' << r.measured.rate[k]
         << ',';
      if (r.reference) os << (*r.reference)[k] << ',' << d[k];
      else os << ',';
      os << '\n';
    }
  }
  return os.str();
}

inline std::string table_text(const TableResult& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << to_string(t.id) << " (" << t.trials << " trials)\n";
  os << std::setw(14) << "";
  for (double th : kSrThresholds) os << std::setw(8) << threshold_label(th);
  os << '\n';
  for (const auto& r : t.rows) {
    os << std::setw(14) << std::left << r.label << std::right;
    for (double v : r.measured.rate) os << std::setw(8) << v;
    os << '\n';
    if (r.reference) {
      os << std::setw(14) << std::left << "  reference" << std::right;
      for (double v : *r.reference) os << std::setw(8) << v;
      os << '\n';
    }
  }
  for (const auto& r : t.rates) {
    os << r.name << ": " << r.measured << "% of " << r.population;
    if (r.reference) os << " (reference " << *r.reference << "%)";
    os << '\n';
  }
  for (const auto& w : t.warnings) os << "warning: " << w << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Config-driven runs.

struct RunOutcome {
  ExtractionReport report;
  Provenance provenance;
  nlohmann::json resolved_config;
  std::vector<std::string> violations;  // acceptance thresholds missed
};

namespace detail {

inline double noise_sigma_of(const nlohmann::json& cfg) {
  if (!cfg.contains("noise")) return 0.0;
  const auto& n = cfg["noise"];
  if (n.is_number()) return n.get<double>();
  if (n.contains("sigma") && n.contains("sigma2")) throw ConfigError("noise", "give sigma or sigma2, not both");
  if (n.contains("sigma")) return n["sigma"].get<double>();
  if (n.contains("sigma2")) {
    const double s2 = n["sigma2"].get<double>();
    if (!(s2 >= 0.0)) throw ConfigError("noise.sigma2", "must be >= 0");
    return std::sqrt(s2);
  }
  throw ConfigError("noise", "expected {\"sigma\": x} or {\"sigma2\": x}");
}

inline InputDistribution inputs_from_json(const nlohmann::json& j) {
  InputDistribution d;
  if (j.contains("mode")) d.mode = input_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("scale")) d.scale = j["scale"].get<double>();
  if (j.contains("wide_exponent")) d.wide_exponent = j["wide_exponent"].get<double>();
  if (!(d.scale > 0.0)) throw ConfigError("inputs.scale", "must be > 0");
  if (!(d.wide_exponent > 0.0 && d.wide_exponent <= 120.0)) throw ConfigError("inputs.wide_exponent", "must be in (0, 120]");
  return d;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path q(p);
  return q.is_absolute() ? q : base / q;
}

inline MlpModel model_of(const nlohmann::json& cfg, const std::filesystem::path& base) {
  if (!cfg.contains("model")) throw ConfigError("model", "required for this protocol");
  const auto& m = cfg["model"];
  if (m.is_string()) return load_model(resolve(base, m.get<std::string>()).string());
  return model_from_json(m);
}

// [n_in, n_1, ..., n_L] (every layer ReLU without bias) or the object form
// stored in trace metadata.
inline ModelShape shape_from_config(const nlohmann::json& j) {
  if (j.is_object()) return nnleak::shape_from_json(j);
  if (!j.is_array() || j.size() < 2) throw ConfigError("shape", "expected [n_inputs, n_layer1, ...]");
  ModelShape s;
  s.n_inputs = j[0].get<std::size_t>();
  for (std::size_t k = 1; k < j.size(); ++k) s.layers.push_back({j[k].get<std::size_t>(), Activation::relu, false});
  return s;
}

inline std::vector<std::string> check_acceptance(const nlohmann::json& acc, const ExtractionReport& r) {
  std::vector<std::string> out;
  auto kind_of = [](const std::string& k) {
    if (k == "weight") return ParamKind::weight;
    if (k == "bias") return ParamKind::bias;
    throw ConfigError("acceptance", "unknown parameter kind '" + k + "'");
  };
  if (acc.contains("min_sr")) {
    for (auto it = acc["min_sr"].begin(); it != acc["min_sr"].end(); ++it) {
      const auto t = success_rates(r, kind_of(it.key()));
      for (auto th = it.value().begin(); th != it.value().end(); ++th) {
        const double thr = std::stod(th.key());
        std::size_t k = 0;
        while (k < kSrThresholds.size() && std::abs(kSrThresholds[k] - thr) > thr * 1e-9) ++k;
        if (k == kSrThresholds.size()) throw ConfigError("acceptance.min_sr", "unknown threshold " + th.key());
        const double need = th.value().get<double>();
        if (t.rate[k] < need)
          out.push_back(it.key() + " SR(" + th.key() + ") = " + std::to_string(t.rate[k]) + "% < " +
                        std::to_string(need) + "%");
      }
    }
  }
  if (acc.contains("max_eps")) {
    for (auto it = acc["max_eps"].begin(); it != acc["max_eps"].end(); ++it) {
      const auto kind = kind_of(it.key());
      const double lim = it.value().get<double>();
      for (const auto& p : r.params)
        if (p.kind == kind && p.eps && *p.eps >= lim)
          out.push_back(it.key() + " layer " + std::to_string(p.layer) + " neuron " + std::to_string(p.neuron) +
                        " index " + std::to_string(p.index) + ": eps " + std::to_string(*p.eps) +
                        " >= " + std::to_string(lim));
    }
  }
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << s;
}

}  // namespace detail

// Simulates (or loads) traces, attacks them and writes every artifact under
// `out_dir`: traceset.scnt, report.json, sr.csv, config.resolved.json,
// run_meta.json (wall-clock data only) and, on request, correlations.csv.
// Relative paths in the config are resolved against `base_dir`.
inline RunOutcome run_experiment(const nlohmann::json& config, const std::filesystem::path& out_dir,
                                 const std::filesystem::path& base_dir = ".", int jobs = 1) {
  static const char* known[] = {"protocol", "seed",   "traces",  "samples",     "noise",   "averaging_factor",
                                "raw_repeats", "inputs", "secret", "weights", "bias",    "model",
                                "signed",   "attack", "traces_file", "profile", "mode",    "shape",
                                "dump_correlations", "leak_products", "acceptance"};
  for (auto it = config.begin(); it != config.end(); ++it)
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known))
      throw ConfigError(it.key(), "unknown field");
  if (!config.contains("protocol")) throw ConfigError("protocol", "required");
  const auto protocol = config["protocol"].get<std::string>();
  ExtractionConfig attack = config_from_json(config.value("attack", nlohmann::json::object()));
  attack.jobs = std::max(jobs, 1);
  attack.record_correlations = config.value("dump_correlations", false);
  const bool is_signed = config.value("signed", false);

  RunOutcome out;
  nlohmann::json resolved = config;
  resolved["attack"] = config_to_json(attack);

  std::optional<TraceSet> ts;
  std::optional<MlpModel> truth;
  std::optional<LeakageSpec> profile;
  if (protocol == "imported") {
    if (!config.contains("traces_file")) throw ConfigError("traces_file", "required for imported traces");
    const auto path = detail::resolve(base_dir, config["traces_file"].get<std::string>());
    ts = path.extension() == ".csv" ? import_csv(path.string(), config.value("averaging_factor", 1))
                                    : read_traceset(path.string());
    if (config.contains("profile")) {
      std::ifstream in(detail::resolve(base_dir, config["profile"].get<std::string>()));
      if (!in) throw ConfigError("profile", "cannot open profiling file");
      profile = leakage_from_json(nlohmann::json::parse(in));
      profile->validate(ts->n_samples());
    }
    if (config.contains("model")) truth = detail::model_of(config, base_dir);
  } else {
    SimOptions sim;
    sim.noise_sigma = detail::noise_sigma_of(config);
    sim.averaging_factor = config.value("averaging_factor", 1);
    sim.raw_repeats = config.value("raw_repeats", false);
    sim.leak_products = config.value("leak_products", false);
    if (config.contains("inputs")) sim.inputs = detail::inputs_from_json(config["inputs"]);
    if (!config.contains("seed")) throw ConfigError("seed", "required for simulated protocols");
    sim.seed = config["seed"].get<std::uint64_t>();
    const std::size_t traces = config.value("traces", std::size_t{1000});
    if (protocol == "mult") {
      if (!config.contains("secret")) throw ConfigError("secret", "required for protocol mult");
      const float w = config["secret"].get<float>();
      truth = single_neuron_model(std::span<const float>(&w, 1), std::nullopt, Activation::none);
      ts = simulate_multiplication_set(w, traces, config.value("samples", std::size_t{3}), sim);
    } else if (protocol == "neuron" || protocol == "bias-neuron") {
      if (!config.contains("weights")) throw ConfigError("weights", "required for protocol " + protocol);
      const auto w = config["weights"].get<std::vector<float>>();
      std::optional<float> b;
      if (config.contains("bias")) b = config["bias"].get<float>();
      if (protocol == "bias-neuron" && !b) throw ConfigError("bias", "required for protocol bias-neuron");
      if (protocol == "neuron" && b) throw ConfigError("bias", "use protocol bias-neuron for a biased neuron");
      truth = single_neuron_model(w, b);
      ts = simulate_neuron_set(w, b, traces, config.value("samples", std::size_t{50}), sim);
    } else if (protocol == "layer" || protocol == "model") {
      truth = detail::model_of(config, base_dir);
      if (protocol == "layer" && truth->layers().size() != 1)
        throw ConfigError("model", "protocol layer needs a single-layer model");
      ts = simulate_model_set(*truth, traces, config.value("samples", std::size_t{10}), sim);
    } else {
      throw ConfigError("protocol", "unknown protocol '" + protocol + "'");
    }
    out.provenance.noise_sigma = sim.noise_sigma;
    out.provenance.seed = sim.seed;
  }
  out.provenance.protocol = protocol;
  out.provenance.config_hash = hex64(fnv1a(resolved.dump()));

  const LeakageSpec* prof = profile ? &*profile : nullptr;
  std::string mode = config.value("mode", protocol == "imported" ? std::string() : protocol);
  if (mode.empty()) throw ConfigError("mode", "required for imported traces");
  if (mode == "mult") {
    out.report = extract_multiplication(*ts, attack, prof);
  } else if (mode == "neuron") {
    const std::size_t n_in = truth ? truth->n_inputs() : ts->n_inputs();
    out.report = extract_neuron(*ts, n_in, attack, is_signed, prof);
  } else if (mode == "bias-neuron") {
    const std::size_t n_in = truth ? truth->n_inputs() : ts->n_inputs();
    out.report = extract_bias_neuron(*ts, n_in, attack, prof);
  } else if (mode == "layer" || mode == "model") {
    ModelShape shape;
    if (config.contains("shape")) shape = detail::shape_from_config(config["shape"]);
    else if (truth) shape = ModelShape::of(*truth);
    else if (const auto* sp = detail::spec_of(*ts, prof); sp && sp->shape) shape = *sp->shape;
    else throw ConfigError("shape", "model shape unknown: give shape, model or a profiling file with a shape");
    out.report = extract_model(*ts, shape, attack, is_signed, prof).report;
    out.report.mode = mode;
  } else {
    throw ConfigError("mode", "unknown attack mode '" + mode + "'");
  }
  if (truth) score_against(out.report, *truth);
  if (config.contains("acceptance")) out.violations = detail::check_acceptance(config["acceptance"], out.report);

  std::filesystem::create_directories(out_dir);
  if (protocol != "imported") write_traceset(*ts, (out_dir / "traceset.scnt").string());
  detail::write_text(out_dir / "report.json", report_to_json(out.report, out.provenance).dump(2) + "\n");
  detail::write_text(out_dir / "sr.csv", sr_csv(out.report));
  detail::write_text(out_dir / "config.resolved.json", resolved.dump(2) + "\n");
  if (attack.record_correlations) detail::write_text(out_dir / "correlations.csv", correlations_csv(out.report));
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ts_text;
  ts_text << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  detail::write_text(out_dir / "run_meta.json",
                     nlohmann::json{{"finished_at", ts_text.str()}, {"config_hash", out.provenance.config_hash}}
                             .dump(2) + "\n");
  out.resolved_config = std::move(resolved);
  return out;
}

}  // namespace nnleak
