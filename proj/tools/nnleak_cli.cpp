// nnleak: simulate leakage traces, attack them, reproduce the success-rate
// tables and run config-driven experiments.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nnleak/nnleak.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw nnleak::FormatError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw nnleak::FormatError(path + ": " + e.what());
  }
}

void write_file(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw nnleak::FormatError("cannot write " + p.string());
  out << s;
}

struct SimulateArgs {
  std::string protocol = "mult";
  float secret = 0.0f;
  std::vector<float> weights;
  std::optional<float> bias;
  std::string model;
  std::size_t traces = 1000;
  std::optional<std::size_t> samples;
  std::optional<double> sigma, sigma2;
  int averaging = 1;
  bool raw_repeats = false;
  bool leak_products = false;
  std::string input_mode = "nonneg";
  double input_scale = 4.0;
  double wide_exponent = 32.0;
  std::uint64_t seed = 1;
  std::string out;
};

int run_simulate(const SimulateArgs& a) {
  nnleak::SimOptions sim;
  if (a.sigma && a.sigma2) throw nnleak::ConfigError("sigma", "give --sigma or --sigma2, not both");
  sim.noise_sigma = a.sigma ? *a.sigma : a.sigma2 ? std::sqrt(*a.sigma2) : 0.0;
  sim.averaging_factor = a.averaging;
  sim.raw_repeats = a.raw_repeats;
  sim.leak_products = a.leak_products;
  sim.inputs.mode = nnleak::input_mode_from_string(a.input_mode);
  sim.inputs.scale = a.input_scale;
  sim.inputs.wide_exponent = a.wide_exponent;
  sim.seed = a.seed;
  std::optional<nnleak::TraceSet> ts;
  if (a.protocol == "mult") {
    ts = nnleak::simulate_multiplication_set(a.secret, a.traces, a.samples.value_or(3), sim);
  } else if (a.protocol == "neuron" || a.protocol == "bias-neuron") {
    if (a.protocol == "bias-neuron" && !a.bias) throw nnleak::ConfigError("bias", "required for bias-neuron");
    ts = nnleak::simulate_neuron_set(a.weights, a.protocol == "neuron" ? std::nullopt : a.bias, a.traces,
                                     a.samples.value_or(50), sim);
  } else if (a.protocol == "layer" || a.protocol == "model") {
    if (a.model.empty()) throw nnleak::ConfigError("model", "required for protocol " + a.protocol);
    const auto model = nnleak::load_model(a.model);
    if (a.protocol == "layer" && model.layers().size() != 1)
      throw nnleak::ConfigError("model", "protocol layer needs a single-layer model");
    ts = nnleak::simulate_model_set(model, a.traces, a.samples.value_or(10), sim);
  } else {
    throw nnleak::ConfigError("protocol", "unknown protocol '" + a.protocol + "'");
  }
  nnleak::write_traceset(*ts, a.out);
  std::cout << "wrote " << a.out << ": " << ts->n_traces() << " traces x " << ts->n_samples() << " samples, "
            << ts->n_inputs() << " inputs\n";
  return 0;
}

struct AttackArgs {
  std::string traces;
  std::string config;
  std::string mode = "neuron";
  bool is_signed = false;
  std::string report;
  std::string dump_correlations;
  std::string profile;
  std::string truth;
  std::optional<std::size_t> n_inputs;
  int jobs = 1;
};

int run_attack(const AttackArgs& a) {
  auto cfg = a.config.empty() ? nnleak::ExtractionConfig{} : nnleak::config_from_json(read_json(a.config));
  cfg.jobs = std::max(a.jobs, 1);
  cfg.record_correlations = !a.dump_correlations.empty();
  const auto ts = fs::path(a.traces).extension() == ".csv" ? nnleak::import_csv(a.traces) : nnleak::read_traceset(a.traces);
  std::optional<nnleak::LeakageSpec> profile;
  if (!a.profile.empty()) {
    profile = nnleak::leakage_from_json(read_json(a.profile));
    profile->validate(ts.n_samples());
  }
  const nnleak::LeakageSpec* prof = profile ? &*profile : nullptr;
  const nnleak::LeakageSpec* spec = prof ? prof : ts.meta().leakage ? &*ts.meta().leakage : nullptr;

  std::optional<nnleak::MlpModel> truth;
  if (!a.truth.empty())
    truth = nnleak::load_model(a.truth);
  else if (ts.meta().info.contains("ground_truth"))
    truth = nnleak::model_from_json(ts.meta().info["ground_truth"]);

  std::size_t n_in = a.n_inputs.value_or(truth ? truth->n_inputs() : ts.n_inputs());
  nnleak::ExtractionReport report;
  if (a.mode == "mult") {
    report = nnleak::extract_multiplication(ts, cfg, prof);
  } else if (a.mode == "neuron") {
    report = nnleak::extract_neuron(ts, n_in, cfg, a.is_signed, prof);
  } else if (a.mode == "bias-neuron") {
    report = nnleak::extract_bias_neuron(ts, n_in, cfg, prof);
  } else if (a.mode == "layer" || a.mode == "model") {
    nnleak::ModelShape shape;
    if (truth) shape = nnleak::ModelShape::of(*truth);
    else if (spec && spec->shape) shape = *spec->shape;
    else throw nnleak::ConfigError("profile", "model shape unknown: pass --truth or a profiling file with a shape");
    report = nnleak::extract_model(ts, shape, cfg, a.is_signed, prof).report;
    report.mode = a.mode;
  } else {
    throw nnleak::ConfigError("mode", "unknown mode '" + a.mode + "'");
  }
  if (truth) nnleak::score_against(report, *truth);

  nnleak::Provenance prov;
  prov.protocol = a.mode;
  prov.seed = ts.meta().seed;
  if (ts.meta().info.contains("noise_sigma")) prov.noise_sigma = ts.meta().info["noise_sigma"].get<double>();
  prov.config_hash = nnleak::hex64(nnleak::fnv1a(nnleak::config_to_json(cfg).dump()));

  const auto rj = nnleak::report_to_json(report, prov);
  if (!a.report.empty()) {
    write_file(a.report, rj.dump(2) + "\n");
    fs::path csv = a.report;
    csv.replace_extension(".sr.csv");
    write_file(csv, nnleak::sr_csv(report));
  }
  if (!a.dump_correlations.empty()) write_file(a.dump_correlations, nnleak::correlations_csv(report));

  for (const auto& p : report.params) {
    std::cout << nnleak::to_string(p.kind) << " l" << p.layer << " n" << p.neuron;
    if (p.index >= 0) std::cout << " j" << p.index;
    std::cout << ": " << std::setprecision(9) << p.recovered;
    if (p.eps) std::cout << "  truth " << *p.truth << "  eps " << std::setprecision(3) << *p.eps;
    if (p.unrecoverable) std::cout << "  (unrecoverable)";
    if (p.sign_ambiguous) std::cout << "  (sign ambiguous)";
    std::cout << '\n';
  }
  for (const auto& d : report.diagnostics) std::cerr << "note: " << d << '\n';
  return 0;
}

struct ReproduceArgs {
  std::string table = "T2";
  double scale = 0.1;
  std::optional<std::size_t> count;
  std::optional<std::size_t> traces;
  std::vector<double> sigma2;
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string out_dir;
  std::string config;
};

int run_reproduce(const ReproduceArgs& a) {
  nnleak::TableOptions o;
  o.scale = a.scale;
  o.count = a.count;
  o.traces = a.traces;
  o.sigma2 = a.sigma2;
  o.seed = a.seed;
  o.jobs = a.jobs;
  if (!a.config.empty()) o.attack = nnleak::config_from_json(read_json(a.config));
  const auto id = nnleak::table_id_from_string(a.table);
  const auto t = nnleak::reproduce_table(id, o);
  std::cout << nnleak::table_text(t);
  if (!a.out_dir.empty()) {
    const fs::path dir = a.out_dir;
    const std::string stem = nnleak::to_string(id);
    write_file(dir / (stem + ".json"), nnleak::table_to_json(t, o).dump(2) + "\n");
    write_file(dir / (stem + ".csv"), nnleak::table_csv(t));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight extraction from simulated or captured Hamming-weight leakage of float32 MLP inference"};
  app.require_subcommand(1);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic trace set (SCNT)");
  sim->add_option("--protocol", sa.protocol, "mult | neuron | bias-neuron | layer | model")
      ->check(CLI::IsMember({"mult", "neuron", "bias-neuron", "layer", "model"}));
  sim->add_option("--secret", sa.secret, "Secret operand (mult)");
  sim->add_option("--weights", sa.weights, "Neuron weights, comma separated (neuron, bias-neuron)")->delimiter(',');
  sim->add_option("--bias", sa.bias, "Neuron bias (bias-neuron)");
  sim->add_option("--model", sa.model, "Model JSON (layer, model)");
  sim->add_option("--traces", sa.traces, "Number of traces")->check(CLI::PositiveNumber);
  sim->add_option("--samples", sa.samples, "Samples per trace (samples per value for layer/model)");
  auto* s1 = sim->add_option("--sigma", sa.sigma, "Noise standard deviation");
  auto* s2 = sim->add_option("--sigma2", sa.sigma2, "Noise variance");
  s1->excludes(s2);
  sim->add_option("--averaging", sa.averaging, "Executions averaged into each trace")->check(CLI::PositiveNumber);
  sim->add_flag("--raw-repeats", sa.raw_repeats, "Average simulated executions instead of scaling the noise");
  sim->add_flag("--leak-products", sa.leak_products, "Also leak every product");
  sim->add_option("--inputs", sa.input_mode, "Input distribution: nonneg | signed | wide");
  sim->add_option("--input-scale", sa.input_scale, "Input range for nonneg/signed inputs");
  sim->add_option("--wide-exponent", sa.wide_exponent, "Exponent range E of wide inputs 2^U[-E, E]");
  sim->add_option("--seed", sa.seed, "Random seed");
  sim->add_option("--out", sa.out, "Output SCNT file")->required();

  AttackArgs aa;
  auto* atk = app.add_subcommand("attack", "Extract parameters from a trace set");
  atk->add_option("--traces", aa.traces, "SCNT or CSV trace file")->required()->check(CLI::ExistingFile);
  atk->add_option("--config", aa.config, "Attack parameters (JSON)")->check(CLI::ExistingFile);
  atk->add_option("--mode", aa.mode, "mult | neuron | layer | model | bias-neuron")
      ->check(CLI::IsMember({"mult", "neuron", "layer", "model", "bias-neuron"}));
  atk->add_flag("--signed", aa.is_signed, "Weights may be negative");
  atk->add_option("--report", aa.report, "Report JSON (SR tables go next to it as .sr.csv)");
  atk->add_option("--dump-correlations", aa.dump_correlations, "CSV of every hypothesis correlation");
  atk->add_option("--profile", aa.profile, "Leakage placement file (JSON)")->check(CLI::ExistingFile);
  atk->add_option("--truth", aa.truth, "Model JSON used to score the recovery")->check(CLI::ExistingFile);
  atk->add_option("--n-inputs", aa.n_inputs, "Neuron fan-in (default: all trace inputs)");
  atk->add_option("--jobs", aa.jobs, "Threads per ranking pass")->check(CLI::PositiveNumber);

  ReproduceArgs ra;
  auto* rep = app.add_subcommand("reproduce", "Scaled reproduction of a success-rate table");
  rep->add_option("--table", ra.table, "T2 | T5 | T7")->check(CLI::IsMember({"T2", "T5", "T7"}));
  rep->add_option("--scale", ra.scale, "Fraction of 5,000 secrets/neurons")->check(CLI::Range(1e-6, 1.0));
  rep->add_option("--count", ra.count, "Number of secrets/neurons (overrides --scale)");
  rep->add_option("--traces", ra.traces, "Traces per secret/neuron");
  rep->add_option("--sigma2", ra.sigma2, "Noise variances for T2");
  rep->add_option("--seed", ra.seed, "Random seed");
  rep->add_option("--jobs", ra.jobs, "Worker threads")->check(CLI::PositiveNumber);
  rep->add_option("--out-dir", ra.out_dir, "Write <table>.json and <table>.csv here");
  rep->add_option("--config", ra.config, "Attack parameters (JSON)")->check(CLI::ExistingFile);

  std::string run_config, run_out = "run-out";
  int run_jobs = 1;
  auto* run = app.add_subcommand("run", "Simulate, attack and report from an experiment config");
  run->add_option("--config", run_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out-dir", run_out, "Artifact directory");
  run->add_option("--jobs", run_jobs, "Threads per ranking pass")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) return run_simulate(sa);
    if (*atk) return run_attack(aa);
    if (*rep) return run_reproduce(ra);
    if (*run) {
      const auto cfg = read_json(run_config);
      const auto out = nnleak::run_experiment(cfg, run_out, fs::path(run_config).parent_path(), run_jobs);
      std::cout << out.report.params.size() << " parameters, artifacts in " << run_out << '\n';
      for (auto kind : {nnleak::ParamKind::weight, nnleak::ParamKind::bias}) {
        const auto t = nnleak::success_rates(out.report, kind);
        if (!t.trials) continue;
        std::cout << nnleak::to_string(kind) << " SR:";
        for (std::size_t k = 0; k < nnleak::kSrThresholds.size(); ++k)
          std::cout << ' ' << nnleak::threshold_label(nnleak::kSrThresholds[k]) << '=' << t.rate[k];
        std::cout << '\n';
      }
      for (const auto& v : out.violations) std::cerr << "acceptance: " << v << '\n';
      return out.violations.empty() ? 0 : 2;
    }
  } catch (const nnleak::ConfigError& e) {
    std::cerr << "config error [" << e.field() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
