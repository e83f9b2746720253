#pragma once

// Command-line front end: gen | train | edit | sample | eval.
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
// Data goes to files; stdout carries a one-line summary, stderr diagnostics.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccnf/ccnf.hpp"

#ifndef CCNF_VERSION
#define CCNF_VERSION "0.1.0"
#endif

namespace ccnf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

// ---------------------------------------------------------------------------
// Run manifest

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// FNV-1a, 64 bit: stable across platforms, enough to tell configs apart.
inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;  // resolved settings, sorted by key
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::system_clock::time_point started = std::chrono::system_clock::now();

  std::string config_hash() const {
    std::string canon = command + '\n';
    for (const auto& [k, v] : config) canon += k + '=' + v + '\n';
    return fnv1a_hex(canon);
  }

  void write(const std::string& path) const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = CCNF_VERSION;
    j["config_hash"] = config_hash();
    j["seed"] = seed;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["started_at"] = utc_timestamp(started);
    j["finished_at"] = utc_timestamp(std::chrono::system_clock::now());
    auto os = open_output(path);
    os << j.dump(2) << '\n';
  }
};

// ---------------------------------------------------------------------------
// Argument helpers

// "out.csv" + "level-50" -> "out.level-50.csv"
inline std::string with_suffix(const std::string& path, const std::string& suffix) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path + '.' + suffix;
  return path.substr(0, dot) + '.' + suffix + path.substr(dot);
}

inline std::vector<SweepLevel> parse_levels(const std::string& text) {
  std::vector<SweepLevel> out;
  for (const auto& item : split(text, ',')) {
    const auto t = trim(item);
    if (t == "identity") {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(parse_double(t, "level"));
    }
  }
  if (out.empty()) throw InvalidInput("--levels: empty list");
  return out;
}

// "0:200,auto" -> declared range for axis 0, data-derived for axis 1.
inline std::vector<std::optional<AxisRange>> parse_attr_bounds(const std::string& text, std::size_t k) {
  std::vector<std::optional<AxisRange>> out;
  for (const auto& item : split(text, ',')) {
    const auto t = trim(item);
    if (t == "auto") {
      out.emplace_back(std::nullopt);
      continue;
    }
    const auto colon = t.find(':');
    if (colon == std::string_view::npos) throw InvalidInput("attribute bounds: expected min:max or auto, got '" + std::string(t) + "'");
    out.emplace_back(AxisRange{parse_double(t.substr(0, colon), "attribute bound"),
                               parse_double(t.substr(colon + 1), "attribute bound")});
  }
  if (out.size() != k) {
    throw InvalidInput("attribute bounds: need " + std::to_string(k) + " entries, got " + std::to_string(out.size()));
  }
  return out;
}

// Prints each distinct warning once, with a repeat count.
inline void flush_diagnostics(const Diagnostics& diag, std::ostream& err) {
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto& w : diag.warnings) {
    if (counts[w]++ == 0) order.push_back(w);
  }
  for (const auto& w : order) {
    err << "warning: " << w;
    if (counts[w] > 1) err << " (x" << counts[w] << ')';
    err << '\n';
  }
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenArgs {
  std::size_t d = 0, k = 0, n = 0;
  std::uint64_t seed = 0;
  std::string out, spec;
  bool skew = false;
  std::string raw_max;
  double map_scale = 2.0;
  double noise_std = 0.5;
};

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
  RunManifest m;
  m.command = "gen";
  ConditionalGaussianGenerator g;
  if (!a.spec.empty()) {
    auto is = open_input(a.spec);
    g = generator_from_doc(KeyValueDoc::parse(is));
    m.inputs.push_back(a.spec);
  } else {
    if (a.d == 0) throw InvalidInput("gen: --d must be >= 1 (or pass --spec)");
    g = ConditionalGaussianGenerator::random(a.d, a.k, a.seed, a.map_scale, a.noise_std);
    if (a.skew) g.sampling = AttributeSampling::skewed_low;
    if (!a.raw_max.empty()) {
      const Vector hi = parse_double_list(a.raw_max, "--raw-max");
      if (hi.size() != g.k) throw InvalidInput("gen: --raw-max needs k entries");
      for (std::size_t j = 0; j < g.k; ++j) g.raw_ranges[j].max = hi[j];
      g.validate();
    }
  }
  const Dataset ds = generate_dataset(g, a.n);
  const std::string spec_path = a.out + ".gen";
  write_dataset_file(a.out, ds);
  const KeyValueDoc spec = generator_to_doc(g);
  {
    auto os = open_output(spec_path);
    spec.write(os);
  }
  m.seed = g.seed;
  for (const auto& [key, value] : spec.entries()) m.config[key] = value;
  m.config["n"] = std::to_string(a.n);
  m.outputs = {a.out, spec_path};
  m.write(a.out + ".manifest.json");
  out << "gen: wrote " << ds.size() << " records (d=" << ds.d << ", k=" << ds.k << ") to " << a.out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, config, report, attr_bounds, trace, solver;
  std::optional<std::size_t> epochs, batch_size, steps, threads, hidden;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, rtol, atol;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunManifest m;
  m.command = "train";
  KeyValueDoc doc;
  if (!a.config.empty()) {
    auto is = open_input(a.config);
    doc = KeyValueDoc::parse(is);
    m.inputs.push_back(a.config);
  }
  // command-line flags override the config document
  auto put = [&doc](const std::string& key, const auto& value) {
    if (value) doc.set(key, *value);
  };
  put("epochs", a.epochs);
  put("batch_size", a.batch_size);
  put("steps", a.steps);
  put("threads", a.threads);
  put("hidden", a.hidden);
  put("lr0", a.lr);
  put("rtol", a.rtol);
  put("atol", a.atol);
  if (a.seed) doc.set("seed", std::to_string(*a.seed));
  if (!a.trace.empty()) doc.set("trace_mode", a.trace);
  if (!a.solver.empty()) doc.set("solver", a.solver);
  if (!a.attr_bounds.empty()) doc.set("attr_bounds", a.attr_bounds);

  TrainConfig cfg = train_config_from_doc(doc);
  cfg.checkpoint_path = a.out;
  const std::size_t hidden = doc.get("hidden") ? parse_count(*doc.get("hidden"), "hidden") : 64;
  if (hidden == 0) throw InvalidInput("train: hidden must be >= 1");

  const Dataset ds = read_dataset_file(a.data);
  m.inputs.push_back(a.data);
  std::vector<std::optional<AxisRange>> declared;
  if (const auto b = doc.get("attr_bounds")) declared = parse_attr_bounds(*b, ds.k);
  const auto attrs = normalize_attributes(ds.attributes, declared);

  FlowModel model = make_initial_model(ds.d, attrs.stats, hidden, splitmix64(cfg.seed));
  if (const auto s = doc.get("solver")) {
    if (*s == "rk4") {
      model.solver = SolverConfig::rk4(cfg.steps);
    } else if (*s != "dopri5") {
      throw InvalidInput("train: solver must be dopri5 or rk4");
    }
  }
  if (const auto v = doc.get("rtol")) model.solver.rtol = parse_double(*v, "rtol");
  if (const auto v = doc.get("atol")) model.solver.atol = parse_double(*v, "atol");
  model.validate();

  const std::string report_path = a.report.empty() ? a.out + ".report.csv" : a.report;
  TrainReport report;
  try {
    report = train(model, ds.embeddings, attrs.values, cfg);
  } catch (const InstabilityError&) {
    err << "error: training became unstable; last good model kept at " << a.out << '\n';
    throw;
  }
  save_checkpoint_file(a.out, report.model);
  {
    auto os = open_output(report_path);
    write_train_report(os, report);
  }
  for (const auto& [key, value] : doc.entries()) m.config[key] = value;
  // resolved values; the thread count is left out since it does not change results
  m.config.erase("threads");
  m.config["batch_size"] = std::to_string(cfg.batch_size);
  m.config["lr0"] = format_double(cfg.lr0);
  m.config["decay"] = format_double(cfg.decay);
  m.config["decay_every"] = std::to_string(cfg.decay_every);
  m.config["epochs"] = std::to_string(cfg.epochs);
  m.config["steps"] = std::to_string(cfg.steps);
  m.config["seed"] = std::to_string(cfg.seed);
  m.config["trace_mode"] = cfg.trace_for(ds.d) == TraceMethod::exact ? "exact" : "hutchinson";
  m.config["solver"] = solver_method_name(model.solver.method);
  m.config["rtol"] = format_double(model.solver.rtol);
  m.config["atol"] = format_double(model.solver.atol);
  m.config["hidden"] = std::to_string(hidden);
  m.seed = cfg.seed;
  m.outputs = {a.out, report_path};
  m.write(a.out + ".manifest.json");
  out << "train: " << report.epoch_nll.size() << " epochs";
  if (!report.epoch_nll.empty()) out << ", final mean NLL " << format_double(report.epoch_nll.back());
  out << ", checkpoint " << a.out << '\n';
  return kExitOk;
}

struct EditArgs {
  std::string model, data, out, levels, target;
  std::optional<std::size_t> axis;
  std::optional<double> level;
};

inline int cmd_edit(const EditArgs& a, std::ostream& out, std::ostream& err) {
  const int modes = (a.level ? 1 : 0) + (a.levels.empty() ? 0 : 1) + (a.target.empty() ? 0 : 1);
  if (modes != 1) throw InvalidInput("edit: pass exactly one of --level, --levels or --target");
  if ((a.level || !a.levels.empty()) && !a.axis) throw InvalidInput("edit: --level/--levels need --axis");

  const FlowModel model = load_checkpoint_file(a.model);
  const Dataset ds = read_dataset_file(a.data);
  if (ds.d != model.d() || ds.k != model.k()) throw InvalidInput("edit: data dimensions do not match the model");
  if (a.axis && *a.axis >= model.k()) {
    throw InvalidInput("edit: axis " + std::to_string(*a.axis) + " out of range (k=" + std::to_string(model.k()) + ")");
  }

  RunManifest m;
  m.command = "edit";
  m.inputs = {a.model, a.data};
  m.config["model"] = a.model;
  Diagnostics diag;

  auto run = [&](const std::function<Vector(const Vector&)>& target_raw, const std::string& path) {
    Dataset edited;
    edited.d = ds.d;
    edited.k = ds.k;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Vector raw = target_raw(ds.attributes[i]);
      const Vector a_src = model.attributes.normalize(ds.attributes[i]);
      edited.push_back(edit(model, ds.embeddings[i], a_src, model.attributes.normalize(raw), &diag), raw);
    }
    write_dataset_file(path, edited);
    m.outputs.push_back(path);
  };

  if (!a.target.empty()) {
    const Vector target = parse_double_list(a.target, "--target");
    if (target.size() != model.k()) throw InvalidInput("edit: --target needs k values");
    m.config["target"] = a.target;
    run([&](const Vector&) { return target; }, a.out);
  } else {
    const std::size_t axis = *a.axis;
    m.config["axis"] = std::to_string(axis);
    std::vector<SweepLevel> levels;
    if (a.level) {
      levels.emplace_back(*a.level);
      m.config["level"] = format_double(*a.level);
    } else {
      levels = parse_levels(a.levels);
      m.config["levels"] = a.levels;
    }
    for (const auto& level : levels) {
      const std::string path = a.level ? a.out : with_suffix(a.out, "level-" + sweep_level_name(level));
      run(
          [&](const Vector& raw) {
            Vector t = raw;
            if (level) t[axis] = *level;
            return t;
          },
          path);
    }
  }
  flush_diagnostics(diag, err);
  m.write(a.out + ".manifest.json");
  out << "edit: " << ds.size() << " records x " << m.outputs.size() << " output file(s)";
  if (!diag.warnings.empty()) out << ", " << diag.warnings.size() << " clamped target(s)";
  out << '\n';
  return kExitOk;
}

struct SampleArgs {
  std::string model, attrs, out;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

inline int cmd_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
  const FlowModel model = load_checkpoint_file(a.model);
  const Vector raw = parse_double_list(a.attrs, "--attrs");
  if (raw.size() != model.k()) throw InvalidInput("sample: --attrs needs k values");
  if (a.n == 0) throw InvalidInput("sample: --n must be >= 1");
  Diagnostics diag;
  const Vector unit = clamp_unit(model.attributes.normalize(raw), &diag);
  flush_diagnostics(diag, err);
  Rng rng(a.seed);
  Dataset ds;
  ds.d = model.d();
  ds.k = model.k();
  for (std::size_t i = 0; i < a.n; ++i) ds.push_back(sample(model, unit, rng), raw);
  write_dataset_file(a.out, ds);

  RunManifest m;
  m.command = "sample";
  m.seed = a.seed;
  m.config = {{"attrs", a.attrs}, {"n", std::to_string(a.n)}, {"seed", std::to_string(a.seed)}};
  m.inputs = {a.model};
  m.outputs = {a.out};
  m.write(a.out + ".manifest.json");
  out << "sample: wrote " << a.n << " embeddings to " << a.out << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string model, test, probe_data, levels, out, axes;
  double lambda = 1e-6;
  std::size_t imposters = 10;
  std::uint64_t seed = 0;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const FlowModel model = load_checkpoint_file(a.model);
  const Dataset test = read_dataset_file(a.test);
  const Dataset probe_data = read_dataset_file(a.probe_data);
  if (probe_data.d != model.d() || probe_data.k != model.k()) {
    throw InvalidInput("eval: probe data dimensions do not match the model");
  }
  Diagnostics diag;
  const auto probe = fit_probe(probe_data, a.lambda, &diag);
  const auto levels = parse_levels(a.levels);
  std::vector<std::size_t> axes;
  for (const auto& t : split(a.axes, ',')) axes.push_back(parse_count(t, "--axis"));
  if (axes.empty()) throw InvalidInput("eval: --axis is empty");

  RunManifest m;
  m.command = "eval";
  m.seed = a.seed;
  m.config = {{"axis", a.axes},
              {"levels", a.levels},
              {"lambda", format_double(a.lambda)},
              {"imposters", std::to_string(a.imposters)},
              {"seed", std::to_string(a.seed)}};
  m.inputs = {a.model, a.test, a.probe_data};
  std::string summary;
  for (std::size_t axis : axes) {
    const auto report = severity_sweep_report(model, probe, test, axis, levels, {a.imposters, a.seed}, &diag);
    const std::string stem = axes.size() == 1 ? a.out : a.out + ".axis" + std::to_string(axis);
    {
      auto os = open_output(stem + ".csv");
      write_sweep_csv(os, report);
    }
    {
      auto os = open_output(stem + ".txt");
      write_sweep_table(os, report);
    }
    m.outputs.push_back(stem + ".csv");
    m.outputs.push_back(stem + ".txt");
    summary += " axis " + std::to_string(axis) + " EER";
    for (const auto& row : report.rows) summary += ' ' + format_double(row.eer);
  }
  flush_diagnostics(diag, err);
  m.write(a.out + ".manifest.json");
  out << "eval:" << summary << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conditional continuous normalizing flow: generate, train, edit, sample, evaluate", "ccnf"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CCNF_VERSION));

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic conditional-Gaussian dataset");
  g->add_option("--d", gen.d, "Embedding dimension");
  g->add_option("--k", gen.k, "Attribute dimension");
  g->add_option("--n", gen.n, "Number of records")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--out", gen.out, "Dataset CSV to write")->required();
  g->add_option("--spec", gen.spec, "Existing generator spec to reuse instead of --d/--k/--seed");
  g->add_flag("--skew", gen.skew, "Draw attributes from Beta(2,5) instead of uniform");
  g->add_option("--raw-max", gen.raw_max, "Comma-separated raw maximum per attribute (default 100)");
  g->add_option("--map-scale", gen.map_scale, "Std of mean-map entries");
  g->add_option("--noise-std", gen.noise_std, "Per-dimension noise std");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Fit a flow by maximum likelihood");
  t->add_option("--data", tr.data, "Training dataset CSV")->required();
  t->add_option("--out", tr.out, "Checkpoint to write")->required();
  t->add_option("--config", tr.config, "Key/value config file");
  t->add_option("--report", tr.report, "Training curve CSV (default <out>.report.csv)");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr, "Initial learning rate");
  t->add_option("--steps", tr.steps, "RK4 steps during training");
  t->add_option("--threads", tr.threads);
  t->add_option("--hidden", tr.hidden, "Hidden width of the vector field (default 64)");
  t->add_option("--seed", tr.seed);
  t->add_option("--trace", tr.trace, "exact | hutchinson | auto");
  t->add_option("--solver", tr.solver, "Inference solver: dopri5 | rk4");
  t->add_option("--rtol", tr.rtol);
  t->add_option("--atol", tr.atol);
  t->add_option("--attr-bounds", tr.attr_bounds, "Per-axis raw range, e.g. 0:200,auto");

  EditArgs ed;
  auto* e = app.add_subcommand("edit", "Move embeddings to new attribute values");
  e->add_option("--model", ed.model)->required();
  e->add_option("--data", ed.data, "Embeddings with their raw attributes")->required();
  e->add_option("--out", ed.out, "Output CSV (sweeps add .level-<v> before the extension)")->required();
  e->add_option("--axis", ed.axis);
  e->add_option("--level", ed.level, "Raw target level on --axis");
  e->add_option("--levels", ed.levels, "Comma-separated raw levels on --axis; 'identity' keeps a");
  e->add_option("--target", ed.target, "Full raw target vector");

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Draw embeddings for given attributes");
  s->add_option("--model", sa.model)->required();
  s->add_option("--attrs", sa.attrs, "Comma-separated raw attribute values")->required();
  s->add_option("--n", sa.n)->required();
  s->add_option("--seed", sa.seed);
  s->add_option("--out", sa.out)->required();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Severity sweep: probe-predicted attribute and EER per level");
  v->add_option("--model", ev.model)->required();
  v->add_option("--test", ev.test, "Test set with raw attributes")->required();
  v->add_option("--probe-data", ev.probe_data, "Data to fit the attribute probe on")->required();
  v->add_option("--axis", ev.axes, "Axis index, or comma-separated list")->required();
  v->add_option("--levels", ev.levels, "Comma-separated raw levels; 'identity' adds the a' = a row")->required();
  v->add_option("--out", ev.out, "Report prefix (writes .csv and .txt)")->required();
  v->add_option("--lambda", ev.lambda, "Probe ridge penalty");
  v->add_option("--imposters", ev.imposters, "Imposters per trial");
  v->add_option("--seed", ev.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*e) return cmd_edit(ed, out, err);
    if (*s) return cmd_sample(sa, out, err);
    if (*v) return cmd_eval(ev, out, err);
  } catch (const InstabilityError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const DivergenceError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ccnf::cli
