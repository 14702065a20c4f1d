#pragma once

// Command-line front end: `bltlab <command> [options]`.
//
// Every command resolves a run configuration (defaults < --config file <
// flags), writes it to <out>/config.resolved, and fills the fixed layout
// <out>/{config.resolved, metrics.log, reports/, tables/}. Usage errors exit
// with 2, runtime failures with 1 and a single line on stderr:
//   error: code=<code> message="<text>"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bltlab/analysis.hpp"
#include "bltlab/dataset.hpp"
#include "bltlab/gradcheck.hpp"
#include "bltlab/network.hpp"
#include "bltlab/report.hpp"
#include "bltlab/training.hpp"
#include "bltlab/trajectory.hpp"
#include "bltlab/zones.hpp"

namespace bltlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "BLTLAB_OUTPUT_ROOT";

/// Every configurable value with its default. Model input shape and class
/// count of 0 are filled in from the training dataset.
inline json default_config() {
  return json::parse(R"({
    "seed": 0,
    "dataset": {"super": 2, "sub": 5, "per_class": 100, "side": 16, "noise_std": 0.05},
    "model": {"channels": [16, 32, 64], "kernel": 3, "feedback": "lateral", "interaction": "additive",
              "timesteps": 10, "readout_bias": false, "norm_enabled": true,
              "input_channels": 0, "input_height": 0, "input_width": 0, "n_classes": 0},
    "train": {"epochs": 10, "batch_size": 32, "lr": 0.001, "loss_weights": [], "eval_every": 1,
              "clip_norm": 5.0, "split_fractions": [0.8, 0.1, 0.1], "split_seed": 0},
    "analysis": {
      "split": "test", "t_eval": 0, "logits": false, "cluster_k": 2,
      "zones": {"n_classes": 4, "dim": 2, "extent": 10.0, "resolution": 201, "rays": 100, "radii": 10,
                "with_bias": false, "ratios": [0.5, 1, 2, 5, 10, 30], "directions": 1000},
      "sweep": {"source": "random", "dims": "1:50", "n_vectors": 100, "reps": 100},
      "gradcheck": {"feedback": "all", "interaction": "all", "threshold": 0.0001}
    }
  })");
}

/// Overlays `patch` onto `base`, rejecting keys that `base` does not have and
/// values whose kind differs from the default's.
inline void merge_config(json& base, const json& patch, const std::string& path = "") {
  if (!patch.is_object()) throw Error("config", "config section '" + path + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw Error("config", "unknown config key '" + where + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, where);
      continue;
    }
    const bool ok = (slot.is_number_unsigned() && value.is_number_unsigned()) ||
                    (slot.is_number_float() && value.is_number()) ||
                    (slot.is_boolean() && value.is_boolean()) || (slot.is_string() && value.is_string()) ||
                    (slot.is_array() && value.is_array());
    if (!ok) throw Error("config", "config key '" + where + "' has the wrong type (expected " +
                                       std::string(slot.is_number_unsigned() ? "non-negative integer" : slot.type_name()) + ")");
    slot = value;
  }
}

template <typename V>
V config_get(const json& cfg, const std::string& pointer) {
  try {
    return cfg.at(json::json_pointer(pointer)).get<V>();
  } catch (const json::exception& e) {
    throw Error("config", "config value '" + pointer + "' is invalid: " + e.what());
  }
}

inline SynthOptions synth_options(const json& cfg) {
  SynthOptions o;
  o.n_super = config_get<std::size_t>(cfg, "/dataset/super");
  o.n_sub_per_super = config_get<std::size_t>(cfg, "/dataset/sub");
  o.n_per_class = config_get<std::size_t>(cfg, "/dataset/per_class");
  o.side = config_get<std::size_t>(cfg, "/dataset/side");
  o.noise_std = config_get<double>(cfg, "/dataset/noise_std");
  o.seed = config_get<std::uint64_t>(cfg, "/seed");
  return o;
}

inline BltConfig model_config(const json& cfg, const Dataset& ds) {
  BltConfig m;
  m.channels = config_get<std::vector<std::size_t>>(cfg, "/model/channels");
  m.kernel = config_get<std::size_t>(cfg, "/model/kernel");
  m.feedback = parse_feedback(config_get<std::string>(cfg, "/model/feedback"));
  m.interaction = parse_interaction(config_get<std::string>(cfg, "/model/interaction"));
  m.timesteps = config_get<std::size_t>(cfg, "/model/timesteps");
  m.readout_bias = config_get<bool>(cfg, "/model/readout_bias");
  m.norm_enabled = config_get<bool>(cfg, "/model/norm_enabled");
  auto pick = [&](const char* key, std::size_t from_data) {
    const auto v = config_get<std::size_t>(cfg, std::string("/model/") + key);
    if (v != 0 && v != from_data)
      throw Error("config", std::string("model.") + key + "=" + std::to_string(v) +
                                " does not match the dataset (" + std::to_string(from_data) + ")");
    return from_data;
  };
  m.input_channels = pick("input_channels", ds.header.channels);
  m.input_height = pick("input_height", ds.header.height);
  m.input_width = pick("input_width", ds.header.width);
  m.n_classes = pick("n_classes", ds.header.n_classes);
  m.validate();
  return m;
}

inline TrainConfig train_config(const json& cfg) {
  TrainConfig t;
  t.epochs = config_get<std::size_t>(cfg, "/train/epochs");
  t.batch_size = config_get<std::size_t>(cfg, "/train/batch_size");
  t.lr = config_get<double>(cfg, "/train/lr");
  t.loss_weights = config_get<std::vector<double>>(cfg, "/train/loss_weights");
  t.eval_every = config_get<std::size_t>(cfg, "/train/eval_every");
  t.clip_norm = config_get<double>(cfg, "/train/clip_norm");
  t.split_fractions = config_get<std::vector<double>>(cfg, "/train/split_fractions");
  t.split_seed = config_get<std::uint64_t>(cfg, "/train/split_seed");
  t.seed = config_get<std::uint64_t>(cfg, "/seed");
  t.validate();
  return t;
}

/// "a:b" (inclusive range) or a comma-separated list.
inline std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> out;
  auto num = [&](const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size() || v == 0) throw Error("config", "invalid dimension list '" + text + "'");
    return static_cast<std::size_t>(v);
  };
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    const auto lo = num(text.substr(0, colon)), hi = num(text.substr(colon + 1));
    if (lo > hi) throw Error("config", "invalid dimension range '" + text + "'");
    for (std::size_t d = lo; d <= hi; ++d) out.push_back(d);
  } else {
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(num(item));
  }
  if (out.empty()) throw Error("config", "empty dimension list");
  return out;
}

/// Output directory with the fixed layout.
class RunDir {
 public:
  RunDir(const fs::path& root, const json& resolved) : root_(root) {
    std::error_code ec;
    fs::create_directories(root_ / "reports", ec);
    fs::create_directories(root_ / "tables", ec);
    if (ec || !fs::is_directory(root_ / "reports"))
      throw Error("io", "cannot create output directory '" + root_.string() + "'");
    write_text_file((root_ / "config.resolved").string(), resolved.dump(2) + "\n");
    metrics_.open(root_ / "metrics.log", std::ios::binary | std::ios::trunc);
    if (!metrics_) throw Error("io", "cannot write '" + (root_ / "metrics.log").string() + "'");
  }

  const fs::path& root() const { return root_; }
  std::string path(const std::string& name) const { return (root_ / name).string(); }

  void log(const std::string& line) {
    metrics_ << line << '\n';
    metrics_.flush();
  }

  void report(const std::string& name, const json& doc) {
    write_text_file((root_ / "reports" / (name + ".json")).string(), doc.dump(2) + "\n");
  }
  void table(const std::string& name, const Table& t) {
    write_text_file((root_ / "tables" / (name + ".csv")).string(), t.to_csv());
  }

 private:
  fs::path root_;
  std::ofstream metrics_;
};

inline std::string quote(const std::string& s) { return json(s).dump(); }

struct Context {
  std::ostream& out;
  json cfg;
  std::vector<std::string> command;
  fs::path out_dir;

  RunDir open_run() const {
    json resolved = cfg;
    resolved["command"] = command;
    return RunDir(out_dir, resolved);
  }
};

// ------------------------------------------------------------------ commands

inline void cmd_synth(Context& ctx) {
  const auto opt = synth_options(ctx.cfg);
  RunDir run = ctx.open_run();
  const auto result = synth_generate(opt);
  write_dataset(run.path("dataset.mesd"), result.dataset);
  write_text_file(run.path("dataset.hierarchy"), result.hierarchy.to_text());
  Table t{{"class", "name", "superclass", "superclass_name", "n_images"}, {}};
  std::vector<std::size_t> counts(result.hierarchy.classes.size(), 0);
  for (auto l : result.dataset.labels) ++counts[l];
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const auto& info = result.hierarchy.classes[c];
    t.add(c, info.name, info.superclass, result.hierarchy.superclass_names[info.superclass], counts[c]);
  }
  run.table("classes", t);
  ctx.out << "wrote " << result.dataset.size() << " images in " << counts.size() << " classes to "
          << run.path("dataset.mesd") << "\n";
}

inline void cmd_train(Context& ctx, const std::string& data_path) {
  const Dataset ds = read_dataset(data_path);
  const BltConfig model = model_config(ctx.cfg, ds);
  const TrainConfig tc = train_config(ctx.cfg);
  ctx.cfg["model"]["input_channels"] = model.input_channels;
  ctx.cfg["model"]["input_height"] = model.input_height;
  ctx.cfg["model"]["input_width"] = model.input_width;
  ctx.cfg["model"]["n_classes"] = model.n_classes;
  RunDir run = ctx.open_run();
  Table epochs{{"epoch", "train_loss", "val_accuracy"}, {}};
  const auto result = train(model, tc, ds, [&](const EpochMetrics& m) {
    run.log(m.to_log_line());
    epochs.add(m.epoch, m.train_loss,
               m.val_accuracy.empty() ? std::optional<double>{} : std::optional<double>{m.val_accuracy.back()});
  });
  save_checkpoint(run.path("model.bltc"), result.best);
  run.table("epochs", epochs);
  const auto test_acc = evaluate(result.best, ds, SplitPart::test);
  Table acc{{"t", "test_accuracy"}, {}};
  for (std::size_t t = 0; t < test_acc.size(); ++t) acc.add(t, test_acc[t]);
  run.table("test_accuracy", acc);
  ctx.out << "best epoch " << result.best.meta.epoch << ", final-timestep test accuracy "
          << fmt_double(test_acc.back()) << "\n";
}

inline void cmd_record(Context& ctx, const std::string& ckpt_path, const std::string& data_path) {
  const auto part = parse_split_part(config_get<std::string>(ctx.cfg, "/analysis/split"));
  const auto t_eval = config_get<std::size_t>(ctx.cfg, "/analysis/t_eval");
  const bool logits = config_get<bool>(ctx.cfg, "/analysis/logits");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset ds = read_dataset(data_path);
  RunDir run = ctx.open_run();
  const Trajectory tr = record(ckpt, ds, part, t_eval, logits);
  write_traj(run.path("trajectory.bltj"), tr);
  Table acc{{"t", "accuracy"}, {}};
  for (std::size_t t = 0; t < tr.timesteps; ++t) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) correct += tr.correct(i, t);
    acc.add(t, tr.size() ? static_cast<double>(correct) / static_cast<double>(tr.size()) : 0.0);
  }
  run.table("accuracy", acc);
  ctx.out << "recorded " << tr.size() << " images x " << tr.timesteps << " timesteps to "
          << run.path("trajectory.bltj") << "\n";
}

inline void require_readout_match(const Trajectory& tr, const Checkpoint& ckpt) {
  if (ckpt.config.repr_dim() != tr.repr_dim || ckpt.config.n_classes != tr.n_classes)
    throw Error("shape", "trajectory (d_r=" + std::to_string(tr.repr_dim) + ", classes=" +
                             std::to_string(tr.n_classes) + ") does not match the checkpoint readout (d_r=" +
                             std::to_string(ckpt.config.repr_dim()) + ", classes=" +
                             std::to_string(ckpt.config.n_classes) + ")");
}

struct AnalyzeInputs {
  std::string traj;
  std::string ff_traj;
  std::string checkpoint;
  std::string hierarchy;
};

inline void cmd_analyze(Context& ctx, const std::string& kind, const AnalyzeInputs& in) {
  auto need = [](const std::string& v, const char* flag) {
    if (v.empty()) throw Error("usage", std::string("missing required option ") + flag);
  };
  if (kind == "clusters") {
    need(in.checkpoint, "--checkpoint");
    const auto k = config_get<std::size_t>(ctx.cfg, "/analysis/cluster_k");
    const Checkpoint ckpt = load_checkpoint(in.checkpoint);
    std::optional<ClassHierarchy> hier;
    if (!in.hierarchy.empty()) hier = ClassHierarchy::from_text(read_text_file(in.hierarchy));
    if (hier && hier->classes.size() != ckpt.config.n_classes)
      throw Error("shape", "hierarchy lists " + std::to_string(hier->classes.size()) +
                               " classes, checkpoint has " + std::to_string(ckpt.config.n_classes));
    RunDir run = ctx.open_run();
    std::vector<std::string> labels;
    for (std::size_t c = 0; c < ckpt.config.n_classes; ++c)
      labels.push_back(hier ? hier->classes[c].name : "class" + std::to_string(c));
    ClusterReport rep;
    rep.similarity = readout_similarity(readout_matrix(ckpt));
    rep.dendrogram = hierarchical_cluster(rep.similarity, labels);
    rep.k = k;
    rep.flat_cut = rep.dendrogram.flat_cut(k);
    if (hier) {
      std::vector<std::size_t> supers;
      for (const auto& c : hier->classes) supers.push_back(c.superclass);
      rep.superclass_ari = adjusted_rand_index(rep.flat_cut, supers);
    }
    run.report("clusters", to_json(rep));
    run.table("clusters", to_table(rep));
    ctx.out << "clusters: " << rep.dendrogram.merges.size() << " merges";
    if (rep.superclass_ari) ctx.out << ", superclass ARI " << fmt_double(*rep.superclass_ari);
    ctx.out << "\n";
    return;
  }

  need(in.traj, "--traj");
  if (kind == "change" || kind == "stability") {
    const Trajectory tr = read_traj(in.traj, false);
    RunDir run = ctx.open_run();
    if (kind == "change") {
      const auto rep = representational_change(tr, compute_t_stable(tr));
      run.report("change", to_json(rep));
      run.table("change", to_table(rep));
    } else {
      const auto rep = stability_metrics(tr);
      run.report("stability", to_json(rep));
      run.table("stability", to_table(rep));
      if (stability_divergence_flag(rep))
        ctx.out << "warning: final relative change is not an order of magnitude below the first\n";
    }
    ctx.out << kind << ": " << tr.size() << " images\n";
    return;
  }
  if (kind == "signatures" || kind == "correct-class") {
    need(in.checkpoint, "--checkpoint");
    const Trajectory tr = read_traj(in.traj, false);
    const Checkpoint ckpt = load_checkpoint(in.checkpoint);
    require_readout_match(tr, ckpt);
    RunDir run = ctx.open_run();
    const auto idx = compute_t_stable(tr);
    const Matrix m = readout_matrix(ckpt);
    if (kind == "signatures") {
      const auto rep = signature_stats(tr, idx, m);
      run.report("signatures", to_json(rep));
      run.table("signatures", to_table(rep));
    } else {
      const auto rep = correct_class_signature(tr, idx, m);
      run.report("correct_class", to_json(rep));
      run.table("correct_class", to_table(rep));
    }
    ctx.out << kind << ": " << tr.size() << " images\n";
    return;
  }
  if (kind == "ff-norm") {
    need(in.ff_traj, "--ff-traj");
    const Trajectory ff = read_traj(in.ff_traj, false);
    const Trajectory tr = read_traj(in.traj, false);
    RunDir run = ctx.open_run();
    const auto rep = ff_norm_correlation(ff, compute_t_stable(tr));
    run.report("ff_norm", to_json(rep));
    run.table("ff_norm", to_table(rep));
    ctx.out << "ff-norm: n=" << rep.n << "\n";
    return;
  }
  throw Error("usage", "unknown analysis '" + kind + "'");
}

inline void cmd_zones_simulate(Context& ctx) {
  const auto n_classes = config_get<std::size_t>(ctx.cfg, "/analysis/zones/n_classes");
  const auto extent = config_get<double>(ctx.cfg, "/analysis/zones/extent");
  const auto resolution = config_get<std::size_t>(ctx.cfg, "/analysis/zones/resolution");
  const auto rays = config_get<std::size_t>(ctx.cfg, "/analysis/zones/rays");
  const auto radii = config_get<std::size_t>(ctx.cfg, "/analysis/zones/radii");
  const auto with_bias = config_get<bool>(ctx.cfg, "/analysis/zones/with_bias");
  const auto ratios = config_get<std::vector<double>>(ctx.cfg, "/analysis/zones/ratios");
  const auto directions = config_get<std::size_t>(ctx.cfg, "/analysis/zones/directions");
  const auto seed = config_get<std::uint64_t>(ctx.cfg, "/seed");
  if (n_classes == 0) throw Error("config", "zones: n_classes must be positive");
  RunDir run = ctx.open_run();
  Rng rng(seed);
  const ReadoutSpec spec = random_spec(n_classes, 2, rng, with_bias);
  const ZoneGrid grid = simulate_grid(spec, extent, resolution);
  const ZoneGrid free_grid = with_bias ? simulate_grid(spec.without_bias(), extent, resolution) : grid;
  const RayCheck rc = check_ray_invariance(free_grid, rays, radii, mix_seed(seed, 1));
  const double bias_norm = with_bias ? l2_norm(std::span<const double>(spec.bias)) : 1.0;
  std::vector<double> rho;
  for (double r : ratios) rho.push_back(r * bias_norm);
  const auto agreement = bias_regime_agreement(spec, rho, directions, mix_seed(seed, 2));

  json agree = json::array();
  Table at{{"ratio", "radius", "agreement"}, {}};
  for (std::size_t i = 0; i < rho.size(); ++i) {
    agree.push_back({{"ratio", ratios[i]}, {"radius", rho[i]}, {"agreement", agreement[i]}});
    at.add(ratios[i], rho[i], agreement[i]);
  }
  run.report("zone_grid", {{"kind", "zone_grid"},
                           {"n_classes", n_classes},
                           {"extent", extent},
                           {"resolution", resolution},
                           {"has_bias", with_bias},
                           {"ray_check", {{"rays", rc.rays}, {"points", rc.points}, {"mismatches", rc.mismatches}}},
                           {"agreement", agree}});
  run.table("zone_grid", to_table(grid));
  if (with_bias) run.table("zone_grid_nobias", to_table(free_grid));
  run.table("zone_agreement", at);
  ctx.out << "zones: ray check " << rc.mismatches << " mismatches over " << rc.points << " points\n";
}

inline void cmd_zones_self_check(Context& ctx, const std::string& ckpt_path) {
  const auto seed = config_get<std::uint64_t>(ctx.cfg, "/seed");
  ReadoutSpec spec;
  std::string source;
  if (!ckpt_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    spec.weights = readout_matrix(ckpt);
    if (ckpt.params.readout_bias.defined())
      for (float b : ckpt.params.readout_bias.data()) spec.bias.push_back(b);
    source = "trained";
  } else {
    const auto n = config_get<std::size_t>(ctx.cfg, "/analysis/zones/n_classes");
    const auto d = config_get<std::size_t>(ctx.cfg, "/analysis/zones/dim");
    if (n == 0 || d == 0) throw Error("config", "zones: n_classes and dim must be positive");
    Rng rng(seed);
    spec = random_spec(n, d, rng, config_get<bool>(ctx.cfg, "/analysis/zones/with_bias"));
    source = "random";
  }
  RunDir run = ctx.open_run();
  const double p = self_classification(spec);
  run.report("self_check", {{"kind", "self_check"},
                            {"source", source},
                            {"n_classes", spec.n_classes()},
                            {"dim", spec.dim()},
                            {"proportion", p}});
  Table t{{"class", "predicted"}, {}};
  for (std::size_t i = 0; i < spec.n_classes(); ++i) t.add(i, classify(spec, spec.weights.row(i)));
  run.table("self_check", t);
  ctx.out << "self-classification " << fmt_double(p) << "\n";
}

inline void cmd_zones_dim_sweep(Context& ctx, const std::string& ckpt_path) {
  const auto source = config_get<std::string>(ctx.cfg, "/analysis/sweep/source");
  const auto dims = parse_dims(config_get<std::string>(ctx.cfg, "/analysis/sweep/dims"));
  const auto n_vectors = config_get<std::size_t>(ctx.cfg, "/analysis/sweep/n_vectors");
  const auto reps = config_get<std::size_t>(ctx.cfg, "/analysis/sweep/reps");
  const auto seed = config_get<std::uint64_t>(ctx.cfg, "/seed");
  DimSweepReport rep;
  if (source == "random") {
    RunDir run = ctx.open_run();
    rep = dim_sweep_random(dims, n_vectors, reps, seed);
    run.report("dim_sweep", to_json(rep));
    run.table("dim_sweep", to_table(rep));
  } else if (source == "trained") {
    if (ckpt_path.empty()) throw Error("usage", "--source trained needs --checkpoint");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Matrix m = readout_matrix(ckpt);
    RunDir run = ctx.open_run();
    rep = dim_sweep_trained(m, dims, reps, seed);
    run.report("dim_sweep", to_json(rep));
    run.table("dim_sweep", to_table(rep));
  } else {
    throw Error("config", "unknown sweep source '" + source + "' (expected random or trained)");
  }
  ctx.out << "dim sweep: d=" << rep.rows.back().dim << " mean " << fmt_double(rep.rows.back().mean) << "\n";
}

inline void cmd_gradcheck(Context& ctx) {
  const auto fb = config_get<std::string>(ctx.cfg, "/analysis/gradcheck/feedback");
  const auto ia = config_get<std::string>(ctx.cfg, "/analysis/gradcheck/interaction");
  const auto threshold = config_get<double>(ctx.cfg, "/analysis/gradcheck/threshold");
  const auto seed = config_get<std::uint64_t>(ctx.cfg, "/seed");
  std::vector<Feedback> fbs;
  std::vector<Interaction> ias;
  if (fb == "all")
    fbs = {Feedback::lateral, Feedback::topdown};
  else
    fbs = {parse_feedback(fb)};
  if (ia == "all")
    ias = {Interaction::additive, Interaction::multiplicative};
  else
    ias = {parse_interaction(ia)};
  RunDir run = ctx.open_run();
  Table t{{"feedback", "interaction", "n_values", "max_rel_error", "worst_param", "pass"}, {}};
  std::vector<std::string> failed;
  for (auto f : fbs)
    for (auto i : ias) {
      BltConfig cfg = gradcheck_config(f, i);
      if (f == Feedback::none) cfg.timesteps = 1;
      GradcheckOptions opt;
      opt.seed = seed;
      const auto r = gradcheck(cfg, opt);
      const bool pass = r.max_rel_error < threshold;
      const std::string name = to_string(f) + "-" + to_string(i);
      run.report("gradcheck-" + name, {{"kind", "gradcheck"},
                                      {"feedback", to_string(f)},
                                      {"interaction", to_string(i)},
                                      {"n_values", r.n_values},
                                      {"max_rel_error", r.max_rel_error},
                                      {"threshold", threshold},
                                      {"pass", pass}});
      t.add(to_string(f), to_string(i), r.n_values, r.max_rel_error, r.worst_param, pass);
      ctx.out << name << ": max relative error " << fmt_double(r.max_rel_error) << (pass ? " ok" : " FAIL")
              << "\n";
      if (!pass) failed.push_back(name);
    }
  run.table("gradcheck", t);
  if (!failed.empty()) {
    std::string names;
    for (const auto& n : failed) names += (names.empty() ? "" : ",") + n;
    throw Error("gradcheck", "gradient mismatch above threshold for " + names);
  }
}

// ------------------------------------------------------------------ parser

/// Binds a flag to a config value; the override applies only when the flag
/// was given.
class Overrides {
 public:
  explicit Overrides(json& defaults) : defaults_(defaults) {}

  template <typename V>
  CLI::Option* add(CLI::App* app, const std::string& flags, const std::string& desc, const std::string& pointer) {
    auto value = std::make_shared<V>();
    auto* opt = app->add_option(flags, *value, desc);
    opt->default_str(defaults_.at(json::json_pointer(pointer)).dump());
    if constexpr (requires { value->push_back({}); } && !std::is_same_v<V, std::string>) opt->delimiter(',');
    items_.push_back({opt, [value, pointer](json& cfg) { cfg[json::json_pointer(pointer)] = *value; }});
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& flags, const std::string& desc, const std::string& pointer,
                    bool set_to) {
    auto* opt = app->add_flag(flags, desc);
    items_.push_back({opt, [pointer, set_to](json& cfg) { cfg[json::json_pointer(pointer)] = set_to; }});
    return opt;
  }

  void apply(json& cfg) const {
    for (const auto& [opt, fn] : items_)
      if (opt->count() > 0) fn(cfg);
  }

 private:
  json& defaults_;
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> items_;
};

inline std::string default_output_root() {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

/// Builds the full command tree. `dispatch` receives the selected leaf.
struct Cli {
  CLI::App app{"Recurrent convolutional classifiers and readout-zone analyses", "bltlab"};
  json defaults = default_config();
  Overrides overrides{defaults};
  std::string config_path;
  std::string out_dir;
  std::string data_path, ckpt_path, hierarchy_path;
  AnalyzeInputs analyze_in;
  std::vector<std::pair<CLI::App*, std::vector<std::string>>> leaves;

  Cli() {
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every command and exit");

    auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& desc,
                    std::vector<std::string> path) {
      auto* sub = parent->add_subcommand(name, desc);
      sub->add_option("--config", config_path, "JSON run configuration overlaid on the defaults")
          ->check(CLI::ExistingFile);
      sub->add_option("-o,--out", out_dir,
                      std::string("Output directory (default: $") + kOutputRootEnv + "/<command>, else runs/<command>)");
      leaves.push_back({sub, std::move(path)});
      return sub;
    };

    auto* synth = leaf(&app, "synth", "Generate the synthetic hierarchical image dataset", {"synth"});
    overrides.add<std::size_t>(synth, "--super", "Number of superclasses", "/dataset/super");
    overrides.add<std::size_t>(synth, "--sub", "Subclasses per superclass", "/dataset/sub");
    overrides.add<std::size_t>(synth, "--per-class", "Images per class", "/dataset/per_class");
    overrides.add<std::size_t>(synth, "--side", "Image side length in pixels", "/dataset/side");
    overrides.add<double>(synth, "--noise", "Pixel noise standard deviation in [0,1] units", "/dataset/noise_std");
    overrides.add<std::uint64_t>(synth, "--seed", "Random seed", "/seed");

    auto* train = leaf(&app, "train", "Train a network with backpropagation through time", {"train"});
    train->add_option("--data", data_path, "Dataset file (.mesd)")->required();
    overrides.add<std::vector<std::size_t>>(train, "--channels", "Channels per block, comma-separated", "/model/channels");
    overrides.add<std::size_t>(train, "--kernel", "Convolution kernel size (odd)", "/model/kernel");
    overrides.add<std::string>(train, "--feedback", "Feedback type: lateral, topdown or none", "/model/feedback");
    overrides.add<std::string>(train, "--interaction", "Feedback interaction: additive or multiplicative",
                               "/model/interaction");
    overrides.add<std::size_t>(train, "--timesteps", "Unrolled timesteps during training", "/model/timesteps");
    overrides.flag(train, "--readout-bias", "Give the linear readout a bias term", "/model/readout_bias", true);
    overrides.flag(train, "--no-norm", "Disable channel normalization", "/model/norm_enabled", false);
    overrides.add<std::size_t>(train, "--epochs", "Training epochs", "/train/epochs");
    overrides.add<std::size_t>(train, "--batch-size", "Minibatch size", "/train/batch_size");
    overrides.add<double>(train, "--lr", "Adam learning rate", "/train/lr");
    overrides.add<std::vector<double>>(train, "--loss-weights", "Per-timestep loss weights (default uniform)",
                                       "/train/loss_weights");
    overrides.add<std::size_t>(train, "--eval-every", "Validate every N epochs", "/train/eval_every");
    overrides.add<double>(train, "--clip-norm", "Global gradient-norm clip (0 disables)", "/train/clip_norm");
    overrides.add<std::vector<double>>(train, "--split-fractions", "Train,val,test fractions",
                                       "/train/split_fractions");
    overrides.add<std::uint64_t>(train, "--split-seed", "Seed of the stratified split", "/train/split_seed");
    overrides.add<std::uint64_t>(train, "--seed", "Seed for initialization and shuffling", "/seed");

    auto* rec = leaf(&app, "record", "Record per-timestep representations and predictions", {"record"});
    rec->add_option("--checkpoint", ckpt_path, "Checkpoint file (.bltc)")->required();
    rec->add_option("--data", data_path, "Dataset file (.mesd) the checkpoint was trained on")->required();
    overrides.add<std::string>(rec, "--split", "Split to record: train, val or test", "/analysis/split");
    overrides.add<std::size_t>(rec, "--t-eval", "Timesteps to unroll (0 = training value)", "/analysis/t_eval");
    overrides.flag(rec, "--logits", "Also store logits", "/analysis/logits", true);

    auto* analyze = app.add_subcommand("analyze", "Representational-dynamics analyses");
    analyze->require_subcommand(1);
    auto traj_opt = [&](CLI::App* a) {
      a->add_option("--traj", analyze_in.traj, "Trajectory file (.bltj)")->required();
    };
    auto ckpt_opt = [&](CLI::App* a) {
      a->add_option("--checkpoint", analyze_in.checkpoint, "Checkpoint file (.bltc) providing the readout")
          ->required();
    };
    auto* clusters = leaf(analyze, "clusters", "Readout similarity and average-linkage dendrogram",
                          {"analyze", "clusters"});
    ckpt_opt(clusters);
    clusters->add_option("--hierarchy", analyze_in.hierarchy, "Class hierarchy file for labels and the superclass ARI");
    overrides.add<std::size_t>(clusters, "--k", "Number of clusters in the flat cut", "/analysis/cluster_k");
    traj_opt(leaf(analyze, "change", "Representational change grouped by t_stable", {"analyze", "change"}));
    auto* sig = leaf(analyze, "signatures", "Norm and readout alignment of stable vs unstable images",
                     {"analyze", "signatures"});
    traj_opt(sig);
    ckpt_opt(sig);
    auto* cc = leaf(analyze, "correct-class", "Similarity to own vs other correct-class readouts",
                    {"analyze", "correct-class"});
    traj_opt(cc);
    ckpt_opt(cc);
    traj_opt(leaf(analyze, "stability", "Relative representational change across timesteps",
                  {"analyze", "stability"}));
    auto* ff = leaf(analyze, "ff-norm", "Correlate feedforward representation norms with t_stable",
                    {"analyze", "ff-norm"});
    ff->add_option("--ff-traj", analyze_in.ff_traj, "Trajectory of the feedforward model")->required();
    traj_opt(ff);

    auto* zones = app.add_subcommand("zones", "Readout-zone geometry simulations");
    zones->require_subcommand(1);
    auto* sim = leaf(zones, "simulate", "Classify a 2D grid and compare biased and bias-free zones",
                     {"zones", "simulate"});
    overrides.add<std::size_t>(sim, "--classes", "Number of readout rows", "/analysis/zones/n_classes");
    overrides.add<double>(sim, "--extent", "Grid covers [-extent, extent]^2", "/analysis/zones/extent");
    overrides.add<std::size_t>(sim, "--resolution", "Cells per axis (odd)", "/analysis/zones/resolution");
    overrides.add<std::size_t>(sim, "--rays", "Rays sampled for the invariance check", "/analysis/zones/rays");
    overrides.add<std::size_t>(sim, "--radii", "Points per ray", "/analysis/zones/radii");
    overrides.flag(sim, "--with-bias", "Draw a random readout bias", "/analysis/zones/with_bias", true);
    overrides.add<std::vector<double>>(sim, "--ratios", "Radii as multiples of the bias norm",
                                       "/analysis/zones/ratios");
    overrides.add<std::size_t>(sim, "--directions", "Random directions per radius", "/analysis/zones/directions");
    overrides.add<std::uint64_t>(sim, "--seed", "Random seed", "/seed");
    auto* self = leaf(zones, "self-check", "Fraction of readout vectors inside their own zone",
                      {"zones", "self-check"});
    self->add_option("--checkpoint", ckpt_path, "Use the readout of this checkpoint instead of a random one");
    overrides.add<std::size_t>(self, "--classes", "Rows of the random readout", "/analysis/zones/n_classes");
    overrides.add<std::size_t>(self, "--dim", "Dimensionality of the random readout", "/analysis/zones/dim");
    overrides.flag(self, "--with-bias", "Draw a random readout bias", "/analysis/zones/with_bias", true);
    overrides.add<std::uint64_t>(self, "--seed", "Random seed", "/seed");
    auto* sweep = leaf(zones, "dim-sweep", "Self-classification as a function of dimensionality",
                       {"zones", "dim-sweep"});
    overrides.add<std::string>(sweep, "--source", "Readout source: random or trained", "/analysis/sweep/source");
    sweep->add_option("--checkpoint", ckpt_path, "Checkpoint for --source trained");
    overrides.add<std::string>(sweep, "--dims", "Dimensionalities as lo:hi or a comma list", "/analysis/sweep/dims");
    overrides.add<std::size_t>(sweep, "--vectors", "Random readout vectors per repetition",
                               "/analysis/sweep/n_vectors");
    overrides.add<std::size_t>(sweep, "--reps", "Repetitions", "/analysis/sweep/reps");
    overrides.add<std::uint64_t>(sweep, "--seed", "Random seed", "/seed");

    auto* gc = leaf(&app, "gradcheck", "Finite-difference check of every parameter gradient", {"gradcheck"});
    overrides.add<std::string>(gc, "--feedback", "lateral, topdown, none or all", "/analysis/gradcheck/feedback");
    overrides.add<std::string>(gc, "--interaction", "additive, multiplicative or all",
                               "/analysis/gradcheck/interaction");
    overrides.add<double>(gc, "--threshold", "Maximum accepted relative error", "/analysis/gradcheck/threshold");
    overrides.add<std::uint64_t>(gc, "--seed", "Random seed", "/seed");
  }

  std::pair<CLI::App*, std::vector<std::string>> selected() const {
    for (const auto& [sub, path] : leaves)
      if (sub->parsed()) return {sub, path};
    return {nullptr, {}};
  }
};

inline void dispatch(Cli& cli, Context& ctx, const std::vector<std::string>& path) {
  const std::string& head = path.front();
  if (head == "synth") return cmd_synth(ctx);
  if (head == "train") return cmd_train(ctx, cli.data_path);
  if (head == "record") return cmd_record(ctx, cli.ckpt_path, cli.data_path);
  if (head == "analyze") return cmd_analyze(ctx, path[1], cli.analyze_in);
  if (head == "zones") {
    if (path[1] == "simulate") return cmd_zones_simulate(ctx);
    if (path[1] == "self-check") return cmd_zones_self_check(ctx, cli.ckpt_path);
    return cmd_zones_dim_sweep(ctx, cli.ckpt_path);
  }
  if (head == "gradcheck") return cmd_gradcheck(ctx);
}

/// Runs one command; `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Cli cli;
  try {
    std::reverse(args.begin(), args.end());
    cli.app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return cli.app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    cli.app.exit(e, out, err);
    return 2;
  }

  const auto [leaf, path] = cli.selected();
  if (!leaf) {
    err << cli.app.help();
    return 2;
  }
  try {
    json cfg = cli.defaults;
    if (!cli.config_path.empty()) {
      json file;
      try {
        file = json::parse(read_text_file(cli.config_path));
      } catch (const json::exception& e) {
        throw Error("config", "cannot parse " + cli.config_path + ": " + e.what());
      }
      merge_config(cfg, file);
    }
    cli.overrides.apply(cfg);
    std::string joined;
    for (const auto& p : path) joined += (joined.empty() ? "" : "-") + p;
    const fs::path out_dir = cli.out_dir.empty() ? fs::path(default_output_root()) / joined : fs::path(cli.out_dir);
    Context ctx{out, cfg, path, out_dir};
    dispatch(cli, ctx, path);
  } catch (const Error& e) {
    if (e.code() == "usage") {
      err << e.what() << "\n" << leaf->help();
      return 2;
    }
    err << "error: code=" << e.code() << " message=" << quote(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: code=internal message=" << quote(e.what()) << "\n";
    return 1;
  }
  return 0;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}

}  // namespace bltlab::cli
