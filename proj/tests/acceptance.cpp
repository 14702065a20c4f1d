// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "bltlab/cli.hpp"
#include "bltlab/gradcheck.hpp"

using namespace bltlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

fs::path work_dir() {
  const auto p = fs::current_path() / "acceptance_runs";
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli_call(std::vector<std::string> args, std::string* err = nullptr) {
  std::ostringstream out, e;
  const int code = cli::run(std::move(args), out, e);
  if (err) *err = e.str();
  return code;
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  const double start = cpu_seconds();
  double worst = 0;
  std::string where;
  for (auto fb : {Feedback::lateral, Feedback::topdown})
    for (auto ia : {Interaction::additive, Interaction::multiplicative}) {
      const auto r = gradcheck(gradcheck_config(fb, ia));
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        where = to_string(fb) + "/" + to_string(ia) + " " + r.worst_param;
      }
    }
  const double secs = cpu_seconds() - start;
  return {worst < 1e-4 && secs < 120,
          "max relative error " + fmt(worst) + " (" + where + "), " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome geometry_invariants() {
  const double start = cpu_seconds();
  Rng rng(2024);
  auto vec = [&](std::size_t d) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    return v;
  };
  auto scores = [](const ReadoutSpec& s, const std::vector<double>& r) {
    std::vector<double> o(s.n_classes());
    for (std::size_t i = 0; i < o.size(); ++i) {
      for (std::size_t k = 0; k < r.size(); ++k) o[i] += s.weights(i, k) * r[k];
      if (s.has_bias()) o[i] += s.bias[i];
    }
    return o;
  };
  std::size_t scale_fail = 0, softmax_fail = 0, cone_fail = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 1 + rng.below(10);
    const auto s = random_spec(2 + rng.below(10), d, rng);
    auto r = vec(d);
    const auto base = classify(s, r);
    const double alpha = std::exp(rng.uniform(-6, 6));
    for (double& x : r) x *= alpha;
    scale_fail += classify(s, r) != base;
  }
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 1 + rng.below(10);
    const auto s = random_spec(2 + rng.below(10), d, rng, true);
    const auto r = vec(d);
    auto o = scores(s, r);
    const double mx = *std::max_element(o.begin(), o.end());
    double z = 0;
    for (double& v : o) z += (v = std::exp(v - mx));
    std::size_t best = 0;
    for (std::size_t c = 1; c < o.size(); ++c)
      if (o[c] / z > o[best] / z) best = c;
    softmax_fail += classify(s, r) != best;
  }
  int pairs = 0;
  while (pairs < 10000) {
    const std::size_t d = 2 + rng.below(6);
    const auto s = random_spec(2 + rng.below(6), d, rng);
    const auto a = vec(d), b = vec(d);
    const auto c = classify(s, a);
    if (classify(s, b) != c) continue;
    bool strict = true;
    for (const auto* r : {&a, &b}) {
      const auto o = scores(s, *r);
      for (std::size_t k = 0; k < o.size(); ++k)
        if (k != c && !(o[c] > o[k])) strict = false;
    }
    if (!strict) continue;
    std::vector<double> sum(d);
    for (std::size_t k = 0; k < d; ++k) sum[k] = a[k] + b[k];
    cone_fail += classify(s, sum) != c;
    ++pairs;
  }
  const double secs = cpu_seconds() - start;
  return {scale_fail + softmax_fail + cone_fail == 0 && secs < 30,
          "violations scale=" + std::to_string(scale_fail) + " softmax=" + std::to_string(softmax_fail) +
              " cone=" + std::to_string(cone_fail) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 3

Outcome dim_sweep() {
  const double start = cpu_seconds();
  std::vector<std::size_t> dims(50);
  std::iota(dims.begin(), dims.end(), 1);
  const auto rep = dim_sweep_random(dims, 100, 100, 1);
  const double d1 = rep.rows[0].mean, d30 = rep.rows[29].mean, d50 = rep.rows[49].mean;
  const double secs = cpu_seconds() - start;
  return {d1 >= 0.01 && d1 <= 0.03 && d30 >= 0.999 && d50 == 1.0 && secs < 60,
          "d=1 " + fmt(d1) + ", d=30 " + fmt(d30) + ", d=50 " + fmt(d50) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 4

Outcome zone_simulation() {
  const double start = cpu_seconds();
  Rng fixture_rng(0);
  const auto fixture = random_spec(4, 2, fixture_rng, true);
  const auto rays = check_ray_invariance(simulate_grid(fixture.without_bias()), 100, 10, 1);

  const double bn = l2_norm(std::span<const double>(fixture.bias));
  std::vector<double> radii;
  for (double ratio : {0.5, 1.0, 2.0, 5.0, 10.0, 30.0}) radii.push_back(ratio * bn);
  const auto curve = bias_regime_agreement(fixture, radii, 1000, 2);
  const bool monotone = std::is_sorted(curve.begin(), curve.end());

  Rng rng(30);
  double at30 = 0;
  for (int k = 0; k < 100; ++k) {
    const auto s = random_spec(4, 2, rng, true);
    const std::vector<double> r{30 * l2_norm(std::span<const double>(s.bias))};
    at30 += bias_regime_agreement(s, r, 1000, 1000 + k)[0] / 100;
  }
  const double secs = cpu_seconds() - start;
  std::string c;
  for (double a : curve) c += (c.empty() ? "" : " ") + fmt(a);
  return {rays.mismatches == 0 && rays.points == 1000 && monotone && at30 >= 0.95 && secs < 60,
          "ray mismatches " + std::to_string(rays.mismatches) + "/" + std::to_string(rays.points) +
              ", fixture agreement [" + c + "], mean agreement at 30x " + fmt(at30) + ", " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------- 5

Outcome t_stable_exhaustive() {
  Trajectory tr;
  tr.timesteps = 10;
  tr.repr_dim = 1;
  tr.n_classes = 2;
  for (unsigned mask = 0; mask < 1024; ++mask) {
    TrajectoryRecord r;
    r.image_id = mask;
    for (int t = 0; t < 10; ++t) r.predicted.push_back((mask >> t) & 1 ? 0 : 1);
    r.representations.assign(10, 0.0f);
    tr.records.push_back(r);
  }
  const auto idx = compute_t_stable(tr);
  std::size_t mismatches = 0;
  for (unsigned mask = 0; mask < 1024; ++mask) {
    std::optional<std::size_t> expected;
    for (std::size_t t = 0; t < 10 && !expected; ++t) {
      bool all = true;
      for (std::size_t u = t; u < 10; ++u) all = all && ((mask >> u) & 1);
      if (all) expected = t;
    }
    mismatches += idx.t_stable[mask] != expected;
  }
  return {mismatches == 0, std::to_string(1024 - mismatches) + "/1024 patterns agree"};
}

// ---------------------------------------------------------------- 6

struct Oracles {
  const Trajectory& tr;
  const Matrix& m;

  std::vector<double> v(std::size_t i, std::size_t t) const {
    std::vector<double> out;
    for (std::size_t k = 0; k < tr.repr_dim; ++k) out.push_back(tr.records[i].representations[t * tr.repr_dim + k]);
    return out;
  }
  std::vector<double> row(std::size_t r) const {
    return std::vector<double>(m.data.begin() + r * m.cols, m.data.begin() + (r + 1) * m.cols);
  }
  static double norm(const std::vector<double>& a) {
    double s = 0;
    for (double x : a) s += x * x;
    return std::sqrt(s);
  }
  static double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  }
  static double cos(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s / (norm(a) * norm(b));
  }
  static double mean(const std::vector<double>& x) {
    double s = 0;
    for (double a : x) s += a;
    return s / x.size();
  }
  static double sem(const std::vector<double>& x) {
    if (x.size() < 2) return 0;
    const double mu = mean(x);
    double ss = 0;
    for (double a : x) ss += (a - mu) * (a - mu);
    return std::sqrt(ss / (x.size() - 1)) / std::sqrt(double(x.size()));
  }
  std::optional<std::size_t> t_stable(std::size_t i) const {
    const auto& r = tr.records[i];
    for (std::size_t t = 0; t < tr.timesteps; ++t) {
      bool ok = true;
      for (std::size_t u = t; u < tr.timesteps; ++u) ok = ok && r.predicted[u] == r.true_label;
      if (ok) return t;
    }
    return std::nullopt;
  }
};

Outcome analysis_oracles() {
  const std::size_t n = 50, T = 8, d_r = 16, d_o = 10;
  Rng rng(66);
  Trajectory tr{T, d_r, d_o, false, {}};
  for (std::size_t i = 0; i < n; ++i) {
    TrajectoryRecord r;
    r.image_id = i;
    r.true_label = static_cast<std::uint32_t>(rng.below(d_o));
    for (std::size_t t = 0; t < T; ++t)
      r.predicted.push_back(rng.uniform() < 0.7 ? r.true_label : static_cast<std::uint32_t>(rng.below(d_o)));
    for (std::size_t k = 0; k < T * d_r; ++k) r.representations.push_back(static_cast<float>(rng.normal()));
    tr.records.push_back(r);
  }
  Matrix m(d_o, d_r);
  for (double& x : m.data) x = rng.normal();
  const Oracles o{tr, m};
  const auto idx = compute_t_stable(tr);
  double err = 0;
  auto track = [&](double a, double b) { err = std::max(err, std::abs(a - b)); };

  const auto change = representational_change(tr, idx);
  for (std::size_t g = 0; g < T; ++g) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (o.t_stable(i) == g) members.push_back(i);
    if (change.groups[g].count != members.size()) err = 1e9;
    if (members.empty()) continue;
    for (std::size_t t = 0; t + 1 < T; ++t) {
      std::vector<double> d;
      for (auto i : members) d.push_back(Oracles::dist(o.v(i, t + 1), o.v(i, t)));
      track(change.groups[g].transitions[t].mean, Oracles::mean(d));
      track(change.groups[g].transitions[t].sem, Oracles::sem(d));
    }
  }

  const auto sig = signature_stats(tr, idx, m);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> nv[2], cv[2];
    for (std::size_t i = 0; i < n; ++i) {
      const auto ts = o.t_stable(i);
      if (!ts) continue;
      const int g = *ts <= t ? 0 : 1;
      nv[g].push_back(Oracles::norm(o.v(i, t)));
      cv[g].push_back(Oracles::cos(o.v(i, t), o.row(tr.records[i].predicted[t])));
    }
    const GroupStats* gs[2] = {&sig.steps[t].stable, &sig.steps[t].unstable};
    for (int g = 0; g < 2; ++g) {
      if (nv[g].empty()) continue;
      track(gs[g]->norm.mean, Oracles::mean(nv[g]));
      track(gs[g]->norm.sem, Oracles::sem(nv[g]));
      track(gs[g]->cosine.mean, Oracles::mean(cv[g]));
      track(gs[g]->cosine.sem, Oracles::sem(cv[g]));
    }
  }

  const auto cc = correct_class_signature(tr, idx, m);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> self, other;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ri = tr.records[i];
      if (!o.t_stable(i) || ri.predicted[t] == ri.true_label) continue;
      std::vector<std::size_t> zone;
      std::set<std::uint32_t> classes;
      for (std::size_t j = 0; j < n; ++j) {
        const auto& rj = tr.records[j];
        if (o.t_stable(j) && rj.predicted[t] != rj.true_label && rj.predicted[t] == ri.predicted[t]) {
          zone.push_back(j);
          classes.insert(rj.true_label);
        }
      }
      if (classes.size() < 2) continue;
      self.push_back(Oracles::cos(o.v(i, t), o.row(ri.true_label)));
      std::vector<double> oc;
      for (auto j : zone)
        if (tr.records[j].true_label != ri.true_label) oc.push_back(Oracles::cos(o.v(i, t), o.row(tr.records[j].true_label)));
      other.push_back(Oracles::mean(oc));
    }
    if (cc.steps[t].n_members != self.size()) err = 1e9;
    if (self.empty()) continue;
    track(*cc.steps[t].self_mean, Oracles::mean(self));
    track(*cc.steps[t].other_mean, Oracles::mean(other));
  }

  const auto stab = stability_metrics(tr);
  for (std::size_t t = 1; t < T; ++t) {
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i)
      v.push_back(std::log10(Oracles::dist(o.v(i, t), o.v(i, t - 1))) - std::log10(Oracles::norm(o.v(i, t - 1))));
    track(stab.steps[t - 1].mean_relative_change, Oracles::mean(v));
  }

  const auto sim = readout_similarity(m);
  for (std::size_t i = 0; i < d_o; ++i)
    for (std::size_t j = 0; j < d_o; ++j) track(sim(i, j), Oracles::cos(o.row(i), o.row(j)));

  Trajectory ff{1, d_r, d_o, false, {}};
  for (std::size_t i = n; i-- > 0;) {
    TrajectoryRecord r;
    r.image_id = i;
    r.true_label = tr.records[i].true_label;
    r.predicted = {r.true_label};
    for (std::size_t k = 0; k < d_r; ++k) r.representations.push_back(static_cast<float>(rng.normal()));
    ff.records.push_back(r);
  }
  const auto ffr = ff_norm_correlation(ff, idx);
  std::vector<double> norms, ts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = o.t_stable(i);
    if (!t) continue;
    ts.push_back(double(*t));
    std::vector<double> v(ff.records[n - 1 - i].representations.begin(), ff.records[n - 1 - i].representations.end());
    norms.push_back(Oracles::norm(v));
  }
  auto pearson_oracle = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = Oracles::mean(a), mb = Oracles::mean(b);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      sab += (a[i] - ma) * (b[i] - mb), saa += (a[i] - ma) * (a[i] - ma), sbb += (b[i] - mb) * (b[i] - mb);
    return sab / std::sqrt(saa * sbb);
  };
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r;
    for (double a : v) {
      double less = 0, eq = 0;
      for (double b : v) less += b < a, eq += b == a;
      r.push_back(1 + less + (eq - 1) / 2);
    }
    return r;
  };
  if (ffr.n != norms.size()) err = 1e9;
  track(*ffr.pearson.value, pearson_oracle(norms, ts));
  track(*ffr.spearman.value, pearson_oracle(ranks(norms), ranks(ts)));

  // average linkage against a from-scratch recomputation of cluster distances
  std::size_t cluster_mismatch = 0;
  double height_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(7);
    Matrix w(k, 5);
    for (double& x : w.data) x = rng.normal();
    const auto s = readout_similarity(w);
    const auto dg = hierarchical_cluster(s);
    std::map<std::size_t, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < k; ++i) clusters[i] = {i};
    for (std::size_t step = 0; step + 1 < k; ++step) {
      double best = 1e300;
      std::size_t ba = 0, bb = 0;
      for (auto& [a, la] : clusters)
        for (auto& [b, lb] : clusters) {
          if (b <= a) continue;
          double d = 0;
          for (auto x : la)
            for (auto y : lb) d += 1 - s(x, y);
          d /= double(la.size() * lb.size());
          if (d < best) best = d, ba = a, bb = b;
        }
      cluster_mismatch += dg.merges[step].a != ba || dg.merges[step].b != bb;
      height_err = std::max(height_err, std::abs(dg.merges[step].height - best));
      auto merged = clusters[ba];
      merged.insert(merged.end(), clusters[bb].begin(), clusters[bb].end());
      clusters.erase(ba);
      clusters.erase(bb);
      clusters[k + step] = merged;
    }
  }
  return {err <= 1e-6 && cluster_mismatch == 0 && height_err <= 1e-12,
          "max abs deviation " + fmt(err) + ", dendrogram merge mismatches " + std::to_string(cluster_mismatch) +
              " over 200 trees (height deviation " + fmt(height_err) + ")"};
}

// ---------------------------------------------------------------- 7, 8

struct DeskRun {
  fs::path dir;
  bool trained = false;
};

Outcome desk_scale(DeskRun& run, const fs::path& root) {
  const auto dir = root / "desk";
  run.dir = dir;
  const auto s = json::parse(read_text_file(std::string(BLTLAB_SOURCE_DIR) + "/schemas/reports.schema.json"));
  std::string err;
  const double start = cpu_seconds();
  if (cli_call({"synth", "--super", "2", "--sub", "5", "--per-class", "100", "--side", "16", "--seed", "0", "-o",
                (dir / "data").string()}, &err) != 0)
    return {false, "synth failed: " + err};
  const auto mesd = (dir / "data" / "dataset.mesd").string();
  if (cli_call({"train", "--data", mesd, "--feedback", "lateral", "--interaction", "additive", "--timesteps", "5",
                "--epochs", "10", "--seed", "0", "-o", (dir / "rnn").string()}, &err) != 0)
    return {false, "train failed: " + err};
  const double train_secs = cpu_seconds() - start;
  const auto ckpt_path = (dir / "rnn" / "model.bltc").string();
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto ds = read_dataset(mesd);
  const double acc = evaluate(ckpt, ds, SplitPart::test).back();
  run.trained = true;

  if (cli_call({"train", "--data", mesd, "--feedback", "none", "--timesteps", "1", "--epochs", "10", "--seed", "0",
                "-o", (dir / "ff").string()}, &err) != 0)
    return {false, "feedforward train failed: " + err};
  if (cli_call({"record", "--checkpoint", ckpt_path, "--data", mesd, "--split", "test", "-o", (dir / "rec").string()},
               &err) != 0 ||
      cli_call({"record", "--checkpoint", (dir / "ff" / "model.bltc").string(), "--data", mesd, "--split", "test",
                "-o", (dir / "recff").string()}, &err) != 0)
    return {false, "record failed: " + err};
  const auto traj = (dir / "rec" / "trajectory.bltj").string();
  const std::vector<std::pair<std::vector<std::string>, std::string>> analyses{
      {{"clusters", "--checkpoint", ckpt_path, "--hierarchy", (dir / "data" / "dataset.hierarchy").string()},
       "clusters"},
      {{"change", "--traj", traj}, "change"},
      {{"signatures", "--traj", traj, "--checkpoint", ckpt_path}, "signatures"},
      {{"correct-class", "--traj", traj, "--checkpoint", ckpt_path}, "correct_class"},
      {{"stability", "--traj", traj}, "stability"},
      {{"ff-norm", "--traj", traj, "--ff-traj", (dir / "recff" / "trajectory.bltj").string()}, "ff_norm"},
  };
  std::size_t valid = 0;
  std::optional<double> ari;
  std::string failures;
  for (auto [args, name] : analyses) {
    const auto out = dir / ("analyze-" + name);
    args.insert(args.begin(), "analyze");
    args.insert(args.end(), {"-o", out.string()});
    if (cli_call(args, &err) != 0) {
      failures += " " + name + ": " + err;
      continue;
    }
    try {
      const auto rep = json::parse(read_text_file((out / "reports" / (name + ".json")).string()));
      validate_report(rep, s);
      ++valid;
      if (name == "clusters" && rep["superclass_ari"].is_number()) ari = rep["superclass_ari"].get<double>();
    } catch (const std::exception& e) {
      failures += " " + name + ": " + e.what();
    }
  }
  return {acc >= 0.6 && train_secs < 600 && valid == analyses.size(),
          "final-timestep test accuracy " + fmt(acc) + ", training " + fmt(train_secs) + " CPU s, " +
              std::to_string(valid) + "/6 reports valid, 2-cluster superclass ARI " +
              (ari ? fmt(*ari) : std::string("n/a")) + failures};
}

// Recomputes the relative-change metric with the identical sequence of
// floating-point operations so the comparison can be exact.
std::vector<double> relative_change_oracle(const Trajectory& tr) {
  std::vector<double> out;
  for (std::size_t t = 1; t < tr.timesteps; ++t) {
    double acc = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const auto a = tr.repr(i, t), b = tr.repr(i, t - 1);
      double dd = 0, nn = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        dd += d * d;
      }
      for (std::size_t k = 0; k < b.size(); ++k) nn += static_cast<double>(b[k]) * static_cast<double>(b[k]);
      double change = std::sqrt(dd), prev = std::sqrt(nn);
      if (change == 0.0) change = kLogFloor;
      if (prev == 0.0) prev = kLogFloor;
      acc += std::log10(change) - std::log10(prev);
    }
    out.push_back(tr.size() ? acc / static_cast<double>(tr.size()) : 0.0);
  }
  return out;
}

Outcome stability_unrolling(const DeskRun& run) {
  if (!run.trained) return {false, "no trained model from the desk-scale run"};
  const auto ckpt = load_checkpoint((run.dir / "rnn" / "model.bltc").string());
  const auto ds = read_dataset((run.dir / "data" / "dataset.mesd").string());
  const auto idx = checkpoint_split(ckpt, ds, SplitPart::test);
  std::string detail;
  bool exact = true;
  for (int which = 0; which < 2; ++which) {
    const auto params = which == 0 ? ckpt.params : init_params<float>(ckpt.config, 12345);
    const auto tr = record(params, ckpt.config, ds, idx, 40, false);
    const auto rep = stability_metrics(tr);
    const auto oracle = relative_change_oracle(tr);
    for (std::size_t t = 0; t < oracle.size(); ++t) exact = exact && rep.steps[t].mean_relative_change == oracle[t];
    detail += std::string(which == 0 ? "trained" : "random-init") + ": t=1 " +
              fmt(rep.steps.front().mean_relative_change) + ", t=39 " + fmt(rep.steps.back().mean_relative_change) +
              (stability_divergence_flag(rep) ? " [divergence flag]" : "") + "; ";
  }
  return {exact, detail + (exact ? "oracle equality exact" : "oracle mismatch")};
}

// ---------------------------------------------------------------- 9

std::map<std::string, std::vector<unsigned char>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<unsigned char>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file_bytes(e.path().string());
  return files;
}

bool pipeline(const fs::path& dir, std::string& err) {
  const auto mesd = (dir / "data" / "dataset.mesd").string();
  const auto rnn = (dir / "rnn" / "model.bltc").string();
  const auto traj = (dir / "rec" / "trajectory.bltj").string();
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--per-class", "30", "--side", "12", "--seed", "5", "-o", (dir / "data").string()},
      {"train", "--data", mesd, "--channels", "4,8", "--timesteps", "3", "--epochs", "10", "--seed", "5", "-o",
       (dir / "rnn").string()},
      {"train", "--data", mesd, "--channels", "4,8", "--feedback", "none", "--timesteps", "1", "--epochs", "2",
       "--seed", "5", "-o", (dir / "ff").string()},
      {"record", "--checkpoint", rnn, "--data", mesd, "--t-eval", "6", "--logits", "-o", (dir / "rec").string()},
      {"record", "--checkpoint", (dir / "ff" / "model.bltc").string(), "--data", mesd, "-o", (dir / "recff").string()},
      {"analyze", "clusters", "--checkpoint", rnn, "--hierarchy", (dir / "data" / "dataset.hierarchy").string(), "-o",
       (dir / "a-clusters").string()},
      {"analyze", "change", "--traj", traj, "-o", (dir / "a-change").string()},
      {"analyze", "signatures", "--traj", traj, "--checkpoint", rnn, "-o", (dir / "a-signatures").string()},
      {"analyze", "correct-class", "--traj", traj, "--checkpoint", rnn, "-o", (dir / "a-correct").string()},
      {"analyze", "stability", "--traj", traj, "-o", (dir / "a-stability").string()},
      {"analyze", "ff-norm", "--traj", traj, "--ff-traj", (dir / "recff" / "trajectory.bltj").string(), "-o",
       (dir / "a-ffnorm").string()},
  };
  for (const auto& s : steps)
    if (cli_call(s, &err) != 0) return false;
  return true;
}

Outcome determinism(const fs::path& root) {
  // each run uses the same relative layout so resolved configs compare equal
  const auto cwd = fs::current_path();
  std::map<std::string, std::vector<unsigned char>> snaps[2];
  for (int k = 0; k < 2; ++k) {
    const auto base = root / ("determinism-" + std::to_string(k));
    fs::create_directories(base);
    fs::current_path(base);
    std::string err;
    const bool ok = pipeline("run", err);
    fs::current_path(cwd);
    if (!ok) return {false, "pipeline failed: " + err};
    snaps[k] = snapshot(base / "run");
  }
  std::size_t differing = 0, binaries = 0, reports = 0;
  std::string first;
  for (const auto& [name, bytes] : snaps[0]) {
    const auto it = snaps[1].find(name);
    if (it == snaps[1].end() || it->second != bytes) {
      if (!differing++) first = name;
    }
    const auto ext = fs::path(name).extension().string();
    binaries += ext == ".mesd" || ext == ".bltc" || ext == ".bltj";
    reports += name.find("reports") != std::string::npos;
  }
  const bool same_set = snaps[0].size() == snaps[1].size();
  return {differing == 0 && same_set && binaries == 5 && reports == 6,
          std::to_string(snaps[0].size()) + " files compared (" + std::to_string(binaries) + " binary, " +
              std::to_string(reports) + " reports), " + std::to_string(differing) + " differ" +
              (first.empty() ? "" : " (first: " + first + ")")};
}

// ---------------------------------------------------------------- 10

struct Format {
  std::string name;
  std::vector<unsigned char> valid;
  std::function<void(const std::string&)> read;
};

Outcome format_robustness(const fs::path& root) {
  const auto dir = root / "fuzz";
  fs::create_directories(dir);
  SynthOptions so;
  so.n_sub_per_super = 2;
  so.n_per_class = 5;
  so.side = 8;
  so.seed = 3;
  const auto ds = synth_generate(so).dataset;
  BltConfig cfg;
  cfg.channels = {4, 6};
  cfg.timesteps = 2;
  cfg.input_height = cfg.input_width = 8;
  cfg.n_classes = ds.header.n_classes;
  TrainConfig tc;
  tc.epochs = 1;
  const auto ckpt = train(cfg, tc, ds).best;
  const auto tr = record(ckpt, ds, SplitPart::train, 3, true);

  std::vector<Format> formats{
      {"mesd", encode_dataset(ds), [](const std::string& p) { read_dataset(p); }},
      {"bltc", encode_checkpoint(ckpt), [](const std::string& p) { load_checkpoint(p); }},
      {"bltj", encode_trajectory(tr), [](const std::string& p) { read_traj(p); }},
  };

  Rng rng(10);
  std::size_t crashes = 0, targeted_fail = 0, files = 0, rejected = 0;
  std::string notes;
  for (const auto& f : formats) {
    auto attempt = [&](const std::vector<unsigned char>& bytes, std::string* code) {
      const auto path = (dir / ("case." + f.name)).string();
      write_file_bytes(path, bytes);
      ++files;
      try {
        f.read(path);
        return true;
      } catch (const Error& e) {
        if (code) *code = e.code();
        ++rejected;
        return false;
      } catch (const std::exception& e) {
        ++crashes;
        notes += " " + f.name + " threw " + e.what();
        return false;
      }
    };
    // targeted corruptions with their expected structured codes
    auto expect = [&](std::vector<unsigned char> bytes, const std::string& want) {
      std::string code;
      if (attempt(bytes, &code) || code != want) {
        ++targeted_fail;
        notes += " " + f.name + " expected " + want + " got " + (code.empty() ? "success" : code);
      }
    };
    auto magic = f.valid;
    magic[1] ^= 0x20;
    expect(magic, "bad_magic");
    auto version = f.valid;
    version[4] += 1;
    expect(version, "bad_version");
    auto truncated = f.valid;
    truncated.resize(f.valid.size() / 2);
    expect(truncated, "truncated");
    expect({}, "truncated");

    for (int k = 0; k < 150; ++k) {
      auto b = f.valid;
      switch (rng.below(5)) {
        case 0:  // flip a handful of bytes anywhere
          for (std::size_t n = 1 + rng.below(8); n-- > 0;) b[rng.below(b.size())] ^= static_cast<unsigned char>(1 + rng.below(255));
          break;
        case 1:  // clobber the header region
          for (std::size_t n = 1 + rng.below(4); n-- > 0;) b[rng.below(std::min<std::size_t>(b.size(), 64))] = static_cast<unsigned char>(rng.below(256));
          break;
        case 2:
          b.resize(rng.below(b.size()));
          break;
        case 3:
          for (std::size_t n = 1 + rng.below(16); n-- > 0;) b.push_back(static_cast<unsigned char>(rng.below(256)));
          break;
        default:  // 0xff runs produce huge counts and lengths
          for (std::size_t at = rng.below(b.size()), n = 4; n-- > 0 && at < b.size(); ++at) b[at] = 0xff;
          break;
      }
      attempt(b, nullptr);
    }
  }
  return {crashes == 0 && targeted_fail == 0,
          std::to_string(files) + " corrupted files, " + std::to_string(rejected) + " rejected with structured errors, " +
              std::to_string(crashes) + " crashes, " + std::to_string(targeted_fail) + " targeted mismatches" + notes};
}

}  // namespace

int main() {
  const auto root = work_dir();
  DeskRun desk;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"readout geometry invariants", geometry_invariants},
      {"dimensionality sweep", dim_sweep},
      {"zone simulation", zone_simulation},
      {"t_stable exhaustive oracle", t_stable_exhaustive},
      {"analysis oracle equivalence", analysis_oracles},
      {"end-to-end desk-scale run", [&] { return desk_scale(desk, root); }},
      {"stability unrolling", [&] { return stability_unrolling(desk); }},
      {"determinism", [&] { return determinism(root); }},
      {"format robustness", [&] { return format_robustness(root); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
