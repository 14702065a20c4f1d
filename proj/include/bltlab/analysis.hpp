#pragma once

// Representational-dynamics analyses over recorded trajectories.
//
// Conventions shared by every analysis:
//  * norms and cosines are evaluated in double precision;
//  * the cosine with a zero vector is defined as 0;
//  * sem is the sample standard deviation over sqrt(n), and 0 when n < 2;
//  * t_stable-based analyses only consider images whose t_stable exists.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bltlab/common.hpp"
#include "bltlab/trajectory.hpp"

namespace bltlab {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(data).subspan(i * cols, cols); }

  template <typename T>
  static Matrix from(std::size_t r, std::size_t c, std::span<const T> values) {
    if (values.size() != r * c) throw Error("shape", "matrix: value count does not match shape");
    Matrix m(r, c);
    std::copy(values.begin(), values.end(), m.data.begin());
    return m;
  }

  bool operator==(const Matrix&) const = default;
};

/// Readout matrix M of a checkpoint, as doubles.
inline Matrix readout_matrix(const Checkpoint& ckpt) {
  const auto& m = ckpt.params.readout;
  return Matrix::from<float>(m.dim(0), m.dim(1), m.data());
}

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename A>
double l2_norm(std::span<const A> a) {
  return std::sqrt(dot(a, a));
}

template <typename A, typename B>
double l2_distance(std::span<const A> a, std::span<const B> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

template <typename A, typename B>
double cosine(std::span<const A> a, std::span<const B> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

struct MeanSem {
  std::size_t count = 0;
  double mean = 0;
  double sem = 0;
};

inline MeanSem mean_sem(std::span<const double> xs) {
  MeanSem out;
  out.count = xs.size();
  if (xs.empty()) return out;
  double s = 0;
  for (double x : xs) s += x;
  out.mean = s / static_cast<double>(xs.size());
  if (xs.size() >= 2) {
    double ss = 0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.sem = std::sqrt(ss / static_cast<double>(xs.size() - 1)) / std::sqrt(static_cast<double>(xs.size()));
  }
  return out;
}

// ---------------------------------------------------------------- t_stable

struct StabilityIndex {
  std::size_t timesteps = 0;
  std::vector<std::uint64_t> image_ids;
  std::vector<std::optional<std::size_t>> t_stable;

  std::size_t count_stable() const {
    return static_cast<std::size_t>(std::count_if(t_stable.begin(), t_stable.end(),
                                                  [](const auto& v) { return v.has_value(); }));
  }
};

/// Earliest timestep from which every prediction through the end is correct.
inline std::optional<std::size_t> t_stable_of(const std::vector<bool>& correct) {
  if (correct.empty() || !correct.back()) return std::nullopt;
  std::size_t k = correct.size() - 1;
  while (k > 0 && correct[k - 1]) --k;
  return k;
}

inline StabilityIndex compute_t_stable(const Trajectory& tr) {
  StabilityIndex idx;
  idx.timesteps = tr.timesteps;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    std::vector<bool> correct(tr.timesteps);
    for (std::size_t t = 0; t < tr.timesteps; ++t) correct[t] = tr.correct(i, t);
    idx.image_ids.push_back(tr.records[i].image_id);
    idx.t_stable.push_back(t_stable_of(correct));
  }
  return idx;
}

inline void require_index_matches(const Trajectory& tr, const StabilityIndex& idx, const char* op) {
  if (idx.t_stable.size() != tr.size() || idx.timesteps != tr.timesteps)
    throw Error("shape", std::string(op) + ": stability index does not belong to this trajectory");
}

// ------------------------------------------------------ representational change

struct ChangeGroup {
  std::size_t t_stable = 0;
  std::size_t count = 0;
  std::vector<MeanSem> transitions;  // [T-1], entry t covers t -> t+1
};

struct ChangeReport {
  std::size_t timesteps = 0;
  std::size_t n_images = 0;  // stable images considered
  std::vector<ChangeGroup> groups;  // one per t_stable value 0..T-1
};

inline ChangeReport representational_change(const Trajectory& tr, const StabilityIndex& idx) {
  require_index_matches(tr, idx, "representational_change");
  ChangeReport rep;
  rep.timesteps = tr.timesteps;
  rep.n_images = idx.count_stable();
  const std::size_t n_trans = tr.timesteps > 0 ? tr.timesteps - 1 : 0;
  std::vector<std::vector<std::vector<double>>> values(tr.timesteps, std::vector<std::vector<double>>(n_trans));
  std::vector<std::size_t> counts(tr.timesteps, 0);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    if (!idx.t_stable[i]) continue;
    const std::size_t g = *idx.t_stable[i];
    ++counts[g];
    for (std::size_t t = 0; t < n_trans; ++t) values[g][t].push_back(l2_distance(tr.repr(i, t + 1), tr.repr(i, t)));
  }
  for (std::size_t g = 0; g < tr.timesteps; ++g) {
    ChangeGroup group;
    group.t_stable = g;
    group.count = counts[g];
    if (counts[g] > 0)
      for (std::size_t t = 0; t < n_trans; ++t) group.transitions.push_back(mean_sem(values[g][t]));
    rep.groups.push_back(std::move(group));
  }
  return rep;
}

// ------------------------------------------------------------- signatures

struct GroupStats {
  MeanSem norm;
  MeanSem cosine;
  bool empty = true;
};

struct SignatureStep {
  std::size_t t = 0;
  GroupStats stable;    // t_stable <= t
  GroupStats unstable;  // t_stable > t
};

struct SignatureReport {
  std::size_t timesteps = 0;
  std::size_t n_images = 0;
  std::vector<SignatureStep> steps;
};

inline void require_readout(const Trajectory& tr, const Matrix& readout, const char* op) {
  if (readout.cols != tr.repr_dim)
    throw Error("shape", std::string(op) + ": readout has " + std::to_string(readout.cols) +
                             " columns but d_r is " + std::to_string(tr.repr_dim));
  if (readout.rows != tr.n_classes)
    throw Error("shape", std::string(op) + ": readout has " + std::to_string(readout.rows) +
                             " rows but there are " + std::to_string(tr.n_classes) + " classes");
}

/// Norms of R_t and cosines to the readout row of the class decided at t,
/// split into currently-stable and not-yet-stable images.
inline SignatureReport signature_stats(const Trajectory& tr, const StabilityIndex& idx, const Matrix& readout) {
  require_index_matches(tr, idx, "signature_stats");
  require_readout(tr, readout, "signature_stats");
  SignatureReport rep;
  rep.timesteps = tr.timesteps;
  rep.n_images = idx.count_stable();
  for (std::size_t t = 0; t < tr.timesteps; ++t) {
    std::vector<double> norms[2], cosines[2];
    for (std::size_t i = 0; i < tr.size(); ++i) {
      if (!idx.t_stable[i]) continue;
      const int group = *idx.t_stable[i] <= t ? 0 : 1;
      const auto r = tr.repr(i, t);
      norms[group].push_back(l2_norm(r));
      cosines[group].push_back(cosine(r, readout.row(tr.records[i].predicted[t])));
    }
    SignatureStep step;
    step.t = t;
    GroupStats* gs[2] = {&step.stable, &step.unstable};
    for (int g = 0; g < 2; ++g) {
      gs[g]->norm = mean_sem(norms[g]);
      gs[g]->cosine = mean_sem(cosines[g]);
      gs[g]->empty = norms[g].empty();
    }
    rep.steps.push_back(step);
  }
  return rep;
}

// ------------------------------------------------------ correct-class signature

struct CorrectClassStep {
  std::size_t t = 0;
  std::size_t n_members = 0;      // misclassified representations that contributed
  std::size_t n_zones_used = 0;
  std::size_t n_zones_skipped = 0;  // zones whose members share one correct class
  std::optional<double> self_mean;
  std::optional<double> other_mean;
};

struct CorrectClassReport {
  std::size_t timesteps = 0;
  std::size_t n_images = 0;
  std::vector<CorrectClassStep> steps;
};

/// For eventually-stable images misclassified at t, compares the cosine to
/// their own correct-class readout with the mean cosine to the correct-class
/// readouts of other members of the same zone that belong to other classes.
inline CorrectClassReport correct_class_signature(const Trajectory& tr, const StabilityIndex& idx,
                                                  const Matrix& readout) {
  require_index_matches(tr, idx, "correct_class_signature");
  require_readout(tr, readout, "correct_class_signature");
  CorrectClassReport rep;
  rep.timesteps = tr.timesteps;
  rep.n_images = idx.count_stable();
  for (std::size_t t = 0; t < tr.timesteps; ++t) {
    std::map<std::uint32_t, std::vector<std::size_t>> zones;  // ordered by zone id
    for (std::size_t i = 0; i < tr.size(); ++i) {
      if (!idx.t_stable[i] || tr.correct(i, t)) continue;
      zones[tr.records[i].predicted[t]].push_back(i);
    }
    CorrectClassStep step;
    step.t = t;
    double self_sum = 0, other_sum = 0;
    for (const auto& [zone, members] : zones) {
      std::vector<std::uint32_t> classes;
      for (std::size_t i : members) classes.push_back(tr.records[i].true_label);
      std::sort(classes.begin(), classes.end());
      classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
      if (classes.size() < 2) {
        ++step.n_zones_skipped;
        continue;
      }
      ++step.n_zones_used;
      for (std::size_t i : members) {
        const auto r = tr.repr(i, t);
        const auto own = tr.records[i].true_label;
        self_sum += cosine(r, readout.row(own));
        double acc = 0;
        std::size_t n = 0;
        for (std::size_t j : members) {
          const auto other = tr.records[j].true_label;
          if (other == own) continue;
          acc += cosine(r, readout.row(other));
          ++n;
        }
        other_sum += acc / static_cast<double>(n);
        ++step.n_members;
      }
    }
    if (step.n_members > 0) {
      step.self_mean = self_sum / static_cast<double>(step.n_members);
      step.other_mean = other_sum / static_cast<double>(step.n_members);
    }
    rep.steps.push_back(step);
  }
  return rep;
}

// ---------------------------------------------------- readout similarity

/// Pairwise cosine similarity between readout rows.
inline Matrix readout_similarity(const Matrix& readout) {
  std::vector<double> norms(readout.rows);
  for (std::size_t i = 0; i < readout.rows; ++i) {
    norms[i] = l2_norm(readout.row(i));
    if (norms[i] == 0.0)
      throw Error("zero_row", "readout_similarity: readout vector of class " + std::to_string(i) + " is zero");
  }
  Matrix s(readout.rows, readout.rows);
  for (std::size_t i = 0; i < readout.rows; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < readout.rows; ++j) {
      const double c = dot(readout.row(i), readout.row(j)) / (norms[i] * norms[j]);
      s(i, j) = c;
      s(j, i) = c;
    }
  }
  return s;
}

// ------------------------------------------------- hierarchical clustering

struct Merge {
  std::size_t a = 0, b = 0;  // merged node ids, a < b
  double height = 0;
  std::size_t node = 0;      // id of the new node (n_leaves + merge index)
  std::size_t size = 0;      // leaves under the new node
};

struct Dendrogram {
  std::size_t n_leaves = 0;
  std::vector<Merge> merges;
  std::vector<std::string> leaf_labels;

  /// Cluster label per leaf after undoing the last k-1 merges. Labels are
  /// numbered by the smallest leaf in each cluster.
  std::vector<std::size_t> flat_cut(std::size_t k) const {
    if (k == 0 || k > n_leaves) throw Error("config", "flat_cut: k must be in [1, n_leaves]");
    std::vector<std::size_t> parent(n_leaves + merges.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (std::size_t m = 0; m + (k - 1) < merges.size(); ++m) {
      parent[find(merges[m].a)] = merges[m].node;
      parent[find(merges[m].b)] = merges[m].node;
    }
    std::vector<std::size_t> labels(n_leaves);
    std::unordered_map<std::size_t, std::size_t> root_label;
    for (std::size_t i = 0; i < n_leaves; ++i) {
      const auto root = find(i);
      auto [it, inserted] = root_label.emplace(root, root_label.size());
      labels[i] = it->second;
    }
    return labels;
  }
};

/// Agglomerative average-linkage clustering on d = 1 - similarity. Ties go
/// to the lexicographically smallest pair of node ids.
inline Dendrogram hierarchical_cluster(const Matrix& similarity, std::vector<std::string> labels = {}) {
  const std::size_t n = similarity.rows;
  if (similarity.cols != n) throw Error("shape", "hierarchical_cluster: similarity matrix must be square");
  if (n == 0) throw Error("shape", "hierarchical_cluster: empty similarity matrix");
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(similarity(i, i) - 1.0) > 1e-9)
      throw Error("not_unit_diagonal", "hierarchical_cluster: diagonal entry " + std::to_string(i) + " is not 1");
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(similarity(i, j) - similarity(j, i)) > 1e-12)
        throw Error("not_symmetric", "hierarchical_cluster: similarity is not symmetric at (" +
                                         std::to_string(i) + "," + std::to_string(j) + ")");
  }
  if (!labels.empty() && labels.size() != n) throw Error("shape", "hierarchical_cluster: label count mismatch");

  const std::size_t total = 2 * n - 1;
  Matrix dist(total, total);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) dist(i, j) = 1.0 - similarity(i, j);
  std::vector<std::size_t> size(total, 1);
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), 0);

  Dendrogram dg;
  dg.n_leaves = n;
  dg.leaf_labels = labels.empty() ? std::vector<std::string>{} : std::move(labels);
  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < active.size(); ++x)
      for (std::size_t y = x + 1; y < active.size(); ++y) {
        const double d = dist(active[x], active[y]);
        if (d < best) {
          best = d;
          bi = x;
          bj = y;
        }
      }
    const std::size_t a = active[bi], b = active[bj], node = n + step;
    size[node] = size[a] + size[b];
    for (std::size_t c : active) {
      if (c == a || c == b) continue;
      const double d = (static_cast<double>(size[a]) * dist(a, c) + static_cast<double>(size[b]) * dist(b, c)) /
                       static_cast<double>(size[node]);
      dist(node, c) = d;
      dist(c, node) = d;
    }
    dg.merges.push_back({a, b, best, node, size[node]});
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(node);  // ids stay sorted since new ids are the largest
  }
  return dg;
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw Error("shape", "adjusted_rand_index: labelings differ in length");
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ca[a[i]] += 1;
    cb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (auto& [k, v] : joint) index += c2(v);
  for (auto& [k, v] : ca) sa += c2(v);
  for (auto& [k, v] : cb) sb += c2(v);
  const double total = c2(static_cast<double>(a.size()));
  if (total == 0) return 1.0;
  const double expected = sa * sb / total;
  const double max_index = (sa + sb) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// ------------------------------------------------------------- stability

inline constexpr double kLogFloor = 1e-12;

struct StabilityStep {
  std::size_t t = 0;                 // transition (t-1) -> t
  double mean_relative_change = 0;   // mean of log10|R_t - R_{t-1}| - log10|R_{t-1}|
  std::size_t floor_count = 0;       // images with |R_t - R_{t-1}| == 0
  std::size_t zero_norm_count = 0;   // images with |R_{t-1}| == 0
};

struct StabilityRunReport {
  std::size_t timesteps = 0;
  std::size_t n_images = 0;
  std::vector<double> accuracy;        // [T]
  std::vector<StabilityStep> steps;    // t = 1..T-1
};

/// Relative representational change averaged over all images. Zero norms
/// are replaced by kLogFloor inside the log and counted.
inline StabilityRunReport stability_metrics(const Trajectory& tr) {
  if (tr.timesteps < 2) throw Error("config", "stability_metrics: need at least 2 timesteps");
  StabilityRunReport rep;
  rep.timesteps = tr.timesteps;
  rep.n_images = tr.size();
  for (std::size_t t = 0; t < tr.timesteps; ++t) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) correct += tr.correct(i, t);
    rep.accuracy.push_back(tr.size() ? static_cast<double>(correct) / static_cast<double>(tr.size()) : 0.0);
  }
  for (std::size_t t = 1; t < tr.timesteps; ++t) {
    StabilityStep step;
    step.t = t;
    double acc = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      double change = l2_distance(tr.repr(i, t), tr.repr(i, t - 1));
      double prev = l2_norm(tr.repr(i, t - 1));
      if (change == 0.0) {
        change = kLogFloor;
        ++step.floor_count;
      }
      if (prev == 0.0) {
        prev = kLogFloor;
        ++step.zero_norm_count;
      }
      acc += std::log10(change) - std::log10(prev);
    }
    step.mean_relative_change = tr.size() ? acc / static_cast<double>(tr.size()) : 0.0;
    rep.steps.push_back(step);
  }
  return rep;
}

// -------------------------------------------------------- ff norm correlation

struct Correlation {
  std::optional<double> value;
  std::string reason;  // why the value is absent
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("shape", "pearson: length mismatch");
  if (x.size() < 2) return {std::nullopt, "fewer than 2 paired observations"};
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) return {std::nullopt, "zero variance in first variable"};
  if (syy == 0.0) return {std::nullopt, "zero variance in second variable"};
  return {sxy / std::sqrt(sxx * syy), ""};
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline Correlation spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

struct FfNormReport {
  std::size_t n = 0;
  Correlation pearson;
  Correlation spearman;
  std::vector<double> norms;     // feedforward |R_0| per joined image
  std::vector<double> t_stable;  // RNN t_stable per joined image
};

/// Relates the feedforward pre-readout norm at t=0 to the RNN's t_stable
/// over stably classified images, joined on image_id.
inline FfNormReport ff_norm_correlation(const Trajectory& ff, const StabilityIndex& rnn) {
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < ff.size(); ++i) by_id.emplace(ff.records[i].image_id, i);
  FfNormReport rep;
  for (std::size_t i = 0; i < rnn.t_stable.size(); ++i) {
    if (!rnn.t_stable[i]) continue;
    const auto it = by_id.find(rnn.image_ids[i]);
    if (it == by_id.end())
      throw Error("join", "ff_norm_correlation: image_id " + std::to_string(rnn.image_ids[i]) +
                              " missing from the feedforward trajectory");
    rep.norms.push_back(l2_norm(ff.repr(it->second, 0)));
    rep.t_stable.push_back(static_cast<double>(*rnn.t_stable[i]));
  }
  if (rep.norms.empty()) throw Error("empty_join", "ff_norm_correlation: no stably classified images to join");
  rep.n = rep.norms.size();
  rep.pearson = pearson(rep.norms, rep.t_stable);
  rep.spearman = spearman(rep.norms, rep.t_stable);
  return rep;
}

}  // namespace bltlab
