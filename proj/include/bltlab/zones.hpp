#pragma once

// Geometry of linear-readout decision zones: argmax classification, 2D zone
// grids, readout self-classification, the dimensionality sweep and the
// agreement between biased and bias-free decisions at large norms.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bltlab/analysis.hpp"
#include "bltlab/common.hpp"

namespace bltlab {

struct ReadoutSpec {
  Matrix weights;            // [d_o, d_r]
  std::vector<double> bias;  // [d_o] or empty

  std::size_t n_classes() const { return weights.rows; }
  std::size_t dim() const { return weights.cols; }
  bool has_bias() const { return !bias.empty(); }

  ReadoutSpec without_bias() const { return {weights, {}}; }
};

/// argmax_i (M r + b)_i, first index on ties.
inline std::size_t classify(const ReadoutSpec& spec, std::span<const double> r) {
  if (r.size() != spec.dim())
    throw Error("shape", "classify: representation has " + std::to_string(r.size()) +
                             " dims, readout expects " + std::to_string(spec.dim()));
  std::size_t best = 0;
  double best_score = 0;
  for (std::size_t i = 0; i < spec.n_classes(); ++i) {
    double s = dot(spec.weights.row(i), r);
    if (spec.has_bias()) s += spec.bias[i];
    if (i == 0 || s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

/// Standard-normal readout with optional standard-normal bias.
inline ReadoutSpec random_spec(std::size_t n_classes, std::size_t dim, Rng& rng, bool with_bias = false) {
  ReadoutSpec spec{Matrix(n_classes, dim), {}};
  for (double& v : spec.weights.data) v = rng.normal();
  if (with_bias) {
    spec.bias.resize(n_classes);
    for (double& v : spec.bias) v = rng.normal();
  }
  return spec;
}

struct ZoneGrid {
  double extent = 10.0;        // covers [-extent, extent]^2
  std::size_t resolution = 201;
  std::vector<std::size_t> labels;  // row-major, row index follows y

  double coord(std::size_t i) const {
    return -extent + 2.0 * extent * static_cast<double>(i) / static_cast<double>(resolution - 1);
  }
  std::size_t label(std::size_t row, std::size_t col) const { return labels[row * resolution + col]; }
  /// Index of the cell whose centre is closest to value v.
  std::size_t index_of(double v) const {
    const double f = (v + extent) / (2.0 * extent) * static_cast<double>(resolution - 1);
    return static_cast<std::size_t>(std::lround(std::clamp(f, 0.0, static_cast<double>(resolution - 1))));
  }
};

/// Classifies every cell centre of a regular grid over [-extent, extent]^2.
inline ZoneGrid simulate_grid(const ReadoutSpec& spec, double extent = 10.0, std::size_t resolution = 201) {
  if (spec.dim() != 2) throw Error("shape", "simulate_grid: readout must be 2-dimensional");
  if (resolution < 2 || !(extent > 0)) throw Error("config", "simulate_grid: need resolution >= 2 and extent > 0");
  ZoneGrid g{extent, resolution, std::vector<std::size_t>(resolution * resolution)};
  for (std::size_t row = 0; row < resolution; ++row)
    for (std::size_t col = 0; col < resolution; ++col) {
      const double r[2] = {g.coord(col), g.coord(row)};
      g.labels[row * resolution + col] = classify(spec, r);
    }
  return g;
}

struct RayCheck {
  std::size_t rays = 0;
  std::size_t points = 0;
  std::size_t mismatches = 0;
};

/// Samples rays from the grid origin through random cells and checks that
/// the cells at integer multiples of the offset (up to `radii`) share the
/// label of the first cell. Requires an odd resolution.
inline RayCheck check_ray_invariance(const ZoneGrid& g, std::size_t n_rays, std::size_t radii, std::uint64_t seed) {
  if (g.resolution % 2 == 0) throw Error("config", "ray check: grid resolution must be odd");
  const long centre = static_cast<long>(g.resolution / 2);
  const long max_offset = centre / static_cast<long>(radii);
  if (max_offset < 1) throw Error("config", "ray check: grid too small for the requested radii");
  Rng rng(seed);
  RayCheck out;
  while (out.rays < n_rays) {
    const long dx = static_cast<long>(rng.below(static_cast<std::size_t>(2 * max_offset + 1))) - max_offset;
    const long dy = static_cast<long>(rng.below(static_cast<std::size_t>(2 * max_offset + 1))) - max_offset;
    if (dx == 0 && dy == 0) continue;
    ++out.rays;
    const auto base = g.label(static_cast<std::size_t>(centre + dy), static_cast<std::size_t>(centre + dx));
    for (long k = 1; k <= static_cast<long>(radii); ++k) {
      ++out.points;
      if (g.label(static_cast<std::size_t>(centre + k * dy), static_cast<std::size_t>(centre + k * dx)) != base)
        ++out.mismatches;
    }
  }
  return out;
}

/// Fraction of readout rows i with argmax_j (M[j] . M[i] + b_j) == i.
inline double self_classification(const ReadoutSpec& spec) {
  if (spec.n_classes() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < spec.n_classes(); ++i) hits += classify(spec, spec.weights.row(i)) == i;
  return static_cast<double>(hits) / static_cast<double>(spec.n_classes());
}

struct DimSweepRow {
  std::size_t dim = 0;
  double mean = 0;
  double ci_half_width = 0;  // 1.96 * sd / sqrt(n_reps)
};

struct DimSweepReport {
  std::string source;
  std::size_t n_vectors = 0;
  std::size_t n_reps = 0;
  std::uint64_t seed = 0;
  std::vector<DimSweepRow> rows;
};

namespace detail {

inline DimSweepRow summarize_proportions(std::size_t dim, std::span<const double> props) {
  const auto ms = mean_sem(props);
  return {dim, ms.mean, 1.96 * ms.sem};
}

}  // namespace detail

/// Random source: each repetition r draws from Rng(seed + r) and, for each
/// dimensionality in order, samples n_vectors standard-normal readouts.
inline DimSweepReport dim_sweep_random(std::span<const std::size_t> dims, std::size_t n_vectors,
                                       std::size_t n_reps, std::uint64_t seed) {
  if (n_reps == 0 || n_vectors == 0) throw Error("config", "dim_sweep: need positive vector and repetition counts");
  std::vector<std::vector<double>> props(dims.size(), std::vector<double>(n_reps));
  for (std::size_t rep = 0; rep < n_reps; ++rep) {
    Rng rng(seed + rep);
    for (std::size_t k = 0; k < dims.size(); ++k) {
      if (dims[k] == 0) throw Error("config", "dim_sweep: dimensionality must be positive");
      props[k][rep] = self_classification(random_spec(n_vectors, dims[k], rng));
    }
  }
  DimSweepReport out{"random", n_vectors, n_reps, seed, {}};
  for (std::size_t k = 0; k < dims.size(); ++k) out.rows.push_back(detail::summarize_proportions(dims[k], props[k]));
  return out;
}

/// Trained source: each repetition keeps d randomly chosen coordinate
/// dimensions of the trained readout (without replacement).
inline DimSweepReport dim_sweep_trained(const Matrix& readout, std::span<const std::size_t> dims,
                                        std::size_t n_reps, std::uint64_t seed) {
  if (n_reps == 0) throw Error("config", "dim_sweep: need a positive repetition count");
  std::size_t max_dim = 0;
  for (std::size_t d : dims) max_dim = std::max(max_dim, d);
  if (readout.cols < std::max<std::size_t>(max_dim, 50))
    throw Error("narrow_readout", "dim_sweep: trained readout has " + std::to_string(readout.cols) +
                                      " dimensions, need at least " + std::to_string(std::max<std::size_t>(max_dim, 50)));
  std::vector<std::vector<double>> props(dims.size(), std::vector<double>(n_reps));
  for (std::size_t rep = 0; rep < n_reps; ++rep) {
    Rng rng(seed + rep);
    for (std::size_t k = 0; k < dims.size(); ++k) {
      const std::size_t d = dims[k];
      if (d == 0) throw Error("config", "dim_sweep: dimensionality must be positive");
      std::vector<std::size_t> cols(readout.cols);
      std::iota(cols.begin(), cols.end(), 0);
      for (std::size_t i = 0; i < d; ++i) std::swap(cols[i], cols[i + rng.below(cols.size() - i)]);
      ReadoutSpec sub{Matrix(readout.rows, d), {}};
      for (std::size_t r = 0; r < readout.rows; ++r)
        for (std::size_t c = 0; c < d; ++c) sub.weights(r, c) = readout(r, cols[c]);
      props[k][rep] = self_classification(sub);
    }
  }
  DimSweepReport out{"trained", readout.rows, n_reps, seed, {}};
  for (std::size_t k = 0; k < dims.size(); ++k) out.rows.push_back(detail::summarize_proportions(dims[k], props[k]));
  return out;
}

/// For points at each radius along a fixed set of random unit directions,
/// the fraction whose biased decision equals the bias-free decision.
inline std::vector<double> bias_regime_agreement(const ReadoutSpec& spec, std::span<const double> radii,
                                                 std::size_t n_directions, std::uint64_t seed) {
  if (n_directions == 0) throw Error("config", "bias_regime_agreement: need at least one direction");
  Rng rng(seed);
  const std::size_t d = spec.dim();
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < n_directions) {
    std::vector<double> u(d);
    for (double& v : u) v = rng.normal();
    const double n = l2_norm(std::span<const double>(u));
    if (n == 0) continue;
    for (double& v : u) v /= n;
    dirs.push_back(std::move(u));
  }
  const ReadoutSpec free = spec.without_bias();
  std::vector<double> out;
  std::vector<double> point(d);
  for (double rho : radii) {
    std::size_t agree = 0;
    for (const auto& u : dirs) {
      for (std::size_t k = 0; k < d; ++k) point[k] = rho * u[k];
      agree += classify(spec, point) == classify(free, point);
    }
    out.push_back(static_cast<double>(agree) / static_cast<double>(n_directions));
  }
  return out;
}

}  // namespace bltlab
