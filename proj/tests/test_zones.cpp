#include <gtest/gtest.h>

#include <cmath>

#include "bltlab/zones.hpp"

using namespace bltlab;

namespace {

ReadoutSpec compass() {
  ReadoutSpec s{Matrix(4, 2), {}};
  const double rows[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 2; ++k) s.weights(i, k) = rows[i][k];
  return s;
}

std::vector<double> random_vector(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  return v;
}

// Smallest gap between the winning score and any other score.
double margin(const ReadoutSpec& s, const std::vector<double>& r) {
  std::vector<double> o(s.n_classes());
  for (std::size_t i = 0; i < o.size(); ++i) {
    for (std::size_t k = 0; k < r.size(); ++k) o[i] += s.weights(i, k) * r[k];
    if (s.has_bias()) o[i] += s.bias[i];
  }
  const auto best = std::max_element(o.begin(), o.end()) - o.begin();
  double gap = 1e300;
  for (std::size_t i = 0; i < o.size(); ++i)
    if (static_cast<std::ptrdiff_t>(i) != best) gap = std::min(gap, o[best] - o[i]);
  return gap;
}

}  // namespace

TEST(Classify, CompassExamples) {
  const auto s = compass();
  EXPECT_EQ(classify(s, std::vector<double>{5, 1}), 0u);
  EXPECT_EQ(classify(s, std::vector<double>{1, 5}), 1u);
  EXPECT_EQ(classify(s, std::vector<double>{-4, 1}), 2u);
  // exact tie on the diagonal goes to the first index
  EXPECT_EQ(classify(s, std::vector<double>{2, 2}), 0u);
  EXPECT_EQ(classify(s, std::vector<double>{0, 0}), 0u);
  try {
    classify(s, std::vector<double>{1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "shape");
  }
}

TEST(Classify, ScaleInvariance) {
  Rng rng(1);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = 1 + rng.below(8);
    const auto s = random_spec(2 + rng.below(8), d, rng);
    const auto r = random_vector(d, rng);
    const double alpha = std::exp(rng.uniform(-5, 5));
    std::vector<double> ar(r);
    for (double& x : ar) x *= alpha;
    ASSERT_EQ(classify(s, r), classify(s, ar)) << trial;
  }
}

TEST(Classify, ConeConvexity) {
  Rng rng(2);
  int tested = 0;
  while (tested < 10000) {
    const std::size_t d = 2 + rng.below(5);
    const auto s = random_spec(2 + rng.below(5), d, rng);
    const auto a = random_vector(d, rng), b = random_vector(d, rng);
    const auto ca = classify(s, a);
    if (ca != classify(s, b) || margin(s, a) < 1e-9 || margin(s, b) < 1e-9) continue;
    std::vector<double> sum(d);
    for (std::size_t k = 0; k < d; ++k) sum[k] = a[k] + b[k];
    ASSERT_EQ(classify(s, sum), ca);
    ++tested;
  }
}

TEST(Classify, SoftmaxPreservesArgmax) {
  Rng rng(3);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = 1 + rng.below(6);
    const auto s = random_spec(2 + rng.below(10), d, rng, rng.below(2) == 1);
    const auto r = random_vector(d, rng);
    std::vector<double> o(s.n_classes());
    for (std::size_t i = 0; i < o.size(); ++i) {
      for (std::size_t k = 0; k < d; ++k) o[i] += s.weights(i, k) * r[k];
      if (s.has_bias()) o[i] += s.bias[i];
    }
    const double mx = *std::max_element(o.begin(), o.end());
    double z = 0;
    for (double& v : o) z += (v = std::exp(v - mx));
    std::size_t best = 0;
    for (std::size_t i = 1; i < o.size(); ++i)
      if (o[i] / z > o[best] / z) best = i;
    ASSERT_EQ(classify(s, r), best) << trial;
  }
}

TEST(Grid, CompassSectors) {
  const auto g = simulate_grid(compass(), 10.0, 201);
  EXPECT_EQ(g.labels.size(), 201u * 201u);
  EXPECT_EQ(g.label(g.index_of(1), g.index_of(3)), 0u);
  EXPECT_EQ(g.label(g.index_of(-3), g.index_of(-1)), 3u);
  EXPECT_EQ(g.label(g.index_of(7), g.index_of(-2)), 1u);
  EXPECT_EQ(g.label(g.index_of(0.5), g.index_of(-6)), 2u);
  EXPECT_DOUBLE_EQ(g.coord(0), -10.0);
  EXPECT_DOUBLE_EQ(g.coord(100), 0.0);
  EXPECT_DOUBLE_EQ(g.coord(200), 10.0);
  EXPECT_EQ(simulate_grid(compass(), 10.0, 201).labels, g.labels);
  Rng rng(4);
  EXPECT_THROW(simulate_grid(random_spec(4, 3, rng)), Error);
}

TEST(Grid, RayInvarianceWithoutBias) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = simulate_grid(random_spec(4, 2, rng));
    const auto rc = check_ray_invariance(g, 100, 10, 100 + trial);
    EXPECT_EQ(rc.rays, 100u);
    EXPECT_EQ(rc.points, 1000u);
    EXPECT_EQ(rc.mismatches, 0u);
  }
}

TEST(Grid, RayCheckCatchesBias) {
  auto s = compass();
  s.bias = {0, 0, 0, 6};
  const auto rc = check_ray_invariance(simulate_grid(s), 100, 10, 1);
  EXPECT_GT(rc.mismatches, 0u);
  const auto even = simulate_grid(compass(), 10.0, 200);
  EXPECT_THROW(check_ray_invariance(even, 10, 10, 1), Error);
}

TEST(Grid, LargeBiasOwnsOrigin) {
  auto s = compass();
  s.bias = {0, 0, 50, 0};
  const auto g = simulate_grid(s, 3.0, 61);
  for (std::size_t r = 20; r <= 40; ++r)
    for (std::size_t c = 20; c <= 40; ++c) EXPECT_EQ(g.label(r, c), 2u);
}

TEST(SelfClassification, MatchesDoubleLoopOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(30), d = 1 + rng.below(10);
    const auto s = random_spec(n, d, rng, rng.below(2) == 1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_v = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double v = 0;
        for (std::size_t k = 0; k < d; ++k) v += s.weights(j, k) * s.weights(i, k);
        if (s.has_bias()) v += s.bias[j];
        if (v > best_v) best_v = v, best = j;
      }
      hits += best == i;
    }
    ASSERT_EQ(self_classification(s), static_cast<double>(hits) / n);
  }
}

TEST(SelfClassification, OrthogonalAndOneDimensional) {
  EXPECT_EQ(self_classification(compass()), 1.0);
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_spec(100, 1, rng);
    s.weights(0, 0) = std::abs(s.weights(0, 0));
    s.weights(1, 0) = -std::abs(s.weights(1, 0));
    EXPECT_DOUBLE_EQ(self_classification(s), 0.02);
  }
}

TEST(DimSweep, RandomSourceShape) {
  std::vector<std::size_t> dims(50);
  std::iota(dims.begin(), dims.end(), 1);
  const auto rep = dim_sweep_random(dims, 100, 100, 1);
  ASSERT_EQ(rep.rows.size(), 50u);
  EXPECT_NEAR(rep.rows[0].mean, 0.02, 1e-12);
  EXPECT_NEAR(rep.rows[0].ci_half_width, 0.0, 1e-12);
  EXPECT_GE(rep.rows[29].mean, 0.999);
  EXPECT_EQ(rep.rows[49].mean, 1.0);
  for (std::size_t k = 1; k < 50; ++k) EXPECT_GE(rep.rows[k].mean, rep.rows[k - 1].mean - 0.01) << k;
  // same seed, same numbers
  EXPECT_EQ(dim_sweep_random(std::vector<std::size_t>{3, 7}, 20, 5, 9).rows[1].mean,
            dim_sweep_random(std::vector<std::size_t>{3, 7}, 20, 5, 9).rows[1].mean);
}

TEST(DimSweep, CiHalfWidthFormula) {
  const std::vector<std::size_t> dims{4};
  const auto rep = dim_sweep_random(dims, 30, 12, 3);
  std::vector<double> props;
  for (std::size_t r = 0; r < 12; ++r) {
    Rng rng(3 + r);
    props.push_back(self_classification(random_spec(30, 4, rng)));
  }
  double m = 0;
  for (double p : props) m += p / 12;
  double ss = 0;
  for (double p : props) ss += (p - m) * (p - m);
  EXPECT_NEAR(rep.rows[0].mean, m, 1e-12);
  EXPECT_NEAR(rep.rows[0].ci_half_width, 1.96 * std::sqrt(ss / 11) / std::sqrt(12.0), 1e-12);
}

TEST(DimSweep, TrainedSource) {
  Rng rng(8);
  const auto wide = random_spec(10, 64, rng).weights;
  const std::vector<std::size_t> dims{1, 10, 50};
  const auto rep = dim_sweep_trained(wide, dims, 20, 2);
  EXPECT_EQ(rep.source, "trained");
  EXPECT_EQ(rep.rows[2].mean, 1.0);
  // full width keeps every column so the proportion is exact
  const std::vector<std::size_t> all{64};
  EXPECT_EQ(dim_sweep_trained(wide, all, 3, 2).rows[0].mean, self_classification({wide, {}}));
  try {
    dim_sweep_trained(random_spec(10, 32, rng).weights, dims, 5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "narrow_readout");
  }
}

TEST(BiasRegime, ZeroBiasAgreesEverywhere) {
  Rng rng(9);
  const auto s = random_spec(4, 2, rng);
  const std::vector<double> radii{0.1, 1, 10};
  for (double a : bias_regime_agreement(s, radii, 500, 1)) EXPECT_EQ(a, 1.0);
}

TEST(BiasRegime, AgreementGrowsWithRadius) {
  Rng rng(10);
  double at30 = 0;
  for (int k = 0; k < 100; ++k) {
    const auto s = random_spec(4, 2, rng, true);
    const double bn = l2_norm(std::span<const double>(s.bias));
    const std::vector<double> radii{0.5 * bn, bn, 2 * bn, 5 * bn, 10 * bn, 30 * bn};
    const auto a = bias_regime_agreement(s, radii, 1000, 7);
    for (std::size_t i = 1; i < a.size(); ++i) EXPECT_GE(a[i], a[i - 1] - 0.02);
    at30 += a.back() / 100;
  }
  EXPECT_GE(at30, 0.95);
}
