#pragma once

// Central finite-difference check of every parameter gradient of a small
// BLT network in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bltlab/network.hpp"
#include "bltlab/training.hpp"

namespace bltlab {

struct GradcheckOptions {
  std::size_t batch = 2;
  double step = 1e-5;
  double floor = 1e-6;  // lower bound on the relative-error denominator
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::size_t n_values = 0;
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Small network used for gradient checks: 2 blocks, 8x8 inputs, 3 classes,
/// T = 3, readout bias on.
inline BltConfig gradcheck_config(Feedback fb, Interaction ia) {
  BltConfig cfg;
  cfg.channels = {4, 6};
  cfg.feedback = fb;
  cfg.interaction = ia;
  cfg.timesteps = 3;
  cfg.input_channels = 3;
  cfg.input_height = 8;
  cfg.input_width = 8;
  cfg.n_classes = 3;
  cfg.readout_bias = true;
  return cfg;
}

inline GradcheckResult gradcheck(const BltConfig& cfg, const GradcheckOptions& opt = {}) {
  cfg.validate();
  auto params = init_params<double>(cfg, opt.seed);
  Rng rng(mix_seed(opt.seed, 0x67726164));
  // move gains and shifts off their identity initialization so their
  // gradients are exercised away from the symmetric point
  for (auto& [name, t] : params.named()) {
    if (name.ends_with("norm_gain"))
      for (double& v : t.mutable_data()) v = rng.uniform(0.5, 1.5);
    if (name.ends_with("norm_shift") || name == "readout.bias")
      for (double& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
  const Shape img_shape{opt.batch, cfg.input_channels, cfg.input_height, cfg.input_width};
  std::vector<double> pixels(numel(img_shape));
  for (double& v : pixels) v = rng.uniform();
  const Tensor<double> images(img_shape, pixels);
  std::vector<std::size_t> labels(opt.batch);
  for (auto& l : labels) l = rng.below(cfg.n_classes);
  const TrainConfig tc;
  const auto weights = tc.weights_for(cfg.timesteps);

  auto loss_of = [&](const NetworkParams<double>& p) {
    return total_loss<double>(unroll(p, cfg, images), labels, weights);
  };

  params.zero_grad();
  backward(loss_of(params));

  auto frozen = params.detached();
  auto named = params.named();
  auto frozen_named = frozen.named();
  GradcheckResult out;
  for (std::size_t k = 0; k < named.size(); ++k) {
    const auto grad = named[k].second.grad();
    auto data = frozen_named[k].second.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      const double plus = loss_of(frozen).item();
      data[i] = orig - opt.step;
      const double minus = loss_of(frozen).item();
      data[i] = orig;
      const double numeric = (plus - minus) / (2 * opt.step);
      const double analytic = grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++out.n_values;
      if (rel > out.max_rel_error || out.worst_param.empty()) {
        out.max_rel_error = std::max(out.max_rel_error, rel);
        out.worst_param = named[k].first;
        out.worst_index = i;
        out.worst_analytic = analytic;
        out.worst_numeric = numeric;
      }
    }
  }
  return out;
}

}  // namespace bltlab
