#pragma once

// Recurrent convolutional classifier with bottom-up, lateral and top-down
// connections. Each block computes
//
//   z = conv(bottom-up input) (+ f  |  * (1 + f)),   a = relu(norm(z))
//
// where f is the feedback drive from the previous timestep's block states.
// Blocks are separated by 2x2 max pooling; the last block is global-average
// pooled into the pre-readout vector, which a linear readout maps to logits.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bltlab/common.hpp"
#include "bltlab/tensor.hpp"

namespace bltlab {

enum class Feedback { none, lateral, topdown };
enum class Interaction { additive, multiplicative };

inline std::string to_string(Feedback f) {
  switch (f) {
    case Feedback::none: return "none";
    case Feedback::lateral: return "lateral";
    case Feedback::topdown: return "topdown";
  }
  return "?";
}

inline std::string to_string(Interaction i) {
  return i == Interaction::additive ? "additive" : "multiplicative";
}

inline Feedback parse_feedback(const std::string& s) {
  if (s == "none") return Feedback::none;
  if (s == "lateral") return Feedback::lateral;
  if (s == "topdown") return Feedback::topdown;
  throw Error("config", "unknown feedback type '" + s + "'");
}

inline Interaction parse_interaction(const std::string& s) {
  if (s == "additive") return Interaction::additive;
  if (s == "multiplicative") return Interaction::multiplicative;
  throw Error("config", "unknown interaction type '" + s + "'");
}

struct BltConfig {
  std::vector<std::size_t> channels{16, 32, 64};  // one entry per block
  std::size_t kernel = 3;
  Feedback feedback = Feedback::lateral;
  Interaction interaction = Interaction::additive;
  std::size_t timesteps = 10;
  std::size_t input_channels = 3;
  std::size_t input_height = 16;
  std::size_t input_width = 16;
  std::size_t n_classes = 10;
  bool readout_bias = false;
  bool norm_enabled = true;

  std::size_t n_blocks() const { return channels.size(); }
  std::size_t repr_dim() const { return channels.back(); }

  void validate() const {
    if (channels.empty()) throw Error("config", "n_blocks must be at least 1");
    if (channels.size() > 16) throw Error("config", "at most 16 blocks are supported");
    for (std::size_t c : channels)
      if (c == 0) throw Error("config", "block channel counts must be positive");
    if (feedback == Feedback::topdown && channels.size() < 2)
      throw Error("config", "topdown feedback requires at least 2 blocks");
    if (timesteps < 1) throw Error("config", "timesteps must be at least 1");
    if (feedback == Feedback::none && timesteps != 1)
      throw Error("config", "feedforward models (feedback=none) train with timesteps=1");
    if (kernel % 2 == 0) throw Error("config", "kernel size must be odd");
    if (input_channels == 0 || n_classes == 0)
      throw Error("config", "input channels and class count must be positive");
    const std::size_t factor = std::size_t{1} << (channels.size() - 1);
    if (input_height == 0 || input_width == 0 || input_height % factor || input_width % factor)
      throw Error("config", "input extent must be divisible by " + std::to_string(factor) +
                                " for " + std::to_string(channels.size()) + " blocks");
  }

  /// Canonical key=value text; the checkpoint embeds it and hashes it.
  std::string to_text() const {
    std::ostringstream os;
    os << "channels=";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << "\nkernel=" << kernel << "\nfeedback=" << to_string(feedback)
       << "\ninteraction=" << to_string(interaction) << "\ntimesteps=" << timesteps
       << "\ninput_channels=" << input_channels << "\ninput_height=" << input_height
       << "\ninput_width=" << input_width << "\nn_classes=" << n_classes
       << "\nreadout_bias=" << (readout_bias ? 1 : 0) << "\nnorm_enabled=" << (norm_enabled ? 1 : 0)
       << "\n";
    return os.str();
  }

  static BltConfig from_text(const std::string& text) {
    BltConfig cfg;
    std::istringstream is(text);
    std::string line;
    auto to_size = [](const std::string& key, const std::string& v) {
      std::size_t pos = 0;
      unsigned long long x = 0;
      try {
        x = std::stoull(v, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || pos != v.size())
        throw Error("config", "invalid integer for '" + key + "': '" + v + "'");
      return static_cast<std::size_t>(x);
    };
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error("config", "malformed config line '" + line + "'");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "channels") {
        cfg.channels.clear();
        std::istringstream vs(value);
        std::string item;
        while (std::getline(vs, item, ',')) cfg.channels.push_back(to_size(key, item));
      } else if (key == "kernel") {
        cfg.kernel = to_size(key, value);
      } else if (key == "feedback") {
        cfg.feedback = parse_feedback(value);
      } else if (key == "interaction") {
        cfg.interaction = parse_interaction(value);
      } else if (key == "timesteps") {
        cfg.timesteps = to_size(key, value);
      } else if (key == "input_channels") {
        cfg.input_channels = to_size(key, value);
      } else if (key == "input_height") {
        cfg.input_height = to_size(key, value);
      } else if (key == "input_width") {
        cfg.input_width = to_size(key, value);
      } else if (key == "n_classes") {
        cfg.n_classes = to_size(key, value);
      } else if (key == "readout_bias") {
        cfg.readout_bias = to_size(key, value) != 0;
      } else if (key == "norm_enabled") {
        cfg.norm_enabled = to_size(key, value) != 0;
      } else {
        throw Error("config", "unknown model config key '" + key + "'");
      }
    }
    cfg.validate();
    return cfg;
  }

  std::uint64_t hash() const { return fnv1a(to_text()); }

  bool operator==(const BltConfig&) const = default;
};

template <typename T>
struct BlockParams {
  Tensor<T> bottom_up;  // [C_k, C_{k-1}, k, k]
  Tensor<T> feedback;   // lateral [C_k, C_k, k, k]; topdown [C_k, C_{k+1}, k, k]; may be empty
  Tensor<T> norm_gain;  // [C_k], empty when normalization is disabled
  Tensor<T> norm_shift;
};

template <typename T>
struct NetworkParams {
  std::vector<BlockParams<T>> blocks;
  Tensor<T> readout;       // M, [d_o, d_r]
  Tensor<T> readout_bias;  // [d_o] or empty

  /// Named parameters in canonical order. Tensors share storage with *this.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      const std::string prefix = "block" + std::to_string(k) + ".";
      out.emplace_back(prefix + "bottom_up", blocks[k].bottom_up);
      if (blocks[k].feedback.defined()) out.emplace_back(prefix + "feedback", blocks[k].feedback);
      if (blocks[k].norm_gain.defined()) {
        out.emplace_back(prefix + "norm_gain", blocks[k].norm_gain);
        out.emplace_back(prefix + "norm_shift", blocks[k].norm_shift);
      }
    }
    out.emplace_back("readout.weight", readout);
    if (readout_bias.defined()) out.emplace_back("readout.bias", readout_bias);
    return out;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& t : tensors()) t.zero_grad();
  }

  /// Deep copy; `requires_grad` applies to every tensor in the copy.
  template <typename U = T>
  NetworkParams<U> cast(bool requires_grad) const {
    auto conv = [requires_grad](const Tensor<T>& t) {
      if (!t.defined()) return Tensor<U>();
      std::vector<U> data(t.data().begin(), t.data().end());
      return Tensor<U>(t.shape(), std::move(data), requires_grad);
    };
    NetworkParams<U> out;
    for (const auto& b : blocks)
      out.blocks.push_back({conv(b.bottom_up), conv(b.feedback), conv(b.norm_gain),
                            conv(b.norm_shift)});
    out.readout = conv(readout);
    out.readout_bias = conv(readout_bias);
    return out;
  }

  /// Frozen copy for evaluation; no graph is recorded against it.
  NetworkParams detached() const { return cast<T>(false); }
};

/// Expected parameter shapes for a configuration, in canonical order.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const BltConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t k = cfg.kernel;
  for (std::size_t b = 0; b < cfg.n_blocks(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    const std::size_t c_in = b == 0 ? cfg.input_channels : cfg.channels[b - 1];
    const std::size_t c = cfg.channels[b];
    out.emplace_back(prefix + "bottom_up", Shape{c, c_in, k, k});
    if (cfg.feedback == Feedback::lateral)
      out.emplace_back(prefix + "feedback", Shape{c, c, k, k});
    else if (cfg.feedback == Feedback::topdown && b + 1 < cfg.n_blocks())
      out.emplace_back(prefix + "feedback", Shape{c, cfg.channels[b + 1], k, k});
    if (cfg.norm_enabled) {
      out.emplace_back(prefix + "norm_gain", Shape{c});
      out.emplace_back(prefix + "norm_shift", Shape{c});
    }
  }
  out.emplace_back("readout.weight", Shape{cfg.n_classes, cfg.repr_dim()});
  if (cfg.readout_bias) out.emplace_back("readout.bias", Shape{cfg.n_classes});
  return out;
}

/// Rebuilds structured parameters from tensors given in canonical order.
template <typename T>
NetworkParams<T> params_from_tensors(const BltConfig& cfg, std::vector<Tensor<T>> tensors) {
  const auto shapes = param_shapes(cfg);
  if (tensors.size() != shapes.size())
    throw Error("shape", "expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                             std::to_string(tensors.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (tensors[i].shape() != shapes[i].second)
      throw Error("shape", "parameter '" + shapes[i].first + "' has shape " +
                               shape_str(tensors[i].shape()) + ", expected " +
                               shape_str(shapes[i].second));
  NetworkParams<T> p;
  std::size_t i = 0;
  for (std::size_t b = 0; b < cfg.n_blocks(); ++b) {
    BlockParams<T> bp;
    bp.bottom_up = tensors[i++];
    const bool has_fb = cfg.feedback == Feedback::lateral ||
                        (cfg.feedback == Feedback::topdown && b + 1 < cfg.n_blocks());
    if (has_fb) bp.feedback = tensors[i++];
    if (cfg.norm_enabled) {
      bp.norm_gain = tensors[i++];
      bp.norm_shift = tensors[i++];
    }
    p.blocks.push_back(std::move(bp));
  }
  p.readout = tensors[i++];
  if (cfg.readout_bias) p.readout_bias = tensors[i++];
  return p;
}

/// Fan-in scaled uniform initialization, U(-sqrt(1/fan_in), sqrt(1/fan_in)).
/// Norm gains start at 1 and shifts at 0.
template <typename T = float>
NetworkParams<T> init_params(const BltConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor<T>> tensors;
  for (const auto& [name, shape] : param_shapes(cfg)) {
    const bool is_gain = name.ends_with("norm_gain");
    const bool is_shift = name.ends_with("norm_shift");
    std::vector<T> data(numel(shape));
    if (is_gain || is_shift) {
      std::fill(data.begin(), data.end(), is_gain ? T(1) : T(0));
    } else {
      // bias vectors share the readout's fan-in
      const std::size_t fan_in = shape.size() == 1 ? cfg.repr_dim() : numel(shape) / shape[0];
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    tensors.emplace_back(shape, std::move(data), true);
  }
  return params_from_tensors(cfg, std::move(tensors));
}

/// Per-block activations (post-relu, pre-pool) from the previous timestep.
/// An empty state stands for all zeros at the start of a sequence.
template <typename T>
struct NetworkState {
  std::vector<Tensor<T>> blocks;

  bool is_initial() const { return blocks.empty(); }
};

template <typename T>
struct StepOutput {
  Tensor<T> logits;      // [N, d_o]
  Tensor<T> prereadout;  // [N, d_r]
  NetworkState<T> state;
};

template <typename T>
StepOutput<T> forward_timestep(const NetworkParams<T>& params, const BltConfig& cfg,
                               const Tensor<T>& images, const NetworkState<T>& state) {
  detail::require_rank(images.shape(), 4, "forward_timestep images");
  if (images.dim(1) != cfg.input_channels || images.dim(2) != cfg.input_height ||
      images.dim(3) != cfg.input_width)
    throw Error("shape", "forward_timestep: image shape " + shape_str(images.shape()) +
                             " does not match config input " +
                             shape_str({cfg.input_channels, cfg.input_height, cfg.input_width}));
  if (params.blocks.size() != cfg.n_blocks())
    throw Error("shape", "forward_timestep: parameter block count does not match config");
  if (!state.is_initial()) {
    if (state.blocks.size() != cfg.n_blocks())
      throw Error("state", "forward_timestep: state has " + std::to_string(state.blocks.size()) +
                               " blocks, config has " + std::to_string(cfg.n_blocks()));
    std::size_t h = cfg.input_height, w = cfg.input_width;
    for (std::size_t b = 0; b < cfg.n_blocks(); ++b) {
      const Shape expect{images.dim(0), cfg.channels[b], h, w};
      if (state.blocks[b].shape() != expect)
        throw Error("state", "forward_timestep: state of block " + std::to_string(b) +
                                 " has shape " + shape_str(state.blocks[b].shape()) +
                                 ", expected " + shape_str(expect));
      h /= 2;
      w /= 2;
    }
  }

  StepOutput<T> out;
  Tensor<T> x = images;
  for (std::size_t b = 0; b < cfg.n_blocks(); ++b) {
    const auto& bp = params.blocks[b];
    Tensor<T> z = conv2d(x, bp.bottom_up);

    Tensor<T> drive;
    if (!state.is_initial() && bp.feedback.defined()) {
      if (cfg.feedback == Feedback::lateral)
        drive = conv2d(state.blocks[b], bp.feedback);
      else if (cfg.feedback == Feedback::topdown)
        drive = conv2d(upsample_nearest2x(state.blocks[b + 1]), bp.feedback);
    }
    if (drive.defined())
      z = cfg.interaction == Interaction::additive ? add(z, drive)
                                                   : mul(z, add_scalar(drive, T(1)));
    if (cfg.norm_enabled) z = channel_norm(z, bp.norm_gain, bp.norm_shift);
    Tensor<T> a = relu(z);
    out.state.blocks.push_back(a);
    x = b + 1 < cfg.n_blocks() ? maxpool2d(a) : global_avg_pool(a);
  }
  out.prereadout = x;
  out.logits = affine(x, params.readout, cfg.readout_bias ? params.readout_bias : Tensor<T>());
  return out;
}

/// Runs `timesteps` steps (config value when 0), re-presenting the images at
/// every step and threading the state through.
template <typename T>
std::vector<StepOutput<T>> unroll(const NetworkParams<T>& params, const BltConfig& cfg,
                                  const Tensor<T>& images, std::size_t timesteps = 0) {
  if (timesteps == 0) timesteps = cfg.timesteps;
  std::vector<StepOutput<T>> outputs;
  outputs.reserve(timesteps);
  NetworkState<T> state;
  for (std::size_t t = 0; t < timesteps; ++t) {
    outputs.push_back(forward_timestep(params, cfg, images, state));
    state = outputs.back().state;
  }
  // only the final state is needed by callers; drop the intermediates
  for (std::size_t t = 0; t + 1 < outputs.size(); ++t) outputs[t].state.blocks.clear();
  return outputs;
}

/// Index of the largest value, first index on ties.
template <typename T>
std::size_t predict(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

template <typename T>
std::vector<std::size_t> predict_batch(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), d = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t s = 0; s < n; ++s) out[s] = predict(logits.data().subspan(s * d, d));
  return out;
}

}  // namespace bltlab
