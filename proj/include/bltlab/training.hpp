#pragma once

// Backpropagation-through-time training with a per-timestep classification
// loss, evaluation, and the versioned `.bltc` checkpoint format.
//
// .bltc layout (little-endian):
//   char[4] "BLTC" | u32 version=1 | u64 config hash | u32 len | config text
//   u32 n_params | n_params x (u16 name_len | name | u8 rank | u32 dims[rank] | f32 data)
//   u64 adam_step | u32 n_state | n_state x (f32 m[numel] | f32 v[numel])
//   u32 epoch | u64 seed | u64 split_seed | u32 n_frac | f64 fractions[n_frac]
//   u32 n_acc | f64 val_accuracy[n_acc]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bltlab/common.hpp"
#include "bltlab/dataset.hpp"
#include "bltlab/network.hpp"
#include "bltlab/tensor.hpp"

namespace bltlab {

inline constexpr std::array<char, 4> kCheckpointMagic{'B', 'L', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::vector<double> loss_weights;  // empty = uniform over timesteps
  std::size_t eval_every = 1;
  double clip_norm = 5.0;            // 0 disables clipping
  std::vector<double> split_fractions{0.8, 0.1, 0.1};  // train / val / test
  std::uint64_t split_seed = 0;
  std::size_t eval_batch_size = 64;

  /// Resolved weights; uniform when none were given.
  std::vector<double> weights_for(std::size_t timesteps) const {
    if (loss_weights.empty()) return std::vector<double>(timesteps, 1.0 / static_cast<double>(timesteps));
    if (loss_weights.size() != timesteps)
      throw Error("config", "loss_weights has " + std::to_string(loss_weights.size()) +
                                " entries for " + std::to_string(timesteps) + " timesteps");
    double total = 0;
    for (double w : loss_weights) total += w;
    if (std::abs(total - 1.0) > 1e-9) throw Error("config", "loss_weights must sum to 1");
    return loss_weights;
  }

  void validate() const {
    if (epochs == 0 || batch_size == 0 || eval_every == 0 || eval_batch_size == 0)
      throw Error("config", "epochs, batch sizes and eval_every must be positive");
    if (!(lr > 0)) throw Error("config", "learning rate must be positive");
    if (clip_norm < 0) throw Error("config", "clip_norm must be non-negative");
    if (split_fractions.size() != 3) throw Error("config", "split needs train/val/test fractions");
    if (!(split_fractions[1] > 0)) throw Error("config", "validation fraction must be positive");
  }
};

struct CheckpointMeta {
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::vector<double> split_fractions;
  std::vector<double> val_accuracy;  // per timestep, at the saved epoch

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  BltConfig config;
  NetworkParams<float> params;
  AdamState<float> optimizer;
  CheckpointMeta meta;
};

/// Sum over timesteps of w_t * cross_entropy(logits_t, labels).
template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> logits, std::span<const std::size_t> labels,
                     std::span<const double> weights) {
  if (weights.size() != logits.size())
    throw Error("config", "total_loss: " + std::to_string(weights.size()) + " weights for " +
                              std::to_string(logits.size()) + " timesteps");
  Tensor<T> loss;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    Tensor<T> term = scale(softmax_cross_entropy(logits[t], labels).loss, static_cast<T>(weights[t]));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

template <typename T>
Tensor<T> total_loss(const std::vector<StepOutput<T>>& outputs, std::span<const std::size_t> labels,
                     std::span<const double> weights) {
  std::vector<Tensor<T>> logits;
  for (const auto& o : outputs) logits.push_back(o.logits);
  return total_loss<T>(logits, labels, weights);
}

/// Runs the network over `indices` in fixed-size batches, calling
/// `sink(first, batch_indices, outputs)` for each batch in order.
template <typename Sink>
void run_inference(const NetworkParams<float>& params, const BltConfig& cfg, const Dataset& ds,
                   std::span<const std::size_t> indices, std::size_t timesteps,
                   std::size_t batch_size, Sink&& sink) {
  if (timesteps == 0) throw Error("config", "T_eval must be at least 1");
  if (ds.header.channels != cfg.input_channels || ds.header.height != cfg.input_height ||
      ds.header.width != cfg.input_width)
    throw Error("shape", "dataset images are " + std::to_string(ds.header.channels) + "x" +
                             std::to_string(ds.header.height) + "x" + std::to_string(ds.header.width) +
                             " but the model expects " + std::to_string(cfg.input_channels) + "x" +
                             std::to_string(cfg.input_height) + "x" + std::to_string(cfg.input_width));
  if (ds.header.n_classes != cfg.n_classes)
    throw Error("shape", "dataset has " + std::to_string(ds.header.n_classes) +
                             " classes but the model has " + std::to_string(cfg.n_classes));
  const auto frozen = params.detached();
  for (std::size_t first = 0; first < indices.size(); first += batch_size) {
    const auto batch = indices.subspan(first, std::min(batch_size, indices.size() - first));
    const auto outputs = unroll(frozen, cfg, images_to_tensor<float>(ds, batch), timesteps);
    sink(first, batch, outputs);
  }
}

/// Per-timestep accuracy on the listed images.
inline std::vector<double> evaluate(const NetworkParams<float>& params, const BltConfig& cfg,
                                    const Dataset& ds, std::span<const std::size_t> indices,
                                    std::size_t timesteps, std::size_t batch_size = 64) {
  std::vector<std::size_t> correct(timesteps, 0);
  run_inference(params, cfg, ds, indices, timesteps, batch_size,
                [&](std::size_t, std::span<const std::size_t> batch, const auto& outputs) {
                  for (std::size_t t = 0; t < timesteps; ++t) {
                    const auto pred = predict_batch(outputs[t].logits);
                    for (std::size_t n = 0; n < batch.size(); ++n)
                      correct[t] += pred[n] == ds.labels[batch[n]];
                  }
                });
  std::vector<double> acc(timesteps);
  for (std::size_t t = 0; t < timesteps; ++t)
    acc[t] = indices.empty() ? 0.0 : static_cast<double>(correct[t]) / static_cast<double>(indices.size());
  return acc;
}

enum class SplitPart : std::size_t { train = 0, val = 1, test = 2 };

inline SplitPart parse_split_part(const std::string& s) {
  if (s == "train") return SplitPart::train;
  if (s == "val") return SplitPart::val;
  if (s == "test") return SplitPart::test;
  throw Error("config", "unknown split '" + s + "' (expected train, val or test)");
}

/// Reconstructs the split the checkpoint was trained with.
inline std::vector<std::size_t> checkpoint_split(const Checkpoint& ckpt, const Dataset& ds, SplitPart part) {
  return stratified_split(ds, ckpt.meta.split_fractions, ckpt.meta.split_seed)
      .parts.at(static_cast<std::size_t>(part));
}

/// evaluate() on a split of the checkpoint's own partition; T_eval = 0 uses
/// the trained timestep count.
inline std::vector<double> evaluate(const Checkpoint& ckpt, const Dataset& ds, SplitPart part,
                                    std::size_t t_eval = 0) {
  const auto idx = checkpoint_split(ckpt, ds, part);
  return evaluate(ckpt.params, ckpt.config, ds, idx, t_eval ? t_eval : ckpt.config.timesteps);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::vector<double> val_accuracy;  // empty on epochs without evaluation

  std::string to_log_line() const {
    nlohmann::json j{{"epoch", epoch}, {"train_loss", train_loss}};
    j["val_accuracy"] = val_accuracy.empty() ? nlohmann::json(nullptr) : nlohmann::json(val_accuracy);
    return j.dump();
  }
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> log;
};

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Trains on the train part of a stratified split and keeps the epoch with
/// the best final-timestep validation accuracy (earliest on ties).
inline TrainResult train(const BltConfig& cfg, const TrainConfig& tc, const Dataset& ds,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  tc.validate();
  const auto weights = tc.weights_for(cfg.timesteps);
  const Split split = stratified_split(ds, tc.split_fractions, tc.split_seed);
  const auto& train_idx = split.parts[0];
  const auto& val_idx = split.parts[1];
  if (train_idx.empty()) throw Error("config", "training split is empty");

  auto params = init_params<float>(cfg, tc.seed);
  auto tensors = params.tensors();
  auto adam = AdamState<float>::for_params(tensors);
  const AdamOptions adam_opt{tc.lr};

  TrainResult result;
  bool have_best = false;
  double best_acc = -1;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng(mix_seed(tc.seed, epoch)).shuffle(order);
    double loss_sum = 0;
    for (std::size_t first = 0, batch_no = 0; first < order.size(); first += tc.batch_size, ++batch_no) {
      const std::span<const std::size_t> batch(order.data() + first,
                                               std::min(tc.batch_size, order.size() - first));
      std::vector<std::size_t> labels;
      for (std::size_t i : batch) labels.push_back(ds.labels[i]);
      const auto outputs = unroll(params, cfg, images_to_tensor<float>(ds, batch));
      const Tensor<float> loss = total_loss<float>(outputs, labels, weights);
      if (!std::isfinite(loss.item()))
        throw Error("diverged", "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batch_no));
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
      backward(loss);
      if (tc.clip_norm > 0) {
        const double norm = global_grad_norm(tensors);
        if (norm > tc.clip_norm) {
          const float factor = static_cast<float>(tc.clip_norm / norm);
          for (auto& p : tensors)
            for (float& g : p.mutable_grad()) g *= factor;
        }
      }
      adam_step<float>(tensors, adam, adam_opt);
      for (auto& p : tensors) p.zero_grad();
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
      m.val_accuracy = evaluate(params, cfg, ds, val_idx, cfg.timesteps, tc.eval_batch_size);
      if (!have_best || m.val_accuracy.back() > best_acc) {
        have_best = true;
        best_acc = m.val_accuracy.back();
        auto& b = result.best;
        b.config = cfg;
        b.params = params.detached();
        b.optimizer = adam;
        b.meta = {static_cast<std::uint32_t>(epoch), tc.seed, tc.split_seed, tc.split_fractions,
                  m.val_accuracy};
      }
    }
    if (on_epoch) on_epoch(m);
    result.log.push_back(std::move(m));
  }
  return result;
}

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  const std::string text = ckpt.config.to_text();
  ByteWriter w;
  w.put_bytes({kCheckpointMagic.data(), 4});
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(fnv1a(text));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  const auto named = ckpt.params.named();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_span(t.data());
  }
  w.put<std::uint64_t>(ckpt.optimizer.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.optimizer.m.size()));
  for (std::size_t k = 0; k < ckpt.optimizer.m.size(); ++k) {
    w.put_span(std::span<const float>(ckpt.optimizer.m[k]));
    w.put_span(std::span<const float>(ckpt.optimizer.v[k]));
  }
  const auto& meta = ckpt.meta;
  w.put<std::uint32_t>(meta.epoch);
  w.put<std::uint64_t>(meta.seed);
  w.put<std::uint64_t>(meta.split_seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.split_fractions.size()));
  w.put_span(std::span<const double>(meta.split_fractions));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.val_accuracy.size()));
  w.put_span(std::span<const double>(meta.val_accuracy));
  return w.release();
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  ByteReader r(bytes, "bltc");
  if (r.get_string(4) != std::string(kCheckpointMagic.data(), 4))
    throw Error("bad_magic", "bltc: bad magic (expected \"BLTC\")");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error("bad_version", "bltc: unsupported version " + std::to_string(version));
  const auto hash = r.get<std::uint64_t>();
  const auto text_len = r.get<std::uint32_t>();
  const std::string text = r.get_string(text_len);
  if (fnv1a(text) != hash) throw Error("config_hash", "bltc: embedded config hash mismatch");
  Checkpoint ckpt;
  ckpt.config = BltConfig::from_text(text);

  const auto expected = param_shapes(ckpt.config);
  const auto n_params = r.get<std::uint32_t>();
  if (n_params != expected.size())
    throw Error("shape_table", "bltc: shape table lists " + std::to_string(n_params) +
                                   " parameters, config implies " + std::to_string(expected.size()));
  std::vector<Tensor<float>> tensors;
  for (std::size_t k = 0; k < n_params; ++k) {
    const auto name_len = r.get<std::uint16_t>();
    const std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    if (name != expected[k].first || shape != expected[k].second)
      throw Error("shape_table", "bltc: shape table entry " + std::to_string(k) + " is '" + name +
                                     "' " + shape_str(shape) + ", expected '" + expected[k].first +
                                     "' " + shape_str(expected[k].second));
    std::vector<float> data(numel(shape));
    r.get_into(std::span<float>(data));
    tensors.emplace_back(shape, std::move(data), true);
  }
  ckpt.params = params_from_tensors(ckpt.config, tensors);

  ckpt.optimizer.step = r.get<std::uint64_t>();
  const auto n_state = r.get<std::uint32_t>();
  if (n_state != 0 && n_state != n_params)
    throw Error("shape_table", "bltc: optimizer state count " + std::to_string(n_state) +
                                   " does not match " + std::to_string(n_params) + " parameters");
  for (std::size_t k = 0; k < n_state; ++k) {
    std::vector<float> m(tensors[k].size()), v(tensors[k].size());
    r.get_into(std::span<float>(m));
    r.get_into(std::span<float>(v));
    ckpt.optimizer.m.push_back(std::move(m));
    ckpt.optimizer.v.push_back(std::move(v));
  }
  auto& meta = ckpt.meta;
  meta.epoch = r.get<std::uint32_t>();
  meta.seed = r.get<std::uint64_t>();
  meta.split_seed = r.get<std::uint64_t>();
  const auto n_frac = r.get<std::uint32_t>();
  if (n_frac > 16) throw Error("format", "bltc: implausible split fraction count " + std::to_string(n_frac));
  meta.split_fractions.resize(n_frac);
  r.get_into(std::span<double>(meta.split_fractions));
  const auto n_acc = r.get<std::uint32_t>();
  if (n_acc > 1'000'000) throw Error("format", "bltc: implausible accuracy count " + std::to_string(n_acc));
  meta.val_accuracy.resize(n_acc);
  r.get_into(std::span<double>(meta.val_accuracy));
  if (r.remaining() != 0)
    throw Error("format", "bltc: " + std::to_string(r.remaining()) + " trailing bytes after checkpoint");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace bltlab
