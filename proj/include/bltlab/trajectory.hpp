#pragma once

// Per-image, per-timestep pre-readout representations and decisions.
//
// .bltj layout (little-endian, 32-byte header):
//   char[4] "BLTJ" | u32 version=1 | u32 n_images | u16 T | u16 reserved=0 |
//   u32 d_r | u32 n_classes | u8 has_logits | u8[3] pad | u32 reserved=0
// then per image:
//   u64 image_id | u32 true_label | u32 pred[T] | f32 repr[T][d_r] |
//   f32 logits[T][n_classes] (only when has_logits)

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bltlab/common.hpp"
#include "bltlab/training.hpp"

namespace bltlab {

inline constexpr std::array<char, 4> kTrajectoryMagic{'B', 'L', 'T', 'J'};
inline constexpr std::uint32_t kTrajectoryVersion = 1;
inline constexpr std::size_t kTrajectoryHeaderBytes = 32;

struct TrajectoryRecord {
  std::uint64_t image_id = 0;
  std::uint32_t true_label = 0;
  std::vector<std::uint32_t> predicted;  // [T]
  std::vector<float> representations;    // [T * d_r], timestep-major
  std::vector<float> logits;             // [T * n_classes] or empty

  bool operator==(const TrajectoryRecord&) const = default;
};

struct Trajectory {
  std::size_t timesteps = 0;
  std::size_t repr_dim = 0;
  std::size_t n_classes = 0;
  bool has_logits = false;
  std::vector<TrajectoryRecord> records;

  std::size_t size() const { return records.size(); }

  std::span<const float> repr(std::size_t image, std::size_t t) const {
    return std::span<const float>(records[image].representations).subspan(t * repr_dim, repr_dim);
  }

  bool correct(std::size_t image, std::size_t t) const {
    return records[image].predicted[t] == records[image].true_label;
  }

  std::size_t record_bytes() const {
    return 8 + 4 + 4 * timesteps + 4 * timesteps * repr_dim + (has_logits ? 4 * timesteps * n_classes : 0);
  }

  bool operator==(const Trajectory&) const = default;
};

inline void validate_trajectory(const Trajectory& tr) {
  if (tr.timesteps == 0 || tr.timesteps > 65535) throw Error("format", "bltj: T must be in [1, 65535]");
  if (tr.repr_dim == 0 || tr.n_classes == 0) throw Error("format", "bltj: d_r and n_classes must be positive");
  for (std::size_t i = 0; i < tr.records.size(); ++i) {
    const auto& r = tr.records[i];
    if (r.predicted.size() != tr.timesteps || r.representations.size() != tr.timesteps * tr.repr_dim ||
        r.logits.size() != (tr.has_logits ? tr.timesteps * tr.n_classes : 0))
      throw Error("format", "bltj: record " + std::to_string(i) + " does not match header sizes");
    if (r.true_label >= tr.n_classes)
      throw Error("label", "bltj: record " + std::to_string(i) + " true label out of range");
    for (auto p : r.predicted)
      if (p >= tr.n_classes)
        throw Error("label", "bltj: record " + std::to_string(i) + " predicted label " +
                                 std::to_string(p) + " >= n_classes " + std::to_string(tr.n_classes));
  }
}

inline std::vector<unsigned char> encode_trajectory(const Trajectory& tr) {
  validate_trajectory(tr);
  ByteWriter w;
  w.put_bytes({kTrajectoryMagic.data(), 4});
  w.put<std::uint32_t>(kTrajectoryVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tr.records.size()));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(tr.timesteps));
  w.put<std::uint16_t>(0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tr.repr_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tr.n_classes));
  w.put<std::uint8_t>(tr.has_logits ? 1 : 0);
  for (int i = 0; i < 3; ++i) w.put<std::uint8_t>(0);
  w.put<std::uint32_t>(0);
  for (const auto& r : tr.records) {
    w.put<std::uint64_t>(r.image_id);
    w.put<std::uint32_t>(r.true_label);
    w.put_span(std::span<const std::uint32_t>(r.predicted));
    w.put_span(std::span<const float>(r.representations));
    if (tr.has_logits) w.put_span(std::span<const float>(r.logits));
  }
  return w.release();
}

/// Decodes a trajectory. With `load_logits` false the logits block is
/// skipped, so consumers that only need representations stay cheap.
inline Trajectory decode_trajectory(std::span<const unsigned char> bytes, bool load_logits = true) {
  ByteReader r(bytes, "bltj");
  if (r.get_string(4) != std::string(kTrajectoryMagic.data(), 4))
    throw Error("bad_magic", "bltj: bad magic (expected \"BLTJ\")");
  const auto version = r.get<std::uint32_t>();
  if (version != kTrajectoryVersion)
    throw Error("bad_version", "bltj: unsupported version " + std::to_string(version));
  Trajectory tr;
  const auto n_images = r.get<std::uint32_t>();
  tr.timesteps = r.get<std::uint16_t>();
  const auto reserved = r.get<std::uint16_t>();
  tr.repr_dim = r.get<std::uint32_t>();
  tr.n_classes = r.get<std::uint32_t>();
  const auto has_logits = r.get<std::uint8_t>();
  std::array<std::uint8_t, 3> pad{};
  r.get_into(std::span<std::uint8_t>(pad));
  const auto reserved2 = r.get<std::uint32_t>();
  if (reserved != 0 || reserved2 != 0 || pad != std::array<std::uint8_t, 3>{} || has_logits > 1)
    throw Error("format", "bltj: reserved header fields must be zero");
  if (tr.timesteps == 0 || tr.repr_dim == 0 || tr.n_classes == 0)
    throw Error("format", "bltj: T, d_r and n_classes must be positive");
  tr.has_logits = has_logits == 1;
  const std::size_t per_record = tr.record_bytes();
  if (n_images > 0 && per_record > bytes.size())
    throw Error("truncated", "bltj: a single record needs " + std::to_string(per_record) + " bytes, got " +
                                 std::to_string(bytes.size()));
  const std::size_t expected = kTrajectoryHeaderBytes + std::size_t{n_images} * per_record;
  if (bytes.size() != expected)
    throw Error(bytes.size() < expected ? "truncated" : "format",
                "bltj: expected " + std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  tr.records.resize(n_images);
  for (auto& rec : tr.records) {
    rec.image_id = r.get<std::uint64_t>();
    rec.true_label = r.get<std::uint32_t>();
    rec.predicted.resize(tr.timesteps);
    r.get_into(std::span<std::uint32_t>(rec.predicted));
    rec.representations.resize(tr.timesteps * tr.repr_dim);
    r.get_into(std::span<float>(rec.representations));
    if (tr.has_logits) {
      if (load_logits) {
        rec.logits.resize(tr.timesteps * tr.n_classes);
        r.get_into(std::span<float>(rec.logits));
      } else {
        r.get_string(4 * tr.timesteps * tr.n_classes);
      }
    }
  }
  if (!load_logits) tr.has_logits = false;
  validate_trajectory(tr);
  return tr;
}

inline void write_traj(const std::string& path, const Trajectory& tr) {
  write_file_bytes(path, encode_trajectory(tr));
}

inline Trajectory read_traj(const std::string& path, bool load_logits = true) {
  return decode_trajectory(read_file_bytes(path), load_logits);
}

/// Unrolls the model over `indices` for `t_eval` steps and records every
/// image. image_id is the position within `indices`.
inline Trajectory record(const NetworkParams<float>& params, const BltConfig& cfg, const Dataset& ds,
                         std::span<const std::size_t> indices, std::size_t t_eval, bool keep_logits,
                         std::size_t batch_size = 64) {
  if (t_eval == 0) throw Error("config", "record: T_eval must be at least 1");
  Trajectory tr;
  tr.timesteps = t_eval;
  tr.repr_dim = cfg.repr_dim();
  tr.n_classes = cfg.n_classes;
  tr.has_logits = keep_logits;
  tr.records.resize(indices.size());
  run_inference(params, cfg, ds, indices, t_eval, batch_size,
                [&](std::size_t first, std::span<const std::size_t> batch, const auto& outputs) {
                  for (std::size_t t = 0; t < t_eval; ++t) {
                    const auto& out = outputs[t];
                    if (out.prereadout.dim(1) != tr.repr_dim)
                      throw Error("shape", "record: representation width does not match d_r");
                    const auto pred = predict_batch(out.logits);
                    for (std::size_t n = 0; n < batch.size(); ++n) {
                      auto& rec = tr.records[first + n];
                      if (t == 0) {
                        rec.image_id = first + n;
                        rec.true_label = ds.labels[batch[n]];
                      }
                      rec.predicted.push_back(static_cast<std::uint32_t>(pred[n]));
                      const auto rep = out.prereadout.data().subspan(n * tr.repr_dim, tr.repr_dim);
                      rec.representations.insert(rec.representations.end(), rep.begin(), rep.end());
                      if (keep_logits) {
                        const auto lg = out.logits.data().subspan(n * tr.n_classes, tr.n_classes);
                        rec.logits.insert(rec.logits.end(), lg.begin(), lg.end());
                      }
                    }
                  }
                });
  return tr;
}

inline Trajectory record(const Checkpoint& ckpt, const Dataset& ds, SplitPart part, std::size_t t_eval,
                         bool keep_logits) {
  const auto idx = checkpoint_split(ckpt, ds, part);
  return record(ckpt.params, ckpt.config, ds, idx, t_eval ? t_eval : ckpt.config.timesteps, keep_logits);
}

}  // namespace bltlab
