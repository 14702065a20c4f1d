#pragma once

// Labeled image datasets: the `.mesd` binary container, the `.hierarchy`
// text sidecar, a synthetic hierarchical generator and stratified splits.
//
// .mesd layout (little-endian):
//   char[4] "MESD" | u32 version=1 | u32 n_images | u16 H | u16 W | u16 C |
//   u16 n_classes | n_images x (u32 label | H*W*C u8 pixels, channel-last)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "bltlab/common.hpp"
#include "bltlab/tensor.hpp"

namespace bltlab {

inline constexpr std::array<char, 4> kDatasetMagic{'M', 'E', 'S', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 20;

struct DatasetHeader {
  std::uint32_t n_images = 0;
  std::uint16_t height = 0, width = 0, channels = 0, n_classes = 0;

  std::size_t image_bytes() const { return std::size_t{height} * width * channels; }
  bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint8_t> pixels;  // n_images * H*W*C, channel-last

  std::size_t size() const { return labels.size(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    const std::size_t n = header.image_bytes();
    return std::span<const std::uint8_t>(pixels).subspan(i * n, n);
  }

  bool operator==(const Dataset&) const = default;
};

struct ClassInfo {
  std::string name;
  std::uint32_t superclass = 0;

  bool operator==(const ClassInfo&) const = default;
};

struct ClassHierarchy {
  std::vector<std::string> superclass_names;
  std::vector<ClassInfo> classes;

  bool operator==(const ClassHierarchy&) const = default;

  /// Text form: comment lines start with '#'; "super <id> <name>" and
  /// "class <id> <name> <superclass id>" records, ids dense from 0.
  std::string to_text() const {
    std::ostringstream os;
    os << "# class hierarchy v1\n";
    for (std::size_t s = 0; s < superclass_names.size(); ++s)
      os << "super " << s << ' ' << superclass_names[s] << '\n';
    for (std::size_t c = 0; c < classes.size(); ++c)
      os << "class " << c << ' ' << classes[c].name << ' ' << classes[c].superclass << '\n';
    return os.str();
  }

  static ClassHierarchy from_text(const std::string& text) {
    ClassHierarchy h;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
      throw Error("hierarchy", "hierarchy line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string kind, name;
      long long id = -1;
      if (!(ls >> kind >> id >> name)) fail("malformed record");
      if (kind == "super") {
        if (id != static_cast<long long>(h.superclass_names.size())) fail("superclass ids must be dense");
        h.superclass_names.push_back(name);
      } else if (kind == "class") {
        long long super = -1;
        if (!(ls >> super) || super < 0) fail("class record needs a superclass id");
        if (id != static_cast<long long>(h.classes.size())) fail("class ids must be dense");
        h.classes.push_back({name, static_cast<std::uint32_t>(super)});
      } else {
        fail("unknown record kind '" + kind + "'");
      }
      std::string extra;
      if (ls >> extra) fail("trailing field '" + extra + "'");
    }
    for (std::size_t c = 0; c < h.classes.size(); ++c)
      if (h.classes[c].superclass >= h.superclass_names.size())
        throw Error("hierarchy", "class " + std::to_string(c) + " names unknown superclass " +
                                     std::to_string(h.classes[c].superclass));
    return h;
  }
};

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
  const auto& h = ds.header;
  if (h.channels != 1 && h.channels != 3)
    throw Error("format", "dataset channel count must be 1 or 3, got " + std::to_string(h.channels));
  if (ds.labels.size() != h.n_images || ds.pixels.size() != h.n_images * h.image_bytes())
    throw Error("format", "dataset buffers do not match header");
  ByteWriter w;
  w.put_bytes({kDatasetMagic.data(), 4});
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(h.n_images);
  w.put<std::uint16_t>(h.height);
  w.put<std::uint16_t>(h.width);
  w.put<std::uint16_t>(h.channels);
  w.put<std::uint16_t>(h.n_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] >= h.n_classes)
      throw Error("label", "image " + std::to_string(i) + " has label " +
                               std::to_string(ds.labels[i]) + " >= n_classes " +
                               std::to_string(h.n_classes));
    w.put<std::uint32_t>(ds.labels[i]);
    w.put_span(ds.image(i));
  }
  return w.release();
}

inline Dataset decode_dataset(std::span<const unsigned char> bytes) {
  ByteReader r(bytes, "mesd");
  if (r.get_string(4) != std::string(kDatasetMagic.data(), 4))
    throw Error("bad_magic", "mesd: bad magic (expected \"MESD\")");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion)
    throw Error("bad_version", "mesd: unsupported version " + std::to_string(version));
  Dataset ds;
  auto& h = ds.header;
  h.n_images = r.get<std::uint32_t>();
  h.height = r.get<std::uint16_t>();
  h.width = r.get<std::uint16_t>();
  h.channels = r.get<std::uint16_t>();
  h.n_classes = r.get<std::uint16_t>();
  if (h.channels != 1 && h.channels != 3)
    throw Error("format", "mesd: channel count must be 1 or 3, got " + std::to_string(h.channels));
  if (h.height == 0 || h.width == 0 || h.n_classes == 0)
    throw Error("format", "mesd: zero extent in header");
  const std::size_t expected = kDatasetHeaderBytes + std::size_t{h.n_images} * (4 + h.image_bytes());
  if (bytes.size() != expected)
    throw Error(bytes.size() < expected ? "truncated" : "format",
                "mesd: expected " + std::to_string(expected) + " bytes, got " +
                    std::to_string(bytes.size()));
  ds.labels.resize(h.n_images);
  ds.pixels.resize(std::size_t{h.n_images} * h.image_bytes());
  for (std::size_t i = 0; i < h.n_images; ++i) {
    ds.labels[i] = r.get<std::uint32_t>();
    if (ds.labels[i] >= h.n_classes)
      throw Error("label", "mesd: image " + std::to_string(i) + " has label " +
                               std::to_string(ds.labels[i]) + " >= n_classes " +
                               std::to_string(h.n_classes));
    r.get_into(std::span<std::uint8_t>(ds.pixels).subspan(i * h.image_bytes(), h.image_bytes()));
  }
  return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  write_file_bytes(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::string& path) { return decode_dataset(read_file_bytes(path)); }

/// Converts the listed images to an [N,C,H,W] tensor scaled to [0,1].
template <typename T = float>
Tensor<T> images_to_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  const auto& h = ds.header;
  const std::size_t hw = std::size_t{h.height} * h.width;
  std::vector<T> data(indices.size() * h.channels * hw);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto img = ds.image(indices[n]);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < h.channels; ++c)
        data[(n * h.channels + c) * hw + p] = static_cast<T>(img[p * h.channels + c]) / T(255);
  }
  return Tensor<T>({indices.size(), h.channels, h.height, h.width}, std::move(data));
}

struct SynthOptions {
  std::size_t n_super = 2;
  std::size_t n_sub_per_super = 5;
  std::size_t n_per_class = 100;
  std::size_t side = 16;
  double noise_std = 0.05;  // in [0,1] intensity units
  std::uint64_t seed = 0;
};

struct SynthResult {
  Dataset dataset;
  ClassHierarchy hierarchy;
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double hue, double sat, double val) {
  hue = hue - std::floor(hue);
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
  switch (sector) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

// Shape families, one per superclass: a filled disc, then regular polygons
// with 3, 4, 5, ... vertices. Coordinates are relative to the shape centre.
inline bool inside_shape(std::size_t family, double x, double y, double radius, double angle) {
  if (family == 0) return x * x + y * y <= radius * radius;
  const std::size_t vertices = family + 2;
  const double step = 2.0 * M_PI / static_cast<double>(vertices);
  // inside iff on the inner side of every edge
  for (std::size_t v = 0; v < vertices; ++v) {
    const double a0 = angle + step * static_cast<double>(v);
    const double a1 = a0 + step;
    const double x0 = radius * std::cos(a0), y0 = radius * std::sin(a0);
    const double x1 = radius * std::cos(a1), y1 = radius * std::sin(a1);
    if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) return false;
  }
  return true;
}

}  // namespace detail

/// Synthetic hierarchical dataset: the superclass picks the shape family and
/// a band of the hue circle, the subclass picks a hue inside that band and a
/// stripe texture. Positions are jittered and Gaussian pixel noise is added.
inline SynthResult synth_generate(const SynthOptions& opt) {
  if (opt.n_super < 2) throw Error("config", "synth: need at least 2 superclasses");
  if (opt.n_sub_per_super < 1 || opt.n_per_class < 1)
    throw Error("config", "synth: subclass and per-class counts must be positive");
  if (opt.side < 4 || opt.side > 65535) throw Error("config", "synth: side must be in [4, 65535]");
  const std::size_t n_classes = opt.n_super * opt.n_sub_per_super;
  if (n_classes > 65535) throw Error("overflow", "synth: class count " + std::to_string(n_classes) + " overflows u16");
  const std::size_t n_images = n_classes * opt.n_per_class;
  if (n_images > UINT32_MAX) throw Error("overflow", "synth: image count overflows u32");
  if (opt.noise_std < 0) throw Error("config", "synth: noise_std must be non-negative");

  SynthResult out;
  for (std::size_t s = 0; s < opt.n_super; ++s)
    out.hierarchy.superclass_names.push_back(s == 0 ? "disc" : "poly" + std::to_string(s + 2));
  for (std::size_t s = 0; s < opt.n_super; ++s)
    for (std::size_t k = 0; k < opt.n_sub_per_super; ++k)
      out.hierarchy.classes.push_back(
          {out.hierarchy.superclass_names[s] + "_" + std::to_string(k), static_cast<std::uint32_t>(s)});

  auto& ds = out.dataset;
  ds.header = {static_cast<std::uint32_t>(n_images), static_cast<std::uint16_t>(opt.side),
               static_cast<std::uint16_t>(opt.side), 3, static_cast<std::uint16_t>(n_classes)};
  ds.labels.reserve(n_images);
  ds.pixels.resize(n_images * opt.side * opt.side * 3);

  Rng rng(opt.seed);
  const double side = static_cast<double>(opt.side);
  const double jitter = side / 8.0;
  std::size_t idx = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::size_t super = c / opt.n_sub_per_super, sub = c % opt.n_sub_per_super;
    const double hue = (static_cast<double>(super) +
                        0.8 * (static_cast<double>(sub) + 0.5) / static_cast<double>(opt.n_sub_per_super)) /
                       static_cast<double>(opt.n_super);
    const auto color = detail::hsv_to_rgb(hue, 0.85, 0.95);
    const double stripe_period = 2.0 + static_cast<double>(sub % 3);
    for (std::size_t i = 0; i < opt.n_per_class; ++i, ++idx) {
      ds.labels.push_back(static_cast<std::uint32_t>(c));
      const double cx = side / 2.0 + rng.uniform(-jitter, jitter);
      const double cy = side / 2.0 + rng.uniform(-jitter, jitter);
      const double radius = side * rng.uniform(0.26, 0.34);
      const double angle = rng.uniform(0.0, 2.0 * M_PI);
      std::uint8_t* img = ds.pixels.data() + idx * opt.side * opt.side * 3;
      for (std::size_t y = 0; y < opt.side; ++y)
        for (std::size_t x = 0; x < opt.side; ++x) {
          const double px = static_cast<double>(x) + 0.5 - cx, py = static_cast<double>(y) + 0.5 - cy;
          const bool in = detail::inside_shape(super, px, py, radius, angle);
          const double stripe =
              std::fmod(static_cast<double>(x + y), stripe_period) < 1.0 ? 1.0 : 0.75;
          for (std::size_t ch = 0; ch < 3; ++ch) {
            double v = in ? color[ch] * stripe : 0.15;
            if (opt.noise_std > 0) v += opt.noise_std * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            img[(y * opt.side + x) * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
          }
        }
    }
  }
  return out;
}

struct Split {
  std::vector<std::vector<std::size_t>> parts;  // sorted image indices per part
};

/// Stratified split: each class is shuffled independently and divided by
/// largest-remainder rounding, with at least one image per class in every
/// part whose fraction is positive.
inline Split stratified_split(const Dataset& ds, std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) throw Error("config", "split: no fractions given");
  double total = 0;
  for (double f : fractions) {
    if (f < 0) throw Error("config", "split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("config", "split: fractions must sum to 1");
  const std::size_t n_parts = fractions.size();
  const std::size_t n_positive =
      static_cast<std::size_t>(std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0; }));

  std::vector<std::vector<std::size_t>> by_class(ds.header.n_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  Split split;
  split.parts.resize(n_parts);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < n_positive)
      throw Error("split", "class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                               " images, fewer than the " + std::to_string(n_positive) + " splits");
    Rng rng(mix_seed(seed, c));
    rng.shuffle(members);

    const double n = static_cast<double>(members.size());
    std::vector<std::size_t> counts(n_parts);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t p = 0; p < n_parts; ++p) {
      const double ideal = fractions[p] * n;
      counts[p] = static_cast<std::size_t>(std::floor(ideal + 1e-9));
      assigned += counts[p];
      remainders.emplace_back(-(ideal - static_cast<double>(counts[p])), p);
    }
    std::stable_sort(remainders.begin(), remainders.end());
    for (std::size_t k = 0; assigned < members.size(); ++k, ++assigned) ++counts[remainders[k % n_parts].second];
    // guarantee representation in every positive part
    for (std::size_t p = 0; p < n_parts; ++p) {
      if (fractions[p] <= 0 || counts[p] > 0) continue;
      const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      --counts[donor];
      ++counts[p];
    }
    std::size_t pos = 0;
    for (std::size_t p = 0; p < n_parts; ++p)
      for (std::size_t k = 0; k < counts[p]; ++k) split.parts[p].push_back(members[pos++]);
  }
  for (auto& part : split.parts) std::sort(part.begin(), part.end());
  return split;
}

/// Subset of a dataset (images copied in the given order).
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.header = ds.header;
  out.header.n_images = static_cast<std::uint32_t>(indices.size());
  for (std::size_t i : indices) {
    out.labels.push_back(ds.labels.at(i));
    const auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

}  // namespace bltlab
