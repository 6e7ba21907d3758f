#pragma once

// Dataset ingestion and the stochastic view generator.
//
//  * CIFAR-10 binary batches: 3073-byte records (label byte + 3072 pixel
//    bytes, channel-planar R, G, B).
//  * Synthetic hierarchical data grown down a regular tree.
//  * HTREE1 export of synthetic data.
//  * Augmentations: pad-reflect + random crop, horizontal flip, per-channel
//    brightness/contrast jitter, random grayscale; a Gaussian/masking variant
//    for plain feature vectors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nn.hpp"

namespace pcon {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// In-memory datasets

/// Row-major float features in [0,1] for images, arbitrary reals otherwise.
struct Dataset {
  std::vector<float> x;
  std::vector<int> y;
  std::size_t dim = 0;
  int classes = 0;
  std::optional<ImageGeometry> image;

  std::size_t size() const { return y.size(); }
  bool labeled() const { return classes > 0; }
  std::span<const float> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
};

struct DataSplit {
  Dataset train, test;
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifarRecordBytes = kCifarPixels + 1;

struct ImageRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};

  std::vector<float> to_float() const {
    std::vector<float> out(kCifarPixels);
    for (std::size_t k = 0; k < kCifarPixels; ++k) out[k] = float(pixels[k]) / 255.0f;
    return out;
  }

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

inline std::vector<ImageRecord> parse_cifar_bytes(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw DataError(origin + ": truncated CIFAR file (" + std::to_string(bytes.size()) + " bytes is not a multiple of 3073)");
  }
  std::vector<ImageRecord> out(bytes.size() / kCifarRecordBytes);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const std::uint8_t* p = bytes.data() + r * kCifarRecordBytes;
    if (p[0] > 9) throw DataError(origin + ": record " + std::to_string(r) + " has label byte " + std::to_string(p[0]));
    out[r].label = p[0];
    std::memcpy(out[r].pixels.data(), p + 1, kCifarPixels);
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<ImageRecord> parse_cifar_binary(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_cifar_bytes(bytes, path.string());
}

inline std::vector<std::uint8_t> serialize_cifar(std::span<const ImageRecord> records) {
  std::vector<std::uint8_t> out;
  out.reserve(records.size() * kCifarRecordBytes);
  for (const auto& r : records) {
    out.push_back(r.label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline Dataset records_to_dataset(std::span<const ImageRecord> records, int classes = 10) {
  Dataset d;
  d.dim = kCifarPixels;
  d.classes = classes;
  d.image = ImageGeometry{};
  d.x.reserve(records.size() * kCifarPixels);
  for (const auto& r : records) {
    for (std::uint8_t p : r.pixels) d.x.push_back(float(p) / 255.0f);
    d.y.push_back(r.label);
  }
  return d;
}

/// First `per_class` records of each class, in file order.
inline std::vector<ImageRecord> first_k_per_class(std::span<const ImageRecord> records, std::size_t per_class) {
  std::array<std::size_t, 10> taken{};
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (taken[r.label] < per_class) {
      ++taken[r.label];
      out.push_back(r);
    }
  }
  return out;
}

/// Fixed desk subset: first-k per class from data_batch_1..5 and test_batch.
inline DataSplit load_cifar_desk(const std::filesystem::path& dir, std::size_t train_per_class = 500,
                                 std::size_t test_per_class = 100) {
  std::vector<ImageRecord> train;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(path)) {
      if (b == 1) throw DataError("missing CIFAR-10 file " + path.string());
      break;
    }
    auto part = parse_cifar_binary(path);
    train.insert(train.end(), part.begin(), part.end());
  }
  const auto test_path = dir / "test_batch.bin";
  if (!std::filesystem::exists(test_path)) throw DataError("missing CIFAR-10 file " + test_path.string());
  const auto test = parse_cifar_binary(test_path);
  return {records_to_dataset(first_k_per_class(train, train_per_class)),
          records_to_dataset(first_k_per_class(test, test_per_class))};
}

// ---------------------------------------------------------------------------
// Synthetic tree data

/// Regular tree: the root has b+1 children, every other inner node has b,
/// so level l holds (b+1) b^(l-1) nodes. Edge noise at level l has scale
/// edge_noise * edge_decay^(l-1).
struct TreeDatasetSpec {
  int branching = 2;
  int depth = 3;
  int class_level = 1;
  std::size_t feature_dim = 32;
  double edge_noise = 1.0;
  double edge_decay = 0.5;
  double obs_noise = 0.1;

  void validate() const {
    if (branching < 2) throw DataError("tree branching must be >= 2");
    if (depth < 1) throw DataError("tree depth must be >= 1");
    if (class_level < 1 || class_level > depth) throw DataError("class level must lie in [1, depth]");
    if (feature_dim == 0) throw DataError("feature dimension must be positive");
    if (edge_noise < 0 || obs_noise < 0 || edge_decay <= 0) throw DataError("noise scales must be non-negative");
  }

  static std::size_t nodes_at_level(int b, int level) {
    std::size_t n = std::size_t(b + 1);
    for (int l = 1; l < level; ++l) n *= std::size_t(b);
    return n;
  }

  std::size_t leaf_count() const { return nodes_at_level(branching, depth); }
  std::size_t class_count() const { return nodes_at_level(branching, class_level); }

  /// Expected squared distance of a sample from its class-level ancestor,
  /// per feature: the edge variances below the class level plus the
  /// observation variance.
  double intra_class_variance() const {
    double v = obs_noise * obs_noise;
    for (int l = class_level + 1; l <= depth; ++l) v += std::pow(edge_noise * std::pow(edge_decay, l - 1), 2);
    return v;
  }

  /// Expected squared distance between two class-level ancestors, per
  /// feature: each path from their common ancestor contributes its variance.
  double inter_class_variance() const {
    double v = 0.0;
    for (int l = 1; l <= class_level; ++l) v += std::pow(edge_noise * std::pow(edge_decay, l - 1), 2);
    return 2.0 * v;
  }

  /// Largest observation noise for which E|centroid_a - centroid_b|^2 still
  /// exceeds E|sample - centroid|^2.
  double separation_threshold() const {
    TreeDatasetSpec s = *this;
    s.obs_noise = 0.0;
    const double slack = inter_class_variance() - s.intra_class_variance();
    return slack > 0 ? std::sqrt(slack) : 0.0;
  }
};

struct TreeDataset {
  Dataset data;
  std::vector<std::size_t> leaf;  // leaf index of every sample
};

/// Samples are grouped by leaf, n_per_leaf consecutive rows each. The label
/// is the index of the sample's ancestor at spec.class_level.
inline TreeDataset gen_tree_dataset(const TreeDatasetSpec& spec, std::size_t n_per_leaf, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t d = spec.feature_dim;

  // node features level by level; the root is the origin
  std::vector<std::vector<double>> level{std::vector<double>(d, 0.0)};
  std::vector<std::size_t> class_of(1, 0);
  for (int l = 1; l <= spec.depth; ++l) {
    const std::size_t fanout = l == 1 ? std::size_t(spec.branching + 1) : std::size_t(spec.branching);
    const double scale = spec.edge_noise * std::pow(spec.edge_decay, l - 1);
    std::vector<std::vector<double>> next;
    std::vector<std::size_t> next_class;
    for (std::size_t p = 0; p < level.size(); ++p) {
      for (std::size_t c = 0; c < fanout; ++c) {
        std::vector<double> f(level[p]);
        for (double& v : f) v += scale * gauss(rng);
        next_class.push_back(l == spec.class_level ? next.size() : class_of[p]);
        next.push_back(std::move(f));
      }
    }
    level = std::move(next);
    class_of = std::move(next_class);
  }

  TreeDataset out;
  out.data.dim = d;
  out.data.classes = int(spec.class_count());
  out.data.x.reserve(level.size() * n_per_leaf * d);
  for (std::size_t leaf = 0; leaf < level.size(); ++leaf) {
    for (std::size_t s = 0; s < n_per_leaf; ++s) {
      for (std::size_t k = 0; k < d; ++k) out.data.x.push_back(float(level[leaf][k] + spec.obs_noise * gauss(rng)));
      out.data.y.push_back(int(class_of[leaf]));
      out.leaf.push_back(leaf);
    }
  }
  return out;
}

/// Splits every leaf's consecutive block: the first n_train rows go to train.
inline DataSplit split_per_leaf(const TreeDataset& t, std::size_t n_per_leaf, std::size_t n_train) {
  DataSplit s;
  for (Dataset* d : {&s.train, &s.test}) {
    d->dim = t.data.dim;
    d->classes = t.data.classes;
    d->image = t.data.image;
  }
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    Dataset& d = (i % n_per_leaf) < n_train ? s.train : s.test;
    const auto r = t.data.row(i);
    d.x.insert(d.x.end(), r.begin(), r.end());
    d.y.push_back(t.data.y[i]);
  }
  return s;
}

/// Renders latent tree features as 32x32 RGB images: every latent coordinate
/// drives a smooth coloured blob and the sum passes through a logistic
/// squash. The blob layout is fixed by `seed`.
inline std::vector<ImageRecord> render_tree_images(const Dataset& latent, std::uint64_t seed, double gain = 1.0) {
  const ImageGeometry g{};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(4.0, 28.0), width(3.0, 7.0);
  std::normal_distribution<double> colour(0.0, 1.0);
  std::vector<std::vector<float>> basis(latent.dim, std::vector<float>(g.size()));
  for (auto& b : basis) {
    const double cx = pos(rng), cy = pos(rng), s = width(rng);
    const std::array<double, 3> col{colour(rng), colour(rng), colour(rng)};
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) {
          const double r2 = (double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy);
          b[ch * 1024 + y * 32 + x] = float(col[ch] * std::exp(-r2 / (2 * s * s)));
        }
  }
  std::vector<ImageRecord> out(latent.size());
  std::vector<double> acc(g.size());
  for (std::size_t i = 0; i < latent.size(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto z = latent.row(i);
    for (std::size_t k = 0; k < latent.dim; ++k)
      for (std::size_t p = 0; p < g.size(); ++p) acc[p] += double(z[k]) * basis[k][p];
    out[i].label = std::uint8_t(latent.y[i]);
    for (std::size_t p = 0; p < g.size(); ++p) {
      const double v = 1.0 / (1.0 + std::exp(-gain * acc[p]));
      out[i].pixels[p] = std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// HTREE1 export: "HTREE1", u32 n, u32 dim, u32 classes (little-endian), then
// n*dim float32 features row-major, then n int32 labels.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(std::uint8_t(v >> (8 * k)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& off) {
  if (off + 4 > in.size()) throw DataError("unexpected end of file");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= std::uint32_t(in[off + std::size_t(k)]) << (8 * k);
  off += 4;
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(std::span<const std::uint8_t> in, std::size_t& off) {
  const std::uint32_t bits = get_u32(in, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline constexpr std::string_view kHtreeMagic = "HTREE1";

inline std::vector<std::uint8_t> encode_htree(const Dataset& d) {
  std::vector<std::uint8_t> out(kHtreeMagic.begin(), kHtreeMagic.end());
  detail::put_u32(out, std::uint32_t(d.size()));
  detail::put_u32(out, std::uint32_t(d.dim));
  detail::put_u32(out, std::uint32_t(d.classes));
  for (float v : d.x) detail::put_f32(out, v);
  for (int y : d.y) detail::put_u32(out, std::uint32_t(y));
  return out;
}

inline Dataset decode_htree(std::span<const std::uint8_t> in, const std::string& origin = "<memory>") {
  if (in.size() < kHtreeMagic.size() ||
      !std::equal(kHtreeMagic.begin(), kHtreeMagic.end(), in.begin())) {
    throw DataError(origin + ": not an HTREE1 file");
  }
  try {
    std::size_t off = kHtreeMagic.size();
    Dataset d;
    const std::size_t n = detail::get_u32(in, off);
    d.dim = detail::get_u32(in, off);
    d.classes = int(detail::get_u32(in, off));
    if (in.size() != off + n * d.dim * 4 + n * 4) throw DataError("size does not match header");
    d.x.resize(n * d.dim);
    for (float& v : d.x) v = detail::get_f32(in, off);
    d.y.resize(n);
    for (int& y : d.y) {
      y = int(std::int32_t(detail::get_u32(in, off)));
      // classes == 0 marks an unlabeled file whose labels are all -1
      if (d.classes == 0 ? y != -1 : (y < 0 || y >= d.classes)) throw DataError("label out of range");
    }
    return d;
  } catch (const DataError& e) {
    throw DataError(origin + ": " + e.what());
  }
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

// ---------------------------------------------------------------------------
// Augmentation

/// Deterministic 64-bit mix (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct AugmentationPolicy {
  std::size_t crop_pad = 4;  // reflect-pad then crop back at a random offset; 0 disables
  double hflip_p = 0.5;
  std::array<double, 3> brightness{0.4, 0.4, 0.4};  // factor ~ U[1-b, 1+b] per channel
  std::array<double, 3> contrast{0.4, 0.4, 0.4};    // factor ~ U[1-k, 1+k] per channel
  double grayscale_p = 0.2;
  std::uint64_t seed = 0;

  static AugmentationPolicy identity() {
    AugmentationPolicy p;
    p.crop_pad = 0;
    p.hflip_p = 0.0;
    p.brightness = {0, 0, 0};
    p.contrast = {0, 0, 0};
    p.grayscale_p = 0.0;
    return p;
  }
};

/// One view t(x). The same (policy.seed, draw) always yields the same view.
inline std::vector<float> augment(std::span<const float> x, const ImageGeometry& g, const AugmentationPolicy& policy,
                                  std::uint64_t draw) {
  if (x.size() != g.size()) throw DataError("augment: image size does not match geometry");
  std::mt19937_64 rng(mix64(policy.seed ^ mix64(draw)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t h = g.height, w = g.width, plane = h * w;

  std::vector<float> out(x.begin(), x.end());
  if (policy.crop_pad > 0) {
    const long pad = long(policy.crop_pad);
    std::uniform_int_distribution<long> offset(0, 2 * pad);
    const long oy = offset(rng) - pad, ox = offset(rng) - pad;
    auto reflect = [](long i, long n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
      return std::size_t(std::clamp(i, 0L, n - 1));
    };
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          out[c * plane + y * w + xx] =
              x[c * plane + reflect(long(y) + oy, long(h)) * w + reflect(long(xx) + ox, long(w))];
  }
  if (unit(rng) < policy.hflip_p) {
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t y = 0; y < h; ++y) std::reverse(out.begin() + long(c * plane + y * w), out.begin() + long(c * plane + y * w + w));
  }
  for (std::size_t c = 0; c < g.channels && c < 3; ++c) {
    const double b = 1.0 + policy.brightness[c] * (2.0 * unit(rng) - 1.0);
    const double k = 1.0 + policy.contrast[c] * (2.0 * unit(rng) - 1.0);
    float* p = out.data() + c * plane;
    if (b != 1.0) {
      for (std::size_t q = 0; q < plane; ++q) p[q] = float(std::clamp(double(p[q]) * b, 0.0, 1.0));
    }
    if (k != 1.0) {
      double m = 0.0;
      for (std::size_t q = 0; q < plane; ++q) m += p[q];
      m /= double(plane);
      for (std::size_t q = 0; q < plane; ++q) p[q] = float(std::clamp((double(p[q]) - m) * k + m, 0.0, 1.0));
    }
  }
  if (g.channels == 3 && unit(rng) < policy.grayscale_p) {
    for (std::size_t q = 0; q < plane; ++q) {
      const float l = float(std::clamp(0.299 * out[q] + 0.587 * out[plane + q] + 0.114 * out[2 * plane + q], 0.0, 1.0));
      out[q] = out[plane + q] = out[2 * plane + q] = l;
    }
  }
  return out;
}

/// View generator for plain feature vectors: additive Gaussian noise and
/// random coordinate masking.
struct VectorAugmentation {
  double noise = 0.1;
  double mask_p = 0.1;
  std::uint64_t seed = 0;
};

inline std::vector<float> augment_vector(std::span<const float> x, const VectorAugmentation& policy, std::uint64_t draw) {
  std::mt19937_64 rng(mix64(policy.seed ^ mix64(draw)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<float> out(x.begin(), x.end());
  for (float& v : out) {
    const double keep = unit(rng) < policy.mask_p ? 0.0 : 1.0;
    v = float(keep * (double(v) + policy.noise * gauss(rng)));
  }
  return out;
}

}  // namespace pcon
