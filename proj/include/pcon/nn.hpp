#pragma once

// Encoder f, projection head g and linear probe, all trained in Euclidean
// parameter space. The hyperbolic map acts on activations only.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"

namespace pcon {

enum class EncoderKind { mlp, conv_stem_mlp };

inline const char* to_string(EncoderKind k) { return k == EncoderKind::mlp ? "mlp" : "conv-stem-mlp"; }

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "mlp") return EncoderKind::mlp;
  if (s == "conv-stem-mlp") return EncoderKind::conv_stem_mlp;
  throw std::invalid_argument("unknown encoder kind '" + s + "' (expected mlp or conv-stem-mlp)");
}

struct ImageGeometry {
  std::size_t channels = 3, height = 32, width = 32;
  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;
};

struct EncoderSpec {
  EncoderKind kind = EncoderKind::mlp;
  std::size_t input_dim = 3072;
  ImageGeometry image{};                   // used by the conv stem only
  std::vector<std::size_t> widths{512, 256};  // hidden layers of f, relu after each
  std::size_t conv_channels = 8;
  std::size_t embed_dim = 128;   // output of g
  std::size_t proj_hidden = 0;   // 0: g is one affine layer

  std::size_t feature_dim() const { return widths.empty() ? stem_output_dim() : widths.back(); }

  std::size_t stem_output_dim() const {
    return kind == EncoderKind::conv_stem_mlp ? conv_channels * (image.height / 2) * (image.width / 2) : input_dim;
  }

  void validate() const {
    if (input_dim == 0 || embed_dim == 0) throw std::invalid_argument("encoder dimensions must be positive");
    if (kind == EncoderKind::conv_stem_mlp) {
      if (image.size() != input_dim) throw std::invalid_argument("conv stem needs image-shaped input");
      if (image.height % 2 || image.width % 2) throw std::invalid_argument("conv stem needs even image sides");
      if (conv_channels == 0) throw std::invalid_argument("conv_channels must be positive");
    }
    for (std::size_t w : widths) {
      if (w == 0) throw std::invalid_argument("layer widths must be positive");
    }
  }
};

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [1, out]

  /// Uniform fan-in init with bound sqrt(6 / fan_in), zero bias.
  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / double(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> w(in * out);
    for (T& v : w) v = T(u(rng));
    return {Tensor<T>({in, out}, std::move(w), true), Tensor<T>({1, out}, T(0), true)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return matmul(x, weight) + bias; }
};

/// Encoder f followed by projection head g.
template <class T>
class ContrastiveNet {
 public:
  ContrastiveNet() = default;

  ContrastiveNet(const EncoderSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    if (spec_.kind == EncoderKind::conv_stem_mlp) {
      const std::size_t fan_in = spec_.image.channels * 9;
      const double bound = std::sqrt(6.0 / double(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<T> w(spec_.conv_channels * fan_in);
      for (T& v : w) v = T(u(rng));
      conv_weight_ = Tensor<T>({spec_.conv_channels, fan_in}, std::move(w), true);
      conv_bias_ = Tensor<T>({1, spec_.conv_channels}, T(0), true);
    }
    std::size_t in = spec_.stem_output_dim();
    for (std::size_t w : spec_.widths) {
      encoder_.push_back(Linear<T>::init(in, w, rng));
      in = w;
    }
    if (spec_.proj_hidden > 0) {
      head_.push_back(Linear<T>::init(in, spec_.proj_hidden, rng));
      in = spec_.proj_hidden;
    }
    head_.push_back(Linear<T>::init(in, spec_.embed_dim, rng));
  }

  const EncoderSpec& spec() const { return spec_; }

  /// f(x): the representation handed to the linear probe.
  Tensor<T> features(const Tensor<T>& x) const {
    if (x.cols() != spec_.input_dim) {
      throw ShapeError("encoder expects " + std::to_string(spec_.input_dim) + " inputs, got " + shape_str(x.shape()));
    }
    Tensor<T> h = x;
    if (spec_.kind == EncoderKind::conv_stem_mlp) {
      const auto& g = spec_.image;
      h = relu(conv3x3(h, conv_weight_, conv_bias_, g.channels, g.height, g.width));
      h = avg_pool2x2(h, spec_.conv_channels, g.height, g.width);
    }
    for (const auto& layer : encoder_) h = relu(layer(h));
    return h;
  }

  /// z = g(f(x)), before any normalization or exponential map.
  Tensor<T> embed(const Tensor<T>& x) const {
    Tensor<T> h = features(x);
    for (std::size_t i = 0; i < head_.size(); ++i) {
      h = head_[i](h);
      if (i + 1 < head_.size()) h = relu(h);
    }
    return h;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    if (spec_.kind == EncoderKind::conv_stem_mlp) {
      out.push_back({"stem.weight", conv_weight_});
      out.push_back({"stem.bias", conv_bias_});
    }
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      out.push_back({"encoder." + std::to_string(i) + ".weight", encoder_[i].weight});
      out.push_back({"encoder." + std::to_string(i) + ".bias", encoder_[i].bias});
    }
    for (std::size_t i = 0; i < head_.size(); ++i) {
      out.push_back({"head." + std::to_string(i) + ".weight", head_[i].weight});
      out.push_back({"head." + std::to_string(i) + ".bias", head_[i].bias});
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// Encoder parameters only (the part a linear probe must leave untouched).
  std::vector<Tensor<T>> encoder_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters())
      if (name.rfind("head.", 0) != 0) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool on) const {
    for (auto& t : parameters()) t.node()->requires_grad = on;
  }

 private:
  EncoderSpec spec_;
  Tensor<T> conv_weight_, conv_bias_;
  std::vector<Linear<T>> encoder_;
  std::vector<Linear<T>> head_;
};

/// Turns off parameter gradients for a scope, e.g. while crafting attacks.
template <class Net>
class FrozenScope {
 public:
  explicit FrozenScope(const Net& net) : net_(net) { net_.set_requires_grad(false); }
  ~FrozenScope() { net_.set_requires_grad(true); }
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  const Net& net_;
};

/// Affine classifier on frozen features.
template <class T>
struct LinearProbe {
  Linear<T> layer;

  LinearProbe() = default;
  LinearProbe(std::size_t features, std::size_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    layer = Linear<T>::init(features, classes, rng);
    // logits start near zero so the first epoch is not dominated by init
    for (T& v : layer.weight.data()) v *= T(0.01);
  }

  Tensor<T> operator()(const Tensor<T>& features) const { return layer(features); }
  std::size_t classes() const { return layer.weight.cols(); }
  void set_requires_grad(bool on) const {
    layer.weight.node()->requires_grad = on;
    layer.bias.node()->requires_grad = on;
  }
};

/// Mean softmax cross-entropy of logits [B, K] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t b = logits.rows(), k = logits.cols();
  if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<T> onehot(b * k, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= k) throw ShapeError("cross_entropy: label out of range");
    onehot[i * k + std::size_t(labels[i])] = T(1);
  }
  Tensor<T> picked = sum(logits * Tensor<T>({b, k}, std::move(onehot)), 1);
  return mean(logsumexp(logits, 1) - picked);
}

}  // namespace pcon
