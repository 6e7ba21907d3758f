#pragma once

// Contrastive objectives over a batch of 2N embeddings, two views per source
// image. Rows 2k and 2k+1 hold the views of source k, so the partner of row i
// is i ^ 1.
//
// Every loss is a softmax over similarity logits. The cosine family uses
// z_i . z_a / tau on L2-normalized rows; the Poincare family uses
// -D_hyp(z_i, z_a) / tau on rows that went through exp_map0.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "geometry.hpp"

namespace pcon {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the encoder output holds inf or NaN; training treats it as divergence.
class NonFiniteEmbedding : public LossError {
 public:
  using LossError::LossError;
};

enum class SpaceKind { cosine_hypersphere, poincare_ball };

struct EmbeddingSpace {
  SpaceKind kind = SpaceKind::cosine_hypersphere;
  BallConfig ball{};

  static EmbeddingSpace cosine() { return {SpaceKind::cosine_hypersphere, {}}; }
  static EmbeddingSpace poincare(const BallConfig& ball) { return {SpaceKind::poincare_ball, ball}; }
  bool hyperbolic() const { return kind == SpaceKind::poincare_ball; }
};

template <class T>
struct EmbeddingBatch {
  Tensor<T> z;
  std::optional<std::vector<int>> labels;
  double temperature = 0.5;
  EmbeddingSpace space;

  std::size_t size() const { return z.rows(); }
};

inline std::size_t partner(std::size_t i) { return i ^ 1U; }

/// P(i) for every anchor: indices distinct from i that count as positives.
struct PositiveSet {
  std::vector<std::vector<std::size_t>> members;

  /// P(i) = { j(i) }.
  static PositiveSet augmentation_pairs(std::size_t n) {
    PositiveSet p;
    p.members.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.members[i] = {partner(i)};
    return p;
  }

  /// P(i) = { p != i : y_p = y_i }.
  static PositiveSet from_labels(std::span<const int> labels) {
    PositiveSet p;
    p.members.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t q = 0; q < labels.size(); ++q)
        if (q != i && labels[q] == labels[i]) p.members[i].push_back(q);
    return p;
  }

  void validate(std::size_t n) const {
    if (members.size() != n) throw LossError("positive set covers " + std::to_string(members.size()) + " anchors, batch has " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) {
      if (members[i].empty()) throw LossError("anchor " + std::to_string(i) + " has no positive; batch rejected");
      for (std::size_t q : members[i]) {
        if (q == i || q >= n) throw LossError("invalid positive index for anchor " + std::to_string(i));
      }
    }
  }
};

/// Scalar loss plus one term per anchor; total is the sum of the terms.
template <class T>
struct LossReport {
  Tensor<T> total;
  Tensor<T> per_anchor;  // [anchors, 1]

  double value() const { return double(total.item()); }
  std::vector<double> terms() const { return {per_anchor.data().begin(), per_anchor.data().end()}; }
};

// ---------------------------------------------------------------------------
// Differentiable geometry on rows

template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  Tensor<T> n = l2_norm(x, 1);
  for (T v : n.data()) {
    if (!(v > T(0))) throw LossError("zero-norm embedding row");
  }
  return x / n;
}

/// exp_map0 applied to each row, then clipped to the safety margin.
template <class T>
Tensor<T> exp_map0_rows(const Tensor<T>& v, const BallConfig& cfg) {
  cfg.validate();
  const T sc = T(cfg.sqrt_c());
  // zero rows stay zero: tanh(s)/s -> 1 as s -> 0 and the row itself is 0
  Tensor<T> n = clamp(l2_norm(v, 1), T(1e-30), std::numeric_limits<T>::max());
  Tensor<T> scaled = n * sc;
  return clip_row_norm(v * (tanh(scaled) / scaled), T(cfg.max_norm()));
}

/// Row-wise Mobius addition x_i (+)_c y_i.
template <class T>
Tensor<T> mobius_add_rows(const Tensor<T>& x, const Tensor<T>& y, double curvature) {
  const T c = T(curvature);
  Tensor<T> xy = dot(x, y, 1);
  Tensor<T> xx = dot(x, x, 1);
  Tensor<T> yy = dot(y, y, 1);
  Tensor<T> a = T(1) + T(2) * c * xy + c * yy;
  Tensor<T> b = T(1) - c * xx;
  Tensor<T> den = clamp(T(1) + T(2) * c * xy + c * c * xx * yy, T(1e-15), std::numeric_limits<T>::max());
  return (a * x + b * y) / den;
}

/// Row-wise geodesic distance between x_i and y_i through explicit Mobius
/// addition.
template <class T>
Tensor<T> hyp_distance_rows(const Tensor<T>& x, const Tensor<T>& y, const BallConfig& cfg) {
  const T sc = T(cfg.sqrt_c());
  Tensor<T> m = mobius_add_rows(-x, y, cfg.curvature);
  Tensor<T> arg = clamp(l2_norm(m, 1) * sc, T(0), T(1.0 - cfg.boundary_eps));
  return arctanh(arg) * (T(2) / sc);
}

/// All-pairs geodesic distances, using
///   |(-x) (+)_c y|^2 = |x - y|^2 / (1 - 2c<x,y> + c^2 |x|^2 |y|^2).
template <class T>
Tensor<T> pairwise_hyp_distance(const Tensor<T>& z, const BallConfig& cfg) {
  const T c = T(cfg.curvature);
  const T sc = T(cfg.sqrt_c());
  const T big = std::numeric_limits<T>::max();
  Tensor<T> diff2 = pairwise_sq_dist(z);
  Tensor<T> gram = matmul(z, transpose(z));
  Tensor<T> sq = dot(z, z, 1);
  Tensor<T> den = clamp(T(1) - T(2) * c * gram + c * c * (sq * transpose(sq)), T(1e-15), big);
  Tensor<T> gyro_norm = sqrt(clamp(diff2 / den, T(1e-30), big));
  Tensor<T> arg = clamp(gyro_norm * sc, T(0), T(1.0 - cfg.boundary_eps));
  return arctanh(arg) * (T(2) / sc);
}

// ---------------------------------------------------------------------------
// Projection and similarity

/// Cosine space: L2-normalize rows. Ball space: optionally L2-normalize, then
/// exp_map0 and clip each row.
template <class T>
EmbeddingBatch<T> project_embeddings(const Tensor<T>& raw, const EmbeddingSpace& space, bool normalize_first = true,
                                     double temperature = 0.5) {
  if (raw.rank() != 2) throw LossError("embeddings must be a [2N, d] matrix");
  for (T v : raw.data()) {
    if (!std::isfinite(double(v))) throw NonFiniteEmbedding("non-finite embedding value");
  }
  EmbeddingBatch<T> batch;
  batch.temperature = temperature;
  batch.space = space;
  if (space.hyperbolic()) {
    batch.space.ball.dim = raw.cols();
    Tensor<T> v = normalize_first ? normalize_rows(raw) : raw;
    batch.z = exp_map0_rows(v, batch.space.ball);
  } else {
    batch.z = normalize_rows(raw);
  }
  return batch;
}

template <class T>
void check_ball_membership(const Tensor<T>& z, const BallConfig& cfg) {
  const double limit = cfg.max_norm() * (1.0 + 1e-6);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) s += double(z.at(i, j)) * double(z.at(i, j));
    if (std::sqrt(s) > limit) throw LossError("embedding row " + std::to_string(i) + " lies outside the ball");
  }
}

/// Similarity logits divided by the temperature: cosine similarities of the
/// normalized rows, or negative geodesic distances.
template <class T>
Tensor<T> similarity_logits(const Tensor<T>& z, const EmbeddingSpace& space, double temperature) {
  if (!(temperature > 0.0)) throw LossError("temperature must be positive");
  const T inv_tau = T(1.0 / temperature);
  if (space.hyperbolic()) {
    BallConfig ball = space.ball;
    ball.dim = z.cols();
    check_ball_membership(z, ball);
    return pairwise_hyp_distance(z, ball) * (-inv_tau);
  }
  Tensor<T> zn = normalize_rows(z);
  return matmul(zn, transpose(zn)) * inv_tau;
}

// ---------------------------------------------------------------------------
// Generic multi-positive softmax objective

/// For each anchor a (a row of `logits` named in `anchors`):
///   term_a = - sum_q W[a][q] * (logits[a][q] - logsumexp_{m in C(a)} logits[a][m])
/// where W holds positive weights and C(a) is the candidate set.
struct ContrastivePlan {
  std::vector<std::size_t> anchors;
  std::vector<std::vector<std::pair<std::size_t, double>>> positives;  // (column, weight)
  std::vector<std::vector<std::size_t>> candidates;
};

template <class T>
LossReport<T> contrastive_terms(const Tensor<T>& logits, const ContrastivePlan& plan) {
  const std::size_t m = logits.cols(), a = plan.anchors.size();
  std::vector<T> weights(a * m, T(0));
  std::vector<T> mask(a * m, -std::numeric_limits<T>::infinity());
  for (std::size_t k = 0; k < a; ++k) {
    for (auto [col, w] : plan.positives[k]) weights[k * m + col] += T(w);
    for (std::size_t col : plan.candidates[k]) mask[k * m + col] = T(0);
  }
  Tensor<T> rows = index_rows(logits, plan.anchors);
  Tensor<T> lse = logsumexp(rows + Tensor<T>({a, m}, std::move(mask)), 1);
  Tensor<T> log_prob = rows - lse;
  Tensor<T> per_anchor = -sum(log_prob * Tensor<T>({a, m}, std::move(weights)), 1);
  return {sum(per_anchor), per_anchor};
}

/// Plan for multi-positive losses over a square batch: anchors are every row,
/// candidates are every other row, weights 1/|P(i)| on P(i).
inline ContrastivePlan batch_plan(const PositiveSet& positives, std::size_t n) {
  positives.validate(n);
  ContrastivePlan plan;
  plan.anchors.resize(n);
  plan.positives.resize(n);
  plan.candidates.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    plan.anchors[i] = i;
    const double w = 1.0 / double(positives.members[i].size());
    for (std::size_t p : positives.members[i]) plan.positives[i].push_back({p, w});
    for (std::size_t q = 0; q < n; ++q)
      if (q != i) plan.candidates[i].push_back(q);
  }
  return plan;
}

namespace detail {

template <class T>
void require_pairs(const EmbeddingBatch<T>& batch) {
  if (batch.z.rank() != 2 || batch.size() < 2 || batch.size() % 2 != 0) {
    throw LossError("batch must hold 2N >= 2 rows of paired views, got " + shape_str(batch.z.shape()));
  }
}

template <class T>
void require_space(const EmbeddingBatch<T>& batch, SpaceKind kind, const char* loss) {
  if (batch.space.kind != kind) throw LossError(std::string(loss) + ": batch is in the wrong embedding space");
}

}  // namespace detail

/// Self-supervised InfoNCE on the unit hypersphere.
template <class T>
LossReport<T> info_nce_cosine(const EmbeddingBatch<T>& batch) {
  detail::require_pairs(batch);
  detail::require_space(batch, SpaceKind::cosine_hypersphere, "info_nce_cosine");
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  return contrastive_terms(logits, batch_plan(PositiveSet::augmentation_pairs(batch.size()), batch.size()));
}

/// Self-supervised InfoNCE with negative geodesic distance as similarity.
template <class T>
LossReport<T> hcl_loss(const EmbeddingBatch<T>& batch) {
  detail::require_pairs(batch);
  detail::require_space(batch, SpaceKind::poincare_ball, "hcl_loss");
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  return contrastive_terms(logits, batch_plan(PositiveSet::augmentation_pairs(batch.size()), batch.size()));
}

/// Supervised contrastive loss, 1/|P(i)| outside the log.
template <class T>
LossReport<T> supcon_cosine(const EmbeddingBatch<T>& batch, const PositiveSet& positives) {
  detail::require_pairs(batch);
  detail::require_space(batch, SpaceKind::cosine_hypersphere, "supcon_cosine");
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  return contrastive_terms(logits, batch_plan(positives, batch.size()));
}

/// Supervised contrastive loss with negative geodesic distance as similarity.
template <class T>
LossReport<T> shcl_loss(const EmbeddingBatch<T>& batch, const PositiveSet& positives) {
  detail::require_pairs(batch);
  detail::require_space(batch, SpaceKind::poincare_ball, "shcl_loss");
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  return contrastive_terms(logits, batch_plan(positives, batch.size()));
}

template <class T>
PositiveSet positives_from_batch(const EmbeddingBatch<T>& batch) {
  if (!batch.labels) throw LossError("supervised loss needs labels");
  if (batch.labels->size() != batch.size()) throw LossError("label count does not match batch size");
  return PositiveSet::from_labels(*batch.labels);
}

}  // namespace pcon
