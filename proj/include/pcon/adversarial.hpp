#pragma once

// Instance-wise l_inf attacks on contrastive objectives and the robust
// hyperbolic training loss built on them.
//
// Batches are laid out as stacked blocks of N rows: anchors x~, positives x~+
// and, where present, adversarial views x~adv. The negatives of source k are
// the clean views {x~_m, x~+_m : m != k}.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "losses.hpp"

namespace pcon {

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 10;
  EmbeddingSpace loss_space = EmbeddingSpace::cosine();
  double temperature = 0.5;
  bool normalize_first = true;
  bool random_start = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack epsilon must be >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("attack step size must be >= 0");
    if (steps < 0) throw std::invalid_argument("attack steps must be >= 0");
  }

  /// True when a single step can leave the l_inf ball (allowed, but usually a mistake).
  bool step_exceeds_radius() const { return alpha > epsilon; }
};

template <class T>
struct AdversarialTriple {
  Tensor<T> anchor, positive, adversarial;
};

/// Projects x_adv onto B(x, eps) intersected with [0,1]^d. The bounds are
/// nudged inward by one ulp when rounding would put them beyond eps.
template <class T>
void project_linf(std::span<T> adv, std::span<const T> x, double eps) {
  for (std::size_t k = 0; k < adv.size(); ++k) {
    T lo = T(double(x[k]) - eps);
    T hi = T(double(x[k]) + eps);
    if (double(x[k]) - double(lo) > eps) lo = std::nextafter(lo, x[k]);
    if (double(hi) - double(x[k]) > eps) hi = std::nextafter(hi, x[k]);
    lo = std::max(lo, T(0));
    hi = std::min(hi, T(1));
    adv[k] = std::clamp(adv[k], lo, hi);
  }
}

/// Largest |adv - x| over all coordinates, in double.
template <class T>
double linf_distance(const Tensor<T>& adv, const Tensor<T>& x) {
  double worst = 0.0;
  for (std::size_t k = 0; k < adv.numel(); ++k)
    worst = std::max(worst, std::abs(double(adv.data()[k]) - double(x.data()[k])));
  return worst;
}

/// Plan over stacked blocks: anchor rows anchor_block*N + k, positive column
/// positive_block*N + k, candidates = that positive plus the clean views of
/// every other source (blocks 0 and 1).
inline ContrastivePlan single_positive_plan(std::size_t n, std::size_t anchor_block, std::size_t positive_block) {
  ContrastivePlan plan;
  plan.anchors.resize(n);
  plan.positives.resize(n);
  plan.candidates.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    plan.anchors[k] = anchor_block * n + k;
    const std::size_t pos = positive_block * n + k;
    plan.positives[k] = {{pos, 1.0}};
    plan.candidates[k].push_back(pos);
    for (std::size_t m = 0; m < n; ++m) {
      if (m == k) continue;
      plan.candidates[k].push_back(m);
      plan.candidates[k].push_back(n + m);
    }
  }
  return plan;
}

/// Instance-wise contrastive loss with x~adv as anchor, x~+ as its positive,
/// evaluated on stacked raw embeddings [anchors; positives; adversarial].
template <class T>
LossReport<T> adversarial_anchor_loss(const Tensor<T>& stacked_raw, const AttackConfig& cfg) {
  const std::size_t n = stacked_raw.rows() / 3;
  const auto batch = project_embeddings(stacked_raw, cfg.loss_space, cfg.normalize_first, cfg.temperature);
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  return contrastive_terms(logits, single_positive_plan(n, 2, 1));
}

/// Robust objective on stacked raw embeddings [anchors; positives; adversarial]:
///   per_k = 1/2 [l(x~_k, x~+_k) + l(x~_k, x~adv_k)] + lambda * l(x~adv_k, x~+_k)
/// where each l is an InfoNCE term whose denominator holds its own positive
/// plus the negatives of source k.
template <class T>
LossReport<T> rhcl_objective(const Tensor<T>& stacked_raw, double lambda, const EmbeddingSpace& space,
                             bool normalize_first = true, double temperature = 0.5) {
  if (stacked_raw.rank() != 2 || stacked_raw.rows() % 3 != 0 || stacked_raw.rows() < 3) {
    throw LossError("robust objective needs [3N, d] stacked embeddings, got " + shape_str(stacked_raw.shape()));
  }
  if (!(lambda >= 0.0)) throw LossError("lambda must be >= 0");
  const std::size_t n = stacked_raw.rows() / 3;
  const auto batch = project_embeddings(stacked_raw, space, normalize_first, temperature);
  const auto logits = similarity_logits(batch.z, batch.space, batch.temperature);
  const auto clean_pos = contrastive_terms(logits, single_positive_plan(n, 0, 1));
  const auto adv_pos = contrastive_terms(logits, single_positive_plan(n, 0, 2));
  const auto adv_anchor = contrastive_terms(logits, single_positive_plan(n, 2, 1));
  Tensor<T> per = (clean_pos.per_anchor + adv_pos.per_anchor) * T(0.5) + adv_anchor.per_anchor * T(lambda);
  return {sum(per), per};
}

namespace detail {

template <class Model>
struct MaybeFrozen {
  explicit MaybeFrozen(const Model& m) : model(m) {
    if constexpr (requires { m.set_requires_grad(false); }) m.set_requires_grad(false);
  }
  ~MaybeFrozen() {
    if constexpr (requires { model.set_requires_grad(true); }) model.set_requires_grad(true);
  }
  const Model& model;
};

}  // namespace detail

/// PGD on the instance-wise contrastive loss:
///   x^{i+1} = Proj_{B(x~, eps) & [0,1]}(x^i + alpha * sign(grad_x L(x^i, x~+, negatives)))
/// starting from x^0 = x~ (or a uniform point of the ball when random_start).
/// The model must expose `Tensor<T> embed(const Tensor<T>&) const`; its
/// parameters are not updated and receive no gradient.
template <class T, class Model>
AdversarialTriple<T> instance_attack(const Model& model, const Tensor<T>& anchor, const Tensor<T>& positive,
                                     const AttackConfig& cfg) {
  cfg.validate();
  if (anchor.shape() != positive.shape()) throw AttackError("anchor and positive batches differ in shape");
  AdversarialTriple<T> out{anchor.detach(), positive.detach(), anchor.detach()};
  if (cfg.steps == 0 || cfg.epsilon == 0.0) return out;

  auto adv = out.adversarial.data();
  const auto x = anchor.data();
  if (cfg.random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (T& v : adv) v = T(double(v) + u(rng));
    project_linf<T>(adv, x, cfg.epsilon);
  }

  detail::MaybeFrozen<Model> frozen(model);
  Tensor<T> z_clean;
  {
    NoGradGuard no_grad;
    z_clean = model.embed(concat<T>({anchor, positive}));
  }
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<T> probe = out.adversarial.leaf();
    {
      Tape tape;
      Tensor<T> stacked = concat<T>({z_clean, model.embed(probe)});
      const auto report = adversarial_anchor_loss(cast<double>(stacked), cfg);
      tape.backward(report.total);
    }
    if (!probe.has_grad()) throw AttackError("attack loss does not depend on the input");
    const auto g = probe.grad();
    for (std::size_t k = 0; k < adv.size(); ++k) {
      if (!std::isfinite(double(g[k]))) throw AttackError("non-finite input gradient at attack step " + std::to_string(step));
      const T s = g[k] > T(0) ? T(1) : (g[k] < T(0) ? T(-1) : T(0));
      adv[k] = T(double(adv[k]) + cfg.alpha * double(s));
    }
    project_linf<T>(adv, x, cfg.epsilon);
  }
  return out;
}

/// Generates x~adv with instance_attack, then evaluates rhcl_objective on the
/// model's embeddings of [x~; x~+; x~adv]. The attack output enters the tape as
/// a constant.
template <class T, class Model>
LossReport<double> rhcl_loss(const Model& model, const Tensor<T>& anchor, const Tensor<T>& positive, double lambda,
                             const AttackConfig& cfg) {
  const auto triple = instance_attack(model, anchor, positive, cfg);
  Tensor<T> raw = model.embed(concat<T>({triple.anchor, triple.positive, triple.adversarial}));
  return rhcl_objective(cast<double>(raw), lambda, cfg.loss_space, cfg.normalize_first, cfg.temperature);
}

}  // namespace pcon
