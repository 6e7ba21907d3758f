#pragma once

// Poincare ball model of hyperbolic space: gyrovector addition, geodesic
// distance, the exponential map at the origin and radial clipping.
//
// Every function here works on 64-bit coordinates. Training code that runs
// in 32-bit converts at the call site.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcon {

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Curvature, boundary margin and dimension of a Poincare ball.
///
/// curvature == 0 is the euclidean-limit marker. It is accepted by
/// validate(/*allow_euclidean_limit=*/true) so limit checks can carry it
/// around, but none of the hyperbolic operations accept it.
struct BallConfig {
  double curvature = 0.1;
  double boundary_eps = 1e-5;
  std::size_t dim = 2;

  void validate(bool allow_euclidean_limit = false) const {
    if (!(curvature > 0.0) && !(allow_euclidean_limit && curvature == 0.0)) {
      throw GeometryError("ball curvature must be positive, got " + std::to_string(curvature));
    }
    if (!std::isfinite(curvature)) throw GeometryError("ball curvature must be finite");
    if (!(boundary_eps > 0.0 && boundary_eps < 1.0)) {
      throw GeometryError("boundary_eps must lie in (0, 1), got " + std::to_string(boundary_eps));
    }
    if (dim == 0) throw GeometryError("ball dimension must be positive");
  }

  double sqrt_c() const { return std::sqrt(curvature); }

  /// Largest admissible Euclidean norm of a stored point, (1 - eps) / sqrt(c).
  double max_norm() const { return (1.0 - boundary_eps) / sqrt_c(); }

  /// Radius of the open ball, 1 / sqrt(c).
  double radius() const { return 1.0 / sqrt_c(); }

  friend bool operator==(const BallConfig&, const BallConfig&) = default;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm_sq(std::span<const double> a) { return dot(a, a); }

inline void require_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw GeometryError("non-finite coordinate");
  }
}

}  // namespace detail

enum class Membership { clip, reject };

/// A point of the ball, tagged with the configuration it was validated for.
class BallPoint {
 public:
  BallPoint(std::vector<double> coords, const BallConfig& config, Membership policy = Membership::clip)
      : coords_(std::move(coords)), config_(config) {
    config_.validate();
    if (coords_.size() != config_.dim) {
      throw GeometryError("point has " + std::to_string(coords_.size()) + " coordinates, ball has dim " +
                          std::to_string(config_.dim));
    }
    detail::require_finite(coords_);
    const double n = std::sqrt(detail::norm_sq(coords_));
    const double limit = config_.max_norm();
    if (n > limit) {
      if (policy == Membership::reject) {
        throw GeometryError("point outside the ball safety margin (sqrt(c)*|x| = " +
                            std::to_string(n * config_.sqrt_c()) + ")");
      }
      const double s = limit / n;
      for (double& x : coords_) x *= s;
    }
  }

  static BallPoint origin(const BallConfig& config) {
    return BallPoint(std::vector<double>(config.dim, 0.0), config);
  }

  std::span<const double> coords() const { return coords_; }
  const BallConfig& config() const { return config_; }
  std::size_t dim() const { return coords_.size(); }
  double operator[](std::size_t i) const { return coords_[i]; }
  double norm() const { return std::sqrt(detail::norm_sq(coords_)); }

  BallPoint operator-() const {
    std::vector<double> v(coords_);
    for (double& x : v) x = -x;
    return BallPoint(std::move(v), config_);
  }

 private:
  std::vector<double> coords_;
  BallConfig config_;
};

/// Metric scaling 2 / (1 - c|x|^2) at a point.
struct ConformalFactor {
  double value;
};

inline ConformalFactor conformal_factor(const BallPoint& x) {
  const double c = x.config().curvature;
  return {2.0 / (1.0 - c * detail::norm_sq(x.coords()))};
}

inline void require_compatible(const BallPoint& x, const BallPoint& y) {
  if (x.dim() != y.dim()) {
    throw GeometryError("dimension mismatch: " + std::to_string(x.dim()) + " vs " + std::to_string(y.dim()));
  }
  if (!(x.config() == y.config())) throw GeometryError("points belong to different ball configurations");
}

/// Radially rescale v so that sqrt(c)|v| <= 1 - eps.
inline BallPoint clip_to_ball(std::span<const double> v, const BallConfig& config) {
  return BallPoint(std::vector<double>(v.begin(), v.end()), config, Membership::clip);
}

/// Mobius addition x (+)_c y.
inline BallPoint mobius_add(const BallPoint& x, const BallPoint& y) {
  require_compatible(x, y);
  const double c = x.config().curvature;
  const double xy = detail::dot(x.coords(), y.coords());
  const double xx = detail::norm_sq(x.coords());
  const double yy = detail::norm_sq(y.coords());
  const double a = 1.0 + 2.0 * c * xy + c * yy;
  const double b = 1.0 - c * xx;
  const double den = std::max(1.0 + 2.0 * c * xy + c * c * xx * yy, 1e-15);
  std::vector<double> out(x.dim());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a * x[i] + b * y[i]) / den;
  return BallPoint(std::move(out), x.config(), Membership::clip);
}

/// Geodesic distance (2/sqrt(c)) artanh(sqrt(c) |(-x) (+)_c y|), with the
/// artanh argument clamped to 1 - eps.
inline double hyp_distance(const BallPoint& x, const BallPoint& y) {
  require_compatible(x, y);
  const BallConfig& cfg = x.config();
  const BallPoint diff = mobius_add(-x, y);
  const double arg = std::min(cfg.sqrt_c() * diff.norm(), 1.0 - cfg.boundary_eps);
  return 2.0 / cfg.sqrt_c() * std::atanh(arg);
}

/// Exponential map at the origin: tanh(sqrt(c)|v|) v / (sqrt(c)|v|).
inline BallPoint exp_map0(std::span<const double> v, const BallConfig& config) {
  config.validate();
  if (v.size() != config.dim) throw GeometryError("tangent vector dimension does not match the ball");
  detail::require_finite(v);
  const double n = std::sqrt(detail::norm_sq(v));
  if (n == 0.0) return BallPoint::origin(config);
  const double sc = config.sqrt_c();
  const double scale = std::tanh(sc * n) / (sc * n);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x *= scale;
  return BallPoint(std::move(out), config, Membership::clip);
}

/// Squared chord distance between the unit directions of a and b,
/// 2 - 2 cos(a, b).
inline double cosine_sq_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw GeometryError("dimension mismatch in cosine distance");
  const double na = std::sqrt(detail::norm_sq(a));
  const double nb = std::sqrt(detail::norm_sq(b));
  if (na == 0.0 || nb == 0.0) throw GeometryError("cosine distance of a zero-norm vector");
  return 2.0 - 2.0 * detail::dot(a, b) / (na * nb);
}

}  // namespace pcon
