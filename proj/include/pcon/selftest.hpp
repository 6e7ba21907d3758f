#pragma once

// Randomized property suites for the ball geometry, the autograd primitives
// and the loss gradients. Each property reports the worst violation seen
// across its cases against a fixed tolerance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <optional>
#include <string>
#include <vector>

#include "adversarial.hpp"
#include "autograd.hpp"
#include "geometry.hpp"
#include "losses.hpp"

namespace pcon {

struct PropertyResult {
  std::string group;
  std::string name;
  std::size_t cases = 0;
  double worst = 0.0;      // largest violation measure seen
  double tolerance = 0.0;  // passes when worst <= tolerance
  bool passed() const { return worst <= tolerance; }
};

/// Small random generators shared by the suites.
class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }

  std::vector<double> gaussian(std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * normal();
    return v;
  }

  /// Uniform direction scaled so that sqrt(c)|x| = r with r ~ U[0, r_max].
  std::vector<double> ball_point(std::size_t dim, double c, double r_max) {
    auto v = gaussian(dim);
    const double n = std::sqrt(detail::norm_sq(v));
    const double r = uniform(0.0, r_max) / std::sqrt(c);
    for (double& x : v) x *= r / n;
    return v;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

namespace detail {

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double w = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

/// Runs `cases` trials of `trial`, which returns a violation measure.
inline PropertyResult run_property(std::string group, std::string name, std::size_t cases, double tolerance,
                                   const std::function<double(Sampler&)>& trial, Sampler& s) {
  PropertyResult r{std::move(group), std::move(name), cases, 0.0, tolerance};
  for (std::size_t k = 0; k < cases; ++k) {
    const double v = trial(s);
    r.worst = std::isnan(v) ? INFINITY : std::max(r.worst, v);
  }
  return r;
}

}  // namespace detail

inline std::vector<PropertyResult> geometry_properties(std::size_t cases = 1000, std::uint64_t seed = 1) {
  Sampler s(seed);
  auto random_ball = [](Sampler& g) {
    return BallConfig{g.uniform(0.05, 2.0), 1e-5, g.index(2, 8)};
  };
  std::vector<PropertyResult> out;
  const std::string group = "geometry";

  out.push_back(detail::run_property(group, "left identity 0 (+) x = x", cases, 1e-12, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.99), cfg);
    return detail::max_abs_diff(mobius_add(BallPoint::origin(cfg), x).coords(), x.coords());
  }, s));

  out.push_back(detail::run_property(group, "left inverse (-x) (+) x = 0", cases, 1e-12, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.99), cfg);
    const auto r = mobius_add(-x, x);
    return std::sqrt(detail::norm_sq(r.coords()));
  }, s));

  out.push_back(detail::run_property(group, "left cancellation (-x) (+) (x (+) y) = y", cases, 1e-9, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.9), cfg);
    const BallPoint y(g.ball_point(cfg.dim, cfg.curvature, 0.9), cfg);
    return detail::max_abs_diff(mobius_add(-x, mobius_add(x, y)).coords(), y.coords());
  }, s));

  out.push_back(detail::run_property(group, "distance d(x,x) = 0", cases, 1e-9, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.99), cfg);
    return std::abs(hyp_distance(x, x));
  }, s));

  out.push_back(detail::run_property(group, "distance symmetry", cases, 1e-9, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const BallPoint y(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    return std::abs(hyp_distance(x, y) - hyp_distance(y, x));
  }, s));

  // violation is 1 when a distinct pair has non-positive distance
  out.push_back(detail::run_property(group, "distance positivity", cases, 0.0, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const BallPoint y(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const bool distinct = detail::max_abs_diff(x.coords(), y.coords()) > 0.0;
    return distinct && !(hyp_distance(x, y) > 0.0) ? 1.0 : 0.0;
  }, s));

  out.push_back(detail::run_property(group, "triangle inequality", cases, 1e-9, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const BallPoint y(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const BallPoint z(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    return std::max(0.0, hyp_distance(x, z) - hyp_distance(x, y) - hyp_distance(y, z));
  }, s));

  out.push_back(detail::run_property(group, "geodesic doubling d(0, x (+) x) = 2 d(0, x)", cases, 1e-9, [&](Sampler& g) {
    const auto cfg = random_ball(g);
    const BallPoint x(g.ball_point(cfg.dim, cfg.curvature, 0.95), cfg);
    const auto o = BallPoint::origin(cfg);
    return std::abs(hyp_distance(o, mobius_add(x, x)) - 2.0 * hyp_distance(o, x));
  }, s));

  out.push_back(detail::run_property(group, "exp map norm law |exp0(v)| = tanh(sqrt(c)|v|)/sqrt(c)", cases, 1e-12,
                                     [&](Sampler& g) {
    const auto cfg = random_ball(g);
    // sqrt(c)|v| <= 5 keeps tanh below the clipping margin
    const auto v = g.ball_point(cfg.dim, cfg.curvature, 5.0);
    const double expected = std::tanh(cfg.sqrt_c() * std::sqrt(detail::norm_sq(v))) / cfg.sqrt_c();
    return std::abs(exp_map0(v, cfg).norm() - expected);
  }, s));

  out.push_back(detail::run_property(group, "euclidean limit at c = 1e-8", cases, 1e-3, [&](Sampler& g) {
    const BallConfig cfg{1e-8, 1e-5, g.index(2, 8)};
    auto draw = [&] {
      auto v = g.gaussian(cfg.dim);
      const double n = std::sqrt(detail::norm_sq(v));
      const double r = g.uniform(0.01, 0.5);
      for (double& x : v) x *= r / n;
      return v;
    };
    const auto xv = draw(), yv = draw();
    std::vector<double> diff(cfg.dim);
    for (std::size_t k = 0; k < cfg.dim; ++k) diff[k] = xv[k] - yv[k];
    const double euclid = 2.0 * std::sqrt(detail::norm_sq(diff));
    return std::abs(hyp_distance(BallPoint(xv, cfg), BallPoint(yv, cfg)) - euclid) / euclid;
  }, s));

  return out;
}

/// Scalar probe functional: sum(weights * op(x)) with fixed random weights.
/// Weights lie in [0.5, 1.5] and every op below is written so that the terms
/// feeding one input coordinate share a sign; a gradient that cancels to
/// rounding level would make the relative error meaningless.
template <class Op>
double primitive_check(Sampler& g, const Shape& in_shape, const std::function<std::vector<double>(Sampler&, std::size_t)>& draw,
                       Op op) {
  const Tensor<double> x(in_shape, draw(g, shape_numel(in_shape)));
  Tensor<double> probe_out;
  {
    NoGradGuard no_grad;
    probe_out = op(x);
  }
  std::vector<double> wv(probe_out.numel());
  for (double& v : wv) v = g.uniform(0.5, 1.5);
  const Tensor<double> w(probe_out.shape(), std::move(wv));
  // h = 1e-5 balances truncation (h^2) against rounding (1/h) for these smooth ops
  return grad_check([&](const Tensor<double>& t) { return sum(op(t) * w); }, x, 1e-5);
}

inline std::vector<PropertyResult> primitive_gradient_properties(std::size_t cases = 200, std::uint64_t seed = 2) {
  Sampler s(seed);
  const std::string group = "autograd";
  std::vector<PropertyResult> out;
  const double tol = 1e-6;
  using Draw = std::function<std::vector<double>(Sampler&, std::size_t)>;
  // magnitudes in [lo, hi] with a random sign
  auto signed_band = [](double lo, double hi) {
    return Draw([lo, hi](Sampler& g, std::size_t n) {
      std::vector<double> v(n);
      for (double& x : v) x = (g.uniform(0, 1) < 0.5 ? -1.0 : 1.0) * g.uniform(lo, hi);
      return v;
    });
  };
  auto band = [](double lo, double hi) {
    return Draw([lo, hi](Sampler& g, std::size_t n) {
      std::vector<double> v(n);
      for (double& x : v) x = g.uniform(lo, hi);
      return v;
    });
  };
  // |x| >= 0.05 keeps x-proportional gradients off rounding level and away from relu's kink
  const Draw normal = signed_band(0.05, 2.0);
  const Draw positive = band(0.5, 2.0);
  const Draw open_unit = band(-0.8, 0.8);
  auto shape = [](Sampler& g) { return Shape{g.index(1, 4), g.index(1, 5)}; };
  auto check = [&](const std::string& name, const std::function<double(Sampler&)>& trial) {
    out.push_back(detail::run_property(group, name, cases, tol, trial, s));
  };
  using T2 = Tensor<double>;

  check("add", [&](Sampler& g) {
    const auto sh = shape(g);
    const T2 full(sh, g.gaussian(shape_numel(sh)));
    const T2 row({1, sh[1]}, g.gaussian(sh[1]));
    return std::max(primitive_check(g, sh, normal, [&](const T2& x) { return exp(add(x, row)); }),
                    primitive_check(g, {1, sh[1]}, normal, [&](const T2& x) { return exp(add(full, x)); }));
  });
  check("sub", [&](Sampler& g) {
    const auto sh = shape(g);
    const T2 row({1, sh[1]}, g.gaussian(sh[1]));
    return primitive_check(g, sh, normal, [&](const T2& x) { return exp(sub(row, x)); });
  });
  check("mul", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return mul(x, x * 2.0); });
  });
  check("div", [&](Sampler& g) {
    const auto sh = shape(g);
    const T2 b(sh, signed_band(0.5, 1.5)(g, shape_numel(sh)));
    return std::max(primitive_check(g, sh, positive, [&](const T2& x) { return div(b, x); }),
                    primitive_check(g, sh, normal, [&](const T2& x) { return div(x, b); }));
  });
  check("neg", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return neg(x) * x; });
  });
  check("exp", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return exp(x); });
  });
  check("log", [&](Sampler& g) {
    return primitive_check(g, shape(g), positive, [&](const T2& x) { return log(x); });
  });
  check("tanh", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return tanh(x); });
  });
  check("arctanh", [&](Sampler& g) {
    return primitive_check(g, shape(g), open_unit, [&](const T2& x) { return arctanh(x); });
  });
  check("sqrt", [&](Sampler& g) {
    return primitive_check(g, shape(g), positive, [&](const T2& x) { return sqrt(x); });
  });
  check("relu", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return relu(x) * x; });
  });
  check("clamp", [&](Sampler& g) {
    // inputs stay 0.05 away from both clamp edges
    const Draw off_edges = [](Sampler& g2, std::size_t n) {
      std::vector<double> v(n);
      for (double& x : v) {
        x = g2.uniform(0, 1) < 0.5 ? g2.uniform(0.05, 0.95) : g2.uniform(1.05, 2.0);
        if (g2.uniform(0, 1) < 0.5) x = -x;
      }
      return v;
    };
    return primitive_check(g, shape(g), off_edges, [&](const T2& x) { return clamp(x, -1.0, 1.0) * x; });
  });
  check("matmul", [&](Sampler& g) {
    const auto sh = shape(g);
    const T2 right({sh[1], 1}, signed_band(0.5, 1.5)(g, sh[1]));
    const std::size_t m = g.index(1, 4);
    const T2 a({m, sh[0]}, band(0.5, 1.5)(g, m * sh[0]));
    return std::max(primitive_check(g, sh, normal, [&](const T2& x) { return exp(matmul(x, right) * 0.3); }),
                    primitive_check(g, sh, normal, [&](const T2& x) { return exp(matmul(a, x) * 0.3); }));
  });
  check("transpose", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return transpose(x * x); });
  });
  check("sum", [&](Sampler& g) {
    const auto sh = shape(g);
    return std::max(primitive_check(g, sh, normal, [&](const T2& x) { return sum(x * x); }),
                    primitive_check(g, sh, normal, [&](const T2& x) { return sum(exp(x), 0); }));
  });
  check("sum(axis=1)", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return sum(x * x, 1); });
  });
  check("mean", [&](Sampler& g) {
    const auto sh = shape(g);
    return std::max(primitive_check(g, sh, normal, [&](const T2& x) { return mean(x * x); }),
                    primitive_check(g, sh, normal, [&](const T2& x) { return mean(exp(x), 1); }));
  });
  check("dot(axis)", [&](Sampler& g) {
    const auto sh = shape(g);
    const T2 b(sh, signed_band(0.5, 1.5)(g, shape_numel(sh)));
    return std::max(primitive_check(g, sh, normal, [&](const T2& x) { return dot(x, x, 1); }),
                    primitive_check(g, sh, normal, [&](const T2& x) { return dot(x, b, 0); }));
  });
  check("l2_norm(axis=1)", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return l2_norm(x, 1); });
  });
  check("l2_norm(axis=0)", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return l2_norm(x, 0); });
  });
  check("logsumexp(axis)", [&](Sampler& g) {
    // a spread of at most 2 keeps every softmax weight, and so every gradient entry, above 0.02
    const auto sh = shape(g);
    const Draw unit = band(-1.0, 1.0);
    return std::max(primitive_check(g, sh, unit, [&](const T2& x) { return logsumexp(x, 1); }),
                    primitive_check(g, sh, unit, [&](const T2& x) { return logsumexp(x, 0); }));
  });
  check("concat", [&](Sampler& g) {
    return primitive_check(g, shape(g), normal, [&](const T2& x) { return concat<double>({exp(x), exp(x * 2.0), x * x * x}); });
  });
  check("slice", [&](Sampler& g) {
    const auto sh = Shape{g.index(2, 5), g.index(1, 4)};
    const std::size_t b = g.index(0, sh[0] - 1);
    const std::size_t e = g.index(b + 1, sh[0]);
    return primitive_check(g, sh, normal, [&](const T2& x) { return slice(x * x, b, e); });
  });
  return out;
}

/// Random raw embeddings for the loss gradient suite.
struct LossCase {
  Tensor<double> raw;
  std::vector<int> labels;
  BallConfig ball;
  double temperature;
  bool normalize_first;
};

inline LossCase random_loss_case(Sampler& g, std::size_t rows_per_source = 2) {
  const std::size_t n = g.index(2, 4), d = g.index(2, 8);
  LossCase c;
  c.normalize_first = g.uniform(0, 1) < 0.7;
  // unnormalized rows stay well inside the clipping radius
  const double scale = c.normalize_first ? 1.0 : 0.3;
  auto v = g.gaussian(rows_per_source * n * d, scale);
  // row normalization has curvature ~1/|row|^2; short rows would turn the
  // finite-difference truncation error into the dominant term
  const double min_norm = 0.5 * scale * std::sqrt(double(d));
  for (std::size_t r = 0; r < rows_per_source * n; ++r) {
    const std::span<double> row(v.data() + r * d, d);
    const double norm = std::sqrt(detail::norm_sq(row));
    if (norm < min_norm) for (double& x : row) x *= min_norm / norm;
  }
  c.raw = Tensor<double>({rows_per_source * n, d}, std::move(v));
  c.ball = BallConfig{g.uniform(0.05, 1.0), 1e-5, d};
  c.temperature = g.uniform(0.2, 1.0);
  const std::size_t classes = g.index(1, 3);
  for (std::size_t k = 0; k < n; ++k) {
    const int y = int(g.index(0, classes - 1));
    c.labels.push_back(y);
    c.labels.push_back(y);
  }
  return c;
}

/// Finite differences come from a long double evaluation at h = 1e-6 unless
/// `double_step` is set, in which case they use plain 64-bit central
/// differences with that step.
inline std::vector<PropertyResult> loss_gradient_properties(std::size_t configs = 100, std::uint64_t seed = 3,
                                                            std::optional<double> double_step = {}) {
  Sampler s(seed);
  auto fd = [&](const auto& f, const Tensor<double>& x) {
    return double_step ? grad_check(f, x, *double_step) : grad_check_extended(f, x, 1e-6);
  };
  const std::string group = "loss gradients";
  const double tol = 1e-4;
  std::vector<PropertyResult> out;

  auto pair_loss = [](const LossCase& c, bool hyperbolic, bool supervised) {
    return [c, hyperbolic, supervised](const auto& raw) {
      const auto space = hyperbolic ? EmbeddingSpace::poincare(c.ball) : EmbeddingSpace::cosine();
      auto batch = project_embeddings(raw, space, c.normalize_first, c.temperature);
      if (!supervised) return (hyperbolic ? hcl_loss(batch) : info_nce_cosine(batch)).total;
      batch.labels = c.labels;
      const auto pos = positives_from_batch(batch);
      return (hyperbolic ? shcl_loss(batch, pos) : supcon_cosine(batch, pos)).total;
    };
  };
  auto check_loss = [&](const std::string& name, bool hyperbolic, bool supervised) {
    out.push_back(detail::run_property(group, name, configs, tol, [&](Sampler& g) {
      const auto c = random_loss_case(g);
      return fd(pair_loss(c, hyperbolic, supervised), c.raw);
    }, s));
  };
  check_loss("info_nce_cosine", false, false);
  check_loss("hcl_loss", true, false);
  check_loss("supcon_cosine", false, true);
  check_loss("shcl_loss", true, true);

  out.push_back(detail::run_property(group, "rhcl_loss (attack output fixed)", configs, tol, [&](Sampler& g) {
    const auto c = random_loss_case(g, 3);
    const double lambda = g.uniform(0.0, 1.0);
    return fd([&](const auto& raw) {
      return rhcl_objective(raw, lambda, EmbeddingSpace::poincare(c.ball), c.normalize_first, c.temperature).total;
    }, c.raw);
  }, s));
  return out;
}

}  // namespace pcon
