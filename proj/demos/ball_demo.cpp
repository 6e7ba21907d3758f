// Embeds a few points of a small synthetic tree in the Poincare ball and
// prints pairwise geodesic distances next to their Euclidean counterparts.

#include <cstdio>
#include <vector>

#include "pcon/data.hpp"
#include "pcon/geometry.hpp"
#include "pcon/losses.hpp"

int main() {
  using namespace pcon;
  TreeDatasetSpec spec;
  spec.feature_dim = 2;
  spec.obs_noise = 0.0;
  const auto tree = gen_tree_dataset(spec, 1, 7);

  const BallConfig ball{1.0, 1e-5, 2};
  std::vector<BallPoint> points;
  for (std::size_t i = 0; i < tree.data.size(); ++i) {
    const auto r = tree.data.row(i);
    const std::vector<double> v{r[0], r[1]};
    points.push_back(exp_map0(v, ball));
  }

  std::printf("leaf  class   ball coordinates        |x|   conformal factor\n");
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::printf("%4zu  %5d   (% .4f, % .4f)   %.4f   %.3f\n", i, tree.data.y[i], points[i][0], points[i][1],
                points[i].norm(), conformal_factor(points[i]).value);
  }

  std::printf("\ngeodesic distance from leaf 0:\n");
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double dx = points[i][0] - points[0][0], dy = points[i][1] - points[0][1];
    std::printf("  to leaf %2zu (class %d): hyperbolic %.4f   euclidean %.4f\n", i, tree.data.y[i],
                hyp_distance(points[0], points[i]), std::sqrt(dx * dx + dy * dy));
  }

  // leaves as one batch of view pairs: consecutive leaves share a parent
  const Tensor<double> raw({points.size(), 2}, std::vector<double>(tree.data.x.begin(), tree.data.x.end()));
  const auto batch = project_embeddings(raw, EmbeddingSpace::poincare(ball), false, 0.5);
  std::printf("\nhcl loss treating sibling leaves as positives: %.4f\n", hcl_loss(batch).value());
}
