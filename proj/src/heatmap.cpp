#include "implantformer/heatmap.hpp"

namespace implantformer {

double gaussian_radius(double box_w, double box_h, double min_overlap) {
  if (!(box_w > 0.0) || !(box_h > 0.0))
    throw InvalidArgumentError("gaussian_radius needs a positive box size");
  if (!(min_overlap > 0.0) || !(min_overlap < 1.0))
    throw InvalidArgumentError("min_overlap must lie in (0, 1)");

  const double w = box_w, h = box_h, o = min_overlap;

  // Corners shift diagonally in opposite directions; boxes stay the same size.
  const double b1 = h + w;
  const double c1 = w * h * (1.0 - o) / (1.0 + o);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4.0 * c1)) / 2.0;

  // Both corners shift inward; the jittered box shrinks.
  const double b2 = 2.0 * (h + w);
  const double c2 = (1.0 - o) * w * h;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 16.0 * c2)) / 8.0;

  // Both corners shift outward; the jittered box grows.
  const double b3 = 2.0 * o * (h + w);
  const double c3 = (1.0 - o) * w * h;
  const double r3 = (-b3 + std::sqrt(b3 * b3 + 16.0 * o * c3)) / (8.0 * o);

  return std::max(1.0, std::min({r1, r2, r3}));
}

}  // namespace implantformer
