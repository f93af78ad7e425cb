#pragma once

#include <utility>
#include <vector>

#include "implantformer/volume.hpp"

namespace implantformer {

// Implant centerline as two independent per-axis lines over slice index:
//   x = k1 * z + b1,  y = k2 * z + b2
// q1/q2 are the attained residual sums of squares of the fit.
struct CenterlineFit {
  double k1 = 0.0, b1 = 0.0;
  double k2 = 0.0, b2 = 0.0;
  double q1 = 0.0, q2 = 0.0;
  int n = 0;
};

// Least-squares fit by the closed-form normal equations, accumulated in
// double precision. Throws DegenerateFitError for fewer than 2 points or
// when all z are identical.
CenterlineFit fit_centerline(const KeypointTrack& track);

inline std::pair<double, double> eval_line(const CenterlineFit& fit, double z) {
  return {fit.k1 * z + fit.b1, fit.k2 * z + fit.b2};
}

// Residual sums of squares of `track` under `fit`, per axis.
std::pair<double, double> residual_q(const CenterlineFit& fit, const KeypointTrack& track);

// Fits the root annotations and extends the line into the crown range;
// label generation for training.
KeypointTrack project_root_to_crown(const KeypointTrack& root_track,
                                    const std::vector<uint32_t>& crown_zs);

// Fits the crown predictions and extends the line back into the root
// range; inference-time back-projection.
KeypointTrack project_crown_to_root(const KeypointTrack& crown_track,
                                    const std::vector<uint32_t>& root_zs);

}  // namespace implantformer
