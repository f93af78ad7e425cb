#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "implantformer/volume.hpp"

namespace implantformer {

// Configuration for one synthetic patient: an arch of bright elliptical
// teeth with a single missing-tooth gap. The implant centerline runs
// through the gap with a fixed per-slice tilt; root slices are rendered
// blurrier and noisier than crown slices.
struct PhantomConfig {
  int image_size = 64;
  int depth = 40;
  int crown_boundary = 20;
  int tooth_count = 8;
  int gap_index = 3;       // which tooth slot is missing
  double tilt_x = 0.1;     // implant drift, pixels per slice
  double tilt_y = -0.05;
  int root_blur_level = 2;    // 3x3 mean-filter passes applied to root slices
  double noise_level = 30.0;  // uniform noise amplitude, intensity units
  uint64_t seed = 0;

  void validate() const;
};

// Deterministic given config.seed. The returned track covers every root
// slice and lies exactly on a straight line with the configured tilt,
// centered in the arch gap.
std::pair<Volume, KeypointTrack> generate_phantom(const PhantomConfig& config);

// Ground-truth implant position for any slice of the phantom (the same
// line the root track lies on, evaluated at z). Exposed so tests and the
// evaluation harness can compare predictions at crown slices too.
std::pair<double, double> phantom_keypoint_at(const PhantomConfig& config, int z);

}  // namespace implantformer
