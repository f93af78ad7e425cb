#pragma once

#include "implantformer/centerline.hpp"
#include "implantformer/io_json.hpp"
#include "implantformer/network.hpp"
#include "implantformer/volume.hpp"

namespace implantformer {

struct InferOptions {
  int top_k = 1;
  double min_confidence = 0.0;  // detections below this are dropped
  double window_lo = kWindowLo;
  double window_hi = kWindowHi;
};

struct InferResult {
  DetectionFile crown;       // per crown slice, native pixel coordinates
  KeypointTrack crown_track; // top-1 per slice, input to the line fit
  KeypointTrack root_track;  // back-projected; empty when too few detections
};

// Runs the network over every crown slice (resizing to the network input
// when sizes differ), decodes top-k keypoints, fits the centerline on the
// top-1 crown positions and back-projects it to every root slice.
InferResult infer_volume(const Model<float>& model, const Volume& volume,
                         const InferOptions& opts = {});

// Copies the volume and stamps a bright cylinder of the given radius along
// the track over `depth` root slices adjacent to the crown boundary.
Volume render_implant_cylinder(const Volume& volume, const KeypointTrack& root_track,
                               double radius, int depth, int16_t value = 3100);

}  // namespace implantformer
