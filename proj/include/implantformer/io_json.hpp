#pragma once

#include <string>
#include <vector>

#include "implantformer/heatmap.hpp"
#include "implantformer/phantom.hpp"
#include "implantformer/volume.hpp"

namespace implantformer {

// KeypointTrack file: {"patient", "region", "points":[{"x","y","z"},...]}
KeypointTrack load_track(const std::string& path);
void save_track(const KeypointTrack& track, const std::string& path);

// Per-slice predictions for one patient; fold is optional metadata used by
// the evaluation harness to aggregate mean +- std across folds.
struct SliceDetections {
  int z = 0;
  std::vector<Detection> detections;
};

struct DetectionFile {
  std::string patient;
  int fold = -1;  // -1 when untagged
  std::vector<SliceDetections> slices;
};

DetectionFile load_detections(const std::string& path);
void save_detections(const DetectionFile& file, const std::string& path);

PhantomConfig load_phantom_config(const std::string& path);
void save_phantom_config(const PhantomConfig& cfg, const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// Expands a pattern whose final component may contain '*'/'?' wildcards;
// plain paths pass through. Results are sorted.
std::vector<std::string> expand_glob(const std::string& pattern);

}  // namespace implantformer
