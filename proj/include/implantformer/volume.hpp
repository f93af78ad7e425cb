#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "implantformer/errors.hpp"

namespace implantformer {

// Intensity window applied when a raw slice is converted to network input.
// The ceiling matches the implant rendering value; the floor is the
// conventional air intensity. Both can be overridden per call.
inline constexpr double kWindowLo = -1000.0;
inline constexpr double kWindowHi = 3100.0;

// Axial stack of square 2D slices with a crown/root boundary.
// Slices [0, crown_boundary) are the root region, [crown_boundary, depth)
// the crown region. Voxels are slice-major: index = (z * height + y) * width + x.
struct Volume {
  uint32_t width = 0;
  uint32_t height = 0;
  uint32_t depth = 0;
  uint32_t crown_boundary = 0;
  std::array<float, 3> voxel_spacing{1.0f, 1.0f, 1.0f};
  std::vector<int16_t> voxels;

  int16_t at(uint32_t x, uint32_t y, uint32_t z) const {
    return voxels[(static_cast<size_t>(z) * height + y) * width + x];
  }
  int16_t& at(uint32_t x, uint32_t y, uint32_t z) {
    return voxels[(static_cast<size_t>(z) * height + y) * width + x];
  }

  // Throws InvalidArgumentError if any struct invariant is violated.
  void validate() const;
};

// One axial slice normalized for the network: 3 identical channels of
// [0,1] values, channel-major layout (c, y, x).
struct SliceImage {
  int width = 0;
  int height = 0;
  std::vector<float> values;  // size = 3 * width * height

  float at(int c, int y, int x) const {
    return values[(static_cast<size_t>(c) * height + y) * width + x];
  }
  float& at(int c, int y, int x) {
    return values[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

enum class Region { crown, root };

std::string region_name(Region r);
Region region_from_name(const std::string& name);

// Per-slice implant positions, either annotations (root) or
// labels/predictions (crown). z must be strictly increasing.
struct TrackPoint {
  double x = 0.0;
  double y = 0.0;
  int z = 0;
};

struct KeypointTrack {
  std::string patient;
  Region region = Region::root;
  std::vector<TrackPoint> points;

  void validate() const;  // z strictly increasing
};

// --- Operations ---------------------------------------------------------

// Binary IVOL container. Round trips are bit-exact.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

// Windows raw intensities from [lo, hi] to [0,1] (clamped) and replicates
// the result to 3 channels.
SliceImage slice_at(const Volume& v, uint32_t z, double window_lo = kWindowLo,
                    double window_hi = kWindowHi);

// Crown slice indices [crown_boundary, depth) and root indices
// [0, crown_boundary); disjoint and exhaustive.
std::pair<std::vector<uint32_t>, std::vector<uint32_t>> partition(const Volume& v);

}  // namespace implantformer
