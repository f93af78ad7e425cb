#include "implantformer/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "implantformer/rng.hpp"

namespace implantformer {

namespace {

struct Tooth {
  double x, y;    // center at the reference slice
  double rx, ry;  // ellipse semi-axes
  double intensity;
};

struct ArchLayout {
  std::vector<Tooth> teeth;  // gap slot carries geometry but is not drawn
  double gap_x, gap_y;       // implant position at the reference slice
};

// Per-patient arch geometry; every random draw happens here, in a fixed
// order, so slice rendering below stays order-independent.
ArchLayout make_arch(const PhantomConfig& cfg, Rng& rng) {
  const double s = cfg.image_size;
  const double margin = 0.16 * s;
  const double cx = s / 2 + rng.uniform(-0.03, 0.03) * s;
  const double apex_y = 0.30 * s + rng.uniform(-0.04, 0.04) * s;
  const double half_span = s / 2 - margin;
  const double curv = (0.34 * s / (half_span * half_span)) * rng.uniform(0.85, 1.15);

  ArchLayout arch;
  arch.teeth.resize(cfg.tooth_count);
  for (int i = 0; i < cfg.tooth_count; ++i) {
    const double t = cfg.tooth_count == 1 ? 0.5 : double(i) / (cfg.tooth_count - 1);
    Tooth& tooth = arch.teeth[i];
    tooth.x = cx - half_span + 2.0 * half_span * t;
    tooth.y = apex_y + curv * (tooth.x - cx) * (tooth.x - cx);
    tooth.rx = 0.052 * s * rng.uniform(0.85, 1.15);
    tooth.ry = 0.052 * s * rng.uniform(0.85, 1.15);
    tooth.intensity = rng.uniform(1900.0, 2600.0);
  }
  arch.gap_x = arch.teeth[cfg.gap_index].x;
  arch.gap_y = arch.teeth[cfg.gap_index].y;
  return arch;
}

void draw_slice(const PhantomConfig& cfg, const ArchLayout& arch, double ox, double oy,
                bool is_root, double root_depth, uint64_t slice_seed, int16_t* out) {
  const int s = cfg.image_size;
  std::vector<double> img(static_cast<size_t>(s) * s, 150.0);

  // Roots taper and wobble: tooth cross-sections shrink with depth, each
  // tooth drifts slice to slice, and the whole visible arch shifts against
  // the implant line, so root slices carry far less reliable geometry than
  // crown slices.
  const double shrink = is_root ? 1.0 - 0.5 * root_depth : 1.0;
  Rng wobble(Rng::mix(slice_seed, 0x30b));
  if (is_root) {
    const double arch_amp = 1.2 * (0.5 + 0.5 * root_depth);
    ox += wobble.uniform(-arch_amp, arch_amp);
    oy += wobble.uniform(-arch_amp, arch_amp);
  }
  for (int i = 0; i < cfg.tooth_count; ++i) {
    if (i == cfg.gap_index) continue;
    const Tooth& tooth = arch.teeth[i];
    const double amp = 1.5 * (0.25 + 0.75 * root_depth);
    const double jx = is_root ? wobble.uniform(-amp, amp) : 0.0;
    const double jy = is_root ? wobble.uniform(-amp, amp) : 0.0;
    const double tx = tooth.x + ox + jx, ty = tooth.y + oy + jy;
    const double rx = tooth.rx * shrink, ry = tooth.ry * shrink;
    const int x0 = std::max(0, static_cast<int>(std::floor(tx - rx - 2)));
    const int x1 = std::min(s - 1, static_cast<int>(std::ceil(tx + rx + 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ty - ry - 2)));
    const int y1 = std::min(s - 1, static_cast<int>(std::ceil(ty + ry + 2)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x - tx) / rx;
        const double dy = (y - ty) / ry;
        const double r2 = dx * dx + dy * dy;
        if (r2 >= 1.44) continue;
        // soft rim over r in [1, 1.2]
        const double r = std::sqrt(r2);
        const double cover = std::clamp((1.2 - r) / 0.2, 0.0, 1.0);
        double& px = img[static_cast<size_t>(y) * s + x];
        px = std::max(px, 150.0 + (tooth.intensity - 150.0) * cover);
      }
    }
  }

  Rng noise(slice_seed);
  const double amp = cfg.noise_level * (is_root ? 3.0 : 1.0);
  for (auto& px : img) px += noise.uniform(-amp, amp);

  if (is_root && cfg.root_blur_level > 0) {
    std::vector<double> tmp(img.size());
    for (int pass = 0; pass < cfg.root_blur_level; ++pass) {
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          double acc = 0.0;
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= s || xx < 0 || xx >= s) continue;
              acc += img[static_cast<size_t>(yy) * s + xx];
              ++n;
            }
          }
          tmp[static_cast<size_t>(y) * s + x] = acc / n;
        }
      }
      img.swap(tmp);
    }
  }

  for (size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<int16_t>(std::lround(std::clamp(img[i], -32000.0, 32000.0)));
}

}  // namespace

void PhantomConfig::validate() const {
  if (image_size < 16) throw InvalidArgumentError("phantom image size must be >= 16");
  if (depth < 4) throw InvalidArgumentError("phantom depth must be >= 4");
  if (crown_boundary <= 0 || crown_boundary >= depth)
    throw InvalidArgumentError("phantom crown_boundary must lie in (0, depth)");
  if (tooth_count < 3) throw InvalidArgumentError("phantom needs at least 3 teeth");
  if (gap_index < 1 || gap_index > tooth_count - 2)
    throw InvalidArgumentError("gap index must be an interior tooth slot");
  if (!std::isfinite(tilt_x) || !std::isfinite(tilt_y))
    throw InvalidArgumentError("centerline tilt must be finite");
  if (root_blur_level < 0 || noise_level < 0)
    throw InvalidArgumentError("blur/noise levels must be nonnegative");
}

std::pair<double, double> phantom_keypoint_at(const PhantomConfig& cfg, int z) {
  Rng rng(cfg.seed);
  const ArchLayout arch = make_arch(cfg, rng);
  const double dz = z - cfg.crown_boundary;
  return {arch.gap_x + cfg.tilt_x * dz, arch.gap_y + cfg.tilt_y * dz};
}

std::pair<Volume, KeypointTrack> generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();

  Rng rng(cfg.seed);
  const ArchLayout arch = make_arch(cfg, rng);

  // The implant line (and the whole arch with it) must stay inside the
  // image over the full depth, otherwise labels would leave the frame.
  for (int z = 0; z < cfg.depth; ++z) {
    const double dz = z - cfg.crown_boundary;
    const double kx = arch.gap_x + cfg.tilt_x * dz;
    const double ky = arch.gap_y + cfg.tilt_y * dz;
    if (kx < 2.0 || kx > cfg.image_size - 3.0 || ky < 2.0 || ky > cfg.image_size - 3.0)
      throw InvalidArgumentError("tilt drives the implant line out of the image");
  }

  Volume v;
  v.width = v.height = static_cast<uint32_t>(cfg.image_size);
  v.depth = static_cast<uint32_t>(cfg.depth);
  v.crown_boundary = static_cast<uint32_t>(cfg.crown_boundary);
  v.voxel_spacing = {0.25f, 0.25f, 0.5f};
  v.voxels.resize(static_cast<size_t>(cfg.image_size) * cfg.image_size * cfg.depth);

  const size_t plane = static_cast<size_t>(cfg.image_size) * cfg.image_size;
  for (int z = 0; z < cfg.depth; ++z) {
    const double dz = z - cfg.crown_boundary;
    const double root_depth =
        z < cfg.crown_boundary
            ? static_cast<double>(cfg.crown_boundary - z) / cfg.crown_boundary
            : 0.0;
    draw_slice(cfg, arch, cfg.tilt_x * dz, cfg.tilt_y * dz, z < cfg.crown_boundary,
               root_depth, Rng::mix(cfg.seed, 0x51C5u + static_cast<uint64_t>(z)),
               v.voxels.data() + plane * z);
  }

  KeypointTrack track;
  track.region = Region::root;
  track.points.reserve(cfg.crown_boundary);
  for (int z = 0; z < cfg.crown_boundary; ++z) {
    const double dz = z - cfg.crown_boundary;
    track.points.push_back({arch.gap_x + cfg.tilt_x * dz, arch.gap_y + cfg.tilt_y * dz, z});
  }
  return {std::move(v), std::move(track)};
}

}  // namespace implantformer
