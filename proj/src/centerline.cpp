#include "implantformer/centerline.hpp"

#include <algorithm>
#include <cmath>

namespace implantformer {

CenterlineFit fit_centerline(const KeypointTrack& track) {
  const auto& pts = track.points;
  const size_t n = pts.size();
  if (n < 2) throw DegenerateFitError("centerline fit needs at least 2 points");

  double sz = 0.0, szz = 0.0, sx = 0.0, sy = 0.0, sxz = 0.0, syz = 0.0;
  for (const auto& p : pts) {
    const double z = p.z;
    sz += z;
    szz += z * z;
    sx += p.x;
    sy += p.y;
    sxz += p.x * z;
    syz += p.y * z;
  }

  const double nn = static_cast<double>(n);
  const double denom = nn * szz - sz * sz;
  if (denom <= 0.0)
    throw DegenerateFitError("centerline fit is degenerate: all z values identical");

  CenterlineFit fit;
  fit.n = static_cast<int>(n);
  fit.k1 = (nn * sxz - sx * sz) / denom;
  fit.b1 = (sx - fit.k1 * sz) / nn;
  fit.k2 = (nn * syz - sy * sz) / denom;
  fit.b2 = (sy - fit.k2 * sz) / nn;

  auto [q1, q2] = residual_q(fit, track);
  fit.q1 = q1;
  fit.q2 = q2;
  return fit;
}

std::pair<double, double> residual_q(const CenterlineFit& fit, const KeypointTrack& track) {
  double q1 = 0.0, q2 = 0.0;
  for (const auto& p : track.points) {
    const double rx = p.x - (fit.k1 * p.z + fit.b1);
    const double ry = p.y - (fit.k2 * p.z + fit.b2);
    q1 += rx * rx;
    q2 += ry * ry;
  }
  return {q1, q2};
}

namespace {

KeypointTrack project(const KeypointTrack& src, Region expected_region, Region out_region,
                      const std::vector<uint32_t>& out_zs) {
  if (src.region != expected_region)
    throw InvalidArgumentError("track region is '" + region_name(src.region) +
                               "', expected '" + region_name(expected_region) + "'");
  if (out_zs.empty()) throw InvalidArgumentError("no target slice indices given");

  const CenterlineFit fit = fit_centerline(src);
  KeypointTrack out;
  out.patient = src.patient;
  out.region = out_region;
  out.points.reserve(out_zs.size());

  std::vector<uint32_t> zs = out_zs;
  std::sort(zs.begin(), zs.end());
  for (uint32_t z : zs) {
    const auto [x, y] = eval_line(fit, static_cast<double>(z));
    out.points.push_back({x, y, static_cast<int>(z)});
  }
  return out;
}

}  // namespace

KeypointTrack project_root_to_crown(const KeypointTrack& root_track,
                                    const std::vector<uint32_t>& crown_zs) {
  return project(root_track, Region::root, Region::crown, crown_zs);
}

KeypointTrack project_crown_to_root(const KeypointTrack& crown_track,
                                    const std::vector<uint32_t>& root_zs) {
  return project(crown_track, Region::crown, Region::root, root_zs);
}

}  // namespace implantformer
