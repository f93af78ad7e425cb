#include "implantformer/inference.hpp"

#include <algorithm>
#include <cmath>

#include "implantformer/heatmap.hpp"
#include "implantformer/threads.hpp"
#include "implantformer/training.hpp"

namespace implantformer {

InferResult infer_volume(const Model<float>& model, const Volume& volume,
                         const InferOptions& opts) {
  volume.validate();
  if (opts.top_k < 1) throw InvalidArgumentError("top_k must be >= 1");

  const auto [crown_zs, root_zs] = partition(volume);
  const NetConfig& cfg = model.config();
  const int net_size = cfg.image_size;
  const int native = static_cast<int>(volume.width);
  const int g = cfg.stride();

  InferResult result;
  result.crown.patient = "";
  result.crown.slices.resize(crown_zs.size());

  parallel_for(static_cast<int64_t>(crown_zs.size()), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const uint32_t z = crown_zs[i];
      SliceImage img = slice_at(volume, z, opts.window_lo, opts.window_hi);
      if (native != net_size) img = resize_slice(img, net_size, net_size);

      ForwardPass<float> fp = model.forward(slice_to_tensor(img), /*record=*/false);
      std::vector<Detection> dets =
          decode_topk(fp.heatmap(), fp.offsets(), g, opts.top_k);

      SliceDetections& out = result.crown.slices[i];
      out.z = static_cast<int>(z);
      for (Detection& d : dets) {
        if (d.confidence < opts.min_confidence) continue;
        if (native != net_size) {
          d.x = map_coord_resize(d.x, net_size, native);
          d.y = map_coord_resize(d.y, net_size, native);
        }
        d.x = std::clamp(d.x, 0.0, native - 1.0);
        d.y = std::clamp(d.y, 0.0, native - 1.0);
        out.detections.push_back(d);
      }
    }
  });

  result.crown_track.region = Region::crown;
  for (const auto& s : result.crown.slices)
    if (!s.detections.empty())
      result.crown_track.points.push_back({s.detections[0].x, s.detections[0].y, s.z});

  result.root_track.region = Region::root;
  if (result.crown_track.points.size() >= 2)
    result.root_track = project_crown_to_root(result.crown_track, root_zs);
  return result;
}

Volume render_implant_cylinder(const Volume& volume, const KeypointTrack& root_track,
                               double radius, int depth, int16_t value) {
  volume.validate();
  if (root_track.points.empty()) throw InvalidArgumentError("render: empty track");
  if (!(radius > 0.0)) throw InvalidArgumentError("render: radius must be positive");
  if (depth < 1) throw InvalidArgumentError("render: depth must be >= 1");

  const int boundary = static_cast<int>(volume.crown_boundary);
  const int z_lo = std::max(0, boundary - depth);

  Volume out = volume;
  for (int z = z_lo; z < boundary; ++z) {
    const TrackPoint* point = nullptr;
    for (const auto& p : root_track.points)
      if (p.z == z) {
        point = &p;
        break;
      }
    if (!point)
      throw InvalidArgumentError("render: track has no point for root slice " +
                                 std::to_string(z));
    const int x0 = std::max(0, static_cast<int>(std::floor(point->x - radius)));
    const int x1 = std::min(static_cast<int>(volume.width) - 1,
                            static_cast<int>(std::ceil(point->x + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(point->y - radius)));
    const int y1 = std::min(static_cast<int>(volume.height) - 1,
                            static_cast<int>(std::ceil(point->y + radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - point->x, dy = y - point->y;
        if (dx * dx + dy * dy <= radius * radius)
          out.at(static_cast<uint32_t>(x), static_cast<uint32_t>(y),
                 static_cast<uint32_t>(z)) = value;
      }
    }
  }
  return out;
}

}  // namespace implantformer
