#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "implantformer/errors.hpp"
#include "implantformer/tensor.hpp"

namespace implantformer {

// Focal-loss exponents; fixed across all experiments.
inline constexpr double kFocalAlpha = 2.0;
inline constexpr double kFocalBeta = 4.0;
// Offset-loss weight in the total loss.
inline constexpr double kLambdaOff = 0.55;
// Predictions are clamped to [eps, 1-eps] before logs.
inline constexpr double kProbEps = 1e-7;

// Training targets for one slice at heatmap resolution:
// a Gaussian heatmap peaking at 1 on the keypoint cell, sub-cell offsets
// defined at peak cells only, and the peak-cell mask.
template <typename T>
struct TargetMaps {
  Tensor<T> heatmap;        // (h/g, w/g)
  Tensor<T> offsets;        // (2, h/g, w/g); channel 0 = x, 1 = y
  Tensor<uint8_t> mask;     // (h/g, w/g)
  int stride = 4;
};

// One decoded keypoint in image coordinates.
struct Detection {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;
};

struct LossTerms {
  double l_k = 0.0;
  double l_off = 0.0;
  double l_total = 0.0;
  double lambda_off = kLambdaOff;
};

// Largest corner jitter (in heatmap cells) that keeps the IoU of a
// w x h box with its jittered copy at or above min_overlap, minimized
// over the three jitter modes; clamped to >= 1.
double gaussian_radius(double box_w, double box_h, double min_overlap);

inline double total_loss(double l_k, double l_off, double lambda_off = kLambdaOff) {
  return l_k + lambda_off * l_off;
}

// sigma_divisor sets the kernel width as sigma = radius / sigma_divisor.
template <typename T>
TargetMaps<T> encode_target(double x, double y, int width, int height, int stride,
                            double radius, double sigma_divisor = 3.0) {
  if (width <= 0 || height <= 0 || stride <= 0 || width % stride != 0 ||
      height % stride != 0)
    throw InvalidArgumentError("heatmap stride must divide the image size");
  if (!(x >= 0.0) || !(y >= 0.0) || x >= width || y >= height)
    throw InvalidArgumentError("keypoint lies outside the image");
  if (!(sigma_divisor > 0.0)) throw InvalidArgumentError("sigma divisor must be positive");

  const int gw = width / stride, gh = height / stride;
  TargetMaps<T> maps;
  maps.stride = stride;
  maps.heatmap = Tensor<T>({gh, gw});
  maps.offsets = Tensor<T>({2, gh, gw});
  maps.mask = Tensor<uint8_t>({gh, gw});

  const double fx = x / stride, fy = y / stride;
  const int cx = static_cast<int>(std::floor(fx));
  const int cy = static_cast<int>(std::floor(fy));

  const double sigma = radius / sigma_divisor;
  const int reach = static_cast<int>(std::ceil(radius));
  for (int dy = -reach; dy <= reach; ++dy) {
    const int yy = cy + dy;
    if (yy < 0 || yy >= gh) continue;
    for (int dx = -reach; dx <= reach; ++dx) {
      const int xx = cx + dx;
      if (xx < 0 || xx >= gw) continue;
      const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      T& cell = maps.heatmap(yy, xx);
      cell = std::max(cell, static_cast<T>(g));
    }
  }
  maps.heatmap(cy, cx) = T(1);
  maps.offsets(0, cy, cx) = static_cast<T>(fx - cx);
  maps.offsets(1, cy, cx) = static_cast<T>(fy - cy);
  maps.mask(cy, cx) = 1;
  return maps;
}

// Top-k decoding: 3x3 local-maximum suppression, then highest confidence
// first; ties broken toward the lowest row-major cell. Coordinates are
// recovered as (cell + offset) * stride.
template <typename T>
std::vector<Detection> decode_topk(const Tensor<T>& heatmap, const Tensor<T>& offsets,
                                   int stride, int k = 1) {
  const Tensor<T>* hm = &heatmap;
  Tensor<T> squeezed;
  if (heatmap.rank() == 3 && heatmap.dim(0) == 1) {
    squeezed = heatmap;
    squeezed.shape = {heatmap.dim(1), heatmap.dim(2)};
    hm = &squeezed;
  }
  if (hm->rank() != 2 || hm->numel() == 0)
    throw InvalidArgumentError("decode expects a non-empty 2D heatmap");
  if (k < 1) throw InvalidArgumentError("k must be >= 1");
  const int gh = hm->dim(0), gw = hm->dim(1);

  struct Peak {
    T value;
    int idx;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      const T v = (*hm)(y, x);
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= gh || xx < 0 || xx >= gw) continue;
          if ((*hm)(yy, xx) > v) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) peaks.push_back({v, y * gw + x});
    }
  }

  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.idx < b.idx;
  });

  std::vector<Detection> out;
  const int n = std::min<int>(k, static_cast<int>(peaks.size()));
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int cy = peaks[i].idx / gw, cx = peaks[i].idx % gw;
    double ox = 0.0, oy = 0.0;
    if (offsets.numel() > 0) {
      ox = static_cast<double>(offsets(0, cy, cx));
      oy = static_cast<double>(offsets(1, cy, cx));
    }
    out.push_back({(cx + ox) * stride, (cy + oy) * stride,
                   static_cast<double>(peaks[i].value)});
  }
  return out;
}

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;
};

// Penalty-reduced pixel-wise focal loss over the heatmap:
//   F = 1:      (1 - p)^alpha * log(p)
//   otherwise:  (1 - F)^beta * p^alpha * log(1 - p)
// summed, negated and divided by the keypoint count.
template <typename T>
LossResult<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, int n_keypoints) {
  if (!pred.same_shape(target)) throw InvalidArgumentError("focal loss shape mismatch");
  if (n_keypoints < 1) throw InvalidArgumentError("focal loss needs n_keypoints >= 1");

  LossResult<T> res;
  res.grad = Tensor<T>(pred.shape);
  double sum = 0.0;
  const double inv_n = 1.0 / n_keypoints;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const double p = std::clamp(static_cast<double>(pred.data[i]), kProbEps, 1.0 - kProbEps);
    const double f = static_cast<double>(target.data[i]);
    double term, dterm;
    if (f == 1.0) {
      const double om = 1.0 - p;
      term = om * om * std::log(p);
      dterm = -2.0 * om * std::log(p) + om * om / p;
    } else {
      const double w = std::pow(1.0 - f, kFocalBeta);
      term = w * p * p * std::log1p(-p);
      dterm = w * (2.0 * p * std::log1p(-p) - p * p / (1.0 - p));
    }
    sum += term;
    res.grad.data[i] = static_cast<T>(-inv_n * dterm);
  }
  res.value = -inv_n * sum;
  return res;
}

// L1 loss over masked cells only; both offset components of a masked cell
// count toward the mean. Subgradient is 0 at exact equality.
template <typename T>
LossResult<T> offset_loss(const Tensor<T>& pred, const Tensor<T>& target,
                          const Tensor<uint8_t>& mask) {
  if (!pred.same_shape(target)) throw InvalidArgumentError("offset loss shape mismatch");
  if (pred.rank() != 3 || pred.dim(0) != 2 || mask.dim(0) != pred.dim(1) ||
      mask.dim(1) != pred.dim(2))
    throw InvalidArgumentError("offset maps must be (2, h, w) with matching mask");

  int64_t active = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) active += mask.data[i] ? 1 : 0;
  if (active == 0) throw InvalidArgumentError("offset loss needs a non-empty mask");

  LossResult<T> res;
  res.grad = Tensor<T>(pred.shape);
  const int64_t plane = mask.numel();
  const double inv = 1.0 / (2.0 * static_cast<double>(active));
  double sum = 0.0;
  for (int64_t i = 0; i < plane; ++i) {
    if (!mask.data[i]) continue;
    for (int c = 0; c < 2; ++c) {
      const double d = static_cast<double>(pred.data[c * plane + i]) -
                       static_cast<double>(target.data[c * plane + i]);
      sum += std::fabs(d);
      res.grad.data[c * plane + i] =
          static_cast<T>(inv * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)));
    }
  }
  res.value = sum * inv;
  return res;
}

}  // namespace implantformer
