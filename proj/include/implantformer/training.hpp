#pragma once

#include <string>
#include <vector>

#include "implantformer/heatmap.hpp"
#include "implantformer/network.hpp"
#include "implantformer/rng.hpp"
#include "implantformer/volume.hpp"

namespace implantformer {

struct TrainConfig {
  int batch_size = 6;
  double base_lr = 5e-4;
  int epochs = 140;
  std::vector<int> lr_drop_epochs = {60, 100};
  double drop_factor = 10.0;
  int crop_size = 512;
  bool scale_aug = true;
  bool crop_aug = true;
  bool flip_aug = true;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double lambda_off = kLambdaOff;
  double box_size = 21.0;  // keypoint box side (image px) for the Gaussian radius
  double min_overlap = 0.7;
  uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json_text(const std::string& text);
};

// One labeled crown (or root) slice.
struct TrainSample {
  SliceImage image;
  double kx = 0.0, ky = 0.0;
};

// Bilinear resize with half-pixel centers; channels handled independently.
SliceImage resize_slice(const SliceImage& img, int out_w, int out_h);

// Maps a coordinate through the same resize convention.
inline double map_coord_resize(double k, int in_size, int out_size) {
  return (k + 0.5) * (static_cast<double>(out_size) / in_size) - 0.5;
}

// Random scale, then crop to cfg.crop_size (keypoint kept inside; after 20
// failed draws the crop recenters on the keypoint), then horizontal flip.
// The keypoint moves through every step with the image.
TrainSample augment(const TrainSample& sample, const TrainConfig& cfg, Rng& rng);

// Step schedule: base_lr / drop_factor^(number of drop epochs <= epoch).
double lr_at(int epoch, const TrainConfig& cfg);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState like(const ParamSet<T>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& t : params.tensors) {
      st.m.emplace_back(t.shape);
      st.v.emplace_back(t.shape);
    }
    return st;
  }
};

// Bias-corrected Adam update, applied in parameter order.
template <typename T>
void adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads,
               AdamState<T>& state, double lr) {
  if (grads.size() != params.size())
    throw InvalidArgumentError("adam_step: gradient count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params.tensors[i];
    const Tensor<T>& g = grads[i];
    if (!p.same_shape(g)) throw InvalidArgumentError("adam_step: gradient shape mismatch");
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double gj = static_cast<double>(g.data[j]);
      if (!std::isfinite(gj)) throw DivergedError("non-finite gradient in adam_step");
      const double mj = state.beta1 * m.data[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v.data[j] + (1.0 - state.beta2) * gj * gj;
      m.data[j] = static_cast<T>(mj);
      v.data[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p.data[j] = static_cast<T>(p.data[j] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

struct TrainLogRow {
  int epoch = 0;
  int step = 0;  // optimizer step within the epoch
  double l_k = 0.0, l_off = 0.0, l_total = 0.0, lr = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  double final_loss = 0.0;
};

// Epoch loop: shuffle, augment, encode targets, forward, focal + offset
// losses, backward, Adam with the step schedule. Deterministic per seed.
// Throws DivergedError if the loss becomes non-finite.
TrainResult train(Model<float>& model, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg, const std::string& log_csv_path = "");

// Dataset builders. Crown samples pair crown slices with labels projected
// from the root annotations; root samples pair root slices with the
// annotations directly. take_last > 0 keeps only that many root slices
// adjacent to the crown boundary (matched-budget comparisons).
void append_crown_samples(const Volume& volume, const KeypointTrack& root_track,
                          std::vector<TrainSample>& out,
                          double window_lo = kWindowLo, double window_hi = kWindowHi);
void append_root_samples(const Volume& volume, const KeypointTrack& root_track,
                         std::vector<TrainSample>& out, int take_last = 0,
                         double window_lo = kWindowLo, double window_hi = kWindowHi);

Tensor<float> slice_to_tensor(const SliceImage& img);

}  // namespace implantformer
