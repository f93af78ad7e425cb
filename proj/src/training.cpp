#include "implantformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "implantformer/centerline.hpp"
#include "implantformer/threads.hpp"
#include "json.hpp"

namespace implantformer {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgumentError("batch size must be >= 1");
  if (!(base_lr > 0.0)) throw InvalidArgumentError("learning rate must be positive");
  if (epochs < 1) throw InvalidArgumentError("epoch count must be >= 1");
  for (size_t i = 0; i < lr_drop_epochs.size(); ++i) {
    if (lr_drop_epochs[i] >= epochs)
      throw InvalidArgumentError("lr drop epochs must be < epochs");
    if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
      throw InvalidArgumentError("lr drop epochs must be strictly increasing");
  }
  if (drop_factor <= 1.0) throw InvalidArgumentError("drop factor must exceed 1");
  if (crop_size < 1) throw InvalidArgumentError("crop size must be positive");
  if (!(scale_lo > 0.0) || scale_hi < scale_lo)
    throw InvalidArgumentError("invalid scale range");
  if (lambda_off < 0.0) throw InvalidArgumentError("lambda_off must be nonnegative");
  if (!(box_size > 0.0)) throw InvalidArgumentError("box size must be positive");
  if (!(min_overlap > 0.0) || !(min_overlap < 1.0))
    throw InvalidArgumentError("min_overlap must lie in (0,1)");
}

std::string TrainConfig::to_json() const {
  json j;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["epochs"] = epochs;
  j["lr_drop_epochs"] = lr_drop_epochs;
  j["drop_factor"] = drop_factor;
  j["crop_size"] = crop_size;
  j["scale_aug"] = scale_aug;
  j["crop_aug"] = crop_aug;
  j["flip_aug"] = flip_aug;
  j["scale_range"] = {scale_lo, scale_hi};
  j["lambda_off"] = lambda_off;
  j["box_size"] = box_size;
  j["min_overlap"] = min_overlap;
  j["seed"] = seed;
  return j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad train config JSON: ") + e.what());
  }
  TrainConfig cfg;
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.lr_drop_epochs = j.value("lr_drop_epochs", cfg.lr_drop_epochs);
  cfg.drop_factor = j.value("drop_factor", cfg.drop_factor);
  cfg.crop_size = j.value("crop_size", cfg.crop_size);
  cfg.scale_aug = j.value("scale_aug", cfg.scale_aug);
  cfg.crop_aug = j.value("crop_aug", cfg.crop_aug);
  cfg.flip_aug = j.value("flip_aug", cfg.flip_aug);
  if (j.contains("scale_range")) {
    cfg.scale_lo = j["scale_range"].at(0).get<double>();
    cfg.scale_hi = j["scale_range"].at(1).get<double>();
  }
  cfg.lambda_off = j.value("lambda_off", cfg.lambda_off);
  cfg.box_size = j.value("box_size", cfg.box_size);
  cfg.min_overlap = j.value("min_overlap", cfg.min_overlap);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

SliceImage resize_slice(const SliceImage& img, int out_w, int out_h) {
  if (out_w == img.width && out_h == img.height) return img;
  SliceImage out;
  out.width = out_w;
  out.height = out_h;
  out.values.resize(static_cast<size_t>(3) * out_w * out_h);
  const double sx = static_cast<double>(img.width) / out_w;
  const double sy = static_cast<double>(img.height) / out_h;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const double fy = (y + 0.5) * sy - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, img.height - 1);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double wy = std::clamp(fy - std::floor(fy), 0.0, 1.0);
      for (int x = 0; x < out_w; ++x) {
        const double fx = (x + 0.5) * sx - 0.5;
        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, img.width - 1);
        const int x1 = std::min(x0 + 1, img.width - 1);
        const double wx = std::clamp(fx - std::floor(fx), 0.0, 1.0);
        const double v = (1.0 - wy) * ((1.0 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1)) +
                         wy * ((1.0 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

namespace {

SliceImage crop_slice(const SliceImage& img, int x0, int y0, int size) {
  SliceImage out;
  out.width = out.height = size;
  out.values.assign(static_cast<size_t>(3) * size * size, 0.0f);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < size; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= img.height) continue;
      for (int x = 0; x < size; ++x) {
        const int sx = x0 + x;
        if (sx < 0 || sx >= img.width) continue;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

}  // namespace

TrainSample augment(const TrainSample& sample, const TrainConfig& cfg, Rng& rng) {
  const SliceImage& src = sample.image;
  if (sample.kx < 0 || sample.kx >= src.width || sample.ky < 0 || sample.ky >= src.height)
    throw InvalidArgumentError("augment: keypoint outside the source image");

  TrainSample cur = sample;

  if (cfg.scale_aug) {
    const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const int nw = std::max(1, static_cast<int>(std::lround(src.width * s)));
    const int nh = std::max(1, static_cast<int>(std::lround(src.height * s)));
    if (nw != src.width || nh != src.height) {
      TrainSample scaled;
      scaled.image = resize_slice(src, nw, nh);
      scaled.kx = map_coord_resize(cur.kx, src.width, nw);
      scaled.ky = map_coord_resize(cur.ky, src.height, nh);
      // A downscale can land the keypoint a hair outside; clamp to the frame.
      scaled.kx = std::clamp(scaled.kx, 0.0, nw - 1.0);
      scaled.ky = std::clamp(scaled.ky, 0.0, nh - 1.0);
      cur = std::move(scaled);
    }
  }

  const int cs = cfg.crop_size;
  const int w = cur.image.width, h = cur.image.height;
  const int lo_x = std::min(0, w - cs), hi_x = std::max(0, w - cs);
  const int lo_y = std::min(0, h - cs), hi_y = std::max(0, h - cs);

  auto centered = [&](double k, int lo, int hi) {
    return std::clamp(static_cast<int>(std::lround(k)) - cs / 2, lo, hi);
  };

  int x0 = centered(cur.kx, lo_x, hi_x);
  int y0 = centered(cur.ky, lo_y, hi_y);
  if (cfg.crop_aug) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int cx0 = rng.uniform_int(lo_x, hi_x);
      const int cy0 = rng.uniform_int(lo_y, hi_y);
      if (cur.kx - cx0 >= 0 && cur.kx - cx0 < cs && cur.ky - cy0 >= 0 && cur.ky - cy0 < cs) {
        x0 = cx0;
        y0 = cy0;
        break;
      }
    }
  }
  TrainSample cropped;
  cropped.image = crop_slice(cur.image, x0, y0, cs);
  cropped.kx = cur.kx - x0;
  cropped.ky = cur.ky - y0;
  if (cropped.kx < 0 || cropped.kx >= cs || cropped.ky < 0 || cropped.ky >= cs)
    throw InvalidArgumentError("augment: keypoint could not be kept inside the crop");
  cur = std::move(cropped);

  if (cfg.flip_aug && rng.bernoulli(0.5)) {
    SliceImage flipped = cur.image;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) flipped.at(c, y, x) = cur.image.at(c, y, cs - 1 - x);
    cur.image = std::move(flipped);
    cur.kx = (cs - 1) - cur.kx;
  }
  return cur;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw InvalidArgumentError("epoch outside [0, epochs)");
  int drops = 0;
  for (int e : cfg.lr_drop_epochs)
    if (e <= epoch) ++drops;
  return cfg.base_lr / std::pow(cfg.drop_factor, drops);
}

Tensor<float> slice_to_tensor(const SliceImage& img) {
  Tensor<float> t({3, img.height, img.width});
  std::copy(img.values.begin(), img.values.end(), t.data.begin());
  return t;
}

namespace {

struct SampleResult {
  std::vector<Tensor<float>> grads;
  double l_k = 0.0, l_off = 0.0;
};

}  // namespace

TrainResult train(Model<float>& model, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg, const std::string& log_csv_path) {
  cfg.validate();
  if (dataset.empty()) throw InvalidArgumentError("train: empty dataset");
  if (cfg.crop_size != model.config().image_size)
    throw InvalidArgumentError("train: crop size must equal the network input size");

  const int g = model.config().stride();
  const double radius =
      gaussian_radius(cfg.box_size / g, cfg.box_size / g, cfg.min_overlap);

  AdamState<float> adam = AdamState<float>::like(model.params());
  Rng shuffle_rng(Rng::mix(cfg.seed, 0x5affe));

  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  const size_t n = dataset.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the sequential shuffle stream.
    for (size_t i = n - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i)));
      std::swap(order[i], order[j]);
    }
    const double lr = lr_at(epoch, cfg);

    int step = 0;
    for (size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const size_t count = std::min<size_t>(cfg.batch_size, n - start);
      std::vector<SampleResult> results(count);

      // Samples in a batch are independent; each worker owns a derived rng
      // stream, and gradients are reduced in sample order afterwards, so the
      // result does not depend on the thread count.
      parallel_for(static_cast<int64_t>(count), [&](int64_t lo, int64_t hi) {
        for (int64_t bi = lo; bi < hi; ++bi) {
          const size_t gidx = static_cast<size_t>(epoch) * n + start + bi;
          Rng aug_rng(Rng::mix(cfg.seed ^ 0xA7617Full, gidx));
          const TrainSample aug = augment(dataset[order[start + bi]], cfg, aug_rng);

          TargetMaps<float> target = encode_target<float>(
              aug.kx, aug.ky, cfg.crop_size, cfg.crop_size, g, radius);

          ForwardPass<float> fp = model.forward(slice_to_tensor(aug.image));
          Tensor<float> pred_hm = fp.heatmap();
          pred_hm.shape = {pred_hm.dim(1), pred_hm.dim(2)};

          LossResult<float> lk = focal_loss(pred_hm, target.heatmap, 1);
          LossResult<float> loff = offset_loss(fp.offsets(), target.offsets, target.mask);

          Tensor<float> d_hm = lk.grad;
          d_hm.shape = {1, d_hm.dim(0), d_hm.dim(1)};
          Tensor<float> d_off = loff.grad;
          const float w_off = static_cast<float>(cfg.lambda_off);
          for (auto& x : d_off.data) x *= w_off;

          SampleResult& sr = results[bi];
          sr.grads = model.backward(fp, d_hm, d_off);
          sr.l_k = lk.value;
          sr.l_off = loff.value;
        }
      });

      // Average the per-sample gradients in a fixed order.
      std::vector<Tensor<float>> grads = std::move(results[0].grads);
      for (size_t bi = 1; bi < count; ++bi)
        for (size_t pi = 0; pi < grads.size(); ++pi)
          for (int64_t j = 0; j < grads[pi].numel(); ++j)
            grads[pi].data[j] += results[bi].grads[pi].data[j];
      const float inv = 1.0f / static_cast<float>(count);
      for (auto& gt : grads)
        for (auto& x : gt.data) x *= inv;

      double l_k = 0.0, l_off = 0.0;
      for (const auto& sr : results) {
        l_k += sr.l_k;
        l_off += sr.l_off;
      }
      l_k /= count;
      l_off /= count;
      const double l_total = total_loss(l_k, l_off, cfg.lambda_off);
      if (!std::isfinite(l_total))
        throw DivergedError("training diverged at epoch " + std::to_string(epoch) +
                            " step " + std::to_string(step) + " (loss " +
                            std::to_string(l_total) + ")");

      adam_step(model.params(), grads, adam, lr);
      result.log.push_back({epoch, step, l_k, l_off, l_total, lr});
      result.final_loss = l_total;
    }
  }

  if (!log_csv_path.empty()) {
    std::ofstream os(log_csv_path, std::ios::trunc);
    if (!os) throw IoError("cannot create loss log: " + log_csv_path);
    os << "epoch,step,l_k,l_off,l_total,lr\n";
    for (const auto& row : result.log)
      os << row.epoch << ',' << row.step << ',' << row.l_k << ',' << row.l_off << ','
         << row.l_total << ',' << row.lr << '\n';
  }
  return result;
}

void append_crown_samples(const Volume& volume, const KeypointTrack& root_track,
                          std::vector<TrainSample>& out, double window_lo,
                          double window_hi) {
  const auto [crown_zs, root_zs] = partition(volume);
  (void)root_zs;
  const KeypointTrack labels = project_root_to_crown(root_track, crown_zs);
  for (size_t i = 0; i < crown_zs.size(); ++i) {
    TrainSample s;
    s.image = slice_at(volume, crown_zs[i], window_lo, window_hi);
    s.kx = labels.points[i].x;
    s.ky = labels.points[i].y;
    out.push_back(std::move(s));
  }
}

void append_root_samples(const Volume& volume, const KeypointTrack& root_track,
                         std::vector<TrainSample>& out, int take_last,
                         double window_lo, double window_hi) {
  size_t first = 0;
  if (take_last > 0 && static_cast<size_t>(take_last) < root_track.points.size())
    first = root_track.points.size() - static_cast<size_t>(take_last);
  for (size_t i = first; i < root_track.points.size(); ++i) {
    const TrackPoint& p = root_track.points[i];
    if (p.z < 0 || static_cast<uint32_t>(p.z) >= volume.crown_boundary)
      throw InvalidArgumentError("root track point outside the root region");
    TrainSample s;
    s.image = slice_at(volume, static_cast<uint32_t>(p.z), window_lo, window_hi);
    s.kx = p.x;
    s.ky = p.y;
    out.push_back(std::move(s));
  }
}

}  // namespace implantformer
