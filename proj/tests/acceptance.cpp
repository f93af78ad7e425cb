// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Heavy end-to-end checks run on a seeded 200-patient
// phantom cohort with the five-fold protocol.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "implantformer/evaluation.hpp"
#include "implantformer/inference.hpp"
#include "implantformer/phantom.hpp"
#include "implantformer/threads.hpp"
#include "implantformer/training.hpp"

using namespace implantformer;

namespace {

int g_failures = 0;

struct Criterion {
  std::string name;
  bool ok = true;
  std::string detail;
  double seconds = 0.0;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

void run(const std::string& name, const std::function<void(Criterion&)>& body) {
  Criterion c;
  c.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail += std::string("exception: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("[%s] %-22s (%.1f s)%s%s\n", c.ok ? "PASS" : "FAIL", c.name.c_str(),
              c.seconds, c.detail.empty() ? "" : " -- ", c.detail.c_str());
  std::fflush(stdout);
  if (!c.ok) ++g_failures;
}

// ---- shared oracles --------------------------------------------------------

// Dense (k, b) grid refinement; independent of the closed-form fit.
std::pair<double, double> grid_search_fit(const std::vector<double>& zs,
                                          const std::vector<double>& vs) {
  double k_lo = -50.0, k_hi = 50.0, b_lo = -500.0, b_hi = 500.0;
  double best_k = 0.0, best_b = 0.0;
  constexpr int n = 33;
  for (int iter = 0; iter < 60; ++iter) {
    double best_q = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double k = k_lo + (k_hi - k_lo) * i / (n - 1);
      for (int j = 0; j < n; ++j) {
        const double b = b_lo + (b_hi - b_lo) * j / (n - 1);
        double q = 0.0;
        for (size_t p = 0; p < zs.size(); ++p) {
          const double r = vs[p] - k * zs[p] - b;
          q += r * r;
        }
        if (q < best_q) {
          best_q = q;
          best_k = k;
          best_b = b;
        }
      }
    }
    const double span_k = 2.0 * (k_hi - k_lo) / (n - 1);
    const double span_b = 2.0 * (b_hi - b_lo) / (n - 1);
    k_lo = best_k - span_k;
    k_hi = best_k + span_k;
    b_lo = best_b - span_b;
    b_hi = best_b + span_b;
    if (span_k < 1e-9 && span_b < 1e-9) break;
  }
  return {best_k, best_b};
}

double ap_envelope_oracle(const std::vector<PrPoint>& curve) {
  const double step = 1e-4;
  double ap = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const double r = (k + 0.5) * step;
    double env = 0.0;
    for (const auto& p : curve)
      if (p.recall >= r) env = std::max(env, p.precision);
    ap += env * step;
  }
  return ap;
}

// ---- criteria --------------------------------------------------------------

void centerline_suite(Criterion& c) {
  // exact lines recover (k, b) to 1e-9
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const double k1 = rng.uniform(-2, 2), b1 = rng.uniform(-20, 20);
    const double k2 = rng.uniform(-2, 2), b2 = rng.uniform(-20, 20);
    KeypointTrack t;
    t.region = Region::root;
    for (int z = 0; z < 12; ++z) t.points.push_back({k1 * z + b1, k2 * z + b2, z});
    const CenterlineFit fit = fit_centerline(t);
    c.require(std::fabs(fit.k1 - k1) < 1e-9 && std::fabs(fit.b1 - b1) < 1e-9 &&
                  std::fabs(fit.k2 - k2) < 1e-9 && std::fabs(fit.b2 - b2) < 1e-9,
              "exact-line fit drifted beyond 1e-9");
  }

  // noisy fits match the grid-search oracle to 1e-6
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<double> zs, xs, ys;
    KeypointTrack t;
    t.region = Region::root;
    for (int z = 0; z < 20; ++z) {
      const double x = 0.4 * z + 9.0 + rng.uniform(-0.6, 0.6);
      const double y = -0.3 * z + 33.0 + rng.uniform(-0.6, 0.6);
      t.points.push_back({x, y, z});
      zs.push_back(z);
      xs.push_back(x);
      ys.push_back(y);
    }
    const CenterlineFit fit = fit_centerline(t);
    const auto [kx, bx] = grid_search_fit(zs, xs);
    const auto [ky, by] = grid_search_fit(zs, ys);
    c.require(std::fabs(fit.k1 - kx) < 1e-6 && std::fabs(fit.b1 - bx) < 1e-6 &&
                  std::fabs(fit.k2 - ky) < 1e-6 && std::fabs(fit.b2 - by) < 1e-6,
              "noisy fit disagrees with the grid oracle");

    // round trip reproduces the fitted line at all root z to 1e-9
    std::vector<uint32_t> crown_zs, root_zs;
    for (uint32_t z = 20; z < 40; ++z) crown_zs.push_back(z);
    for (uint32_t z = 0; z < 20; ++z) root_zs.push_back(z);
    const KeypointTrack back =
        project_crown_to_root(project_root_to_crown(t, crown_zs), root_zs);
    for (const auto& p : back.points) {
      const auto [x, y] = eval_line(fit, p.z);
      c.require(std::fabs(p.x - x) < 1e-9 && std::fabs(p.y - y) < 1e-9,
                "round trip left the fitted line");
    }

    // optimality against 1000 random perturbations
    for (int i = 0; i < 1000; ++i) {
      CenterlineFit other = fit;
      other.k1 += rng.uniform(-0.5, 0.5);
      other.b1 += rng.uniform(-3.0, 3.0);
      other.k2 += rng.uniform(-0.5, 0.5);
      other.b2 += rng.uniform(-3.0, 3.0);
      const auto [q1, q2] = residual_q(other, t);
      c.require(q1 >= fit.q1 - 1e-9 && q2 >= fit.q2 - 1e-9,
                "perturbed fit beat the least-squares minimum");
      if (!c.ok) break;
    }
  }
}

NetConfig gradcheck_config() {
  NetConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.taps = {1, 2};
  cfg.ratios = {4, 8};
  cfg.reassemble_dim = 6;
  cfg.decoder_dim = 6;
  cfg.stem_width = 4;
  return cfg;
}

// Micro configuration so full-composition finite differences stay cheap.
NetConfig micro_config() {
  NetConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.taps = {1, 2};
  cfg.ratios = {4, 8};
  cfg.reassemble_dim = 4;
  cfg.decoder_dim = 4;
  cfg.stem_width = 2;
  return cfg;
}

template <typename U>
std::vector<ad::Var> full_network(ModelTape<U>& mt, ad::Var image) {
  ad::Var x = image;
  if (mt.cfg.conv_stem) x = conv_stem_forward(mt, x);
  ad::Var tokens = patch_embed(mt, x);
  EncoderOut<U> enc = encoder_forward(mt, tokens);
  std::vector<ad::Var> maps;
  for (size_t i = 0; i < enc.taps.size(); ++i)
    maps.push_back(reassemble(mt, static_cast<int>(i), enc.taps[i]));
  std::vector<ad::Var> coarse_to_fine(maps.rbegin(), maps.rend());
  ad::Var fused = decoder_fuse(mt, coarse_to_fine);
  auto [hm, off] = heads(mt, fused);
  return {hm, off};
}

void gradient_suite(Criterion& c) {
  int instances = 0;

  auto run_check = [&](const char* what, const NetConfig& cfg, uint64_t seed,
                       const std::vector<int>& in_shape, double lo, double hi,
                       auto builder, bool f32) {
    const auto p64 = gradcheck::representable_params(cfg, seed);
    const auto in = gradcheck::representable_input(in_shape, seed * 7 + 1, lo, hi);
    if (f32) {
      const auto res = gradcheck::check<float>(cfg, p64, in, builder, seed * 13 + 5);
      c.require(res.max_rel_err < 1e-4, std::string(what) + " f32 err " +
                                            std::to_string(res.max_rel_err));
    } else {
      const auto res = gradcheck::check<double>(cfg, p64, in, builder, seed * 13 + 5);
      c.require(res.max_rel_err < 1e-6, std::string(what) + " f64 err " +
                                            std::to_string(res.max_rel_err));
    }
    ++instances;
  };

  const NetConfig cfg = gradcheck_config();

  auto stem_builder = [](auto& mt, ad::Var x) {
    return std::vector<ad::Var>{conv_stem_forward(mt, x)};
  };
  auto block_builder = [](auto& mt, ad::Var x) {
    return std::vector<ad::Var>{mhsa_block(mt, 0, x).first};
  };
  auto reasm_builder = [](auto& mt, ad::Var x) {
    return std::vector<ad::Var>{reassemble(mt, 0, x), reassemble(mt, 1, x)};
  };
  auto up_builder = [](auto& mt, ad::Var x) {
    return std::vector<ad::Var>{reassemble(mt, 0, x)};
  };
  auto fuse_builder = [](auto& mt, ad::Var coarse) {
    ad::Var fine = ad::upsample2x(mt.tape, coarse);
    return std::vector<ad::Var>{decoder_fuse(mt, {coarse, fine})};
  };
  auto heads_builder = [](auto& mt, ad::Var fused) {
    auto [hm, off] = heads(mt, fused);
    return std::vector<ad::Var>{hm, off};
  };
  auto full_builder = [](auto& mt, ad::Var x) { return full_network(mt, x); };

  for (uint64_t s = 1; s <= 8; ++s)
    run_check("stem", cfg, s, {3, 8, 8}, 0.0, 1.0, stem_builder, false);
  for (uint64_t s = 9; s <= 12; ++s)
    run_check("stem", cfg, s, {3, 8, 8}, 0.0, 1.0, stem_builder, true);

  for (uint64_t s = 13; s <= 20; ++s)
    run_check("encoder", cfg, s, {5, 8}, -1.0, 1.0, block_builder, false);
  for (uint64_t s = 21; s <= 24; ++s)
    run_check("encoder", cfg, s, {5, 8}, -1.0, 1.0, block_builder, true);

  for (uint64_t s = 25; s <= 30; ++s)
    run_check("reassemble", cfg, s, {17, 8}, -1.0, 1.0, reasm_builder, false);
  for (uint64_t s = 31; s <= 33; ++s)
    run_check("reassemble", cfg, s, {17, 8}, -1.0, 1.0, reasm_builder, true);
  NetConfig up_cfg = cfg;
  up_cfg.patch_size = 8;  // grid 2x2: ratio 4 < patch upsamples
  for (uint64_t s = 34; s <= 39; ++s)
    run_check("reassemble-up", up_cfg, s, {5, 8}, -1.0, 1.0, up_builder, false);
  for (uint64_t s = 40; s <= 42; ++s)
    run_check("reassemble-up", up_cfg, s, {5, 8}, -1.0, 1.0, up_builder, true);

  for (FusionMode mode : {FusionMode::concat, FusionMode::add}) {
    NetConfig fcfg = cfg;
    fcfg.fusion = mode;
    const uint64_t base = mode == FusionMode::concat ? 43 : 51;
    for (uint64_t s = base; s < base + 5; ++s)
      run_check("fusion", fcfg, s, {6, 2, 2}, -1.0, 1.0, fuse_builder, false);
    for (uint64_t s = base + 5; s < base + 8; ++s)
      run_check("fusion", fcfg, s, {6, 2, 2}, -1.0, 1.0, fuse_builder, true);
  }

  for (uint64_t s = 59; s <= 66; ++s)
    run_check("heads", cfg, s, {6, 4, 4}, -1.0, 1.0, heads_builder, false);
  for (uint64_t s = 67; s <= 70; ++s)
    run_check("heads", cfg, s, {6, 4, 4}, -1.0, 1.0, heads_builder, true);

  const NetConfig micro = micro_config();
  for (uint64_t s = 71; s <= 76; ++s)
    run_check("composition", micro, s, {3, 8, 8}, 0.0, 1.0, full_builder, false);
  for (uint64_t s = 77; s <= 82; ++s)
    run_check("composition", micro, s, {3, 8, 8}, 0.0, 1.0, full_builder, true);

  // focal and offset losses: per-cell finite differences at both precisions
  Rng rng(831);
  auto loss_instances = [&](bool f32) {
    for (int trial = 0; trial < (f32 ? 4 : 8); ++trial) {
      Tensor<float> predf({5, 5}), targetf({5, 5});
      for (auto& v : predf.data) v = static_cast<float>(rng.uniform(0.05, 0.95));
      for (auto& v : targetf.data) v = static_cast<float>(rng.uniform(0.0, 0.9));
      targetf(2, 2) = 1.0f;
      const Tensor<double> pred64 = predf.cast<double>();
      const Tensor<double> target64 = targetf.cast<double>();

      std::vector<double> analytic(predf.numel());
      if (f32) {
        const auto r = focal_loss(predf, targetf, 1);
        for (int64_t i = 0; i < predf.numel(); ++i) analytic[i] = r.grad.data[i];
      } else {
        const auto r = focal_loss(pred64, target64, 1);
        for (int64_t i = 0; i < pred64.numel(); ++i) analytic[i] = r.grad.data[i];
      }
      const double h = 1e-6, tol = f32 ? 1e-4 : 1e-6;
      for (int64_t i = 0; i < pred64.numel(); ++i) {
        Tensor<double> cell_t({1, 1}, target64.data[i]);
        Tensor<double> up({1, 1}, pred64.data[i] + h);
        Tensor<double> dn({1, 1}, pred64.data[i] - h);
        const double fd =
            (focal_loss(up, cell_t, 1).value - focal_loss(dn, cell_t, 1).value) /
            (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(fd), 1e-12});
        c.require(std::fabs(analytic[i] - fd) / denom < tol, "focal gradient mismatch");
      }
      ++instances;
    }
    for (int trial = 0; trial < (f32 ? 4 : 8); ++trial) {
      Tensor<float> predf({2, 4, 4}), targetf({2, 4, 4});
      Tensor<uint8_t> mask({4, 4});
      for (auto& v : predf.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
      for (auto& v : targetf.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
      for (auto& m : mask.data) m = rng.bernoulli(0.5) ? 1 : 0;
      mask(1, 1) = 1;
      const int64_t plane = mask.numel();
      for (int64_t i = 0; i < plane; ++i)
        for (int C = 0; C < 2; ++C)
          if (mask.data[i] &&
              std::fabs(predf.data[C * plane + i] - targetf.data[C * plane + i]) < 1e-3)
            predf.data[C * plane + i] += 0.01f;
      const Tensor<double> pred64 = predf.cast<double>();
      const Tensor<double> target64 = targetf.cast<double>();

      std::vector<double> analytic(predf.numel());
      if (f32) {
        const auto r = offset_loss(predf, targetf, mask);
        for (int64_t i = 0; i < predf.numel(); ++i) analytic[i] = r.grad.data[i];
      } else {
        const auto r = offset_loss(pred64, target64, mask);
        for (int64_t i = 0; i < pred64.numel(); ++i) analytic[i] = r.grad.data[i];
      }
      const double h = 1e-4, tol = f32 ? 1e-4 : 1e-6;
      for (int64_t i = 0; i < pred64.numel(); ++i) {
        Tensor<double> up = pred64, dn = pred64;
        up.data[i] += h;
        dn.data[i] -= h;
        const double fd = (offset_loss(up, target64, mask).value -
                           offset_loss(dn, target64, mask).value) /
                          (2.0 * h);
        if (analytic[i] == 0.0 && fd == 0.0) continue;
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(fd), 1e-12});
        c.require(std::fabs(analytic[i] - fd) / denom < tol, "offset gradient mismatch");
      }
      ++instances;
    }
  };
  loss_instances(false);
  loss_instances(true);

  c.require(instances >= 100,
            "only " + std::to_string(instances) + " gradient instances ran");
  c.detail += (c.detail.empty() ? "" : "; ") + std::to_string(instances) + " instances";
}

void shape_suite(Criterion& c) {
  {
    NetConfig cfg;
    cfg.image_size = 512;
    cfg.patch_size = 16;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.layers = 12;
    cfg.taps = {3, 6, 9, 12};
    cfg.ratios = {4, 8, 16, 32};
    cfg.reassemble_dim = 8;
    cfg.decoder_dim = 8;
    cfg.stem_width = 2;
    c.require(cfg.token_count() + 1 == 1025, "512/16 token count is not 1025");
    Model<float> model(cfg, 1);
    Tensor<float> img({3, 512, 512}, 0.3f);
    const auto fp = model.forward(img, false);
    c.require(fp.heatmap().shape == std::vector<int>({1, 128, 128}),
              "512 input did not produce a 128x128 heatmap");
    c.require(fp.attention[0].shape == std::vector<int>({2, 1025, 1025}),
              "attention is not over 1025 tokens");
  }
  {
    NetConfig cfg;  // desk defaults: 64 px, patch 8
    c.require(cfg.token_count() + 1 == 65, "64/8 token count is not 65");
    Model<float> model(cfg, 2);
    Tensor<float> img({3, 64, 64}, 0.6f);
    const auto fp = model.forward(img, false);
    c.require(fp.heatmap().shape == std::vector<int>({1, 16, 16}),
              "64 input did not produce a 16x16 heatmap");
  }
}

void codec_suite(Criterion& c) {
  Rng rng(555);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(0.0, 63.9999);
    const double y = rng.uniform(0.0, 63.9999);
    const auto maps = encode_target<double>(x, y, 64, 64, 4, 1.5);
    const auto dets = decode_topk(maps.heatmap, maps.offsets, 4, 1);
    c.require(dets.size() == 1 && std::fabs(dets[0].x - x) < 1e-6 &&
                  std::fabs(dets[0].y - y) < 1e-6,
              "decode(encode) beyond 1e-6 px");
    if (!c.ok) break;
  }

  // top-1 selection picks the strongest peak
  Tensor<double> hm({16, 16});
  Tensor<double> off({2, 16, 16});
  hm(3, 4) = 0.8;
  hm(12, 13) = 0.6;
  const auto top = decode_topk(hm, off, 4, 1);
  c.require(top.size() == 1 && top[0].x == 16.0 && top[0].y == 12.0 &&
                top[0].confidence == 0.8,
            "top-1 did not select the strongest peak");

  // deterministic tie-break: flat map decodes to the first row-major cell
  Tensor<double> flat({8, 8}, 0.25);
  Tensor<double> off2({2, 8, 8});
  for (int i = 0; i < 10; ++i) {
    const auto d = decode_topk(flat, off2, 4, 1);
    c.require(d.size() == 1 && d[0].x == 0.0 && d[0].y == 0.0,
              "tie-break is not the lowest row-major cell");
  }
}

void metric_suite(Criterion& c) {
  const Box a = keypoint_box(100, 100, 21);
  const Box b = keypoint_box(105, 100, 21);
  c.require(std::fabs(iou(a, b) - 336.0 / 546.0) < 1e-9, "21x21 IoU at 5 px offset is off");

  // AP vs integration oracle on 100 seeded instances
  Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_gt = std::vector<int>{10, 20, 25, 50, 100}[rng.uniform_int(0, 4)];
    const double spread = rng.uniform(2.0, 14.0);
    std::vector<MatchResult> matches;
    for (int i = 0; i < n_gt; ++i) {
      const double gx = rng.uniform(30.0, 70.0), gy = rng.uniform(30.0, 70.0);
      std::vector<Detection> preds;
      for (int p = rng.uniform_int(0, 3); p > 0; --p)
        preds.push_back({gx + rng.uniform(-spread, spread),
                         gy + rng.uniform(-spread, spread), rng.uniform()});
      matches.push_back(match_predictions(preds, {{gx, gy}}, 0.5, 21.0));
    }
    const ApResult r = average_precision(matches);
    c.require(std::fabs(r.ap - ap_envelope_oracle(r.curve)) < 1e-6,
              "AP diverged from the integration oracle");
    if (!c.ok) break;
  }

  // AP75 <= AP50 on 100 random prediction sets
  Rng rng2(99);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<MatchResult> at50, at75;
    for (int i = 0; i < 20; ++i) {
      const double gx = rng2.uniform(30.0, 70.0), gy = rng2.uniform(30.0, 70.0);
      std::vector<Detection> preds;
      for (int p = rng2.uniform_int(0, 2); p > 0; --p)
        preds.push_back({gx + rng2.uniform(-8.0, 8.0), gy + rng2.uniform(-8.0, 8.0),
                         rng2.uniform()});
      at50.push_back(match_predictions(preds, {{gx, gy}}, 0.5, 21.0));
      at75.push_back(match_predictions(preds, {{gx, gy}}, 0.75, 21.0));
    }
    c.require(average_precision(at75).ap <= average_precision(at50).ap + 1e-12,
              "AP75 exceeded AP50");
    if (!c.ok) break;
  }

  // perfect predictions
  std::vector<MatchResult> perfect;
  for (int i = 0; i < 25; ++i)
    perfect.push_back(match_predictions({{50, 50, 0.9}}, {{50.0, 50.0}}, 0.75, 21.0));
  c.require(average_precision(perfect).ap == 1.0, "perfect predictions did not reach AP 1");
}

// ---- end-to-end cohort ------------------------------------------------------

struct Cohort {
  std::vector<PhantomConfig> configs;
  std::vector<Volume> volumes;
  std::vector<KeypointTrack> tracks;
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> folds;
  std::vector<int> fold_of;  // per patient
};

Cohort make_cohort() {
  constexpr int kPatients = 200;
  Cohort cohort;
  Rng meta(Rng::mix(42, 0x9e0));
  cohort.configs.resize(kPatients);
  cohort.volumes.resize(kPatients);
  cohort.tracks.resize(kPatients);
  for (int i = 0; i < kPatients; ++i) {
    PhantomConfig& pc = cohort.configs[i];
    pc.image_size = 64;
    pc.depth = 40;
    pc.crown_boundary = 30;
    pc.seed = Rng::mix(42, 1000 + static_cast<uint64_t>(i));
    pc.tilt_x = meta.uniform(-0.2, 0.2);
    pc.tilt_y = meta.uniform(-0.2, 0.2);
    pc.gap_index = meta.uniform_int(1, pc.tooth_count - 2);
    auto [volume, track] = generate_phantom(pc);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%03d", i);
    track.patient = buf;
    cohort.volumes[i] = std::move(volume);
    cohort.tracks[i] = std::move(track);
    cohort.ids.push_back(buf);
  }
  cohort.folds = five_fold_split(cohort.ids, 7);
  cohort.fold_of.assign(kPatients, -1);
  for (int f = 0; f < 5; ++f)
    for (const auto& id : cohort.folds[f]) cohort.fold_of[std::stoi(id.substr(1))] = f;
  return cohort;
}

TrainConfig cohort_train_config(int fold) {
  TrainConfig tc;
  tc.batch_size = 6;
  tc.base_lr = 1e-3;
  tc.epochs = 3;
  tc.lr_drop_epochs = {2};
  tc.crop_size = 64;
  tc.box_size = 11.0;
  tc.seed = 1 + static_cast<uint64_t>(fold);
  return tc;
}

enum class Variant { baseline, no_stem_add_fusion, root_trained };

// Trains one fold and returns fold-tagged predictions for its held-out
// patients, along with matching ground-truth tracks.
void run_fold(const Cohort& cohort, int fold, Variant variant,
              std::vector<DetectionFile>& preds, std::vector<KeypointTrack>& gts) {
  std::vector<TrainSample> data;
  for (size_t i = 0; i < cohort.volumes.size(); ++i) {
    if (cohort.fold_of[i] == fold) continue;
    if (variant == Variant::root_trained)
      append_root_samples(cohort.volumes[i], cohort.tracks[i], data, 10);
    else
      append_crown_samples(cohort.volumes[i], cohort.tracks[i], data);
  }

  NetConfig net;  // desk-scale: 64 px, patch 8, dim 64, 4 heads, 4 layers
  if (variant == Variant::no_stem_add_fusion) {
    net.conv_stem = false;
    net.fusion = FusionMode::add;
  }
  Model<float> model(net, 11 + static_cast<uint64_t>(fold));
  train(model, data, cohort_train_config(fold));

  for (size_t i = 0; i < cohort.volumes.size(); ++i) {
    if (cohort.fold_of[i] != fold) continue;
    std::vector<uint32_t> zs;
    if (variant == Variant::root_trained)
      for (uint32_t z = 20; z < 30; ++z) zs.push_back(z);
    else
      for (uint32_t z = 30; z < 40; ++z) zs.push_back(z);

    DetectionFile df;
    df.patient = cohort.ids[i];
    df.fold = fold;
    KeypointTrack gt;
    gt.patient = cohort.ids[i];
    gt.region = variant == Variant::root_trained ? Region::root : Region::crown;
    for (uint32_t z : zs) {
      const SliceImage img = slice_at(cohort.volumes[i], z);
      const auto fp = model.forward(slice_to_tensor(img), false);
      df.slices.push_back(
          {static_cast<int>(z),
           decode_topk(fp.heatmap(), fp.offsets(), model.config().stride(), 1)});
      const auto [x, y] = phantom_keypoint_at(cohort.configs[i], static_cast<int>(z));
      gt.points.push_back({x, y, static_cast<int>(z)});
    }
    preds.push_back(std::move(df));
    gts.push_back(std::move(gt));
  }
}

EvalReport run_variant(const Cohort& cohort, Variant variant) {
  std::vector<DetectionFile> preds;
  std::vector<KeypointTrack> gts;
  for (int fold = 0; fold < 5; ++fold) run_fold(cohort, fold, variant, preds, gts);
  return evaluate(preds, gts, {0.5, 0.75}, 11.0);
}

}  // namespace

int main() {
  std::printf("acceptance suite (%d worker threads)\n", thread_count());
  std::fflush(stdout);

  run("centerline-suite", [](Criterion& c) {
    const auto t0 = std::chrono::steady_clock::now();
    centerline_suite(c);
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.require(s < 5.0, "took " + std::to_string(s) + " s (budget 5 s)");
  });

  run("gradient-suite", [](Criterion& c) {
    const auto t0 = std::chrono::steady_clock::now();
    gradient_suite(c);
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.require(s < 120.0, "took " + std::to_string(s) + " s (budget 120 s)");
  });

  run("shape-suite", [](Criterion& c) {
    const auto t0 = std::chrono::steady_clock::now();
    shape_suite(c);
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.require(s < 10.0, "took " + std::to_string(s) + " s (budget 10 s)");
  });
  run("codec-suite", [](Criterion& c) { codec_suite(c); });
  run("metric-suite", [](Criterion& c) { metric_suite(c); });

  // Heavy end-to-end work shares one cohort.
  Cohort cohort = make_cohort();
  EvalReport baseline;

  run("end-to-end-desk-scale", [&](Criterion& c) {
    const auto t0 = std::chrono::steady_clock::now();
    baseline = run_variant(cohort, Variant::baseline);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    c.require(baseline.folds.size() == 5, "expected 5 folds");
    const double mean_ap75 = baseline.ap_mean[1];
    c.require(mean_ap75 >= 0.80,
              "mean AP75 " + std::to_string(mean_ap75) + " below 0.80");

    int64_t within10 = 0;
    for (size_t bin = 0; bin < baseline.histogram.counts.size() && bin < 2; ++bin)
      within10 += baseline.histogram.counts[bin];
    const double frac =
        static_cast<double>(within10) / static_cast<double>(baseline.histogram.total);
    c.require(frac >= 0.70,
              "only " + std::to_string(frac * 100.0) + "% of predictions within 10 px");

    // 15 minutes on a 4-core desktop; scaled for narrower machines.
    const double budget = 900.0 * 4.0 / std::min(4, thread_count());
    c.require(elapsed <= budget, "end-to-end took " + std::to_string(elapsed) +
                                     " s (budget " + std::to_string(budget) + " s)");
    c.detail += (c.detail.empty() ? "" : "; ") + std::string("AP75 ") +
                format_mean_std(baseline.ap_mean[1], baseline.ap_std[1]) + ", AP50 " +
                format_mean_std(baseline.ap_mean[0], baseline.ap_std[0]) + ", " +
                std::to_string(frac * 100.0).substr(0, 5) + "% within 10 px, " +
                std::to_string(elapsed).substr(0, 6) + " s";
  });

  run("ablation-direction", [&](Criterion& c) {
    const EvalReport variant = run_variant(cohort, Variant::no_stem_add_fusion);
    c.require(!baseline.ap_mean.empty(), "baseline results missing");
    c.require(variant.ap_mean[1] <= baseline.ap_mean[1],
              "no-stem/add variant beat the full model");
    c.detail += "full " + format_mean_std(baseline.ap_mean[1], baseline.ap_std[1]) +
                " vs variant " + format_mean_std(variant.ap_mean[1], variant.ap_std[1]);
  });

  run("crown-vs-root-direction", [&](Criterion& c) {
    const EvalReport root = run_variant(cohort, Variant::root_trained);
    c.require(!baseline.ap_mean.empty(), "baseline results missing");
    c.require(root.ap_mean[1] < baseline.ap_mean[1],
              "root-trained model was not worse than crown-trained");
    c.detail += "crown " + format_mean_std(baseline.ap_mean[1], baseline.ap_std[1]) +
                " vs root " + format_mean_std(root.ap_mean[1], root.ap_std[1]);
  });

  std::printf("%d criterion(s) failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
