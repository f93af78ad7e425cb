#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "implantformer/rng.hpp"
#include "implantformer/tape.hpp"
#include "implantformer/tensor.hpp"

namespace implantformer {

enum class FusionMode { concat, add };

// How the Read step treats the readout token: drop it, or fold it into
// every patch token before the grid is formed.
enum class ReadoutMode { ignore, add };

// Architecture of the regression network. Defaults are the desk-scale
// configuration; the full-scale setup (512 input, patch 16, 12 layers,
// taps {3,6,9,12}) is expressed through the same fields.
struct NetConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int heads = 4;
  int layers = 4;
  std::vector<int> taps = {1, 2, 3, 4};     // encoder layers to tap, ascending
  std::vector<int> ratios = {4, 8, 16, 32}; // output stride per tap, ascending
  int reassemble_dim = 24;
  int decoder_dim = 32;
  int stem_width = 8;
  bool conv_stem = true;
  FusionMode fusion = FusionMode::concat;
  ReadoutMode readout = ReadoutMode::ignore;

  int grid_side() const { return image_size / patch_size; }
  int token_count() const { return grid_side() * grid_side(); }
  // Heatmap stride g = the finest reassemble ratio.
  int stride() const { return *std::min_element(ratios.begin(), ratios.end()); }
  int heatmap_side() const { return image_size / stride(); }
  int fused_channels() const {
    return fusion == FusionMode::concat ? decoder_dim : reassemble_dim;
  }

  void validate() const;
  std::string to_json() const;
  static NetConfig from_json_text(const std::string& text);
};

// Named parameter tensors in a fixed registration order.
template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::unordered_map<std::string, int> index;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    index.emplace(name, static_cast<int>(names.size()));
    names.push_back(name);
    tensors.push_back(std::move(t));
    return tensors.back();
  }
  int find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? -1 : it->second;
  }
  const Tensor<T>& get(const std::string& name) const { return tensors[find(name)]; }
  size_t size() const { return tensors.size(); }
  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }
  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (size_t i = 0; i < tensors.size(); ++i)
      out.add(names[i], tensors[i].template cast<U>());
    return out;
  }
};

// Zero-valued parameters with the shapes the config implies.
template <typename T>
ParamSet<T> make_params(const NetConfig& cfg);

// make_params + the default initialization scheme, deterministic per seed.
template <typename T>
ParamSet<T> init_params(const NetConfig& cfg, uint64_t seed);

// One in-flight forward pass: the tape plus parameter bindings.
template <typename T>
struct ModelTape {
  ad::Tape<T> tape;
  NetConfig cfg;
  std::vector<ad::Var> pvars;  // parallel to ParamSet order

  ModelTape(const NetConfig& c, const ParamSet<T>& params, bool record)
      : tape(record), cfg(c) {
    pvars.reserve(params.size());
    for (const auto& t : params.tensors) pvars.push_back(tape.push(t));
    for (size_t i = 0; i < params.size(); ++i) index_.emplace(params.names[i], pvars[i]);
  }
  ad::Var p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgumentError("unknown parameter '" + name + "'");
    return it->second;
  }

private:
  std::unordered_map<std::string, ad::Var> index_;
};

// ---- network pieces (each usable standalone for testing) -----------------

// Two residual blocks that keep both channel count and spatial size.
template <typename T>
ad::Var conv_stem_forward(ModelTape<T>& mt, ad::Var image);

// Patch projection only: (I_m, D) tokens, no readout, no positions.
template <typename T>
ad::Var patch_tokens(ModelTape<T>& mt, ad::Var image);

// Full embedding: readout token prepended, learned positions added.
template <typename T>
ad::Var patch_embed(ModelTape<T>& mt, ad::Var image);

// Pre-norm transformer block; returns (tokens, attention (heads, n, n)).
template <typename T>
std::pair<ad::Var, ad::Var> mhsa_block(ModelTape<T>& mt, int layer, ad::Var tokens);

template <typename T>
struct EncoderOut {
  std::vector<ad::Var> taps;       // token sets at the configured tap layers
  std::vector<ad::Var> attention;  // per layer
};

template <typename T>
EncoderOut<T> encoder_forward(ModelTape<T>& mt, ad::Var tokens);

// Read -> Concat -> Resample for tap `tap_index`; output (D^, H/s, W/s).
template <typename T>
ad::Var reassemble(ModelTape<T>& mt, int tap_index, ad::Var tokens);

// Fuses maps ordered coarse -> fine down to the heatmap stride.
template <typename T>
ad::Var decoder_fuse(ModelTape<T>& mt, const std::vector<ad::Var>& coarse_to_fine);

// Heatmap head (sigmoid) and offset head (raw); both 3x3 -> 1x1 stacks.
template <typename T>
std::pair<ad::Var, ad::Var> heads(ModelTape<T>& mt, ad::Var fused);

// ---- whole model ----------------------------------------------------------

template <typename T>
struct ForwardPass {
  std::unique_ptr<ModelTape<T>> mt;
  ad::Var heatmap_var, offsets_var;
  std::vector<Tensor<T>> attention;  // read-only copies per layer

  const Tensor<T>& heatmap() const { return mt->tape.value(heatmap_var); }
  const Tensor<T>& offsets() const { return mt->tape.value(offsets_var); }
};

template <typename T>
class Model {
public:
  Model(NetConfig cfg, uint64_t seed) : cfg_(cfg), params_(init_params<T>(cfg, seed)) {
    cfg_.validate();
  }
  Model(NetConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
  }

  const NetConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  ForwardPass<T> forward(const Tensor<T>& image, bool record = true) const;

  // Seeds d(loss)/d(heatmap) and d(loss)/d(offsets), runs the reverse sweep
  // and returns parameter gradients in ParamSet order.
  std::vector<Tensor<T>> backward(ForwardPass<T>& fp, const Tensor<T>& d_heatmap,
                                  const Tensor<T>& d_offsets) const;

private:
  NetConfig cfg_;
  ParamSet<T> params_;
};

// ---- checkpoint ------------------------------------------------------------

void save_checkpoint(const std::string& path, const NetConfig& cfg,
                     const ParamSet<float>& params);
std::pair<NetConfig, ParamSet<float>> load_checkpoint(const std::string& path);

// ---- implementation --------------------------------------------------------

namespace detail {

template <typename T>
void register_params(const NetConfig& cfg, ParamSet<T>& ps) {
  using std::to_string;
  const int D = cfg.embed_dim;
  const int patch_dim = 3 * cfg.patch_size * cfg.patch_size;

  if (cfg.conv_stem) {
    for (int b = 0; b < 2; ++b) {
      const std::string base = "stem.b" + to_string(b);
      ps.add(base + ".conv1.weight", Tensor<T>({cfg.stem_width, 3, 3, 3}));
      ps.add(base + ".conv1.bias", Tensor<T>({cfg.stem_width}));
      ps.add(base + ".conv2.weight", Tensor<T>({3, cfg.stem_width, 3, 3}));
      ps.add(base + ".conv2.bias", Tensor<T>({3}));
    }
  }

  ps.add("embed.proj.weight", Tensor<T>({patch_dim, D}));
  ps.add("embed.proj.bias", Tensor<T>({D}));
  ps.add("embed.readout", Tensor<T>({D}));
  ps.add("embed.pos", Tensor<T>({cfg.token_count() + 1, D}));

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "enc.l" + to_string(l);
    ps.add(base + ".ln1.gamma", Tensor<T>({D}));
    ps.add(base + ".ln1.beta", Tensor<T>({D}));
    ps.add(base + ".qkv.weight", Tensor<T>({D, 3 * D}));
    ps.add(base + ".qkv.bias", Tensor<T>({3 * D}));
    ps.add(base + ".proj.weight", Tensor<T>({D, D}));
    ps.add(base + ".proj.bias", Tensor<T>({D}));
    ps.add(base + ".ln2.gamma", Tensor<T>({D}));
    ps.add(base + ".ln2.beta", Tensor<T>({D}));
    ps.add(base + ".mlp1.weight", Tensor<T>({D, 4 * D}));
    ps.add(base + ".mlp1.bias", Tensor<T>({4 * D}));
    ps.add(base + ".mlp2.weight", Tensor<T>({4 * D, D}));
    ps.add(base + ".mlp2.bias", Tensor<T>({D}));
  }

  const int dd = cfg.reassemble_dim;
  for (size_t t = 0; t < cfg.taps.size(); ++t) {
    const std::string base = "reasm.t" + to_string(t);
    ps.add(base + ".proj.weight", Tensor<T>({dd, D, 1, 1}));
    ps.add(base + ".proj.bias", Tensor<T>({dd}));
    const int s = cfg.ratios[t], m = cfg.patch_size;
    if (s < m) {
      ps.add(base + ".up.weight", Tensor<T>({dd, dd, 3, 3}));
      ps.add(base + ".up.bias", Tensor<T>({dd}));
    } else if (s > m) {
      ps.add(base + ".down.weight", Tensor<T>({dd, dd, 3, 3}));
      ps.add(base + ".down.bias", Tensor<T>({dd}));
    }
  }

  if (cfg.fusion == FusionMode::concat) {
    const int n = static_cast<int>(cfg.taps.size());
    if (n == 1) {
      ps.add("fuse.s0.weight", Tensor<T>({cfg.decoder_dim, dd, 3, 3}));
      ps.add("fuse.s0.bias", Tensor<T>({cfg.decoder_dim}));
    } else {
      for (int i = 1; i < n; ++i) {
        const int in_ch = (i == 1 ? dd : cfg.decoder_dim) + dd;
        ps.add("fuse.s" + to_string(i) + ".weight",
               Tensor<T>({cfg.decoder_dim, in_ch, 3, 3}));
        ps.add("fuse.s" + to_string(i) + ".bias", Tensor<T>({cfg.decoder_dim}));
      }
    }
  }

  const int fc = cfg.fused_channels();
  const int hd = cfg.decoder_dim;
  for (const std::string& h : {std::string("hm"), std::string("off")}) {
    const std::string base = "head." + h;
    ps.add(base + ".conv.weight", Tensor<T>({hd, fc, 3, 3}));
    ps.add(base + ".conv.bias", Tensor<T>({hd}));
    const int out_ch = h == "hm" ? 1 : 2;
    ps.add(base + ".out.weight", Tensor<T>({out_ch, hd, 1, 1}));
    ps.add(base + ".out.bias", Tensor<T>({out_ch}));
  }
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(),
                                                suffix.size(), suffix) == 0;
}

}  // namespace detail

template <typename T>
ParamSet<T> make_params(const NetConfig& cfg) {
  cfg.validate();
  ParamSet<T> ps;
  detail::register_params(cfg, ps);
  return ps;
}

template <typename T>
ParamSet<T> init_params(const NetConfig& cfg, uint64_t seed) {
  ParamSet<T> ps = make_params<T>(cfg);
  Rng rng(seed);
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names[i];
    Tensor<T>& t = ps.tensors[i];
    if (detail::ends_with(name, ".gamma")) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (name == "head.hm.out.bias") {
      // Prior keypoint probability ~0.1 keeps the focal loss stable early.
      std::fill(t.data.begin(), t.data.end(), T(-2.19));
    } else if (detail::ends_with(name, ".bias") || detail::ends_with(name, ".beta")) {
      // zeros
    } else if (t.rank() == 4) {
      const double fan_in = name.find(".up.weight") != std::string::npos
                                ? double(t.dim(0)) * t.dim(2) * t.dim(3)
                                : double(t.dim(1)) * t.dim(2) * t.dim(3);
      const double std = std::sqrt(2.0 / fan_in);
      for (auto& x : t.data) x = static_cast<T>(rng.normal() * std);
    } else {
      for (auto& x : t.data) x = static_cast<T>(rng.trunc_normal(0.02));
    }
  }
  return ps;
}

template <typename T>
ad::Var conv_stem_forward(ModelTape<T>& mt, ad::Var image) {
  ad::Var x = image;
  for (int b = 0; b < 2; ++b) {
    const std::string base = "stem.b" + std::to_string(b);
    ad::Var h = ad::conv2d(mt.tape, x, mt.p(base + ".conv1.weight"),
                           mt.p(base + ".conv1.bias"), 1, 1);
    h = ad::relu(mt.tape, h);
    h = ad::conv2d(mt.tape, h, mt.p(base + ".conv2.weight"), mt.p(base + ".conv2.bias"),
                   1, 1);
    x = ad::add(mt.tape, x, h);
  }
  return x;
}

template <typename T>
ad::Var patch_tokens(ModelTape<T>& mt, ad::Var image) {
  ad::Var patches = ad::extract_patches(mt.tape, image, mt.cfg.patch_size);
  return ad::add_bias_rows(mt.tape, ad::matmul(mt.tape, patches, mt.p("embed.proj.weight")),
                           mt.p("embed.proj.bias"));
}

template <typename T>
ad::Var patch_embed(ModelTape<T>& mt, ad::Var image) {
  ad::Var tokens = patch_tokens(mt, image);
  ad::Var with_readout = ad::prepend_row(mt.tape, mt.p("embed.readout"), tokens);
  return ad::add(mt.tape, with_readout, mt.p("embed.pos"));
}

template <typename T>
std::pair<ad::Var, ad::Var> mhsa_block(ModelTape<T>& mt, int layer, ad::Var tokens) {
  auto& tp = mt.tape;
  const std::string base = "enc.l" + std::to_string(layer);
  const int D = mt.cfg.embed_dim;
  const int dh = D / mt.cfg.heads;

  ad::Var h = ad::layernorm(tp, tokens, mt.p(base + ".ln1.gamma"), mt.p(base + ".ln1.beta"));
  ad::Var qkv = ad::add_bias_rows(tp, ad::matmul(tp, h, mt.p(base + ".qkv.weight")),
                                  mt.p(base + ".qkv.bias"));
  ad::Var q = ad::split_heads(tp, ad::slice_cols(tp, qkv, 0, D), mt.cfg.heads);
  ad::Var k = ad::split_heads(tp, ad::slice_cols(tp, qkv, D, 2 * D), mt.cfg.heads);
  ad::Var v = ad::split_heads(tp, ad::slice_cols(tp, qkv, 2 * D, 3 * D), mt.cfg.heads);

  ad::Var att = ad::softmax_lastdim(
      tp, ad::scale(tp, ad::bmm_tb(tp, q, k), static_cast<T>(1.0 / std::sqrt(double(dh)))));
  ad::Var ctx = ad::merge_heads(tp, ad::bmm(tp, att, v));
  ad::Var proj = ad::add_bias_rows(tp, ad::matmul(tp, ctx, mt.p(base + ".proj.weight")),
                                   mt.p(base + ".proj.bias"));
  ad::Var x = ad::add(tp, tokens, proj);

  ad::Var h2 = ad::layernorm(tp, x, mt.p(base + ".ln2.gamma"), mt.p(base + ".ln2.beta"));
  ad::Var m1 = ad::gelu(tp, ad::add_bias_rows(tp, ad::matmul(tp, h2, mt.p(base + ".mlp1.weight")),
                                              mt.p(base + ".mlp1.bias")));
  ad::Var m2 = ad::add_bias_rows(tp, ad::matmul(tp, m1, mt.p(base + ".mlp2.weight")),
                                 mt.p(base + ".mlp2.bias"));
  return {ad::add(tp, x, m2), att};
}

template <typename T>
EncoderOut<T> encoder_forward(ModelTape<T>& mt, ad::Var tokens) {
  EncoderOut<T> out;
  ad::Var x = tokens;
  size_t next_tap = 0;
  for (int l = 0; l < mt.cfg.layers; ++l) {
    auto [y, att] = mhsa_block(mt, l, x);
    x = y;
    out.attention.push_back(att);
    if (next_tap < mt.cfg.taps.size() && mt.cfg.taps[next_tap] == l + 1) {
      out.taps.push_back(x);
      ++next_tap;
    }
  }
  return out;
}

template <typename T>
ad::Var reassemble(ModelTape<T>& mt, int tap_index, ad::Var tokens) {
  auto& tp = mt.tape;
  const std::string base = "reasm.t" + std::to_string(tap_index);
  const int side = mt.cfg.grid_side();
  const int s = mt.cfg.ratios[tap_index], m = mt.cfg.patch_size;

  ad::Var read = mt.cfg.readout == ReadoutMode::ignore ? ad::drop_row0(tp, tokens)
                                                       : ad::fold_row0(tp, tokens);
  ad::Var grid = ad::tokens_to_grid(tp, read, side);
  ad::Var x = ad::conv2d(tp, grid, mt.p(base + ".proj.weight"), mt.p(base + ".proj.bias"),
                         1, 0);
  if (s < m) {
    const int q = m / s;
    x = ad::conv_transpose2d(tp, x, mt.p(base + ".up.weight"), mt.p(base + ".up.bias"), q,
                             1, q - 1);
  } else if (s > m) {
    const int q = s / m;
    x = ad::conv2d(tp, x, mt.p(base + ".down.weight"), mt.p(base + ".down.bias"), q, 1);
  }
  return x;
}

template <typename T>
ad::Var decoder_fuse(ModelTape<T>& mt, const std::vector<ad::Var>& coarse_to_fine) {
  auto& tp = mt.tape;
  if (coarse_to_fine.empty()) throw InvalidArgumentError("decoder_fuse: no maps");

  for (size_t i = 1; i < coarse_to_fine.size(); ++i) {
    const auto& prev = tp.value(coarse_to_fine[i - 1]);
    const auto& next = tp.value(coarse_to_fine[i]);
    if (next.dim(1) != 2 * prev.dim(1) || next.dim(2) != 2 * prev.dim(2))
      throw InvalidArgumentError("decoder_fuse: consecutive maps must differ by 2x");
  }

  if (mt.cfg.fusion == FusionMode::add) {
    ad::Var cur = coarse_to_fine[0];
    for (size_t i = 1; i < coarse_to_fine.size(); ++i)
      cur = ad::add(tp, ad::upsample2x(tp, cur), coarse_to_fine[i]);
    return cur;
  }

  if (coarse_to_fine.size() == 1) {
    ad::Var cur = ad::conv2d(tp, coarse_to_fine[0], mt.p("fuse.s0.weight"),
                             mt.p("fuse.s0.bias"), 1, 1);
    return ad::relu(tp, cur);
  }

  ad::Var cur = coarse_to_fine[0];
  for (size_t i = 1; i < coarse_to_fine.size(); ++i) {
    const std::string base = "fuse.s" + std::to_string(i);
    ad::Var cat = ad::concat_ch(tp, ad::upsample2x(tp, cur), coarse_to_fine[i]);
    cur = ad::relu(tp, ad::conv2d(tp, cat, mt.p(base + ".weight"), mt.p(base + ".bias"),
                                  1, 1));
  }
  return cur;
}

template <typename T>
std::pair<ad::Var, ad::Var> heads(ModelTape<T>& mt, ad::Var fused) {
  auto& tp = mt.tape;
  ad::Var h1 = ad::relu(tp, ad::conv2d(tp, fused, mt.p("head.hm.conv.weight"),
                                       mt.p("head.hm.conv.bias"), 1, 1));
  ad::Var hm = ad::sigmoid(
      tp, ad::conv2d(tp, h1, mt.p("head.hm.out.weight"), mt.p("head.hm.out.bias"), 1, 0));
  ad::Var h2 = ad::relu(tp, ad::conv2d(tp, fused, mt.p("head.off.conv.weight"),
                                       mt.p("head.off.conv.bias"), 1, 1));
  ad::Var off = ad::conv2d(tp, h2, mt.p("head.off.out.weight"), mt.p("head.off.out.bias"),
                           1, 0);
  return {hm, off};
}

template <typename T>
ForwardPass<T> Model<T>::forward(const Tensor<T>& image, bool record) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
      image.dim(2) != cfg_.image_size)
    throw InvalidArgumentError("forward: image must be (3, H, W) at the configured size");

  ForwardPass<T> fp;
  fp.mt = std::make_unique<ModelTape<T>>(cfg_, params_, record);
  auto& mt = *fp.mt;

  ad::Var x = mt.tape.push(image);
  if (cfg_.conv_stem) x = conv_stem_forward(mt, x);
  ad::Var tokens = patch_embed(mt, x);
  EncoderOut<T> enc = encoder_forward(mt, tokens);

  std::vector<ad::Var> maps_fine_to_coarse;
  for (size_t i = 0; i < enc.taps.size(); ++i)
    maps_fine_to_coarse.push_back(reassemble(mt, static_cast<int>(i), enc.taps[i]));
  std::vector<ad::Var> coarse_to_fine(maps_fine_to_coarse.rbegin(),
                                      maps_fine_to_coarse.rend());

  ad::Var fused = decoder_fuse(mt, coarse_to_fine);
  auto [hm, off] = heads(mt, fused);
  fp.heatmap_var = hm;
  fp.offsets_var = off;
  for (ad::Var att : enc.attention) fp.attention.push_back(mt.tape.value(att));
  return fp;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::backward(ForwardPass<T>& fp, const Tensor<T>& d_heatmap,
                                          const Tensor<T>& d_offsets) const {
  auto& tape = fp.mt->tape;
  tape.seed(fp.heatmap_var, d_heatmap);
  tape.seed(fp.offsets_var, d_offsets);
  tape.backward();

  std::vector<Tensor<T>> grads;
  grads.reserve(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    ad::Var pv = fp.mt->pvars[i];
    if (tape.has_grad(pv))
      grads.push_back(tape.grad(pv));
    else
      grads.push_back(Tensor<T>(params_.tensors[i].shape));
  }
  return grads;
}

}  // namespace implantformer
