#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "isoscan/nnops.hpp"
#include "isoscan/vemm.hpp"

namespace isoscan {

struct ModelConfig {
  int channels = 16;   // C, desk-scale default
  int n_rvmg = 4;
  int n_rvmb = 4;
  int scale = 2;       // s, h-axis upscaling factor
  int ssm_state = 8;   // N
  int embed_dim = 64;  // L_D
  int dwam_hidden = 16;

  void validate() const {
    if (channels < 2 || channels % 2 != 0)
      throw std::invalid_argument("ModelConfig: channels must be even and >= 2");
    if (scale < 2) throw std::invalid_argument("ModelConfig: scale must be >= 2");
    if (n_rvmg < 1 || n_rvmb < 1) throw std::invalid_argument("ModelConfig: counts must be >= 1");
    if (ssm_state < 1 || embed_dim < 1 || dwam_hidden < 1)
      throw std::invalid_argument("ModelConfig: sizes must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// VDIM: degradation-conditioned channel-wise affine modulation,
// F' = scale(d) * Norm(F) + shift(d), where Norm standardizes each channel
// over its spatial extent. scale starts as the constant 1 map and shift as
// the constant 0 map, so modulation is neutral at initialization.
// ---------------------------------------------------------------------------

struct VdimCache {
  InstanceNormCache norm;
  NdArray scales;  // (C) scale(d)
};

struct Vdim {
  Linear scale_map, shift_map;  // embed_dim -> C

  Vdim() = default;
  Vdim(ParamStore& store, const std::string& prefix, int embed_dim, int C, Rng& rng) {
    scale_map = Linear(store, prefix + ".scale", embed_dim, C, rng);
    shift_map = Linear(store, prefix + ".shift", embed_dim, C, rng);
    scale_map.w->value.fill(0.0);
    scale_map.b->value.fill(1.0);
    shift_map.w->value.fill(0.0);
    shift_map.b->value.fill(0.0);
  }

  NdArray forward(const NdArray& x, const NdArray& d, VdimCache* cache = nullptr) const {
    if (d.rank() != 1 || d.dim(0) != scale_map.in)
      throw std::invalid_argument("Vdim: embedding length mismatch");
    VdimCache local;
    VdimCache& c = cache ? *cache : local;
    NdArray xn = instance_norm(x, &c.norm);
    c.scales = scale_map.forward(d);
    const NdArray shifts = shift_map.forward(d);
    const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * W;
    NdArray y(x.shape());
    for (int f = 0; f < F; ++f)
      for (int cc = 0; cc < C; ++cc) {
        const double s = c.scales[cc], sh = shifts[cc];
        const double* xp = xn.data() + xn.offset4(f, cc, 0, 0);
        double* yp = y.data() + y.offset4(f, cc, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) yp[i] = s * xp[i] + sh;
      }
    return y;
  }

  // Returns (dx, dd).
  std::pair<NdArray, NdArray> backward(const VdimCache& c, const NdArray& d, const NdArray& dy) {
    const int F = dy.dim(0), C = dy.dim(1), h = dy.dim(2), W = dy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * W;
    NdArray dln(dy.shape());
    NdArray ds({C}), dsh({C});
    for (int f = 0; f < F; ++f)
      for (int cc = 0; cc < C; ++cc) {
        const double s = c.scales[cc];
        const double* gp = dy.data() + dy.offset4(f, cc, 0, 0);
        const double* xnp = c.norm.xn.data() + c.norm.xn.offset4(f, cc, 0, 0);
        double* dp = dln.data() + dln.offset4(f, cc, 0, 0);
        double acc_s = 0.0, acc_b = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          dp[i] = s * gp[i];
          acc_s += gp[i] * xnp[i];
          acc_b += gp[i];
        }
        ds[cc] += acc_s;
        dsh[cc] += acc_b;
      }
    NdArray dd = scale_map.backward(d, ds);
    dd += shift_map.backward(d, dsh);
    return {instance_norm_backward(c.norm, dln), std::move(dd)};
  }
};

// ---------------------------------------------------------------------------
// ConvFFN: pointwise C -> 2C, depthwise 3x3x3, GELU, pointwise 2C -> C.
// ---------------------------------------------------------------------------

struct ConvFfnCache {
  NdArray x, a1, a2, a3;
};

struct ConvFfn {
  PointwiseConv pw1;
  DepthwiseConv3d dw;
  PointwiseConv pw2;

  ConvFfn() = default;
  ConvFfn(ParamStore& store, const std::string& prefix, int C, Rng& rng) {
    pw1 = PointwiseConv(store, prefix + ".pw1", C, 2 * C, rng);
    dw = DepthwiseConv3d(store, prefix + ".dw", 2 * C, rng);
    pw2 = PointwiseConv(store, prefix + ".pw2", 2 * C, C, rng);
  }

  NdArray forward(const NdArray& x, ConvFfnCache* cache = nullptr) const {
    ConvFfnCache local;
    ConvFfnCache& c = cache ? *cache : local;
    c.x = x;
    c.a1 = pw1.forward(x);
    c.a2 = dw.forward(c.a1);
    c.a3 = gelu(c.a2);
    return pw2.forward(c.a3);
  }

  NdArray backward(ConvFfnCache& c, const NdArray& dy) {
    NdArray da3 = pw2.backward(c.a3, dy);
    NdArray da2 = gelu_backward(c.a2, da3);
    NdArray da1 = dw.backward(c.a1, da2);
    return pw1.backward(c.x, da1);
  }
};

// ---------------------------------------------------------------------------
// RVMB: x1 = x + VEMM(VDIM(x, d)); out = x1 + ConvFFN(VDIM(x1, d)).
// Each VDIM has its own parameters.
// ---------------------------------------------------------------------------

struct RvmbCache {
  VdimCache vd1, vd2;
  VemmCache vemm;
  ConvFfnCache ffn;
};

struct Rvmb {
  Vdim vdim1, vdim2;
  VemmParams vemm;
  ConvFfn ffn;

  Rvmb() = default;
  Rvmb(ParamStore& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    vdim1 = Vdim(store, prefix + ".vdim1", cfg.embed_dim, cfg.channels, rng);
    vemm = VemmParams(store, prefix + ".vemm", cfg.channels, cfg.ssm_state, cfg.dwam_hidden, rng);
    vdim2 = Vdim(store, prefix + ".vdim2", cfg.embed_dim, cfg.channels, rng);
    ffn = ConvFfn(store, prefix + ".ffn", cfg.channels, rng);
  }

  NdArray forward(const NdArray& x, const NdArray& d, RvmbCache* cache = nullptr) {
    RvmbCache local;
    RvmbCache& c = cache ? *cache : local;
    NdArray v1 = vdim1.forward(x, d, &c.vd1);
    NdArray x1 = x + vemm_forward(v1, vemm, &c.vemm);
    NdArray v2 = vdim2.forward(x1, d, &c.vd2);
    return x1 + ffn.forward(v2, &c.ffn);
  }

  // Returns dx; dd accumulates into the given array.
  NdArray backward(RvmbCache& c, const NdArray& d, NdArray& dd, const NdArray& dy) {
    NdArray dv2 = ffn.backward(c.ffn, dy);
    auto [dx1_mod, dd2] = vdim2.backward(c.vd2, d, dv2);
    dd += dd2;
    NdArray dx1 = dy + dx1_mod;

    NdArray dv1 = vemm_backward(vemm, c.vemm, dx1);
    auto [dx_mod, dd1] = vdim1.backward(c.vd1, d, dv1);
    dd += dd1;
    return dx1 + dx_mod;
  }
};

// ---------------------------------------------------------------------------
// RVMG: n_rvmb blocks, a 3x3x3 convolution, and a group-level residual.
// ---------------------------------------------------------------------------

struct RvmgCache {
  std::vector<RvmbCache> blocks;
  NdArray conv_in;
};

struct Rvmg {
  std::vector<Rvmb> blocks;
  Conv3d conv;

  Rvmg() = default;
  Rvmg(ParamStore& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    for (int i = 0; i < cfg.n_rvmb; ++i)
      blocks.emplace_back(store, prefix + ".rvmb" + std::to_string(i), cfg, rng);
    conv = Conv3d(store, prefix + ".conv", cfg.channels, cfg.channels, rng);
  }

  NdArray forward(const NdArray& x, const NdArray& d, RvmgCache* cache = nullptr) {
    RvmgCache local;
    RvmgCache& c = cache ? *cache : local;
    c.blocks.resize(blocks.size());
    NdArray t = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) t = blocks[i].forward(t, d, &c.blocks[i]);
    c.conv_in = t;
    return x + conv.forward(t);
  }

  NdArray backward(RvmgCache& c, const NdArray& d, NdArray& dd, const NdArray& dy) {
    NdArray dt = conv.backward(c.conv_in, dy);
    for (std::size_t i = blocks.size(); i-- > 0;)
      dt = blocks[i].backward(c.blocks[i], d, dd, dt);
    return dy + dt;
  }
};

// ---------------------------------------------------------------------------
// Full model: shallow extraction, stacked RVMGs, pixel-shuffle head.
// ---------------------------------------------------------------------------

struct ModelCache {
  NdArray x4, fs, sum, shuf;
  std::vector<RvmgCache> groups;
};

struct Model {
  ModelConfig cfg;
  ParamStore store;
  Conv3d shallow;
  std::vector<Rvmg> groups;
  Conv3d head_expand;  // C -> s*C
  Conv3d head_final;   // C -> 1

  explicit Model(const ModelConfig& config, std::uint64_t seed = 1) : cfg(config) {
    cfg.validate();
    Rng rng(derive_seed(seed, "model.init"));
    shallow = Conv3d(store, "shallow", 1, cfg.channels, rng);
    for (int g = 0; g < cfg.n_rvmg; ++g)
      groups.emplace_back(store, "rvmg" + std::to_string(g), cfg, rng);
    head_expand = Conv3d(store, "head.expand", cfg.channels, cfg.scale * cfg.channels, rng);
    head_final = Conv3d(store, "head.final", cfg.channels, 1, rng);
  }

  std::size_t param_count() const { return store.total_trainable(); }

  // x: (F, h, W) in [0,1]; d: (embed_dim). Returns raw (F, s*h, W) values
  // (unclamped; clamping happens at the volume boundary).
  NdArray forward(const NdArray& x, const NdArray& d, ModelCache* cache = nullptr) {
    if (x.rank() != 3) throw std::invalid_argument("Model::forward: rank-3 input required");
    ModelCache local;
    ModelCache& c = cache ? *cache : local;
    const int F = x.dim(0), h = x.dim(1), W = x.dim(2);
    c.x4 = NdArray({F, 1, h, W}, x.values());
    c.fs = shallow.forward(c.x4);
    c.groups.resize(groups.size());
    NdArray t = c.fs;
    for (std::size_t g = 0; g < groups.size(); ++g) t = groups[g].forward(t, d, &c.groups[g]);
    c.sum = c.fs + t;
    NdArray e = head_expand.forward(c.sum);
    c.shuf = pixel_shuffle_h(e, cfg.scale);
    NdArray out4 = head_final.forward(c.shuf);
    return NdArray({F, cfg.scale * h, W}, std::move(out4.values()));
  }

  // Returns (dx, dd).
  std::pair<NdArray, NdArray> backward(ModelCache& c, const NdArray& d, const NdArray& dy) {
    const int F = c.x4.dim(0), h = c.x4.dim(2), W = c.x4.dim(3);
    NdArray dy4({F, 1, cfg.scale * h, W}, dy.values());
    NdArray dshuf = head_final.backward(c.shuf, dy4);
    NdArray de = pixel_shuffle_h_backward(dshuf, cfg.scale);
    NdArray dsum = head_expand.backward(c.sum, de);

    NdArray dd({d.dim(0)});
    NdArray dt = dsum;
    for (std::size_t g = groups.size(); g-- > 0;) dt = groups[g].backward(c.groups[g], d, dd, dt);
    NdArray dfs = dsum + dt;
    NdArray dx4 = shallow.backward(c.x4, dfs);
    return {NdArray({F, h, W}, std::move(dx4.values())), std::move(dd)};
  }
};

}  // namespace isoscan
