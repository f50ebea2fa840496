#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "isoscan/diffcore.hpp"
#include "isoscan/nnops.hpp"
#include "isoscan/scanpath.hpp"
#include "isoscan/ssm.hpp"

namespace isoscan {

// ---------------------------------------------------------------------------
// DWAM: per-(voxel, channel) adaptive fusion of the four per-direction scan
// outputs. The 4-vector of direction values feeds a small MLP; its softmaxed
// logits weight the directions, collapsing them back to one chunk.
// ---------------------------------------------------------------------------

struct DwamParams {
  int hidden = 16;
  Param* w1 = nullptr;  // (hidden, 4)
  Param* b1 = nullptr;  // (hidden)
  Param* w2 = nullptr;  // (4, hidden)
  Param* b2 = nullptr;  // (4)

  DwamParams() = default;
  DwamParams(ParamStore& store, const std::string& prefix, int hidden_, Rng& rng)
      : hidden(hidden_) {
    w1 = &store.add(prefix + ".w1", uniform_init({hidden_, 4}, 0.5, rng));
    b1 = &store.add(prefix + ".b1", uniform_init({hidden_}, 0.5, rng));
    w2 = &store.add(prefix + ".w2",
                    uniform_init({4, hidden_}, 0.5 / std::sqrt(static_cast<double>(hidden_)), rng));
    b2 = &store.add(prefix + ".b2", uniform_init({4}, 0.1, rng));
  }
};

namespace detail {

struct DwamVoxel {
  std::array<double, 4> v;
  std::array<double, 4> wsm;        // softmax weights
  std::vector<double> u;            // pre-ReLU hidden
  std::vector<double> r;            // post-ReLU hidden
  std::array<double, 4> logits;
};

inline void dwam_voxel_forward(const DwamParams& p, DwamVoxel& s) {
  const int H = p.hidden;
  s.u.resize(H);
  s.r.resize(H);
  for (int i = 0; i < H; ++i) {
    double acc = p.b1->value[i];
    const double* row = p.w1->value.data() + static_cast<std::size_t>(i) * 4;
    for (int d = 0; d < 4; ++d) acc += row[d] * s.v[d];
    s.u[i] = acc;
    s.r[i] = acc > 0.0 ? acc : 0.0;
  }
  double max_logit = -1e300;
  for (int d = 0; d < 4; ++d) {
    double acc = p.b2->value[d];
    const double* row = p.w2->value.data() + static_cast<std::size_t>(d) * H;
    for (int i = 0; i < H; ++i) acc += row[i] * s.r[i];
    s.logits[d] = acc;
    max_logit = std::max(max_logit, acc);
  }
  double z = 0.0;
  for (int d = 0; d < 4; ++d) {
    s.wsm[d] = std::exp(s.logits[d] - max_logit);
    z += s.wsm[d];
  }
  for (int d = 0; d < 4; ++d) s.wsm[d] /= z;
}

}  // namespace detail

// Fuses four identically-shaped direction tensors into one.
inline NdArray dwam_forward(const std::array<NdArray, 4>& dirs, const DwamParams& p) {
  for (int d = 1; d < 4; ++d)
    if (!dirs[d].same_shape(dirs[0]))
      throw std::invalid_argument("dwam_forward: direction tensors differ in shape");
  NdArray out(dirs[0].shape());
  detail::DwamVoxel s;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (int d = 0; d < 4; ++d) s.v[d] = dirs[d][i];
    detail::dwam_voxel_forward(p, s);
    double acc = 0.0;
    for (int d = 0; d < 4; ++d) acc += s.wsm[d] * s.v[d];
    out[i] = acc;
  }
  return out;
}

// Recomputes the per-voxel MLP and returns the cotangents of the four
// direction tensors; parameter gradients are accumulated.
inline std::array<NdArray, 4> dwam_backward(const std::array<NdArray, 4>& dirs, DwamParams& p,
                                            const NdArray& dout) {
  std::array<NdArray, 4> ddirs{NdArray(dirs[0].shape()), NdArray(dirs[0].shape()),
                               NdArray(dirs[0].shape()), NdArray(dirs[0].shape())};
  const int H = p.hidden;
  detail::DwamVoxel s;
  std::vector<double> dr(H), du(H);
  for (std::size_t i = 0; i < dout.size(); ++i) {
    for (int d = 0; d < 4; ++d) s.v[d] = dirs[d][i];
    detail::dwam_voxel_forward(p, s);
    const double g = dout[i];
    // out = sum_d w_d v_d
    std::array<double, 4> dw;
    double dot = 0.0;
    for (int d = 0; d < 4; ++d) {
      ddirs[d][i] = g * s.wsm[d];
      dw[d] = g * s.v[d];
      dot += s.wsm[d] * dw[d];
    }
    // softmax jacobian
    std::array<double, 4> dlogits;
    for (int d = 0; d < 4; ++d) dlogits[d] = s.wsm[d] * (dw[d] - dot);
    // second layer
    std::fill(dr.begin(), dr.end(), 0.0);
    for (int d = 0; d < 4; ++d) {
      p.b2->grad[d] += dlogits[d];
      double* wrow = p.w2->grad.data() + static_cast<std::size_t>(d) * H;
      const double* vrow = p.w2->value.data() + static_cast<std::size_t>(d) * H;
      for (int j = 0; j < H; ++j) {
        wrow[j] += dlogits[d] * s.r[j];
        dr[j] += vrow[j] * dlogits[d];
      }
    }
    // ReLU and first layer
    for (int j = 0; j < H; ++j) {
      du[j] = s.u[j] > 0.0 ? dr[j] : 0.0;
      p.b1->grad[j] += du[j];
      double* wrow = p.w1->grad.data() + static_cast<std::size_t>(j) * 4;
      const double* vrow = p.w1->value.data() + static_cast<std::size_t>(j) * 4;
      for (int d = 0; d < 4; ++d) {
        wrow[d] += du[j] * s.v[d];
        ddirs[d][i] += vrow[d] * du[j];
      }
    }
  }
  return ddirs;
}

// ---------------------------------------------------------------------------
// VEMM: pre-norm -> input projection -> chunk -> 8 flattened scans ->
// selective scan -> restore -> DWAM fusion per chunk -> concat -> output
// projection.
// ---------------------------------------------------------------------------

struct VemmParams {
  int channels = 0;
  PointwiseConv in_proj;
  PointwiseConv out_proj;
  std::array<SsmParams, 8> ssm;  // [chunk*4 + direction]
  DwamParams dwam1, dwam2;

  VemmParams() = default;
  VemmParams(ParamStore& store, const std::string& prefix, int C, int ssm_state, int dwam_hidden,
             Rng& rng)
      : channels(C) {
    if (C % 2 != 0) throw std::invalid_argument("VemmParams: channel count must be even");
    in_proj = PointwiseConv(store, prefix + ".in_proj", C, C, rng);
    out_proj = PointwiseConv(store, prefix + ".out_proj", C, C, rng);
    for (int i = 0; i < 8; ++i)
      ssm[i] = SsmParams(store, prefix + ".ssm" + std::to_string(i), C / 2, ssm_state, rng);
    dwam1 = DwamParams(store, prefix + ".dwam1", dwam_hidden, rng);
    dwam2 = DwamParams(store, prefix + ".dwam2", dwam_hidden, rng);
  }
};

struct VemmCache {
  LayerNormCache ln;
  NdArray xn;      // post-norm
  NdArray xp;      // post input projection
  NdArray chunks[2];
  std::array<NdArray, 4> restored[2];
  std::array<SelectiveScanCache, 8> scans;
  NdArray concat;  // pre output projection
};

inline NdArray vemm_forward(const NdArray& x, VemmParams& p, VemmCache* cache = nullptr) {
  if (x.rank() != 4 || x.dim(1) != p.channels)
    throw std::invalid_argument("vemm_forward: expected (F, C, h, W) with C matching");
  const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
  const PathSet& paths = cached_paths(F, h, W);

  VemmCache local;
  VemmCache& c = cache ? *cache : local;

  c.xn = channel_layernorm(x, &c.ln);
  c.xp = p.in_proj.forward(c.xn);
  auto [c1, c2] = chunk_channels(c.xp);
  c.chunks[0] = std::move(c1);
  c.chunks[1] = std::move(c2);

  for (int k = 0; k < 2; ++k)
    for (int d = 0; d < 4; ++d) {
      NdArray seq = flatten(c.chunks[k], paths.paths[d]);
      NdArray out = selective_scan(seq, p.ssm[k * 4 + d], &c.scans[k * 4 + d]);
      c.restored[k][d] = restore(out, paths.paths[d]);
    }

  NdArray fused1 = dwam_forward(c.restored[0], p.dwam1);
  NdArray fused2 = dwam_forward(c.restored[1], p.dwam2);
  c.concat = unchunk(fused1, fused2);
  return p.out_proj.forward(c.concat);
}

inline NdArray vemm_backward(VemmParams& p, VemmCache& c, const NdArray& dy) {
  const int F = dy.dim(0), h = dy.dim(2), W = dy.dim(3);
  const PathSet& paths = cached_paths(F, h, W);

  NdArray dconcat = p.out_proj.backward(c.concat, dy);
  auto [dfused1, dfused2] = chunk_channels(dconcat);
  std::array<NdArray, 2> dfused{std::move(dfused1), std::move(dfused2)};

  NdArray dxp(c.xp.shape());
  for (int k = 0; k < 2; ++k) {
    DwamParams& dw = k == 0 ? p.dwam1 : p.dwam2;
    std::array<NdArray, 4> ddirs = dwam_backward(c.restored[k], dw, dfused[k]);
    NdArray dchunk(c.chunks[k].shape());
    for (int d = 0; d < 4; ++d) {
      // restore VJP is flatten; flatten VJP is restore (bijection).
      NdArray dseq_out = flatten(ddirs[d], paths.paths[d]);
      NdArray seq = flatten(c.chunks[k], paths.paths[d]);
      NdArray dseq_in =
          selective_scan_backward(seq, p.ssm[k * 4 + d], c.scans[k * 4 + d], dseq_out);
      dchunk += restore(dseq_in, paths.paths[d]);
    }
    // write the chunk's cotangent into the right channel half
    const int C2 = dchunk.dim(1);
    for (int f = 0; f < F; ++f)
      for (int cc = 0; cc < C2; ++cc)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < W; ++xx)
            dxp.at4(f, k * C2 + cc, yy, xx) = dchunk.at4(f, cc, yy, xx);
  }

  NdArray dxn = p.in_proj.backward(c.xn, dxp);
  return channel_layernorm_backward(c.ln, dxn);
}

}  // namespace isoscan
