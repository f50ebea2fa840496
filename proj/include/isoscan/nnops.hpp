#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "isoscan/common.hpp"
#include "isoscan/diffcore.hpp"
#include "isoscan/nd_array.hpp"

// Neural-net primitives on (F, C, h, W) feature tensors. Every op carries an
// exact manual backward; all of them are covered by gradcheck in the tests.

namespace isoscan {

inline NdArray uniform_init(std::vector<int> shape, double limit, Rng& rng) {
  NdArray a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-limit, limit);
  return a;
}

// Reflect index for pad-1 access: -1 -> 1, n -> n-2 (clamped for n == 1).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

// ---------------------------------------------------------------------------
// Fully connected map on plain vectors.
// ---------------------------------------------------------------------------

struct Linear {
  int in = 0, out = 0;
  Param* w = nullptr;  // (out, in)
  Param* b = nullptr;  // (out)

  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, int in_, int out_, Rng& rng)
      : in(in_), out(out_) {
    const double k = 1.0 / std::sqrt(static_cast<double>(in_));
    w = &store.add(prefix + ".w", uniform_init({out_, in_}, k, rng));
    b = &store.add(prefix + ".b", uniform_init({out_}, k, rng));
  }

  NdArray forward(const NdArray& x) const {
    if (x.rank() != 1 || x.dim(0) != in) throw std::invalid_argument("Linear: input size mismatch");
    NdArray y({out});
    for (int o = 0; o < out; ++o) {
      double acc = b->value[o];
      const double* row = w->value.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
    return y;
  }

  NdArray backward(const NdArray& x, const NdArray& dy) {
    NdArray dx({in});
    for (int o = 0; o < out; ++o) {
      const double g = dy[o];
      b->grad[o] += g;
      double* wrow = w->grad.data() + static_cast<std::size_t>(o) * in;
      const double* vrow = w->value.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) {
        wrow[i] += g * x[i];
        dx[i] += vrow[i] * g;
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 3x3x3 convolution over (f, y, x) with reflect padding, stride 1.
// ---------------------------------------------------------------------------

namespace detail {

// (F, C, h, W) -> (F+2, C, h+2, W+2) with reflect padding on spatial axes.
inline NdArray pad_reflect(const NdArray& x) {
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  NdArray p({F + 2, C, h + 2, W + 2});
  for (int fp = 0; fp < F + 2; ++fp) {
    const int f = reflect_index(fp - 1, F);
    for (int c = 0; c < C; ++c)
      for (int yp = 0; yp < h + 2; ++yp) {
        const int y = reflect_index(yp - 1, h);
        double* dst = p.data() + p.offset4(fp, c, yp, 0);
        const double* src = x.data() + x.offset4(f, c, y, 0);
        dst[0] = src[reflect_index(-1, W)];
        for (int xx = 0; xx < W; ++xx) dst[xx + 1] = src[xx];
        dst[W + 1] = src[reflect_index(W, W)];
      }
  }
  return p;
}

// Scatter a padded-cotangent buffer back through the reflect padding.
inline NdArray unpad_reflect(const NdArray& dp, int F, int h, int W) {
  const int C = dp.dim(1);
  NdArray dx({F, C, h, W});
  for (int fp = 0; fp < F + 2; ++fp) {
    const int f = reflect_index(fp - 1, F);
    for (int c = 0; c < C; ++c)
      for (int yp = 0; yp < h + 2; ++yp) {
        const int y = reflect_index(yp - 1, h);
        const double* src = dp.data() + dp.offset4(fp, c, yp, 0);
        double* dst = dx.data() + dx.offset4(f, c, y, 0);
        for (int xp = 0; xp < W + 2; ++xp) dst[reflect_index(xp - 1, W)] += src[xp];
      }
  }
  return dx;
}

}  // namespace detail

struct Conv3d {
  int in_ch = 0, out_ch = 0;
  Param* w = nullptr;  // (out, in, 3, 3, 3)
  Param* b = nullptr;  // (out)

  Conv3d() = default;
  Conv3d(ParamStore& store, const std::string& prefix, int in_, int out_, Rng& rng,
         double scale = 1.0)
      : in_ch(in_), out_ch(out_) {
    const double k = scale / std::sqrt(static_cast<double>(in_) * 27.0);
    w = &store.add(prefix + ".w", uniform_init({out_, in_, 3, 3, 3}, k, rng));
    b = &store.add(prefix + ".b", uniform_init({out_}, k, rng));
  }

  NdArray forward(const NdArray& x) const {
    if (x.rank() != 4 || x.dim(1) != in_ch)
      throw std::invalid_argument("Conv3d: input channel mismatch");
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const NdArray p = detail::pad_reflect(x);
    NdArray y({F, out_ch, h, W});
    for (int f = 0; f < F; ++f)
      for (int oc = 0; oc < out_ch; ++oc) {
        {
          const double bias = b->value[oc];
          double* yy = y.data() + y.offset4(f, oc, 0, 0);
          for (int i = 0; i < h * W; ++i) yy[i] = bias;
        }
        for (int ic = 0; ic < in_ch; ++ic)
          for (int kf = 0; kf < 3; ++kf)
            for (int ky = 0; ky < 3; ++ky) {
              const double* wk =
                  w->value.data() + (((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + kf) * 3 + ky) * 3;
              const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
              for (int yy = 0; yy < h; ++yy) {
                const double* pr = p.data() + p.offset4(f + kf, ic, yy + ky, 0);
                double* yrow = y.data() + y.offset4(f, oc, yy, 0);
                for (int xx = 0; xx < W; ++xx)
                  yrow[xx] += w0 * pr[xx] + w1 * pr[xx + 1] + w2 * pr[xx + 2];
              }
            }
      }
    return y;
  }

  NdArray backward(const NdArray& x, const NdArray& dy) {
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const NdArray p = detail::pad_reflect(x);
    NdArray dp({F + 2, in_ch, h + 2, W + 2});
    for (int f = 0; f < F; ++f)
      for (int oc = 0; oc < out_ch; ++oc) {
        {
          const double* grow = dy.data() + dy.offset4(f, oc, 0, 0);
          double acc = 0.0;
          for (int i = 0; i < h * W; ++i) acc += grow[i];
          b->grad[oc] += acc;
        }
        for (int ic = 0; ic < in_ch; ++ic)
          for (int kf = 0; kf < 3; ++kf)
            for (int ky = 0; ky < 3; ++ky) {
              const std::size_t wo =
                  (((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + kf) * 3 + ky) * 3;
              const double w0 = w->value[wo], w1 = w->value[wo + 1], w2 = w->value[wo + 2];
              double g0 = 0.0, g1 = 0.0, g2 = 0.0;
              for (int yy = 0; yy < h; ++yy) {
                const double* pr = p.data() + p.offset4(f + kf, ic, yy + ky, 0);
                double* dpr = dp.data() + dp.offset4(f + kf, ic, yy + ky, 0);
                const double* grow = dy.data() + dy.offset4(f, oc, yy, 0);
                for (int xx = 0; xx < W; ++xx) {
                  const double g = grow[xx];
                  g0 += g * pr[xx];
                  g1 += g * pr[xx + 1];
                  g2 += g * pr[xx + 2];
                  dpr[xx] += w0 * g;
                  dpr[xx + 1] += w1 * g;
                  dpr[xx + 2] += w2 * g;
                }
              }
              w->grad[wo] += g0;
              w->grad[wo + 1] += g1;
              w->grad[wo + 2] += g2;
            }
      }
    return detail::unpad_reflect(dp, F, h, W);
  }
};

// Depthwise 3x3x3 convolution: each channel has its own kernel.
struct DepthwiseConv3d {
  int ch = 0;
  Param* w = nullptr;  // (C, 3, 3, 3)
  Param* b = nullptr;  // (C)

  DepthwiseConv3d() = default;
  DepthwiseConv3d(ParamStore& store, const std::string& prefix, int ch_, Rng& rng) : ch(ch_) {
    const double k = 1.0 / std::sqrt(27.0);
    w = &store.add(prefix + ".w", uniform_init({ch_, 3, 3, 3}, k, rng));
    b = &store.add(prefix + ".b", uniform_init({ch_}, k, rng));
  }

  NdArray forward(const NdArray& x) const {
    if (x.rank() != 4 || x.dim(1) != ch)
      throw std::invalid_argument("DepthwiseConv3d: channel mismatch");
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const NdArray p = detail::pad_reflect(x);
    NdArray y({F, ch, h, W});
    for (int f = 0; f < F; ++f)
      for (int c = 0; c < ch; ++c) {
        const double bias = b->value[c];
        double* base = y.data() + y.offset4(f, c, 0, 0);
        for (int i = 0; i < h * W; ++i) base[i] = bias;
        for (int kf = 0; kf < 3; ++kf)
          for (int ky = 0; ky < 3; ++ky) {
            const double* wk = w->value.data() + ((static_cast<std::size_t>(c) * 3 + kf) * 3 + ky) * 3;
            const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
            for (int yy = 0; yy < h; ++yy) {
              const double* pr = p.data() + p.offset4(f + kf, c, yy + ky, 0);
              double* yrow = y.data() + y.offset4(f, c, yy, 0);
              for (int xx = 0; xx < W; ++xx)
                yrow[xx] += w0 * pr[xx] + w1 * pr[xx + 1] + w2 * pr[xx + 2];
            }
          }
      }
    return y;
  }

  NdArray backward(const NdArray& x, const NdArray& dy) {
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const NdArray p = detail::pad_reflect(x);
    NdArray dp({F + 2, ch, h + 2, W + 2});
    for (int f = 0; f < F; ++f)
      for (int c = 0; c < ch; ++c) {
        {
          const double* grow = dy.data() + dy.offset4(f, c, 0, 0);
          double acc = 0.0;
          for (int i = 0; i < h * W; ++i) acc += grow[i];
          b->grad[c] += acc;
        }
        for (int kf = 0; kf < 3; ++kf)
          for (int ky = 0; ky < 3; ++ky) {
            const std::size_t wo = ((static_cast<std::size_t>(c) * 3 + kf) * 3 + ky) * 3;
            const double w0 = w->value[wo], w1 = w->value[wo + 1], w2 = w->value[wo + 2];
            double g0 = 0.0, g1 = 0.0, g2 = 0.0;
            for (int yy = 0; yy < h; ++yy) {
              const double* pr = p.data() + p.offset4(f + kf, c, yy + ky, 0);
              double* dpr = dp.data() + dp.offset4(f + kf, c, yy + ky, 0);
              const double* grow = dy.data() + dy.offset4(f, c, yy, 0);
              for (int xx = 0; xx < W; ++xx) {
                const double g = grow[xx];
                g0 += g * pr[xx];
                g1 += g * pr[xx + 1];
                g2 += g * pr[xx + 2];
                dpr[xx] += w0 * g;
                dpr[xx + 1] += w1 * g;
                dpr[xx + 2] += w2 * g;
              }
            }
            w->grad[wo] += g0;
            w->grad[wo + 1] += g1;
            w->grad[wo + 2] += g2;
          }
      }
    return detail::unpad_reflect(dp, F, h, W);
  }
};

// 1x1x1 convolution: per-voxel channel mix.
struct PointwiseConv {
  int in_ch = 0, out_ch = 0;
  Param* w = nullptr;  // (out, in)
  Param* b = nullptr;  // (out)

  PointwiseConv() = default;
  PointwiseConv(ParamStore& store, const std::string& prefix, int in_, int out_, Rng& rng,
                double scale = 1.0)
      : in_ch(in_), out_ch(out_) {
    const double k = scale / std::sqrt(static_cast<double>(in_));
    w = &store.add(prefix + ".w", uniform_init({out_, in_}, k, rng));
    b = &store.add(prefix + ".b", uniform_init({out_}, k, rng));
  }

  NdArray forward(const NdArray& x) const {
    if (x.rank() != 4 || x.dim(1) != in_ch)
      throw std::invalid_argument("PointwiseConv: input channel mismatch");
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const int plane = h * W;
    NdArray y({F, out_ch, h, W});
    for (int f = 0; f < F; ++f)
      for (int oc = 0; oc < out_ch; ++oc) {
        double* yp = y.data() + y.offset4(f, oc, 0, 0);
        const double bias = b->value[oc];
        for (int i = 0; i < plane; ++i) yp[i] = bias;
        for (int ic = 0; ic < in_ch; ++ic) {
          const double wv = w->value.at2(oc, ic);
          const double* xp = x.data() + x.offset4(f, ic, 0, 0);
          for (int i = 0; i < plane; ++i) yp[i] += wv * xp[i];
        }
      }
    return y;
  }

  NdArray backward(const NdArray& x, const NdArray& dy) {
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const int plane = h * W;
    NdArray dx({F, in_ch, h, W});
    for (int f = 0; f < F; ++f)
      for (int oc = 0; oc < out_ch; ++oc) {
        const double* gp = dy.data() + dy.offset4(f, oc, 0, 0);
        double bacc = 0.0;
        for (int i = 0; i < plane; ++i) bacc += gp[i];
        b->grad[oc] += bacc;
        for (int ic = 0; ic < in_ch; ++ic) {
          const double wv = w->value.at2(oc, ic);
          const double* xp = x.data() + x.offset4(f, ic, 0, 0);
          double* dxp = dx.data() + dx.offset4(f, ic, 0, 0);
          double wacc = 0.0;
          for (int i = 0; i < plane; ++i) {
            wacc += gp[i] * xp[i];
            dxp[i] += wv * gp[i];
          }
          w->grad.at2(oc, ic) += wacc;
        }
      }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-voxel normalization over the channel axis, no affine part (the affine
// comes from the degradation modulation where used).
struct LayerNormCache {
  NdArray xn;   // normalized values
  NdArray inv;  // (F, h, W) inverse std per voxel
};

inline NdArray channel_layernorm(const NdArray& x, LayerNormCache* cache = nullptr,
                                 double eps = 1e-5) {
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray y(x.shape());
  NdArray inv({F, h, W});
  for (int f = 0; f < F; ++f)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < W; ++xx) {
        const std::size_t base = (static_cast<std::size_t>(f) * C * h + yy) * W + xx;
        double m = 0.0;
        for (int c = 0; c < C; ++c) m += x[base + c * plane];
        m /= C;
        double v = 0.0;
        for (int c = 0; c < C; ++c) {
          const double d = x[base + c * plane] - m;
          v += d * d;
        }
        v /= C;
        const double iv = 1.0 / std::sqrt(v + eps);
        inv.at3(f, yy, xx) = iv;
        for (int c = 0; c < C; ++c) y[base + c * plane] = (x[base + c * plane] - m) * iv;
      }
  if (cache) {
    cache->xn = y;
    cache->inv = std::move(inv);
  }
  return y;
}

inline NdArray channel_layernorm_backward(const LayerNormCache& cache, const NdArray& dy) {
  const int F = dy.dim(0), C = dy.dim(1), h = dy.dim(2), W = dy.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray dx(dy.shape());
  for (int f = 0; f < F; ++f)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < W; ++xx) {
        const std::size_t base = (static_cast<std::size_t>(f) * C * h + yy) * W + xx;
        double sum_dy = 0.0, sum_dyxn = 0.0;
        for (int c = 0; c < C; ++c) {
          const double g = dy[base + c * plane];
          sum_dy += g;
          sum_dyxn += g * cache.xn[base + c * plane];
        }
        const double iv = cache.inv.at3(f, yy, xx);
        for (int c = 0; c < C; ++c) {
          const double g = dy[base + c * plane];
          const double xn = cache.xn[base + c * plane];
          dx[base + c * plane] = iv * (g - sum_dy / C - xn * sum_dyxn / C);
        }
      }
  return dx;
}

// Per-channel normalization over the spatial extent (f, y, x), no affine.
// Invariant to any per-channel affine transform of the input.
struct InstanceNormCache {
  NdArray xn;
  std::vector<double> inv;  // per channel
};

inline NdArray instance_norm(const NdArray& x, InstanceNormCache* cache = nullptr,
                             double eps = 1e-5) {
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  const std::size_t n = static_cast<std::size_t>(F) * h * W;
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray y(x.shape());
  std::vector<double> invs(C);
  for (int c = 0; c < C; ++c) {
    double m = 0.0;
    for (int f = 0; f < F; ++f) {
      const double* xp = x.data() + x.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) m += xp[i];
    }
    m /= static_cast<double>(n);
    double v = 0.0;
    for (int f = 0; f < F; ++f) {
      const double* xp = x.data() + x.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = xp[i] - m;
        v += d * d;
      }
    }
    v /= static_cast<double>(n);
    const double iv = 1.0 / std::sqrt(v + eps);
    invs[c] = iv;
    for (int f = 0; f < F; ++f) {
      const double* xp = x.data() + x.offset4(f, c, 0, 0);
      double* yp = y.data() + y.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) yp[i] = (xp[i] - m) * iv;
    }
  }
  if (cache) {
    cache->xn = y;
    cache->inv = std::move(invs);
  }
  return y;
}

inline NdArray instance_norm_backward(const InstanceNormCache& cache, const NdArray& dy) {
  const int F = dy.dim(0), C = dy.dim(1), h = dy.dim(2), W = dy.dim(3);
  const std::size_t n = static_cast<std::size_t>(F) * h * W;
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray dx(dy.shape());
  for (int c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dyxn = 0.0;
    for (int f = 0; f < F; ++f) {
      const double* gp = dy.data() + dy.offset4(f, c, 0, 0);
      const double* xnp = cache.xn.data() + cache.xn.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += gp[i];
        sum_dyxn += gp[i] * xnp[i];
      }
    }
    const double iv = cache.inv[c];
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int f = 0; f < F; ++f) {
      const double* gp = dy.data() + dy.offset4(f, c, 0, 0);
      const double* xnp = cache.xn.data() + cache.xn.offset4(f, c, 0, 0);
      double* dxp = dx.data() + dx.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i)
        dxp[i] = iv * (gp[i] - inv_n * sum_dy - xnp[i] * inv_n * sum_dyxn);
    }
  }
  return dx;
}

// Single-sample batch norm over (f, y, x) per channel, with running stats.
struct BatchNormCache {
  std::vector<double> inv;  // per channel
  NdArray xn;
  bool training = false;
};

struct BatchNorm3d {
  int ch = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  Param* gamma = nullptr;
  Param* beta = nullptr;
  Param* run_mean = nullptr;  // buffer
  Param* run_var = nullptr;   // buffer

  BatchNorm3d() = default;
  BatchNorm3d(ParamStore& store, const std::string& prefix, int ch_) : ch(ch_) {
    gamma = &store.add(prefix + ".gamma", NdArray::full({ch_}, 1.0));
    beta = &store.add(prefix + ".beta", NdArray::zeros({ch_}));
    run_mean = &store.add(prefix + ".running_mean", NdArray::zeros({ch_}), false);
    run_var = &store.add(prefix + ".running_var", NdArray::full({ch_}, 1.0), false);
  }

  NdArray forward(const NdArray& x, bool training, BatchNormCache* cache = nullptr) {
    const int F = x.dim(0), h = x.dim(2), W = x.dim(3);
    const std::size_t n = static_cast<std::size_t>(F) * h * W;
    const std::size_t plane = static_cast<std::size_t>(h) * W;
    NdArray y(x.shape());
    NdArray xn(x.shape());
    std::vector<double> invs(ch);
    for (int c = 0; c < ch; ++c) {
      double mean, var;
      if (training) {
        double m = 0.0;
        for (int f = 0; f < F; ++f) {
          const double* xp = x.data() + x.offset4(f, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) m += xp[i];
        }
        m /= static_cast<double>(n);
        double v = 0.0;
        for (int f = 0; f < F; ++f) {
          const double* xp = x.data() + x.offset4(f, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = xp[i] - m;
            v += d * d;
          }
        }
        v /= static_cast<double>(n);
        mean = m;
        var = v;
        const double unbiased = n > 1 ? v * static_cast<double>(n) / (n - 1.0) : v;
        run_mean->value[c] = (1.0 - momentum) * run_mean->value[c] + momentum * m;
        run_var->value[c] = (1.0 - momentum) * run_var->value[c] + momentum * unbiased;
      } else {
        mean = run_mean->value[c];
        var = run_var->value[c];
      }
      const double iv = 1.0 / std::sqrt(var + eps);
      invs[c] = iv;
      const double g = gamma->value[c], bta = beta->value[c];
      for (int f = 0; f < F; ++f) {
        const double* xp = x.data() + x.offset4(f, c, 0, 0);
        double* yp = y.data() + y.offset4(f, c, 0, 0);
        double* xnp = xn.data() + xn.offset4(f, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const double z = (xp[i] - mean) * iv;
          xnp[i] = z;
          yp[i] = g * z + bta;
        }
      }
    }
    if (cache) {
      cache->inv = std::move(invs);
      cache->xn = std::move(xn);
      cache->training = training;
    }
    return y;
  }

  NdArray backward(const BatchNormCache& cache, const NdArray& dy) {
    const int F = dy.dim(0), h = dy.dim(2), W = dy.dim(3);
    const std::size_t n = static_cast<std::size_t>(F) * h * W;
    const std::size_t plane = static_cast<std::size_t>(h) * W;
    NdArray dx(dy.shape());
    for (int c = 0; c < ch; ++c) {
      double sum_dy = 0.0, sum_dyxn = 0.0;
      for (int f = 0; f < F; ++f) {
        const double* gp = dy.data() + dy.offset4(f, c, 0, 0);
        const double* xnp = cache.xn.data() + cache.xn.offset4(f, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += gp[i];
          sum_dyxn += gp[i] * xnp[i];
        }
      }
      gamma->grad[c] += sum_dyxn;
      beta->grad[c] += sum_dy;
      const double g = gamma->value[c];
      const double iv = cache.inv[c];
      if (cache.training) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (int f = 0; f < F; ++f) {
          const double* gp = dy.data() + dy.offset4(f, c, 0, 0);
          const double* xnp = cache.xn.data() + cache.xn.offset4(f, c, 0, 0);
          double* dxp = dx.data() + dx.offset4(f, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i)
            dxp[i] = g * iv * (gp[i] - inv_n * sum_dy - xnp[i] * inv_n * sum_dyxn);
        }
      } else {
        for (int f = 0; f < F; ++f) {
          const double* gp = dy.data() + dy.offset4(f, c, 0, 0);
          double* dxp = dx.data() + dx.offset4(f, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) dxp[i] = g * iv * gp[i];
        }
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779399;  // 1/sqrt(2*pi)
  return cdf + x * pdf;
}

inline NdArray gelu(const NdArray& x) {
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_value(x[i]);
  return y;
}

inline NdArray gelu_backward(const NdArray& x, const NdArray& dy) {
  NdArray dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_derivative(x[i]);
  return dx;
}

inline NdArray relu(const NdArray& x) {
  NdArray y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

inline NdArray relu_backward(const NdArray& x, const NdArray& dy) {
  NdArray dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling and pixel shuffle
// ---------------------------------------------------------------------------

inline NdArray global_avg_pool(const NdArray& x) {
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  const std::size_t n = static_cast<std::size_t>(F) * h * W;
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray y({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int f = 0; f < F; ++f) {
      const double* xp = x.data() + x.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
    }
    y[c] = s / static_cast<double>(n);
  }
  return y;
}

inline NdArray global_avg_pool_backward(const std::vector<int>& in_shape, const NdArray& dy) {
  NdArray dx(in_shape);
  const int F = in_shape[0], C = in_shape[1], h = in_shape[2], W = in_shape[3];
  const std::size_t n = static_cast<std::size_t>(F) * h * W;
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  for (int c = 0; c < C; ++c) {
    const double g = dy[c] / static_cast<double>(n);
    for (int f = 0; f < F; ++f) {
      double* dxp = dx.data() + dx.offset4(f, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) dxp[i] = g;
    }
  }
  return dx;
}

// (F, s*C, h, W) -> (F, C, s*h, W): output (f, c, y*s + j, x) takes input
// channel j*C + c at (f, y, x).
inline NdArray pixel_shuffle_h(const NdArray& x, int s) {
  const int F = x.dim(0), sC = x.dim(1), h = x.dim(2), W = x.dim(3);
  if (s < 1 || sC % s != 0) throw std::invalid_argument("pixel_shuffle_h: channels not divisible");
  const int C = sC / s;
  NdArray y({F, C, s * h, W});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < s; ++j)
        for (int yy = 0; yy < h; ++yy) {
          const double* src = x.data() + x.offset4(f, j * C + c, yy, 0);
          double* dst = y.data() + y.offset4(f, c, yy * s + j, 0);
          for (int xx = 0; xx < W; ++xx) dst[xx] = src[xx];
        }
  return y;
}

inline NdArray pixel_shuffle_h_backward(const NdArray& dy, int s) {
  const int F = dy.dim(0), C = dy.dim(1), sh = dy.dim(2), W = dy.dim(3);
  const int h = sh / s;
  NdArray dx({F, s * C, h, W});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < s; ++j)
        for (int yy = 0; yy < h; ++yy) {
          const double* src = dy.data() + dy.offset4(f, c, yy * s + j, 0);
          double* dst = dx.data() + dx.offset4(f, j * C + c, yy, 0);
          for (int xx = 0; xx < W; ++xx) dst[xx] = src[xx];
        }
  return dx;
}

}  // namespace isoscan
