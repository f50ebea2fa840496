#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "isoscan/nd_array.hpp"

namespace isoscan {

// Mean absolute difference over all voxels.
inline double l1_loss(const NdArray& y, const NdArray& yhat, NdArray* dy = nullptr,
                      NdArray* dyhat = nullptr) {
  if (!y.same_shape(yhat)) throw std::invalid_argument("l1_loss: shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(y.size());
  double s = 0.0;
  if (dy) *dy = NdArray(y.shape());
  if (dyhat) *dyhat = NdArray(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - yhat[i];
    s += std::fabs(d);
    const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    if (dy) (*dy)[i] = sign * inv_n;
    if (dyhat) (*dyhat)[i] = -sign * inv_n;
  }
  return s * inv_n;
}

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

namespace detail {

inline std::vector<double> ssim_window(int K, double sigma) {
  std::vector<double> g(K);
  const int r = K / 2;
  double sum = 0.0;
  for (int i = 0; i < K; ++i) {
    const double d = i - r;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Valid separable correlation of an H x W field with g along both axes.
inline std::vector<double> corr_valid(const std::vector<double>& img, int H, int W,
                                      const std::vector<double>& g) {
  const int K = static_cast<int>(g.size());
  const int Wv = W - K + 1, Hv = H - K + 1;
  std::vector<double> rows(static_cast<std::size_t>(H) * Wv, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < Wv; ++x) {
      double s = 0.0;
      for (int o = 0; o < K; ++o) s += g[o] * img[static_cast<std::size_t>(y) * W + x + o];
      rows[static_cast<std::size_t>(y) * Wv + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(Hv) * Wv, 0.0);
  for (int y = 0; y < Hv; ++y)
    for (int x = 0; x < Wv; ++x) {
      double s = 0.0;
      for (int o = 0; o < K; ++o) s += g[o] * rows[static_cast<std::size_t>(y + o) * Wv + x];
      out[static_cast<std::size_t>(y) * Wv + x] = s;
    }
  return out;
}

// Adjoint of corr_valid: scatters an (Hv x Wv) cotangent back to H x W.
inline std::vector<double> corr_valid_adjoint(const std::vector<double>& grad, int H, int W,
                                              const std::vector<double>& g) {
  const int K = static_cast<int>(g.size());
  const int Wv = W - K + 1, Hv = H - K + 1;
  std::vector<double> rows(static_cast<std::size_t>(H) * Wv, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < Wv; ++x) {
      double s = 0.0;
      for (int o = 0; o < K; ++o) {
        const int yp = y - o;
        if (yp >= 0 && yp < Hv) s += g[o] * grad[static_cast<std::size_t>(yp) * Wv + x];
      }
      rows[static_cast<std::size_t>(y) * Wv + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(H) * W, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0.0;
      for (int o = 0; o < K; ++o) {
        const int xp = x - o;
        if (xp >= 0 && xp < Wv) s += g[o] * rows[static_cast<std::size_t>(y) * Wv + xp];
      }
      out[static_cast<std::size_t>(y) * W + x] = s;
    }
  return out;
}

}  // namespace detail

// Standard SSIM, computed per lateral (y, x) slice with a Gaussian window
// (valid-region averaging), averaged over slices. The window shrinks to the
// slice when a slice is smaller than the configured window. Differentiable:
// pass dy/dyhat to receive d(ssim)/d(input).
inline double ssim(const NdArray& y, const NdArray& yhat, const SsimConfig& cfg = {},
                   NdArray* dy = nullptr, NdArray* dyhat = nullptr) {
  if (!y.same_shape(yhat)) throw std::invalid_argument("ssim: shape mismatch");
  if (y.rank() != 3) throw std::invalid_argument("ssim: rank-3 volume required");
  const int F = y.dim(0), H = y.dim(1), W = y.dim(2);
  int K = std::min({cfg.window, H, W});
  if (K % 2 == 0) --K;
  if (K < 1) throw std::invalid_argument("ssim: degenerate window");
  const auto g = detail::ssim_window(K, cfg.sigma);
  const int Hv = H - K + 1, Wv = W - K + 1;
  const std::size_t n_pos = static_cast<std::size_t>(Hv) * Wv;
  const double c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
  const double c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
  const double inv_m = 1.0 / (static_cast<double>(n_pos) * F);

  if (dy) *dy = NdArray(y.shape());
  if (dyhat) *dyhat = NdArray(y.shape());

  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  double total = 0.0;
  for (int f = 0; f < F; ++f) {
    const double* ap = y.data() + static_cast<std::size_t>(f) * plane;
    const double* bp = yhat.data() + static_cast<std::size_t>(f) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] = ap[i];
      b[i] = bp[i];
      aa[i] = ap[i] * ap[i];
      bb[i] = bp[i] * bp[i];
      ab[i] = ap[i] * bp[i];
    }
    const auto mu_a = detail::corr_valid(a, H, W, g);
    const auto mu_b = detail::corr_valid(b, H, W, g);
    const auto e_aa = detail::corr_valid(aa, H, W, g);
    const auto e_bb = detail::corr_valid(bb, H, W, g);
    const auto e_ab = detail::corr_valid(ab, H, W, g);

    std::vector<double> g_mu_a, g_mu_b, g_s, g_sab, t3a, t3b;
    if (dy || dyhat) {
      g_mu_a.assign(n_pos, 0.0);
      g_mu_b.assign(n_pos, 0.0);
      g_s.assign(n_pos, 0.0);
      g_sab.assign(n_pos, 0.0);
    }
    for (std::size_t p = 0; p < n_pos; ++p) {
      const double ma = mu_a[p], mb = mu_b[p];
      const double sa = e_aa[p] - ma * ma;
      const double sb = e_bb[p] - mb * mb;
      const double sab = e_ab[p] - ma * mb;
      const double a1 = 2.0 * ma * mb + c1;
      const double a2 = 2.0 * sab + c2;
      const double b1 = ma * ma + mb * mb + c1;
      const double b2 = sa + sb + c2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (dy || dyhat) {
        const double inv_b1b2 = 1.0 / (b1 * b2);
        g_mu_a[p] = 2.0 * mb * a2 * inv_b1b2 - 2.0 * ma * s / b1;
        g_mu_b[p] = 2.0 * ma * a2 * inv_b1b2 - 2.0 * mb * s / b1;
        g_s[p] = -s / b2;  // shared by sigma_a^2 and sigma_b^2
        g_sab[p] = 2.0 * a1 * inv_b1b2;
      }
    }

    if (dy || dyhat) {
      // sigma terms need mu-weighted companions before the adjoint scatter.
      std::vector<double> mu_a_gs(n_pos), mu_b_gs(n_pos), mu_a_gsab(n_pos), mu_b_gsab(n_pos);
      for (std::size_t p = 0; p < n_pos; ++p) {
        mu_a_gs[p] = mu_a[p] * g_s[p];
        mu_b_gs[p] = mu_b[p] * g_s[p];
        mu_a_gsab[p] = mu_a[p] * g_sab[p];
        mu_b_gsab[p] = mu_b[p] * g_sab[p];
      }
      const auto t_mu_a = detail::corr_valid_adjoint(g_mu_a, H, W, g);
      const auto t_mu_b = detail::corr_valid_adjoint(g_mu_b, H, W, g);
      const auto t_s = detail::corr_valid_adjoint(g_s, H, W, g);
      const auto t_mu_a_gs = detail::corr_valid_adjoint(mu_a_gs, H, W, g);
      const auto t_mu_b_gs = detail::corr_valid_adjoint(mu_b_gs, H, W, g);
      const auto t_sab = detail::corr_valid_adjoint(g_sab, H, W, g);
      const auto t_mu_a_gsab = detail::corr_valid_adjoint(mu_a_gsab, H, W, g);
      const auto t_mu_b_gsab = detail::corr_valid_adjoint(mu_b_gsab, H, W, g);
      for (std::size_t i = 0; i < plane; ++i) {
        if (dy) {
          const double grad = t_mu_a[i] + 2.0 * a[i] * t_s[i] - 2.0 * t_mu_a_gs[i] +
                              b[i] * t_sab[i] - t_mu_b_gsab[i];
          (*dy)[static_cast<std::size_t>(f) * plane + i] = grad * inv_m;
        }
        if (dyhat) {
          const double grad = t_mu_b[i] + 2.0 * b[i] * t_s[i] - 2.0 * t_mu_b_gs[i] +
                              a[i] * t_sab[i] - t_mu_a_gsab[i];
          (*dyhat)[static_cast<std::size_t>(f) * plane + i] = grad * inv_m;
        }
      }
    }
  }
  return total * inv_m;
}

inline double ssim_loss(const NdArray& y, const NdArray& yhat, const SsimConfig& cfg = {},
                        NdArray* dyhat = nullptr) {
  const double s = ssim(y, yhat, cfg, nullptr, dyhat);
  if (dyhat)
    for (std::size_t i = 0; i < dyhat->size(); ++i) (*dyhat)[i] = -(*dyhat)[i];
  return 1.0 - s;
}

// L_total = L1 + L_SSIM, unweighted.
inline double total_loss(const NdArray& y, const NdArray& yhat, NdArray* dyhat = nullptr,
                         const SsimConfig& cfg = {}) {
  NdArray d_l1, d_ssim;
  const double l1 = l1_loss(y, yhat, nullptr, dyhat ? &d_l1 : nullptr);
  const double ls = ssim_loss(y, yhat, cfg, dyhat ? &d_ssim : nullptr);
  if (dyhat) {
    *dyhat = d_l1;
    *dyhat += d_ssim;
  }
  return l1 + ls;
}

// 20*log10(range) - 10*log10(MSE); +inf when MSE == 0.
inline double psnr(const NdArray& y, const NdArray& yhat, double data_range = 1.0) {
  if (!y.same_shape(yhat)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - yhat[i];
    mse += d * d;
  }
  mse /= static_cast<double>(y.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(data_range) - 10.0 * std::log10(mse);
}

}  // namespace isoscan
