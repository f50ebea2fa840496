#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "isoscan/common.hpp"
#include "isoscan/nd_array.hpp"
#include "isoscan/nnops.hpp"
#include "isoscan/volume.hpp"

namespace isoscan {

// Anisotropy simulation: Gaussian blur along h, stride-s subsampling along h,
// additive Gaussian noise, clamp. "filter size f" is read as radius ceil(f/2),
// giving an odd centered kernel (9 taps for f = 8).
struct DegradationProfile {
  int filter_size = 8;
  double blur_sigma = 4.0;
  int scale = 2;
  double noise_sigma = 0.0;  // on the [0,1] value scale
  std::uint64_t seed = 0;
};

inline std::vector<double> gaussian_kernel(int f, double sigma) {
  if (f < 1) throw std::invalid_argument("gaussian_kernel: filter size must be >= 1");
  if (sigma <= 0.0) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  const int r = (f + 1) / 2;  // ceil(f/2)
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i) * i / (2.0 * sigma * sigma));
    k[i + r] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

// Blur along h (reflect padding) then keep rows 0, s, 2s, ... No noise, no
// clamp: this is the linear part of the degradation, exposed for tests and
// reused by degrade().
inline NdArray degrade_linear(const NdArray& y, const DegradationProfile& p) {
  if (y.rank() != 3) throw std::invalid_argument("degrade_linear: rank-3 volume required");
  const int F = y.dim(0), H = y.dim(1), W = y.dim(2);
  if (p.scale < 2) throw std::invalid_argument("degrade_linear: scale must be >= 2");
  if (H % p.scale != 0)
    throw std::invalid_argument("degrade_linear: height not divisible by scale");
  const auto k = gaussian_kernel(p.filter_size, p.blur_sigma);
  const int r = static_cast<int>(k.size()) / 2;
  const int h_out = H / p.scale;

  NdArray out({F, h_out, W});
  for (int f = 0; f < F; ++f)
    for (int yo = 0; yo < h_out; ++yo) {
      const int yc = yo * p.scale;
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int o = -r; o <= r; ++o) {
          int yy = yc + o;
          // reflect without edge repeat
          if (H > 1) {
            while (yy < 0 || yy >= H) {
              if (yy < 0) yy = -yy;
              if (yy >= H) yy = 2 * H - 2 - yy;
            }
          } else {
            yy = 0;
          }
          acc += k[o + r] * y.at3(f, yy, x);
        }
        out.at3(f, yo, x) = acc;
      }
    }
  return out;
}

// Full degradation: blur -> subsample -> seeded additive noise -> clamp.
// Deterministic per (volume, profile).
inline Volume degrade(const Volume& y, const DegradationProfile& p) {
  NdArray lin = degrade_linear(to_ndarray(y), p);
  if (p.noise_sigma > 0.0) {
    Rng rng(derive_seed(p.seed, "degrade.noise"));
    for (std::size_t i = 0; i < lin.size(); ++i) lin[i] += p.noise_sigma * rng.normal();
  }
  Volume out = volume_from_ndarray(lin, y.sz, y.sy * static_cast<float>(p.scale), y.sx);
  return out;
}

struct TrainingPair {
  Volume x;  // degraded (F, h, W)
  Volume y;  // target (F, s*h, W)
  DegradationProfile profile;
};

// Y = full-resolution lateral crop of src; X = degrade(Y).
inline TrainingPair make_training_pair(const Volume& src, const SubvolumeSpec& spec,
                                       const DegradationProfile& p) {
  TrainingPair pair;
  pair.y = crop(src, spec);
  pair.x = degrade(pair.y, p);
  pair.profile = p;
  return pair;
}

// Two random same-shape crops of one parent volume (so they share a single
// degradation profile). Origins always differ; with require_disjoint_axial
// the two f-ranges do not overlap at all.
inline std::pair<Volume, Volume> sample_moco_pair(const Volume& parent, int df, int dy, int dx,
                                                  std::uint64_t seed,
                                                  bool require_disjoint_axial = false) {
  if (df > parent.F || dy > parent.h || dx > parent.W)
    throw std::invalid_argument("sample_moco_pair: parent too small for crop shape");
  if (parent.F * parent.h * parent.W == df * dy * dx)
    throw std::invalid_argument("sample_moco_pair: parent admits only one crop");
  if (require_disjoint_axial && parent.F < 2 * df)
    throw std::invalid_argument("sample_moco_pair: parent too shallow for disjoint crops");

  Rng rng(derive_seed(seed, "moco.pair"));
  const auto draw = [&](int max_origin) {
    return max_origin == 0 ? 0 : static_cast<int>(rng.uniform_int(max_origin + 1));
  };

  SubvolumeSpec a, b;
  a.df = b.df = df;
  a.dy = b.dy = dy;
  a.dx = b.dx = dx;
  if (require_disjoint_axial) {
    // first crop in the lower half of f, second in the upper
    a.f0 = draw(parent.F / 2 - df >= 0 ? parent.F / 2 - df : 0);
    const int lo = a.f0 + df;
    b.f0 = lo + draw(parent.F - df - lo);
    a.y0 = draw(parent.h - dy);
    a.x0 = draw(parent.W - dx);
    b.y0 = draw(parent.h - dy);
    b.x0 = draw(parent.W - dx);
  } else {
    do {
      a.f0 = draw(parent.F - df);
      a.y0 = draw(parent.h - dy);
      a.x0 = draw(parent.W - dx);
      b.f0 = draw(parent.F - df);
      b.y0 = draw(parent.h - dy);
      b.x0 = draw(parent.W - dx);
    } while (a.f0 == b.f0 && a.y0 == b.y0 && a.x0 == b.x0);
  }
  return {crop(parent, a), crop(parent, b)};
}

}  // namespace isoscan
