#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "isoscan/common.hpp"
#include "isoscan/nd_array.hpp"

namespace isoscan {

// Single-channel 3D scalar field, dims (F sections, h height, W width),
// values in [0,1], row-major (f, y, x). Stored as f32 so file roundtrips are
// bitwise; all model math converts to double at the boundary.
struct Volume {
  int F = 0, h = 0, W = 0;
  float sz = 1.0f, sy = 1.0f, sx = 1.0f;  // voxel spacing, nm
  std::vector<float> data;

  Volume() = default;
  Volume(int F_, int h_, int W_, float sz_ = 1.0f, float sy_ = 1.0f, float sx_ = 1.0f)
      : F(F_), h(h_), W(W_), sz(sz_), sy(sy_), sx(sx_) {
    if (F < 1 || h < 1 || W < 1)
      throw std::invalid_argument("Volume: dims must be >= 1");
    data.assign(voxels(), 0.0f);
  }

  std::size_t voxels() const {
    return static_cast<std::size_t>(F) * h * W;
  }

  std::size_t offset(int f, int y, int x) const {
    return (static_cast<std::size_t>(f) * h + y) * W + x;
  }

  float& at(int f, int y, int x) { return data[offset(f, y, x)]; }
  float at(int f, int y, int x) const { return data[offset(f, y, x)]; }

  bool same_grid(const Volume& o) const { return F == o.F && h == o.h && W == o.W; }
};

struct SubvolumeSpec {
  int f0 = 0, y0 = 0, x0 = 0;
  int df = 0, dy = 0, dx = 0;
};

inline NdArray to_ndarray(const Volume& v) {
  NdArray a({v.F, v.h, v.W});
  for (std::size_t i = 0; i < v.data.size(); ++i) a[i] = static_cast<double>(v.data[i]);
  return a;
}

// Clamps to [0,1] and quantizes to f32.
inline Volume volume_from_ndarray(const NdArray& a, float sz = 1.0f, float sy = 1.0f,
                                  float sx = 1.0f) {
  if (a.rank() != 3) throw std::invalid_argument("volume_from_ndarray: rank-3 array required");
  Volume v(a.dim(0), a.dim(1), a.dim(2), sz, sy, sx);
  for (std::size_t i = 0; i < a.size(); ++i)
    v.data[i] = static_cast<float>(std::clamp(a[i], 0.0, 1.0));
  return v;
}

// ---------------------------------------------------------------------------
// VEMV file format: "VEMV", u32 version=1, u32 F, u32 h, u32 W,
// f32 sz, f32 sy, f32 sx, u8 dtype (0 = f32), then F*h*W little-endian f32
// in (f, y, x) order.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline bool get_f32(std::istream& is, float& f) {
  std::uint32_t v;
  if (!get_u32(is, v)) return false;
  std::memcpy(&f, &v, 4);
  return true;
}

}  // namespace detail

inline void save_volume(const Volume& v, std::ostream& os) {
  os.write("VEMV", 4);
  detail::put_u32(os, 1u);
  detail::put_u32(os, static_cast<std::uint32_t>(v.F));
  detail::put_u32(os, static_cast<std::uint32_t>(v.h));
  detail::put_u32(os, static_cast<std::uint32_t>(v.W));
  detail::put_f32(os, v.sz);
  detail::put_f32(os, v.sy);
  detail::put_f32(os, v.sx);
  const unsigned char dtype = 0;
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  for (float f : v.data) detail::put_f32(os, f);
  if (!os) throw std::runtime_error("save_volume: write failure");
}

inline void save_volume(const Volume& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_volume: cannot open " + path);
  save_volume(v, os);
}

inline Volume load_volume(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "VEMV", 4) != 0)
    throw std::runtime_error("load_volume: bad magic (not a VEMV stream)");
  std::uint32_t version = 0, F = 0, h = 0, W = 0;
  if (!detail::get_u32(is, version)) throw std::runtime_error("load_volume: truncated header");
  if (version != 1)
    throw std::runtime_error("load_volume: unsupported version " + std::to_string(version));
  if (!detail::get_u32(is, F) || !detail::get_u32(is, h) || !detail::get_u32(is, W))
    throw std::runtime_error("load_volume: truncated header");
  if (F == 0 || h == 0 || W == 0) throw std::runtime_error("load_volume: zero dimension");
  float sz = 0, sy = 0, sx = 0;
  if (!detail::get_f32(is, sz) || !detail::get_f32(is, sy) || !detail::get_f32(is, sx))
    throw std::runtime_error("load_volume: truncated header");
  unsigned char dtype = 0xff;
  if (!is.read(reinterpret_cast<char*>(&dtype), 1))
    throw std::runtime_error("load_volume: truncated header");
  if (dtype != 0)
    throw std::runtime_error("load_volume: unsupported dtype tag " + std::to_string(dtype));
  Volume v(static_cast<int>(F), static_cast<int>(h), static_cast<int>(W), sz, sy, sx);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    if (!detail::get_f32(is, v.data[i])) throw std::runtime_error("load_volume: truncated payload");
  return v;
}

inline Volume load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_volume: cannot open " + path);
  return load_volume(is);
}

// Raw import for real data: unsigned 8-bit voxels, rescaled by 1/255.
inline Volume import_raw_u8(const std::string& path, int F, int h, int W, float sz = 1.0f,
                            float sy = 1.0f, float sx = 1.0f) {
  Volume v(F, h, W, sz, sy, sx);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("import_raw_u8: cannot open " + path);
  std::vector<unsigned char> raw(v.voxels());
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error("import_raw_u8: file shorter than F*h*W bytes");
  for (std::size_t i = 0; i < raw.size(); ++i)
    v.data[i] = static_cast<float>(raw[i]) / 255.0f;
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic phantom: smooth ellipsoidal organelles and thin membrane sheets
// over a textured background. Pure function of (dims, seed).
// ---------------------------------------------------------------------------

inline Volume generate_phantom(int F, int h, int W, std::uint64_t seed) {
  if (F < 8 || h < 16 || W < 16)
    throw std::invalid_argument("generate_phantom: dims must be at least (8,16,16)");
  Rng rng(derive_seed(seed, "phantom"));

  // Low-frequency background texture: a few random 3D cosines.
  struct Wave {
    double kf, ky, kx, phase, amp;
  };
  std::vector<Wave> waves(4);
  for (auto& w : waves) {
    w.kf = rng.uniform(0.5, 2.5) / F;
    w.ky = rng.uniform(0.5, 2.5) / h;
    w.kx = rng.uniform(0.5, 2.5) / W;
    w.phase = rng.uniform(0.0, 6.2831853);
    w.amp = rng.uniform(0.02, 0.06);
  }

  struct Ellipsoid {
    double cf, cy, cx, rf, ry, rx, value;
  };
  const int n_org = 3 + static_cast<int>(rng.uniform_int(4));
  std::vector<Ellipsoid> orgs(n_org);
  for (auto& e : orgs) {
    e.cf = rng.uniform(0.15, 0.85) * F;
    e.cy = rng.uniform(0.15, 0.85) * h;
    e.cx = rng.uniform(0.15, 0.85) * W;
    e.rf = rng.uniform(0.12, 0.30) * F;
    e.ry = rng.uniform(0.10, 0.25) * h;
    e.rx = rng.uniform(0.10, 0.25) * W;
    e.value = rng.uniform() < 0.5 ? rng.uniform(0.08, 0.22) : rng.uniform(0.72, 0.9);
  }

  // Thin membrane sheets: slightly warped planes, 1-2 voxels thick.
  struct Sheet {
    double nf, ny, nx, d, thickness, warp_amp, warp_freq, value;
  };
  const int n_sheets = 2 + static_cast<int>(rng.uniform_int(2));
  std::vector<Sheet> sheets(n_sheets);
  for (auto& s : sheets) {
    double nf = rng.normal(), ny = rng.normal(), nx = rng.normal();
    const double norm = std::sqrt(nf * nf + ny * ny + nx * nx) + 1e-12;
    s.nf = nf / norm;
    s.ny = ny / norm;
    s.nx = nx / norm;
    const double diag = std::sqrt(double(F) * F + double(h) * h + double(W) * W);
    s.d = rng.uniform(0.25, 0.75) * diag * 0.5;
    s.thickness = rng.uniform(1.0, 2.0);
    s.warp_amp = rng.uniform(0.5, 1.5);
    s.warp_freq = rng.uniform(0.05, 0.15);
    s.value = rng.uniform(0.05, 0.15);
  }

  Volume v(F, h, W);
  Rng grain(derive_seed(seed, "phantom.grain"));
  for (int f = 0; f < F; ++f) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < W; ++x) {
        double val = 0.45;
        for (const auto& w : waves)
          val += w.amp * std::cos(6.2831853 * (w.kf * f + w.ky * y + w.kx * x) + w.phase);
        val += 0.02 * grain.normal();

        for (const auto& e : orgs) {
          const double df = (f - e.cf) / e.rf;
          const double dyy = (y - e.cy) / e.ry;
          const double dxx = (x - e.cx) / e.rx;
          const double r = std::sqrt(df * df + dyy * dyy + dxx * dxx);
          const double alpha = sigmoid((1.0 - r) * 8.0);  // soft ellipsoid boundary
          val = (1.0 - alpha) * val + alpha * e.value;
        }
        for (const auto& s : sheets) {
          double dist = s.nf * f + s.ny * y + s.nx * x - s.d;
          dist += s.warp_amp * std::sin(s.warp_freq * (f + 2.0 * y - x));
          const double half = 0.5 * s.thickness;
          const double alpha = sigmoid((half - std::fabs(dist)) * 6.0);
          val = (1.0 - alpha) * val + alpha * s.value;
        }
        v.at(f, y, x) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return v;
}

// ---------------------------------------------------------------------------

inline Volume crop(const Volume& v, const SubvolumeSpec& spec) {
  if (spec.df < 1 || spec.dy < 1 || spec.dx < 1)
    throw std::invalid_argument("crop: shape must be >= 1");
  if (spec.f0 < 0 || spec.y0 < 0 || spec.x0 < 0 || spec.f0 + spec.df > v.F ||
      spec.y0 + spec.dy > v.h || spec.x0 + spec.dx > v.W)
    throw std::invalid_argument("crop: spec out of bounds");
  Volume out(spec.df, spec.dy, spec.dx, v.sz, v.sy, v.sx);
  for (int f = 0; f < spec.df; ++f)
    for (int y = 0; y < spec.dy; ++y)
      for (int x = 0; x < spec.dx; ++x)
        out.at(f, y, x) = v.at(spec.f0 + f, spec.y0 + y, spec.x0 + x);
  return out;
}

// Swaps the axial (f) and height (y) axes, so the network's h-axis upscaling
// can act on the axial dimension. The two functions are mutual inverses.
inline Volume transpose_axial_to_h(const Volume& v) {
  Volume out(v.h, v.F, v.W, v.sy, v.sz, v.sx);
  for (int f = 0; f < v.F; ++f)
    for (int y = 0; y < v.h; ++y)
      for (int x = 0; x < v.W; ++x)
        out.at(y, f, x) = v.at(f, y, x);
  return out;
}

inline Volume transpose_h_to_axial(const Volume& v) { return transpose_axial_to_h(v); }

inline double mean_abs_difference(const Volume& a, const Volume& b) {
  if (!a.same_grid(b)) throw std::invalid_argument("mean_abs_difference: dims mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    s += std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
  return s / static_cast<double>(a.data.size());
}

}  // namespace isoscan
