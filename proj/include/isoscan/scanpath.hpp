#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "isoscan/nd_array.hpp"

namespace isoscan {

enum class ScanOrder { AxialFirst, LateralFirst };

// A continuous 3D scan trajectory: a bijective permutation of voxel linear
// indices in which consecutive voxels are grid-adjacent (Manhattan distance
// exactly 1). Boustrophedon at every nesting level keeps the walk unbroken.
struct ScanPath {
  int F = 0, h = 0, W = 0;
  ScanOrder order = ScanOrder::AxialFirst;
  bool reversed = false;
  std::vector<std::uint32_t> perm;  // perm[i] = linear voxel index visited at step i

  std::size_t length() const { return perm.size(); }
};

inline ScanPath build_path(int F, int h, int W, ScanOrder order, bool reversed) {
  if (F < 1 || h < 1 || W < 1) throw std::invalid_argument("build_path: dims must be >= 1");
  ScanPath path;
  path.F = F;
  path.h = h;
  path.W = W;
  path.order = order;
  path.reversed = reversed;
  path.perm.reserve(static_cast<std::size_t>(F) * h * W);

  const auto lin = [h, W](int f, int y, int x) {
    return static_cast<std::uint32_t>((static_cast<std::size_t>(f) * h + y) * W + x);
  };

  if (order == ScanOrder::AxialFirst) {
    // Serpentine lateral raster over (y, x); at each lateral site the full
    // f-column is walked, alternating direction so the path stays connected.
    int site = 0;
    for (int y = 0; y < h; ++y) {
      const bool x_fwd = (y % 2 == 0);
      for (int xi = 0; xi < W; ++xi, ++site) {
        const int x = x_fwd ? xi : W - 1 - xi;
        if (site % 2 == 0) {
          for (int f = 0; f < F; ++f) path.perm.push_back(lin(f, y, x));
        } else {
          for (int f = F - 1; f >= 0; --f) path.perm.push_back(lin(f, y, x));
        }
      }
    }
  } else {
    // Per-section serpentine raster; odd sections walk the raster in reverse
    // so consecutive sections join at the same lateral site.
    std::vector<std::pair<int, int>> raster;
    raster.reserve(static_cast<std::size_t>(h) * W);
    for (int y = 0; y < h; ++y) {
      if (y % 2 == 0)
        for (int x = 0; x < W; ++x) raster.emplace_back(y, x);
      else
        for (int x = W - 1; x >= 0; --x) raster.emplace_back(y, x);
    }
    for (int f = 0; f < F; ++f) {
      if (f % 2 == 0) {
        for (const auto& [y, x] : raster) path.perm.push_back(lin(f, y, x));
      } else {
        for (auto it = raster.rbegin(); it != raster.rend(); ++it)
          path.perm.push_back(lin(f, it->first, it->second));
      }
    }
  }

  if (reversed) std::reverse(path.perm.begin(), path.perm.end());
  return path;
}

// The four trajectories applied to each channel chunk: axial-first and
// lateral-first, each forward and reversed.
struct PathSet {
  std::array<ScanPath, 4> paths;

  static PathSet build(int F, int h, int W) {
    PathSet set;
    set.paths[0] = build_path(F, h, W, ScanOrder::AxialFirst, false);
    set.paths[1] = build_path(F, h, W, ScanOrder::AxialFirst, true);
    set.paths[2] = build_path(F, h, W, ScanOrder::LateralFirst, false);
    set.paths[3] = build_path(F, h, W, ScanOrder::LateralFirst, true);
    return set;
  }
};

// Paths are immutable once built; cache them per dims.
inline const PathSet& cached_paths(int F, int h, int W) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, std::unique_ptr<PathSet>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(F, h, W);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, std::make_unique<PathSet>(PathSet::build(F, h, W))).first;
  return *it->second;
}

// ---------------------------------------------------------------------------
// Channel chunking and sequence flattening for feature tensors (F, C, h, W).
// ---------------------------------------------------------------------------

inline std::pair<NdArray, NdArray> chunk_channels(const NdArray& x) {
  if (x.rank() != 4) throw std::invalid_argument("chunk_channels: rank-4 tensor required");
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  if (C % 2 != 0) throw std::invalid_argument("chunk_channels: channel count must be even");
  const int C2 = C / 2;
  NdArray a({F, C2, h, W}), b({F, C2, h, W});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c) {
      NdArray& dst = c < C2 ? a : b;
      const int cc = c < C2 ? c : c - C2;
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < W; ++x2) dst.at4(f, cc, y, x2) = x.at4(f, c, y, x2);
    }
  return {std::move(a), std::move(b)};
}

inline NdArray unchunk(const NdArray& a, const NdArray& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("unchunk: chunk shapes differ");
  const int F = a.dim(0), C2 = a.dim(1), h = a.dim(2), W = a.dim(3);
  NdArray x({F, 2 * C2, h, W});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C2; ++c)
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < W; ++x2) {
          x.at4(f, c, y, x2) = a.at4(f, c, y, x2);
          x.at4(f, c + C2, y, x2) = b.at4(f, c, y, x2);
        }
  return x;
}

// Chunk (F, C, h, W) -> sequence (L, C) with L = F*h*W: the voxel visited at
// step i supplies row i for every channel.
inline NdArray flatten(const NdArray& chunk, const ScanPath& path) {
  if (chunk.rank() != 4) throw std::invalid_argument("flatten: rank-4 tensor required");
  const int F = chunk.dim(0), C = chunk.dim(1), h = chunk.dim(2), W = chunk.dim(3);
  if (F != path.F || h != path.h || W != path.W)
    throw std::invalid_argument("flatten: path dims do not match chunk dims");
  const std::size_t L = path.length();
  const std::size_t plane = static_cast<std::size_t>(h) * W;
  NdArray seq({static_cast<int>(L), C});
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t v = path.perm[i];
    const std::size_t f = v / plane, rest = v % plane;
    for (int c = 0; c < C; ++c)
      seq[i * C + c] = chunk[(f * C + c) * plane + rest];
  }
  return seq;
}

// Exact inverse of flatten for the same path.
inline NdArray restore(const NdArray& seq, const ScanPath& path) {
  if (seq.rank() != 2) throw std::invalid_argument("restore: rank-2 sequence required");
  const std::size_t L = path.length();
  if (static_cast<std::size_t>(seq.dim(0)) != L)
    throw std::invalid_argument("restore: sequence length does not match path");
  const int C = seq.dim(1);
  const std::size_t plane = static_cast<std::size_t>(path.h) * path.W;
  NdArray chunk({path.F, C, path.h, path.W});
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t v = path.perm[i];
    const std::size_t f = v / plane, rest = v % plane;
    for (int c = 0; c < C; ++c)
      chunk[(f * C + c) * plane + rest] = seq[i * C + c];
  }
  return chunk;
}

}  // namespace isoscan
