#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "isoscan/vemm.hpp"
#include "test_util.hpp"

using namespace isoscan;

namespace {

NdArray random_tensor(std::vector<int> shape, std::uint64_t seed) {
  NdArray a(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
  return a;
}

NdArray rot180(const NdArray& x) {
  const int F = x.dim(0), C = x.dim(1), h = x.dim(2), W = x.dim(3);
  NdArray y(x.shape());
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < W; ++xx)
          y.at4(f, c, yy, xx) = x.at4(F - 1 - f, c, h - 1 - yy, W - 1 - xx);
  return y;
}

}  // namespace

TEST_CASE("dwam with zero weights averages the four directions") {
  ParamStore store;
  Rng rng(1);
  DwamParams p(store, "dwam", 8, rng);
  p.w1->value.fill(0.0);
  p.b1->value.fill(0.0);
  p.w2->value.fill(0.0);
  p.b2->value.fill(0.0);
  std::array<NdArray, 4> dirs{random_tensor({1, 2, 2, 2}, 2), random_tensor({1, 2, 2, 2}, 3),
                              random_tensor({1, 2, 2, 2}, 4), random_tensor({1, 2, 2, 2}, 5)};
  NdArray out = dwam_forward(dirs, p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mean = 0.25 * (dirs[0][i] + dirs[1][i] + dirs[2][i] + dirs[3][i]);
    CHECK(out[i] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("saturated logits select one direction") {
  ParamStore store;
  Rng rng(2);
  DwamParams p(store, "dwam", 8, rng);
  p.w1->value.fill(0.0);
  p.b1->value.fill(0.0);
  p.w2->value.fill(0.0);
  p.b2->value[0] = 10.0;
  p.b2->value[1] = -10.0;
  p.b2->value[2] = -10.0;
  p.b2->value[3] = -10.0;
  std::array<NdArray, 4> dirs{random_tensor({1, 2, 3, 3}, 6), random_tensor({1, 2, 3, 3}, 7),
                              random_tensor({1, 2, 3, 3}, 8), random_tensor({1, 2, 3, 3}, 9)};
  NdArray out = dwam_forward(dirs, p);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(std::fabs(out[i] - dirs[0][i]) <= 1e-3 * std::max(1.0, std::fabs(dirs[0][i])));
}

TEST_CASE("identical direction tensors pass through unchanged") {
  ParamStore store;
  Rng rng(3);
  DwamParams p(store, "dwam", 16, rng);
  NdArray t = random_tensor({2, 2, 2, 2}, 10);
  std::array<NdArray, 4> dirs{t, t, t, t};
  NdArray out = dwam_forward(dirs, p);
  CHECK(out.max_abs_diff(t) < 1e-12);
}

TEST_CASE("dwam rejects mismatched shapes") {
  ParamStore store;
  Rng rng(4);
  DwamParams p(store, "dwam", 8, rng);
  std::array<NdArray, 4> dirs{NdArray({1, 1, 2, 2}), NdArray({1, 1, 2, 2}), NdArray({1, 1, 2, 2}),
                              NdArray({1, 1, 2, 3})};
  CHECK_THROWS_AS(dwam_forward(dirs, p), std::invalid_argument);
}

TEST_CASE("dwam gradcheck") {
  ParamStore store;
  Rng rng(5);
  DwamParams p(store, "dwam", 4, rng);
  auto fwd = [&p](const std::vector<NdArray>& in) {
    std::array<NdArray, 4> dirs{in[0], in[1], in[2], in[3]};
    return std::vector<NdArray>{dwam_forward(dirs, p)};
  };
  auto bwd = [&p](const std::vector<NdArray>& in, const std::vector<NdArray>& dy) {
    std::array<NdArray, 4> dirs{in[0], in[1], in[2], in[3]};
    auto dd = dwam_backward(dirs, p, dy[0]);
    return std::vector<NdArray>{dd[0], dd[1], dd[2], dd[3]};
  };
  auto op = testutil::store_diffop("dwam", store, fwd, bwd, 4);
  std::vector<NdArray> inputs{random_tensor({1, 2, 2, 2}, 11), random_tensor({1, 2, 2, 2}, 12),
                              random_tensor({1, 2, 2, 2}, 13), random_tensor({1, 2, 2, 2}, 14)};
  CHECK(gradcheck(op, testutil::store_point(store, inputs)) < 1e-4);
}

TEST_CASE("vemm preserves shape") {
  ParamStore store;
  Rng rng(6);
  VemmParams p(store, "vemm", 4, 2, 8, rng);
  NdArray x = random_tensor({2, 4, 4, 4}, 15);
  NdArray y = vemm_forward(x, p);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("zeroed SSM readouts leave only the output projection bias") {
  ParamStore store;
  Rng rng(7);
  VemmParams p(store, "vemm", 4, 2, 8, rng);
  for (auto& s : p.ssm) s.w_c->value.fill(0.0);
  NdArray x = random_tensor({2, 4, 3, 3}, 16);
  NdArray y = vemm_forward(x, p);
  for (int f = 0; f < 2; ++f)
    for (int c = 0; c < 4; ++c)
      for (int yy = 0; yy < 3; ++yy)
        for (int xx = 0; xx < 3; ++xx)
          CHECK(y.at4(f, c, yy, xx) == doctest::Approx(p.out_proj.b->value[c]).epsilon(1e-12));
}

TEST_CASE("impulse information flows axially and laterally") {
  ParamStore store;
  Rng rng(8);
  VemmParams p(store, "vemm", 2, 2, 4, rng);
  p.in_proj.b->value.fill(0.0);
  p.out_proj.b->value.fill(0.0);
  NdArray x({4, 2, 1, 4});
  x.at4(1, 0, 0, 1) = 1.0;
  x.at4(1, 1, 0, 1) = -1.0;
  NdArray y = vemm_forward(x, p);
  // axially downstream of the impulse
  CHECK(std::fabs(y.at4(3, 0, 0, 1)) > 1e-15);
  // laterally downstream
  CHECK(std::fabs(y.at4(1, 0, 0, 3)) > 1e-15);
  // with forward and reverse paths, influence reaches every voxel
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (std::fabs(y[i]) > 1e-18) ++nonzero;
  CHECK(nonzero == y.size());
}

TEST_CASE("rotating the volume and swapping path roles rotates the output") {
  // On odd dims the serpentine paths are rot180-symmetric: the forward path
  // of the rotated grid is the reversed path of the original. Swapping the
  // fwd/rev roles of both the SSMs and the DWAM direction slots must then
  // commute with rotation.
  ParamStore store;
  Rng rng(9);
  const int C = 4;
  VemmParams p(store, "vemm", C, 2, 4, rng);
  NdArray x = random_tensor({3, C, 3, 3}, 17);

  // swapped-role view: directions permuted by sigma = (1,0,3,2)
  const int sigma[4] = {1, 0, 3, 2};
  VemmParams p2 = p;
  for (int k = 0; k < 2; ++k)
    for (int d = 0; d < 4; ++d) p2.ssm[k * 4 + d] = p.ssm[k * 4 + sigma[d]];

  ParamStore store2;
  Rng rng2(10);
  p2.dwam1 = DwamParams(store2, "dwam1", p.dwam1.hidden, rng2);
  p2.dwam2 = DwamParams(store2, "dwam2", p.dwam2.hidden, rng2);
  for (int k = 0; k < 2; ++k) {
    const DwamParams& src = k == 0 ? p.dwam1 : p.dwam2;
    DwamParams& dst = k == 0 ? p2.dwam1 : p2.dwam2;
    const int H = src.hidden;
    for (int i = 0; i < H; ++i) {
      dst.b1->value[i] = src.b1->value[i];
      for (int d = 0; d < 4; ++d) dst.w1->value.at2(i, d) = src.w1->value.at2(i, sigma[d]);
    }
    for (int d = 0; d < 4; ++d) {
      dst.b2->value[d] = src.b2->value[sigma[d]];
      for (int i = 0; i < H; ++i) dst.w2->value.at2(d, i) = src.w2->value.at2(sigma[d], i);
    }
  }

  NdArray lhs = vemm_forward(rot180(x), p2);
  NdArray rhs = rot180(vemm_forward(x, p));
  CHECK(lhs.max_abs_diff(rhs) < 1e-6);
}

TEST_CASE("vemm gradcheck on a tiny instance") {
  ParamStore store;
  Rng rng(11);
  VemmParams p(store, "vemm", 2, 2, 4, rng);
  auto fwd = [&p](const std::vector<NdArray>& in) {
    return std::vector<NdArray>{vemm_forward(in[0], p)};
  };
  auto bwd = [&p](const std::vector<NdArray>& in, const std::vector<NdArray>& dy) {
    VemmCache cache;
    vemm_forward(in[0], p, &cache);
    return std::vector<NdArray>{vemm_backward(p, cache, dy[0])};
  };
  auto op = testutil::store_diffop("vemm", store, fwd, bwd, 1);
  NdArray x = random_tensor({2, 2, 2, 2}, 18);
  CHECK(gradcheck(op, testutil::store_point(store, {x})) < 1e-4);
}
