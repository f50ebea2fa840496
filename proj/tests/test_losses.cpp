#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "isoscan/common.hpp"
#include "isoscan/diffcore.hpp"
#include "isoscan/losses.hpp"

using namespace isoscan;

namespace {

NdArray random_volume_nd(int F, int H, int W, std::uint64_t seed) {
  NdArray a({F, H, W});
  Rng rng(seed);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform();
  return a;
}

}  // namespace

TEST_CASE("l1 closed forms and brute-force oracle") {
  NdArray a = random_volume_nd(2, 4, 4, 1);
  CHECK(l1_loss(a, a) == 0.0);

  NdArray b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += 0.5;
  CHECK(l1_loss(a, b) == doctest::Approx(0.5).epsilon(1e-12));

  NdArray c = random_volume_nd(2, 4, 4, 2);
  double brute = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) brute += std::fabs(a[i] - c[i]);
  brute /= static_cast<double>(a.size());
  CHECK(std::fabs(l1_loss(a, c) - brute) < 1e-12);
}

TEST_CASE("ssim of identical volumes is exactly 1") {
  NdArray a = random_volume_nd(2, 16, 16, 3);
  CHECK(std::fabs(ssim(a, a) - 1.0) < 1e-12);
}

TEST_CASE("constant-patch ssim matches the luminance closed form") {
  NdArray y = NdArray::full({1, 16, 16}, 0.3);
  NdArray yhat = NdArray::full({1, 16, 16}, 0.7);
  const double c1 = 1e-4;
  const double expect = (2.0 * 0.3 * 0.7 + c1) / (0.3 * 0.3 + 0.7 * 0.7 + c1);
  CHECK(ssim(y, yhat) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(ssim(y, yhat) == doctest::Approx(0.7241854852611619).epsilon(1e-9));
}

TEST_CASE("ssim symmetry and upper bound") {
  NdArray a = random_volume_nd(2, 14, 14, 4);
  NdArray b = random_volume_nd(2, 14, 14, 5);
  CHECK(std::fabs(ssim(a, b) - ssim(b, a)) < 1e-12);
  CHECK(ssim(a, b) < 1.0);
  CHECK(ssim(a, b) >= -1.0);
}

TEST_CASE("ssim rejects mismatched dims") {
  NdArray a = random_volume_nd(2, 12, 12, 6);
  NdArray b = random_volume_nd(2, 12, 13, 6);
  CHECK_THROWS_AS(ssim(a, b), std::invalid_argument);
}

TEST_CASE("ssim_loss gradcheck on an 8x8 slice pair") {
  NdArray y = random_volume_nd(1, 8, 8, 7);
  NdArray yhat = random_volume_nd(1, 8, 8, 8);
  DiffOp op{"ssim_loss",
            [](const std::vector<NdArray>& in) {
              return std::vector<NdArray>{NdArray::scalar(ssim_loss(in[0], in[1]))};
            },
            [](const std::vector<NdArray>& in, const std::vector<NdArray>& dy) {
              NdArray dy_full, dyhat;
              ssim(in[0], in[1], SsimConfig{}, &dy_full, &dyhat);
              // loss = 1 - ssim
              for (std::size_t i = 0; i < dy_full.size(); ++i) {
                dy_full[i] = -dy_full[i] * dy[0][0];
                dyhat[i] = -dyhat[i] * dy[0][0];
              }
              return std::vector<NdArray>{dy_full, dyhat};
            }};
  CHECK(gradcheck(op, {y, yhat}, 1e-5) < 1e-3);
}

TEST_CASE("total loss is the unweighted sum and decreases toward the target") {
  NdArray y = random_volume_nd(2, 16, 16, 9);
  NdArray y0 = random_volume_nd(2, 16, 16, 10);
  CHECK(total_loss(y, y) == 0.0);

  const double sum = l1_loss(y, y0) + ssim_loss(y, y0);
  CHECK(std::fabs(total_loss(y, y0) - sum) < 1e-12);

  // moving yhat from y0 toward y along a line
  double prev = 1e300;
  for (double t : {1.0, 0.75, 0.5, 0.25}) {
    NdArray yt(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) yt[i] = y[i] + t * (y0[i] - y[i]);
    const double loss = total_loss(y, yt);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("psnr closed forms") {
  NdArray a = random_volume_nd(2, 8, 8, 11);
  CHECK(std::isinf(psnr(a, a)));

  NdArray b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += 1.0 / 255.0;
  CHECK(psnr(a, b) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-6));
  CHECK(psnr(a, b) == doctest::Approx(48.1308036086791).epsilon(1e-6));

  // MSE = 0.01 -> 20 dB
  NdArray c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += 0.1;
  CHECK(psnr(a, c) == doctest::Approx(20.0).epsilon(1e-9));
}

TEST_CASE("psnr is monotone decreasing in mse") {
  NdArray a = random_volume_nd(1, 8, 8, 12);
  double prev = 1e300;
  for (double e : {0.001, 0.01, 0.05, 0.2}) {
    NdArray b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += e;
    const double p = psnr(a, b);
    CHECK(p < prev);
    prev = p;
  }
}
