#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "isoscan/common.hpp"
#include "isoscan/ssm.hpp"
#include "test_util.hpp"

using namespace isoscan;

namespace {

NdArray random_sequence(int L, int C, std::uint64_t seed, double scale = 1.0) {
  NdArray x({L, C});
  Rng rng(seed);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = scale * rng.normal();
  return x;
}

}  // namespace

TEST_CASE("discretize_zoh closed forms") {
  // a = ln 2, delta = 1, B = 1 -> Abar = 2, Bbar = 1/ln 2
  auto [abar, bbar] = discretize_zoh(std::log(2.0), 1.0, 1.0);
  CHECK(abar == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(bbar == doctest::Approx(1.0 / std::log(2.0)).epsilon(1e-12));

  // a -> 0 limit: Abar = 1, Bbar = delta*B
  auto [a0, b0] = discretize_zoh(1e-13, 3.0, 0.5);
  CHECK(a0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(b0 == doctest::Approx(1.5).epsilon(1e-10));

  // delta -> 0+: Abar -> 1, Bbar -> 0
  auto [a1, b1] = discretize_zoh(-1.0, 1.0, 1e-9);
  CHECK(a1 == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(std::fabs(b1) < 1e-8);

  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(discretize_zoh(-1.0, 1.0, -0.1), std::invalid_argument);
}

TEST_CASE("lti_scan hand-unrolled recurrence") {
  auto y = lti_scan({0.5}, {1.0}, {1.0}, {1.0, 1.0, 1.0});
  REQUIRE(y.size() == 3);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(1.5));
  CHECK(y[2] == doctest::Approx(1.75));

  // zero input stays zero
  auto z = lti_scan({0.9, 0.3}, {1.0, 2.0}, {1.0, -1.0}, {0.0, 0.0, 0.0, 0.0});
  for (double v : z) CHECK(v == 0.0);

  // Abar = 0 is memoryless: y_t = C*Bbar*x_t
  auto m = lti_scan({0.0}, {2.0}, {3.0}, {1.0, -2.0, 0.5});
  CHECK(m[0] == doctest::Approx(6.0));
  CHECK(m[1] == doctest::Approx(-12.0));
  CHECK(m[2] == doctest::Approx(3.0));

  CHECK_THROWS_AS(lti_scan({1.0, 2.0}, {1.0}, {1.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("lti_kernel closed-form powers") {
  auto K = lti_kernel({0.5}, {1.0}, {1.0}, 3);
  REQUIRE(K.size() == 3);
  CHECK(K[0] == doctest::Approx(1.0));
  CHECK(K[1] == doctest::Approx(0.5));
  CHECK(K[2] == doctest::Approx(0.25));

  auto Z = lti_kernel({0.5}, {1.0}, {0.0}, 4);
  for (double v : Z) CHECK(v == 0.0);

  CHECK_THROWS_AS(lti_kernel({0.5}, {1.0}, {1.0}, 0), std::invalid_argument);
}

TEST_CASE("recurrence/convolution duality on random LTI instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int N = 1 + static_cast<int>(rng.uniform_int(4));
    const int L = 4 + static_cast<int>(rng.uniform_int(8));
    std::vector<double> abar(N), bbar(N), cvec(N), x(L);
    for (int n = 0; n < N; ++n) {
      abar[n] = rng.uniform(-0.95, 0.95);
      bbar[n] = rng.uniform(-2.0, 2.0);
      cvec[n] = rng.uniform(-2.0, 2.0);
    }
    for (int t = 0; t < L; ++t) x[t] = rng.normal();
    auto y_scan = lti_scan(abar, bbar, cvec, x);
    auto y_conv = conv_apply(x, lti_kernel(abar, bbar, cvec, L));
    double diff = 0.0;
    for (int t = 0; t < L; ++t) diff = std::max(diff, std::fabs(y_scan[t] - y_conv[t]));
    CHECK(diff < 1e-10);
  }
}

TEST_CASE("gradients of the two LTI routes agree") {
  // Reverse recurrence for lti_scan vs kernel correlation for the conv form.
  Rng rng(55);
  const int N = 3, L = 10;
  std::vector<double> abar(N), bbar(N), cvec(N), x(L), r(L);
  for (int n = 0; n < N; ++n) {
    abar[n] = rng.uniform(-0.9, 0.9);
    bbar[n] = rng.uniform(-1.5, 1.5);
    cvec[n] = rng.uniform(-1.5, 1.5);
  }
  for (int t = 0; t < L; ++t) {
    x[t] = rng.normal();
    r[t] = rng.normal();
  }
  // route 1: d<r,y>/dx via reverse-time recurrence
  std::vector<double> dx_rec(L, 0.0), dh(N, 0.0);
  for (int t = L - 1; t >= 0; --t) {
    for (int n = 0; n < N; ++n) dh[n] += cvec[n] * r[t];
    for (int n = 0; n < N; ++n) {
      dx_rec[t] += bbar[n] * dh[n];
      dh[n] *= abar[n];
    }
  }
  // route 2: d<r,y>/dx_t = sum_j K_j r_{t+j}
  auto K = lti_kernel(abar, bbar, cvec, L);
  for (int t = 0; t < L; ++t) {
    double g = 0.0;
    for (int j = 0; t + j < L; ++j) g += K[j] * r[t + j];
    CHECK(std::fabs(g - dx_rec[t]) < 1e-6);
  }
}

TEST_CASE("selective scan with constant input reduces to the induced LTI scan") {
  ParamStore store;
  Rng rng(7);
  const int C = 3, N = 4, L = 12;
  SsmParams p(store, "ssm", C, N, rng);

  std::vector<double> xbar(C);
  for (int c = 0; c < C; ++c) xbar[c] = rng.uniform(-1.0, 1.0);
  NdArray x({L, C});
  for (int t = 0; t < L; ++t)
    for (int c = 0; c < C; ++c) x.at2(t, c) = xbar[c];

  NdArray y = selective_scan(x, p);

  // Frozen parameters induced by xbar
  std::vector<double> bt(N), ct(N);
  for (int n = 0; n < N; ++n) {
    double b = 0.0, cc = 0.0;
    for (int j = 0; j < C; ++j) {
      b += p.w_b->value.at2(n, j) * xbar[j];
      cc += p.w_c->value.at2(n, j) * xbar[j];
    }
    bt[n] = b;
    ct[n] = cc;
  }
  for (int c = 0; c < C; ++c) {
    double z = p.b_delta->value[c];
    for (int j = 0; j < C; ++j) z += p.w_delta->value.at2(c, j) * xbar[j];
    const double delta = softplus(z);
    std::vector<double> abar(N), bbar(N);
    for (int n = 0; n < N; ++n) {
      auto [ab, bb] = discretize_zoh(-std::exp(p.log_a->value.at2(c, n)), bt[n], delta);
      abar[n] = ab;
      bbar[n] = bb;
    }
    auto yc = lti_scan(abar, bbar, ct, std::vector<double>(L, xbar[c]));
    for (int t = 0; t < L; ++t) CHECK(std::fabs(y.at2(t, c) - yc[t]) < 1e-10);
  }
}

TEST_CASE("length-1 selective scan closed form") {
  ParamStore store;
  Rng rng(13);
  const int C = 2, N = 3;
  SsmParams p(store, "ssm", C, N, rng);
  NdArray x = random_sequence(1, C, 3);

  NdArray y = selective_scan(x, p);
  for (int c = 0; c < C; ++c) {
    double z = p.b_delta->value[c];
    for (int j = 0; j < C; ++j) z += p.w_delta->value.at2(c, j) * x[j];
    const double delta = softplus(z);
    double expect = 0.0;
    for (int n = 0; n < N; ++n) {
      double b = 0.0, cc = 0.0;
      for (int j = 0; j < C; ++j) {
        b += p.w_b->value.at2(n, j) * x[j];
        cc += p.w_c->value.at2(n, j) * x[j];
      }
      auto [ab, bb] = discretize_zoh(-std::exp(p.log_a->value.at2(c, n)), b, delta);
      (void)ab;
      expect += cc * bb * x[c];
    }
    CHECK(y.at2(0, c) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("zero projections give a null readout") {
  ParamStore store;
  Rng rng(5);
  SsmParams p(store, "ssm", 2, 4, rng);
  p.w_delta->value.fill(0.0);
  p.w_b->value.fill(0.0);
  p.w_c->value.fill(0.0);
  NdArray x = random_sequence(9, 2, 77);
  NdArray y = selective_scan(x, p);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("non-finite activations are reported with the step index") {
  ParamStore store;
  Rng rng(5);
  SsmParams p(store, "ssm", 2, 2, rng);
  p.w_delta->value.fill(0.0);
  p.w_b->value.fill(1.0);
  p.w_c->value.fill(1.0);
  NdArray x({3, 2});
  x.at2(0, 0) = 1.0;
  x.at2(0, 1) = 1.0;
  x.at2(1, 0) = 1e308;  // B_t overflows, the state goes non-finite at step 1
  x.at2(1, 1) = 1e308;
  CHECK_THROWS_WITH_AS(selective_scan(x, p), doctest::Contains("step 1"), std::runtime_error);
}

TEST_CASE("parallel scan matches sequential for many block sizes") {
  ParamStore store;
  Rng rng(31);
  const int C = 2, N = 3, L = 64;
  SsmParams p(store, "ssm", C, N, rng);
  NdArray x = random_sequence(L, C, 41);
  NdArray y_seq = selective_scan(x, p);
  for (int block : {1, 3, 8, 17, L}) {
    NdArray y_par = selective_scan_parallel(x, p, block);
    CHECK(y_par.max_abs_diff(y_seq) < 1e-9);
  }
  CHECK_THROWS_AS(selective_scan_parallel(x, p, 0), std::invalid_argument);
}

TEST_CASE("scan combine is associative") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    std::pair<double, double> e1{rng.uniform(-1.0, 1.0), rng.normal()};
    std::pair<double, double> e2{rng.uniform(-1.0, 1.0), rng.normal()};
    std::pair<double, double> e3{rng.uniform(-1.0, 1.0), rng.normal()};
    auto left = scan_combine(scan_combine(e3, e2), e1);
    auto right = scan_combine(e3, scan_combine(e2, e1));
    CHECK(std::fabs(left.first - right.first) < 1e-12);
    CHECK(std::fabs(left.second - right.second) < 1e-12);
  }
}

TEST_CASE("stability: bounded inputs give bounded states") {
  ParamStore store;
  Rng rng(19);
  const int C = 3, N = 8, L = 128;
  SsmParams p(store, "ssm", C, N, rng);
  NdArray x({L, C});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
  SelectiveScanCache cache;
  selective_scan(x, p, &cache);

  double max_abar = 0.0, max_h = 0.0, max_bx = 0.0;
  for (int t = 0; t < L; ++t)
    for (int c = 0; c < C; ++c)
      for (int n = 0; n < N; ++n) {
        const double ab = cache.abar.at3(t, c, n);
        CHECK(ab > 0.0);
        CHECK(ab < 1.0);
        max_abar = std::max(max_abar, ab);
        max_h = std::max(max_h, std::fabs(cache.hs.at3(t, c, n)));
        const double a = -std::exp(p.log_a->value.at2(c, n));
        const double phi = std::fabs(cache.delta.at2(t, c) * a) < 1e-8
                               ? cache.delta.at2(t, c)
                               : (ab - 1.0) / a;
        max_bx = std::max(max_bx, std::fabs(phi * cache.bt.at2(t, n) * x.at2(t, c)));
      }
  CHECK(max_h <= max_bx / (1.0 - max_abar) + 1e-12);
}

TEST_CASE("selective scan backward passes gradcheck over multiple seeds") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    ParamStore store;
    Rng rng(seed);
    SsmParams p(store, "ssm", 2, 3, rng);
    auto fwd = [&p](const std::vector<NdArray>& in) {
      return std::vector<NdArray>{selective_scan(in[0], p)};
    };
    auto bwd = [&p](const std::vector<NdArray>& in, const std::vector<NdArray>& dy) {
      SelectiveScanCache cache;
      selective_scan(in[0], p, &cache);
      return std::vector<NdArray>{selective_scan_backward(in[0], p, cache, dy[0])};
    };
    auto op = testutil::store_diffop("selective_scan", store, fwd, bwd, 1);
    NdArray x = random_sequence(6, 2, 1000 + seed);
    const double err = gradcheck(op, testutil::store_point(store, {x}), 1e-5, seed);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("zero cotangent gives zero gradients") {
  ParamStore store;
  Rng rng(3);
  SsmParams p(store, "ssm", 2, 3, rng);
  NdArray x = random_sequence(5, 2, 9);
  SelectiveScanCache cache;
  selective_scan(x, p, &cache);
  store.zero_grads();
  NdArray dy({5, 2});
  NdArray dx = selective_scan_backward(x, p, cache, dy);
  for (std::size_t i = 0; i < dx.size(); ++i) CHECK(dx[i] == 0.0);
  for (std::size_t i = 0; i < store.count(); ++i)
    for (std::size_t j = 0; j < store.param(i).grad.size(); ++j)
      CHECK(store.param(i).grad[j] == 0.0);
}

TEST_CASE("backward requires saved state of matching shape") {
  ParamStore store;
  Rng rng(3);
  SsmParams p(store, "ssm", 2, 2, rng);
  NdArray x = random_sequence(4, 2, 9);
  SelectiveScanCache stale;  // empty
  CHECK_THROWS_AS(selective_scan_backward(x, p, stale, x), std::invalid_argument);
}
