#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dunet/tensor.hpp"

using namespace dunet;

TEST_CASE("tensor shape and size bookkeeping") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK(t.rank() == 4);
  CHECK(t.dim(2) == 4);
  CHECK(t.shape_str() == "[2x3x4x5]");
  t.at4(1, 2, 3, 4) = 7.5;
  CHECK(t[119] == 7.5);

  CHECK(Tensor::scalar(3.0)[0] == 3.0);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("all_finite flags NaN and infinity") {
  Tensor t({4});
  CHECK(t.all_finite());
  t[2] = std::nan("");
  CHECK_FALSE(t.all_finite());
  t[2] = 0;
  t[3] = INFINITY;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("gemm matches the naive triple loop on random matrices") {
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int64_t> dim(1, 17);
    const int64_t m = dim(rng), k = dim(rng), n = dim(rng);
    std::vector<double> a(m * k), b(k * n), c(m * n), expect(m * n);
    for (auto& v : a) v = d(rng);
    for (auto& v : b) v = d(rng);
    for (auto& v : c) v = d(rng);
    expect = c;  // test accumulate mode

    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) expect[i * n + j] += a[i * k + p] * b[p * n + j];

    gemm(a.data(), b.data(), c.data(), m, k, n, /*accumulate=*/true);
    for (int64_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    gemm(a.data(), b.data(), c.data(), m, k, n, /*accumulate=*/false);
    std::vector<double> fresh(m * n, 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) fresh[i * n + j] += a[i * k + p] * b[p * n + j];
    for (int64_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(fresh[i]).epsilon(1e-12));
  }
}
