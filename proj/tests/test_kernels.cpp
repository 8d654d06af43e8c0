#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "flowseg/kernels.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("parallel gemm agrees bitwise with the serial reference") {
  Rng rng(1);
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 16}, {13, 9, 31}, {64, 64, 64}, {65, 17, 24}, {96, 130, 40}};
  for (const auto& s : shapes) {
    const std::size_t m = s[0], k = s[1], n = s[2];
    const auto a = random_vec(rng, m * k);
    const auto bnn = random_vec(rng, k * n);
    const auto bnt = random_vec(rng, n * k);
    const auto atn = random_vec(rng, k * m);
    const auto c0 = random_vec(rng, m * n);
    for (bool acc : {false, true}) {
      auto c1 = c0, c2 = c0;
      kernels::gemm_nn(a, bnn, c1, m, k, n, acc);
      kernels::serial::gemm_nn(a, bnn, c2, m, k, n, acc);
      CHECK(c1 == c2);
      c1 = c0, c2 = c0;
      kernels::gemm_nt(a, bnt, c1, m, k, n, acc);
      kernels::serial::gemm_nt(a, bnt, c2, m, k, n, acc);
      CHECK(c1 == c2);
      c1 = c0, c2 = c0;
      kernels::gemm_tn(atn, bnn, c1, m, k, n, acc);
      kernels::serial::gemm_tn(atn, bnn, c2, m, k, n, acc);
      CHECK(c1 == c2);
    }
  }
}

TEST_CASE("gemm matches hand values") {
  const std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8};
  std::vector<double> c(4);
  kernels::gemm_nn(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
  kernels::gemm_nt(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<double>{17, 23, 39, 53});
  kernels::gemm_tn(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<double>{26, 30, 38, 44});
}

TEST_CASE("squared EDT matches brute force and the serial reference") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(70), cols = 1 + rng.below(70);
    std::vector<unsigned char> f(rows * cols);
    for (auto& v : f) v = rng.bernoulli(0.03) ? 1 : 0;
    std::vector<double> fast(rows * cols), ref(rows * cols);
    kernels::squared_edt(f, fast, rows, cols);
    kernels::serial::squared_edt(f, ref, rows, cols);
    CHECK(fast == ref);
    for (std::size_t i = 0; i < rows * cols; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < rows * cols; ++j) {
        if (!f[j]) continue;
        const double dr = double(i / cols) - double(j / cols), dc = double(i % cols) - double(j % cols);
        best = std::min(best, dr * dr + dc * dc);
      }
      REQUIRE(fast[i] == best);
    }
  }
}
