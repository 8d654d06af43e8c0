#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "flowseg/errors.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/rng.hpp"
#include "metric_oracles.hpp"

using namespace flowseg;
using namespace flowseg::metrics;

namespace {

Mask cells(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> on) {
  Mask m(h, w);
  for (auto [r, c] : on) m.at(r, c) = 1;
  return m;
}

}  // namespace

using namespace oracle;

TEST_CASE("iou and dice hand examples") {
  const Mask p = cells(2, 2, {{0, 0}, {0, 1}});
  const Mask g = cells(2, 2, {{0, 1}, {1, 1}});
  CHECK(iou(p, g) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(dice(p, g) == 0.5);
  CHECK(iou(p, p) == 1.0);
  CHECK(dice(g, g) == 1.0);
  const Mask far = cells(2, 2, {{1, 0}});
  CHECK(iou(p, far) == 0.0);
  CHECK(dice(p, far) == 0.0);
  CHECK(iou(Mask(2, 2), Mask(2, 2)) == 1.0);
  CHECK(dice(Mask(2, 2), Mask(2, 2)) == 1.0);
  CHECK(dice(Mask(2, 2), p) == 0.0);
  CHECK_THROWS_AS(iou(Mask(2, 2), Mask(2, 3)), ShapeError);
  CHECK_THROWS_AS(dice(Mask(3, 2), Mask(2, 2)), ShapeError);
}

TEST_CASE("dice is 2 iou / (1 + iou)") {
  Rng rng(11);
  for (int i = 0; i < 500; ++i) {
    const Mask a = random_mask(rng, 12, 12), b = random_mask(rng, 12, 12);
    const double j = iou(a, b);
    CHECK(dice(a, b) == doctest::Approx(2 * j / (1 + j)).epsilon(1e-12));
  }
}

TEST_CASE("boundary examples") {
  CHECK(boundary(Mask(5, 5)).empty());
  const auto one = boundary(cells(5, 5, {{2, 3}}));
  REQUIRE(one.size() == 1);
  CHECK(one[0] == Cell{2, 3});
  Mask sq(5, 5);
  for (int r = 1; r <= 3; ++r)
    for (int c = 1; c <= 3; ++c) sq.at(r, c) = 1;
  const auto b = boundary(sq);
  CHECK(b.size() == 8);
  CHECK(std::find(b.begin(), b.end(), Cell{2, 2}) == b.end());
  // image border counts as background
  Mask full(3, 3);
  std::fill(full.cells.begin(), full.cells.end(), 1);
  CHECK(boundary(full).size() == 8);
}

TEST_CASE("hd95 examples") {
  const Mask a = cells(6, 6, {{0, 0}}), b = cells(6, 6, {{3, 4}});
  CHECK(hd95(a, b) == 5.0);
  CHECK(hd95(a, a) == 0.0);
  CHECK(hd95(a, b, Hd95Pooling::pred_to_gt) == 5.0);
  CHECK_THROWS_AS(hd95(Mask(6, 6), a), EmptyMask);
  CHECK_THROWS_AS(hd95(a, Mask(6, 6)), EmptyMask);
}

TEST_CASE("percentile interpolation") {
  CHECK(percentile({3, 1, 2}, 0.5) == 2);
  CHECK(percentile({0, 10}, 0.95) == doctest::Approx(9.5));
  CHECK(percentile({4}, 0.95) == 4);
}

TEST_CASE("metrics match brute-force oracles on random pairs") {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const Mask p = random_mask(rng, 16, 16), g = random_mask(rng, 16, 16);
    const Counts k = count(p, g);
    CHECK(iou(p, g) == k.inter / k.uni);
    CHECK(dice(p, g) == 2 * k.inter / (k.a + k.b));
    CHECK(std::abs(hd95(p, g) - brute_hd95(p, g)) <= 1e-9);
    const auto bb = brute_boundary(p);
    const auto fb = boundary(p);
    REQUIRE(fb.size() == bb.size());
    for (std::size_t j = 0; j < fb.size(); ++j) CHECK(fb[j] == Cell{std::size_t(bb[j].first), std::size_t(bb[j].second)});
  }
}

TEST_CASE("metrics are symmetric and within range") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Mask p = random_mask(rng, 16, 16), g = random_mask(rng, 16, 16);
    CHECK(iou(p, g) == iou(g, p));
    CHECK(dice(p, g) == dice(g, p));
    CHECK(hd95(p, g) == hd95(g, p));
    CHECK(iou(p, g) >= 0.0);
    CHECK(dice(p, g) <= 1.0);
    CHECK(hd95(p, g) >= 0.0);
    CHECK(hd95(p, g) <= std::sqrt(2.0) * 16);
  }
}

TEST_CASE("translating away never decreases hd95") {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 5 + rng.below(4), w = 5 + rng.below(4);
    Mask g(48, 48);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (!rng.bernoulli(0.1) || r == 0) g.at(r + 2, c + 2) = 1;
    double prev = -1;
    for (std::size_t k = w + 1; k + w + 2 < 48; ++k) {
      Mask p(48, 48);
      for (std::size_t r = 0; r < 48; ++r)
        for (std::size_t c = 0; c + k < 48; ++c) p.at(r, c + k) = g.at(r, c);
      const double d = hd95(p, g);
      CHECK(d >= prev);
      prev = d;
    }
  }
}

TEST_CASE("spearman") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
  CHECK(spearman({1}, {2}) == 0.0);
  // ties get average ranks: ranks a=(1.5,1.5,3), b=(1,2,3)
  const double expected = 1.5 / std::sqrt(1.5 * 2.0);
  CHECK(spearman({1, 1, 2}, {1, 2, 3}) == doctest::Approx(expected));
}
