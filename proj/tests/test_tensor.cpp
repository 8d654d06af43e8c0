#include <doctest.h>

#include "flowseg/errors.hpp"
#include "flowseg/rng.hpp"
#include "flowseg/tensor.hpp"

using namespace flowseg;

TEST_CASE("tensor shape contract") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 2) == 6);
  const Tensor v({4}, {1, 2, 3, 4});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 4);
  CHECK(Tensor::zeros_like(t).same_shape(t));
}

TEST_CASE("rng transforms are fixed across platforms") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng c(7);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) sum += c.uniform();
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
