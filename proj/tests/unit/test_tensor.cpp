#include <cmath>
#include <limits>
#include <random>

#include "calip/tensor.hpp"
#include "doctest.h"
#include "support/synthetic.hpp"

using namespace calip;

TEST_CASE("matmul checks shapes and names them") {
  MatF a(2, 3), b(4, 2);
  a.setOnes();
  b.setOnes();
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
  try {
    matmul(a, b);
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
  MatF c(3, 2);
  c << 1, 2, 3, 4, 5, 6;
  a << 1, 0, 1, 0, 1, 0;
  const MatF p = matmul(a, c);
  CHECK(p(0, 0) == 6.0f);
  CHECK(p(0, 1) == 8.0f);
  CHECK(p(1, 0) == 3.0f);
  CHECK(p(1, 1) == 4.0f);
}

TEST_CASE("matmul rejects non-finite results") {
  MatF a(1, 1), b(1, 1);
  a << std::numeric_limits<float>::infinity();
  b << 0.0f;
  CHECK_THROWS_AS(matmul(a, b), IntegrityError);
}

TEST_CASE("float matmul accumulates in double") {
  MatF a(1, 3), b(3, 1);
  a << 1e8f, 1.0f, -1e8f;
  b << 1.0f, 1.0f, 1.0f;
  CHECK(matmul(a, b)(0, 0) == 1.0f);
}

TEST_CASE("l2_normalize_rows") {
  MatD m(3, 2);
  m << 3, 4, 0, 0, -2, 0;
  const MatD n = l2_normalize_rows(m);
  CHECK(n(0, 0) == doctest::Approx(0.6));
  CHECK(n(0, 1) == doctest::Approx(0.8));
  CHECK(n(1, 0) == 0.0);
  CHECK(n(1, 1) == 0.0);
  CHECK(n(2, 0) == -1.0);
}

TEST_CASE("softmax_rows frozen values and temperature checks") {
  MatD m(1, 3);
  m << 1, 2, 3;
  const MatD s = softmax_rows(m, 2.0);
  CHECK(s(0, 0) == doctest::Approx(0.186323723).epsilon(1e-9));
  CHECK(s(0, 1) == doctest::Approx(0.307195886).epsilon(1e-9));
  CHECK(s(0, 2) == doctest::Approx(0.506480391).epsilon(1e-9));
  CHECK_THROWS_AS(softmax_rows(m, 0.0), ParameterError);
  CHECK_THROWS_AS(softmax_rows(m, -1.0), ParameterError);
  CHECK_THROWS_AS(softmax_rows(m, std::nan("")), ParameterError);
}

TEST_CASE("softmax_rows survives extreme inputs") {
  MatF m(2, 3);
  m << 1e4f, -1e4f, 0.0f, -1e4f, -1e4f, -1e4f;
  const MatF s = softmax_rows(m, 0.01);
  CHECK(s.allFinite());
  CHECK(s(0, 0) == 1.0f);
  CHECK(s(1, 0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("pooling") {
  MatF px(3, 2);
  px << 1, -1, 2, -3, 3, -2;
  const MatF mean = mean_pool(px);
  CHECK(mean(0, 0) == doctest::Approx(2.0));
  CHECK(mean(0, 1) == doctest::Approx(-2.0));
  const MatF ma = pool_max_avg(px);
  CHECK(ma(0, 0) == doctest::Approx(2.5));
  CHECK(ma(0, 1) == doctest::Approx(-1.5));
  CHECK_THROWS_AS(mean_pool(MatF(0, 2)), DimensionError);
  CHECK_THROWS_AS(pool_max_avg(MatF(0, 2)), DimensionError);
}

TEST_CASE("argmax_row takes the lowest index on ties") {
  MatF m(1, 4);
  m << 0.5f, 0.9f, 0.9f, 0.1f;
  CHECK(argmax_row(m) == 1);
}

TEST_CASE("SpatialMap layout") {
  SpatialMap<float> s(2, 3, 4);
  CHECK(s.pixel_count() == 6);
  s(1, 2, 3) = 7.0f;
  CHECK(s.pixels()(5, 3) == 7.0f);
  CHECK_THROWS_AS(SpatialMap<float>(2, 2, MatF(3, 4)), DimensionError);
  const auto d = s.cast<double>();
  CHECK(d(1, 2, 3) == 7.0);
}
