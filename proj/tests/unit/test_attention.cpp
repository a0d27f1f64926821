#include <random>

#include "calip/attention.hpp"
#include "doctest.h"
#include "oracle/brute_force.hpp"
#include "oracle/instance.hpp"
#include "support/synthetic.hpp"

using namespace calip;

namespace {

// numpy float64 reference, seed-0 instance (HW=4, K=3, C=8), alpha 2/2, beta (1,1,1)
constexpr double kClip[] = {-0.722641398, -0.121554633, -0.265815471};
constexpr double kTextual[] = {0.998815186, 0.992452787, 0.993115348};
constexpr double kVisual[] = {0.878651499, 0.215374065, 0.537896560};
constexpr double kFused[] = {1.154825287, 1.086272219, 1.265196438};
constexpr double kAttentionRow0[] = {-0.266100008, -0.077944381, 0.181294132};

}  // namespace

TEST_CASE("seed-0 instance matches frozen reference values") {
  const auto inst = testing::make_instance(0, 4, 3, 8);
  const auto out = calip_forward(inst.spatial, inst.text, CalipHyper{2, 2, 1, 1, 1});
  for (int j = 0; j < 3; ++j) {
    CHECK(out.logits_clip(0, j) == doctest::Approx(kClip[j]).epsilon(1e-6));
    CHECK(out.logits_textual(0, j) == doctest::Approx(kTextual[j]).epsilon(1e-6));
    CHECK(out.logits_visual(0, j) == doctest::Approx(kVisual[j]).epsilon(1e-6));
    CHECK(out.logits_fused(0, j) == doctest::Approx(kFused[j]).epsilon(1e-6));
    CHECK(out.attention(0, j) == doctest::Approx(kAttentionRow0[j]).epsilon(1e-6));
  }
  CHECK(predict(out) == 2);
}

TEST_CASE("engine agrees with the loop oracle on random instances") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto inst = testing::make_instance(seed, 1 + seed % 9, 1 + seed % 5, 4 + seed % 7);
    const CalipHyper h{0.5 + 0.1 * double(seed), 1.5, 1.0, 0.3, 0.7};
    const auto out = calip_forward(inst.spatial, inst.text, h);
    const auto z = oracle::zero_shot(oracle::to_grid(inst.spatial.pixels()), oracle::to_grid(inst.text), h.alpha_t,
                                     h.alpha_s, h.beta1, h.beta2, h.beta3);
    CHECK(oracle::max_abs_diff(out.attention, z.a) < 1e-5);
    CHECK(oracle::max_abs_diff(out.f_s_a, z.f_s_a) < 1e-5);
    CHECK(oracle::max_abs_diff(out.f_t_a, z.f_t_a) < 1e-5);
    CHECK(oracle::max_abs_diff(out.f_v_a, z.f_v_a) < 1e-5);
    CHECK(oracle::max_abs_diff(out.logits_both, z.both) < 1e-5);
    CHECK(oracle::max_abs_diff(out.logits_fused, z.fused) < 1e-5);
  }
}

TEST_CASE("beta (1,0,0) gives the plain cosine logits") {
  std::mt19937_64 rng(3);
  const MatF px = testing::gaussian(rng, 6, 5);
  const MatF text = l2_normalize_rows(testing::gaussian(rng, 4, 5));
  const auto out = calip_forward(SpatialMap<float>(2, 3, px), text, CalipHyper{2, 2, 1, 0, 0});
  CHECK((out.logits_fused - clip_logits(px, text)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("updated features are unit norm and attention rows are convex") {
  std::mt19937_64 rng(4);
  const auto out = calip_forward(SpatialMap<float>(3, 3, testing::gaussian(rng, 9, 12)),
                                 testing::gaussian(rng, 5, 12), CalipHyper{});
  CHECK(std::abs(out.f_v_a.norm() - 1.0f) < 1e-6f);
  CHECK(std::abs(out.f_v.norm() - 1.0f) < 1e-6f);
  CHECK(out.logits_clip.cwiseAbs().maxCoeff() <= 1.0f + 1e-6f);
}

TEST_CASE("input validation") {
  const SpatialMap<float> s(2, 2, 4);
  CHECK_THROWS_AS(calip_forward(s, MatF(MatF::Ones(3, 5)), CalipHyper{}), DimensionError);
  CHECK_THROWS_AS(calip_forward(s, MatF(MatF::Ones(3, 4)), CalipHyper{0, 2, 1, 1, 1}), ParameterError);
  CHECK_THROWS_AS(calip_forward(s, MatF(MatF::Ones(3, 4)), CalipHyper{2, 2, 1, -1, 1}), ParameterError);
  CHECK_THROWS_AS(calip_forward(s, MatF(MatF::Ones(3, 4)), CalipHyper{2, 2, 0, 0, 0}), ParameterError);
  MatF bad = MatF::Ones(3, 4);
  bad(1, 1) = std::nanf("");
  CHECK_THROWS_AS(calip_forward(s, bad, CalipHyper{}), IntegrityError);
}

TEST_CASE("zero pixels are tolerated") {
  const SpatialMap<float> s(2, 2, 4);
  const auto out = calip_forward(s, MatF(MatF::Identity(3, 4)), CalipHyper{});
  CHECK(out.logits_fused.allFinite());
}

TEST_CASE("LogitMask parsing") {
  CHECK(LogitMask::parse("1,2,3") == LogitMask::standard());
  CHECK(LogitMask::parse("1") == LogitMask::clip_only());
  CHECK(LogitMask::parse("1, 4").has(4));
  CHECK(LogitMask::parse("1,2,3,4").to_string() == "1,2,3,4");
  CHECK_THROWS_AS(LogitMask::parse(""), ParameterError);
  CHECK_THROWS_AS(LogitMask::parse("5"), ParameterError);
  CHECK_THROWS_AS(LogitMask::parse("1,,2"), ParameterError);
  CHECK_THROWS_AS(LogitMask::parse("1,1"), ParameterError);
}

TEST_CASE("fuse_logits respects the mask and fourth weight") {
  CalipOutputs<double> o;
  o.logits_clip = MatD::Constant(1, 2, 1.0);
  o.logits_textual = MatD::Constant(1, 2, 2.0);
  o.logits_visual = MatD::Constant(1, 2, 4.0);
  o.logits_both = MatD::Constant(1, 2, 8.0);
  const CalipHyper h{2, 2, 1, 1, 1};
  CHECK(fuse_logits(o, h, LogitMask(0b0001))(0, 0) == 1.0);
  CHECK(fuse_logits(o, h, LogitMask(0b1001, 0.5))(0, 0) == 5.0);
  CHECK(fuse_logits(o, h)(0, 1) == 7.0);
}
