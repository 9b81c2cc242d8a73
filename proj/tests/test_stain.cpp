/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lmc/lmc.hpp"
#include "support.hpp"

using namespace lmc;

namespace {

RgbPatch uniform_patch(int side, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  RgbPatch p(side, side);
  for (std::size_t i = 0; i < p.pixel_count(); ++i) {
    p.at(i, 0) = r;
    p.at(i, 1) = g;
    p.at(i, 2) = b;
  }
  return p;
}

OdPatch od_from_rows(const std::vector<Eigen::Vector3d> &rows) {
  OdPatch od;
  od.width = static_cast<int>(rows.size());
  od.height = 1;
  od.od.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) od.od.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return od;
}

// Least-squares coefficients of od on {h, e} by Cramer's rule on the normal equations.
Eigen::Vector2d normal_equation_coefficients(const Eigen::Vector3d &od, const StainBasis &b) {
  const double hh = b.h.dot(b.h), he = b.h.dot(b.e), ee = b.e.dot(b.e);
  const double ho = b.h.dot(od), eo = b.e.dot(od);
  const double det = hh * ee - he * he;
  return {(ho * ee - he * eo) / det, (hh * eo - he * ho) / det};
}

} // namespace

TEST(RgbToOd, BackgroundIsZeroDensity) {
  const OdPatch od = rgb_to_od(uniform_patch(2, 255, 255, 255));
  EXPECT_EQ(od.od.cwiseAbs().maxCoeff(), 0.0);
}

TEST(RgbToOd, KnownIntensity) {
  const OdPatch od = rgb_to_od(uniform_patch(1, 26, 26, 26));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(od.od(0, c), std::log10(255.0 / 26.0), 1e-12);
}

TEST(RgbToOd, ZeroIntensityClampsToOne) {
  const OdPatch od = rgb_to_od(uniform_patch(1, 0, 0, 0));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(od.od(0, c), 2.4065, 1e-4);
}

TEST(RgbToOd, CustomBackgroundIntensity) {
  const OdPatch od = rgb_to_od(uniform_patch(1, 240, 240, 250), 240.0);
  EXPECT_EQ(od.od(0, 0), 0.0);
  EXPECT_EQ(od.od(0, 2), 0.0);
}

TEST(OdToRgb, ZeroAndUnitDensity) {
  OdPatch od = od_from_rows({Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()});
  const RgbPatch p = od_to_rgb(od);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(p.at(std::size_t{0}, c), 255);
    EXPECT_EQ(p.at(std::size_t{1}, c), 26);
  }
}

TEST(OdToRgb, RoundTripIsExactForAllChannelValues) {
  std::vector<std::uint8_t> data;
  for (int v = 1; v <= 255; ++v)
    for (int c = 0; c < 3; ++c) data.push_back(static_cast<std::uint8_t>(v));
  const RgbPatch p(255, 1, data);
  EXPECT_EQ(od_to_rgb(rgb_to_od(p)), p);
}

TEST(EstimateStainBasis, RecoversGeneratingVectors) {
  const StainBasis truth = StainBasis::conventional();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const StainBasis est = estimate_stain_basis(rgb_to_od(test::in_span_patch(seed, 64, truth, 0.0, 1.5)));
    EXPECT_LT(angle_degrees(est.h, truth.h), 2.0) << "seed " << seed;
    EXPECT_LT(angle_degrees(est.e, truth.e), 2.0) << "seed " << seed;
  }
}

TEST(EstimateStainBasis, OutputIsNonnegativeUnit) {
  const StainBasis est =
      estimate_stain_basis(rgb_to_od(test::in_span_patch(9, 48, StainBasis::conventional())));
  for (const auto *v : {&est.h, &est.e}) {
    EXPECT_NEAR(v->norm(), 1.0, 1e-12);
    EXPECT_GE(v->minCoeff(), 0.0);
  }
}

TEST(EstimateStainBasis, InvariantToPixelOrder) {
  const OdPatch od = rgb_to_od(test::in_span_patch(3, 40, StainBasis::conventional()));
  OdPatch shuffled = od;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(od.od.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  Rng rng(17);
  shuffle(order, rng);
  for (std::size_t i = 0; i < order.size(); ++i) shuffled.od.row(static_cast<Eigen::Index>(i)) = od.od.row(order[i]);
  const StainBasis a = estimate_stain_basis(od);
  const StainBasis b = estimate_stain_basis(shuffled);
  EXPECT_LT((a.h - b.h).norm(), 1e-9);
  EXPECT_LT((a.e - b.e).norm(), 1e-9);
}

TEST(EstimateStainBasis, SinglePureStainIsDegenerate) {
  const StainBasis b = StainBasis::conventional();
  const OdPatch od = od_from_rows(std::vector<Eigen::Vector3d>(100, 0.8 * b.h));
  try {
    estimate_stain_basis(od);
    FAIL() << "expected DegenerateStains";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateStains);
  }
}

TEST(EstimateStainBasis, AllWhiteHasInsufficientTissue) {
  try {
    estimate_stain_basis(rgb_to_od(uniform_patch(16, 255, 255, 255)));
    FAIL() << "expected InsufficientTissue";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientTissue);
  }
}

TEST(Deconvolve, ExactSpanMember) {
  const StainBasis b = StainBasis::conventional();
  const ConcentrationMap c = deconvolve(od_from_rows({2.0 * b.h + 0.5 * b.e, Eigen::Vector3d::Zero()}), b);
  EXPECT_NEAR(c.h(0), 2.0, 1e-9);
  EXPECT_NEAR(c.e(0), 0.5, 1e-9);
  EXPECT_EQ(c.h(1), 0.0);
  EXPECT_EQ(c.e(1), 0.0);
}

TEST(Deconvolve, OffSpanMatchesNormalEquations) {
  const StainBasis b = StainBasis::conventional();
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Vector3d residual(uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2));
    const Eigen::Vector3d od = uniform(rng, 0.5, 1.5) * b.h + uniform(rng, 0.5, 1.5) * b.e + residual;
    const Eigen::Vector2d oracle = normal_equation_coefficients(od, b);
    ASSERT_GT(oracle.minCoeff(), 0.0);
    const ConcentrationMap c = deconvolve(od_from_rows({od}), b);
    EXPECT_NEAR(c.h(0), oracle(0), 1e-12);
    EXPECT_NEAR(c.e(0), oracle(1), 1e-12);
  }
}

TEST(Deconvolve, ProjectionIsIdempotent) {
  const StainBasis b = StainBasis::conventional();
  Rng rng(8);
  std::vector<Eigen::Vector3d> rows;
  for (int i = 0; i < 200; ++i)
    rows.emplace_back(uniform(rng, 0.0, 2.0), uniform(rng, 0.0, 2.0), uniform(rng, 0.0, 2.0));
  const OdPatch once = concentrations_to_od(deconvolve(od_from_rows(rows), b), b);
  const OdPatch twice = concentrations_to_od(deconvolve(once, b), b);
  EXPECT_LT((once.od - twice.od).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Deconvolve, SpanRoundTripBeforeQuantization) {
  const StainBasis b = StainBasis::conventional();
  Rng rng(2);
  const ConcentrationMap c = test::random_concentrations(rng, 16, 0.0, 2.0);
  const OdPatch od = concentrations_to_od(c, b);
  const OdPatch back = concentrations_to_od(deconvolve(od, b), b);
  EXPECT_LT((od.od - back.od).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(ScaleStains, IdentityAndLinearity) {
  Rng rng(4);
  const ConcentrationMap c = test::random_concentrations(rng, 8, 0.0, 1.0);
  const ConcentrationMap same = scale_stains(c, 1.0, 1.0);
  EXPECT_EQ(same.h, c.h);
  EXPECT_EQ(same.e, c.e);
  const ConcentrationMap doubled = scale_stains(c, 2.0, 1.0);
  EXPECT_EQ(doubled.h, 2.0 * c.h);
  EXPECT_EQ(doubled.e, c.e);
}

TEST(ScaleStains, MeanScalesWithAlpha) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const ConcentrationMap c = test::random_concentrations(rng, 8, 0.0, 1.0);
    const double a = uniform(rng, 0.5, 2.0);
    EXPECT_NEAR(scale_stains(c, a, 1.0).h.mean(), a * c.h.mean(), 1e-12);
  }
}

TEST(ScaleStains, RejectsNonPositive) {
  Rng rng(1);
  EXPECT_THROW(scale_stains(test::random_concentrations(rng, 2, 0, 1), 0.0, 1.0), Error);
}

TEST(Reconstruct, ZeroConcentrationIsBackground) {
  ConcentrationMap c;
  c.width = c.height = 4;
  c.h = Eigen::VectorXd::Zero(16);
  c.e = Eigen::VectorXd::Zero(16);
  EXPECT_EQ(reconstruct(c, StainBasis::conventional()), RgbPatch(4, 4, 255));
}

TEST(Augment, IdentityWithinQuantization) {
  const StainBasis b = StainBasis::conventional();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const RgbPatch p = test::in_span_patch(seed, 32, b);
    EXPECT_LE(mean_abs_error(augment(p, b, 1.0, 1.0), p), 2.0);
  }
}

TEST(Augment, DoublingHematoxylinDoublesMeanConcentration) {
  const StainBasis b = StainBasis::conventional();
  const RgbPatch p = test::in_span_patch(11, 32, b, 0.05, 0.8);
  const double before = deconvolve(rgb_to_od(p), b).h.mean();
  const double after = deconvolve(rgb_to_od(augment(p, b, 2.0, 1.0)), b).h.mean();
  EXPECT_NEAR(after / before, 2.0, 0.1);
}

TEST(Augment, RangeExtremesStayValid) {
  const StainBasis b = StainBasis::conventional();
  const RgbPatch p = test::in_span_patch(12, 16, b);
  for (double ah : {0.5, 2.0})
    for (double ae : {0.5, 2.0}) {
      const RgbPatch out = augment(p, b, ah, ae);
      EXPECT_TRUE(out.same_shape(p));
      EXPECT_EQ(out.data().size(), p.data().size());
    }
}

TEST(Augment, InverseScalingRestoresPatch) {
  const StainBasis b = StainBasis::conventional();
  Rng rng(21);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const RgbPatch p = test::in_span_patch(seed, 32, b, 0.05, 0.8);
    const double ah = uniform(rng, 0.5, 2.0), ae = uniform(rng, 0.5, 2.0);
    const RgbPatch back = augment(augment(p, b, ah, ae), b, 1.0 / ah, 1.0 / ae);
    EXPECT_LE(mean_abs_error(back, p), 4.0) << "alphas " << ah << ", " << ae;
  }
}

TEST(Macenko, FixedPointWhenAlreadyOnTarget) {
  const RgbPatch p = test::in_span_patch(31, 48, StainTarget::reference().basis, 0.0, 1.2);
  const StainTarget t = estimate_stain_target(p);
  const RgbPatch out = macenko_normalize_to_target(p, t.basis, {t.max_h, t.max_e});
  EXPECT_LE(mean_abs_error(out, p), 2.0);
}

TEST(Macenko, StainShiftedCopiesConverge) {
  const StainBasis b = StainBasis::conventional();
  const StainTarget target = StainTarget::reference();
  const RgbPatch p = test::in_span_patch(32, 48, b, 0.0, 1.0);
  const RgbPatch a = augment(p, b, 1.4, 0.8);
  const RgbPatch c = augment(p, b, 0.7, 1.3);
  const RgbPatch na = macenko_normalize_to_target(a, target.basis, {target.max_h, target.max_e});
  const RgbPatch nc = macenko_normalize_to_target(c, target.basis, {target.max_h, target.max_e});
  EXPECT_LE(mean_abs_error(na, nc), 4.0);
}

TEST(Macenko, AllWhiteFails) {
  const StainTarget t = StainTarget::reference();
  try {
    macenko_normalize_to_target(uniform_patch(8, 255, 255, 255), t.basis, {t.max_h, t.max_e});
    FAIL() << "expected InsufficientTissue";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientTissue);
  }
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  const auto dir = test::scratch_dir("image_io");
  const RgbPatch p = test::in_span_patch(40, 12, StainBasis::conventional());
  io::write_image(dir / "a.png", p);
  io::write_image(dir / "a.ppm", p);
  EXPECT_EQ(io::read_image(dir / "a.png"), p);
  EXPECT_EQ(io::read_image(dir / "a.ppm"), p);
}

TEST(ImageIo, CorruptFileIsFormatError) {
  const auto dir = test::scratch_dir("image_io_bad");
  { std::ofstream(dir / "bad.png") << "not a png"; }
  EXPECT_THROW(io::read_image(dir / "bad.png"), Error);
}
