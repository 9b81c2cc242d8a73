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

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lmc/error.hpp"
#include "lmc/image.hpp"

namespace lmc {

/// Two unit, nonnegative stain directions in optical-density space.
struct StainBasis {
  Eigen::Vector3d h = Eigen::Vector3d::Zero();
  Eigen::Vector3d e = Eigen::Vector3d::Zero();

  /// The conventional H&E directions used for synthetic data.
  static StainBasis conventional() {
    StainBasis b;
    b.h = Eigen::Vector3d(0.650, 0.704, 0.286).normalized();
    b.e = Eigen::Vector3d(0.072, 0.990, 0.105).normalized();
    return b;
  }
};

/// Per-pixel hematoxylin and eosin concentrations.
struct ConcentrationMap {
  int width = 0;
  int height = 0;
  Eigen::VectorXd h;
  Eigen::VectorXd e;

  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(h.size()); }
};

struct StainEstimationConfig {
  double od_threshold = 0.15;          // tissue filter on the OD Euclidean norm
  double angle_percentile = 1.0;       // robust extremes: p and 100 - p
  double background_intensity = 255.0; // I0
  double min_angle_degrees = 1.0;
  double concentration_percentile = 99.0; // used by target normalization

  void validate() const {
    require(od_threshold > 0.0 && od_threshold < 1.0, ErrorCode::InvalidArgument,
            "od_threshold must lie in (0, 1)");
    require(angle_percentile > 0.0 && angle_percentile < 50.0, ErrorCode::InvalidArgument,
            "angle_percentile must lie in (0, 50)");
    require(background_intensity > 0.0, ErrorCode::InvalidArgument,
            "background intensity must be positive");
    require(min_angle_degrees > 0.0, ErrorCode::InvalidArgument,
            "min_angle_degrees must be positive");
    require(concentration_percentile > 0.0 && concentration_percentile <= 100.0,
            ErrorCode::InvalidArgument, "concentration_percentile must lie in (0, 100]");
  }
};

inline double angle_degrees(const Eigen::Vector3d &a, const Eigen::Vector3d &b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

/// Linear-interpolated percentile (q in [0, 100]); matches numpy's default.
inline double percentile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorCode::InvalidArgument, "percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline void validate_basis(const StainBasis &basis, double min_angle_degrees = 1.0) {
  for (const auto *v : {&basis.h, &basis.e}) {
    require(std::abs(v->norm() - 1.0) <= 1e-9, ErrorCode::InvalidArgument,
            "stain vector is not unit length");
    require(v->minCoeff() >= 0.0, ErrorCode::InvalidArgument, "stain vector has a negative component");
  }
  require(angle_degrees(basis.h, basis.e) >= min_angle_degrees, ErrorCode::DegenerateStains,
          "stain vectors are parallel within the minimum angle");
}

inline OdPatch rgb_to_od(const RgbPatch &patch, double background_intensity = 255.0) {
  require(!patch.empty(), ErrorCode::InvalidArgument, "rgb_to_od: empty patch");
  require(background_intensity > 0.0, ErrorCode::InvalidArgument,
          "rgb_to_od: background intensity must be positive");
  OdPatch out;
  out.width = patch.width();
  out.height = patch.height();
  out.background_intensity = background_intensity;
  out.od.resize(static_cast<Eigen::Index>(patch.pixel_count()), 3);
  for (std::size_t p = 0; p < patch.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      const double value = std::max<double>(patch.at(p, c), 1.0);
      out.od(static_cast<Eigen::Index>(p), c) =
          std::max(0.0, -std::log10(value / background_intensity));
    }
  }
  return out;
}

inline std::uint8_t od_to_intensity(double od, double background_intensity) {
  const double v = std::floor(background_intensity * std::pow(10.0, -od) + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

inline RgbPatch od_to_rgb(const OdPatch &od) {
  require(od.od.allFinite(), ErrorCode::NonFinite, "od_to_rgb: non-finite optical density");
  RgbPatch out(od.width, od.height);
  for (std::size_t p = 0; p < od.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c)
      out.at(p, c) = od_to_intensity(od.od(static_cast<Eigen::Index>(p), c), od.background_intensity);
  return out;
}

namespace detail {

inline Eigen::Vector3d to_nonnegative_unit(Eigen::Vector3d v) {
  if (v.sum() < 0.0) v = -v;
  v = v.cwiseMax(0.0);
  const double n = v.norm();
  require(n > 0.0, ErrorCode::DegenerateStains, "stain direction collapsed to zero");
  return v / n;
}

} // namespace detail

/// Macenko-style estimation: SVD plane of tissue OD, robust angular extremes.
inline StainBasis estimate_stain_basis(const OdPatch &od, const StainEstimationConfig &cfg = {}) {
  cfg.validate();
  std::vector<Eigen::Index> tissue;
  tissue.reserve(od.pixel_count());
  for (Eigen::Index r = 0; r < od.od.rows(); ++r)
    if (od.od.row(r).norm() > cfg.od_threshold) tissue.push_back(r);
  require(tissue.size() >= 2, ErrorCode::InsufficientTissue,
          "fewer than 2 pixels exceed the OD threshold " + std::to_string(cfg.od_threshold));

  Eigen::MatrixXd t(static_cast<Eigen::Index>(tissue.size()), 3);
  for (std::size_t i = 0; i < tissue.size(); ++i)
    t.row(static_cast<Eigen::Index>(i)) = od.od.row(tissue[i]);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(t, Eigen::ComputeThinV);
  Eigen::Vector3d v1 = svd.matrixV().col(0);
  Eigen::Vector3d v2 = svd.matrixV().col(1);

  Eigen::VectorXd t1 = t * v1;
  Eigen::VectorXd t2 = t * v2;
  if (t1.sum() < 0.0) {
    v1 = -v1;
    t1 = -t1;
  }
  if (t2.sum() < 0.0) {
    v2 = -v2;
    t2 = -t2;
  }

  std::vector<double> phi(tissue.size());
  for (std::size_t i = 0; i < phi.size(); ++i)
    phi[i] = std::atan2(t2(static_cast<Eigen::Index>(i)), t1(static_cast<Eigen::Index>(i)));
  const double phi_min = percentile(phi, cfg.angle_percentile);
  const double phi_max = percentile(phi, 100.0 - cfg.angle_percentile);

  const Eigen::Vector3d a =
      detail::to_nonnegative_unit(v1 * std::cos(phi_min) + v2 * std::sin(phi_min));
  const Eigen::Vector3d b =
      detail::to_nonnegative_unit(v1 * std::cos(phi_max) + v2 * std::sin(phi_max));
  require(angle_degrees(a, b) >= cfg.min_angle_degrees, ErrorCode::DegenerateStains,
          "extreme stain directions are parallel");

  StainBasis basis;
  // Hematoxylin absorbs more red light than eosin.
  if (a(0) >= b(0)) {
    basis.h = a;
    basis.e = b;
  } else {
    basis.h = b;
    basis.e = a;
  }
  return basis;
}

/// 2x3 pseudo-inverse of the stain matrix [h e].
inline Eigen::Matrix<double, 2, 3> stain_pseudo_inverse(const StainBasis &basis) {
  Eigen::Matrix<double, 3, 2> m;
  m.col(0) = basis.h;
  m.col(1) = basis.e;
  const Eigen::Matrix2d gram = m.transpose() * m;
  require(std::abs(gram.determinant()) > 1e-12, ErrorCode::DegenerateStains,
          "stain basis Gram matrix is singular");
  return gram.inverse() * m.transpose();
}

inline ConcentrationMap deconvolve(const OdPatch &od, const StainBasis &basis) {
  const Eigen::Matrix<double, 2, 3> pinv = stain_pseudo_inverse(basis);
  ConcentrationMap conc;
  conc.width = od.width;
  conc.height = od.height;
  const Eigen::MatrixXd c = (od.od * pinv.transpose()).cwiseMax(0.0);
  conc.h = c.col(0);
  conc.e = c.col(1);
  return conc;
}

inline ConcentrationMap scale_stains(ConcentrationMap conc, double alpha_h, double alpha_e) {
  require(alpha_h > 0.0 && alpha_e > 0.0, ErrorCode::InvalidArgument,
          "stain scale factors must be positive");
  conc.h *= alpha_h;
  conc.e *= alpha_e;
  return conc;
}

inline OdPatch concentrations_to_od(const ConcentrationMap &conc, const StainBasis &basis,
                                    double background_intensity = 255.0) {
  OdPatch od;
  od.width = conc.width;
  od.height = conc.height;
  od.background_intensity = background_intensity;
  od.od = conc.h * basis.h.transpose() + conc.e * basis.e.transpose();
  return od;
}

inline RgbPatch reconstruct(const ConcentrationMap &conc, const StainBasis &basis,
                            double background_intensity = 255.0) {
  return od_to_rgb(concentrations_to_od(conc, basis, background_intensity));
}

/// Scales the H and E content of a patch by (alpha_h, alpha_e) under `basis`.
inline RgbPatch augment(const RgbPatch &patch, const StainBasis &basis, double alpha_h,
                        double alpha_e, double background_intensity = 255.0) {
  const OdPatch od = rgb_to_od(patch, background_intensity);
  return reconstruct(scale_stains(deconvolve(od, basis), alpha_h, alpha_e), basis,
                     background_intensity);
}

struct StainTarget {
  StainBasis basis;
  double max_h = 0.0;
  double max_e = 0.0;

  /// Widely used Macenko reference appearance.
  static StainTarget reference() {
    StainTarget t;
    t.basis.h = Eigen::Vector3d(0.5626, 0.7201, 0.4062).normalized();
    t.basis.e = Eigen::Vector3d(0.2159, 0.8012, 0.5581).normalized();
    t.max_h = 1.9705;
    t.max_e = 1.0308;
    return t;
  }
};

inline std::pair<double, double> concentration_percentiles(const ConcentrationMap &conc, double q) {
  std::vector<double> h(conc.h.data(), conc.h.data() + conc.h.size());
  std::vector<double> e(conc.e.data(), conc.e.data() + conc.e.size());
  return {percentile(std::move(h), q), percentile(std::move(e), q)};
}

/// Estimates the basis and robust maximum concentrations of a target image.
inline StainTarget estimate_stain_target(const RgbPatch &patch, const StainEstimationConfig &cfg = {}) {
  const OdPatch od = rgb_to_od(patch, cfg.background_intensity);
  StainTarget t;
  t.basis = estimate_stain_basis(od, cfg);
  std::tie(t.max_h, t.max_e) =
      concentration_percentiles(deconvolve(od, t.basis), cfg.concentration_percentile);
  require(t.max_h > 0.0 && t.max_e > 0.0, ErrorCode::DegenerateStains,
          "target has a zero robust maximum concentration");
  return t;
}

/// Classical Macenko normalization of `patch` onto a target appearance.
inline RgbPatch macenko_normalize_to_target(const RgbPatch &patch, const StainBasis &target_basis,
                                            std::pair<double, double> target_max_c,
                                            const StainEstimationConfig &cfg = {}) {
  require(target_max_c.first > 0.0 && target_max_c.second > 0.0, ErrorCode::InvalidArgument,
          "target maximum concentrations must be positive");
  const OdPatch od = rgb_to_od(patch, cfg.background_intensity);
  const StainBasis source = estimate_stain_basis(od, cfg);
  ConcentrationMap conc = deconvolve(od, source);
  const auto [src_h, src_e] = concentration_percentiles(conc, cfg.concentration_percentile);
  require(src_h > 0.0 && src_e > 0.0, ErrorCode::DegenerateStains,
          "source has a zero robust maximum concentration");
  conc.h *= target_max_c.first / src_h;
  conc.e *= target_max_c.second / src_e;
  return reconstruct(conc, target_basis, cfg.background_intensity);
}

} // namespace lmc
