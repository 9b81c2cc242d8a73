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

#include <cstdint>
#include <filesystem>
#include <string>

#include "lmc/lmc.hpp"

namespace lmc::test {

/// Uniform random concentrations in [lo, hi) for both stains.
inline ConcentrationMap random_concentrations(Rng &rng, int side, double lo, double hi) {
  ConcentrationMap c;
  c.width = c.height = side;
  const auto n = static_cast<Eigen::Index>(side) * side;
  c.h.resize(n);
  c.e.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.h(i) = uniform(rng, lo, hi);
    c.e(i) = uniform(rng, lo, hi);
  }
  return c;
}

/// Patch whose optical density lies in span(basis) up to 8-bit quantization.
inline RgbPatch in_span_patch(std::uint64_t seed, int side, const StainBasis &basis, double lo = 0.0,
                              double hi = 1.2) {
  Rng rng(seed);
  return reconstruct(random_concentrations(rng, side, lo, hi), basis);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string &name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lmc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace lmc::test
