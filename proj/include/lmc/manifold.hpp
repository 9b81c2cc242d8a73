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
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "lmc/csv.hpp"
#include "lmc/error.hpp"
#include "lmc/image.hpp"
#include "lmc/image_io.hpp"
#include "lmc/rng.hpp"
#include "lmc/stain.hpp"

namespace lmc {

struct AugmentationRange {
  double alpha_min = 0.5;
  double alpha_max = 2.0;

  void validate() const {
    require(alpha_min > 0.0 && alpha_min <= alpha_max, ErrorCode::InvalidArgument,
            "augmentation range requires 0 < alpha_min <= alpha_max");
  }

  friend bool operator==(const AugmentationRange &, const AugmentationRange &) = default;
};

struct StainAlphas {
  double h = 1.0;
  double e = 1.0;

  friend bool operator==(const StainAlphas &, const StainAlphas &) = default;
};

struct ViewPair {
  RgbPatch x1;
  RgbPatch x2;
  std::string source_id;
  StainAlphas alphas1;
  StainAlphas alphas2;
};

struct PatchItem {
  std::string id;
  RgbPatch patch;
  std::optional<int> label;
};

struct PatchDataset {
  std::vector<PatchItem> items;
  int patch_size = 256;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
};

inline StainAlphas sample_alphas(Rng &rng, const AugmentationRange &range) {
  range.validate();
  StainAlphas a;
  a.h = uniform(rng, range.alpha_min, range.alpha_max);
  a.e = uniform(rng, range.alpha_min, range.alpha_max);
  return a;
}

inline ViewPair make_view_pair(const RgbPatch &patch, const StainBasis &basis, Rng &rng,
                               const AugmentationRange &range, std::string source_id = {},
                               double background_intensity = 255.0) {
  ViewPair vp;
  vp.source_id = std::move(source_id);
  vp.alphas1 = sample_alphas(rng, range);
  vp.alphas2 = sample_alphas(rng, range);
  vp.x1 = augment(patch, basis, vp.alphas1.h, vp.alphas1.e, background_intensity);
  vp.x2 = augment(patch, basis, vp.alphas2.h, vp.alphas2.e, background_intensity);
  return vp;
}

// ---------------------------------------------------------------- labels

inline constexpr const char *kLabelFile = "labels.csv";

inline std::map<std::string, int> read_labels(const std::filesystem::path &path) {
  const csv::Table t = csv::read(path);
  require(t.header.size() == 2, ErrorCode::Format, "label file needs columns identifier,label");
  std::map<std::string, int> labels;
  for (const auto &row : t.rows)
    labels[row[0]] = static_cast<int>(csv::parse_int(row[1], path.string()));
  return labels;
}

inline void write_labels(const std::filesystem::path &path, const PatchDataset &ds) {
  csv::Table t;
  t.header = {"identifier", "label"};
  for (const auto &item : ds.items)
    if (item.label) t.rows.push_back({item.id, std::to_string(*item.label)});
  csv::write(path, t);
}

// ---------------------------------------------------------------- loading

/// Loads every PNG/PPM under `root` in lexicographic filename order. Files of
/// the wrong size or that fail to decode are reported to `warnings` and
/// skipped. A sidecar labels.csv, when present, attaches class labels.
inline PatchDataset load_patch_dataset(const std::filesystem::path &root, int patch_size,
                                       std::ostream *warnings = nullptr) {
  namespace fs = std::filesystem;
  require(patch_size > 0, ErrorCode::InvalidArgument, "patch_size must be positive");
  require(fs::is_directory(root), ErrorCode::Io, "not a directory: " + root.string());

  std::vector<fs::path> files;
  for (const auto &entry : fs::directory_iterator(root))
    if (entry.is_regular_file() && io::is_image_path(entry.path())) files.push_back(entry.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path &a, const fs::path &b) { return a.filename().string() < b.filename().string(); });

  std::map<std::string, int> labels;
  if (fs::exists(root / kLabelFile)) labels = read_labels(root / kLabelFile);

  PatchDataset ds;
  ds.patch_size = patch_size;
  std::set<std::string> seen;
  for (const auto &file : files) {
    const std::string id = file.stem().string();
    if (seen.count(id)) {
      if (warnings) *warnings << "warning: duplicate identifier '" << id << "', skipping " << file.string() << '\n';
      continue;
    }
    RgbPatch patch;
    try {
      patch = io::read_image(file);
    } catch (const Error &err) {
      if (warnings) *warnings << "warning: skipping " << file.string() << ": " << err.what() << '\n';
      continue;
    }
    if (patch.width() != patch_size || patch.height() != patch_size) {
      if (warnings)
        *warnings << "warning: skipping " << file.string() << ": size " << patch.width() << "x"
                  << patch.height() << " != " << patch_size << "x" << patch_size << '\n';
      continue;
    }
    seen.insert(id);
    PatchItem item{id, std::move(patch), std::nullopt};
    if (auto it = labels.find(id); it != labels.end()) item.label = it->second;
    ds.items.push_back(std::move(item));
  }
  require(!ds.empty(), ErrorCode::EmptyDataset, "no valid patches in " + root.string());
  return ds;
}

inline void write_patch_dataset(const std::filesystem::path &root, const PatchDataset &ds,
                                const std::string &extension = ".png") {
  std::filesystem::create_directories(root);
  for (const auto &item : ds.items) io::write_image(root / (item.id + extension), item.patch);
  if (std::any_of(ds.items.begin(), ds.items.end(), [](const PatchItem &i) { return i.label.has_value(); }))
    write_labels(root / kLabelFile, ds);
}

// ---------------------------------------------------------------- synthesis

struct SyntheticPatchSpec {
  int blob_count = 0;
  double blob_radius = 0.0;
};

/// Class k draws 2(k+1)^2 nuclei of radius r0/(k+1), so every class covers
/// the same expected nuclear area and differs only in spatial texture.
inline SyntheticPatchSpec synthetic_class_spec(int label, int patch_size) {
  const int k = label + 1;
  return {2 * k * k, 0.16 * patch_size / k};
}

inline ConcentrationMap synthesize_concentrations(Rng &rng, int patch_size, int label) {
  const SyntheticPatchSpec spec = synthetic_class_spec(label, patch_size);
  const auto n = static_cast<Eigen::Index>(patch_size) * patch_size;
  ConcentrationMap conc;
  conc.width = conc.height = patch_size;
  conc.h = Eigen::VectorXd::Constant(n, 0.05);
  conc.e = Eigen::VectorXd::Zero(n);

  // Smooth eosin background from a few random low-frequency waves.
  const double e_base = uniform(rng, 0.35, 0.5);
  const double fx = uniform(rng, 0.5, 2.0) * 6.283185307179586 / patch_size;
  const double fy = uniform(rng, 0.5, 2.0) * 6.283185307179586 / patch_size;
  const double ph = uniform(rng, 0.0, 6.283185307179586);
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x)
      conc.e(static_cast<Eigen::Index>(y) * patch_size + x) =
          e_base * (1.0 + 0.25 * std::sin(fx * x + fy * y + ph));

  std::vector<double> nuclei(static_cast<std::size_t>(n), 0.0);
  for (int b = 0; b < spec.blob_count; ++b) {
    const double cx = uniform(rng, 0.0, patch_size);
    const double cy = uniform(rng, 0.0, patch_size);
    const double r = spec.blob_radius * uniform(rng, 0.85, 1.15);
    const double depth = uniform(rng, 0.9, 1.3);
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        // Soft-edged disc, one pixel transition band.
        const double w = std::clamp(r + 0.5 - d, 0.0, 1.0);
        auto &cell = nuclei[static_cast<std::size_t>(y) * patch_size + x];
        cell = std::max(cell, w * depth);
      }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double nuc = nuclei[static_cast<std::size_t>(i)];
    conc.h(i) += nuc + uniform(rng, 0.0, 0.04);
    conc.e(i) = conc.e(i) * (1.0 - 0.6 * std::min(nuc, 1.0)) + uniform(rng, 0.0, 0.04);
  }
  return conc;
}

/// Deterministic labelled dataset of blob-textured patches rendered through
/// `basis`. Labels cycle 0..class_count-1 so classes are balanced.
inline PatchDataset generate_synthetic_dataset(std::uint64_t seed, int n, int patch_size,
                                               const StainBasis &basis, int class_count,
                                               const std::string &id_prefix = "synth") {
  require(n > 0, ErrorCode::InvalidArgument, "synthetic dataset size must be positive");
  require(class_count >= 1, ErrorCode::InvalidArgument, "class_count must be at least 1");
  require(patch_size >= 4, ErrorCode::InvalidArgument, "patch_size too small");
  PatchDataset ds;
  ds.patch_size = patch_size;
  ds.items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%06d", id_prefix.c_str(), i);
    Rng rng(derive_seed(seed, 0x5354u, static_cast<std::uint64_t>(i)));
    const int label = i % class_count;
    ds.items.push_back({id, reconstruct(synthesize_concentrations(rng, patch_size, label), basis),
                        label});
  }
  return ds;
}

// ---------------------------------------------------------------- bases

enum class BasisMode { PerPatch, Dataset };

/// Stain basis per dataset item; std::nullopt marks patches with no usable
/// stain manifold (background-only or single-stain).
inline std::vector<std::optional<StainBasis>>
estimate_dataset_bases(const PatchDataset &ds, BasisMode mode, const StainEstimationConfig &cfg = {}) {
  std::vector<std::optional<StainBasis>> out(ds.size());
  if (mode == BasisMode::PerPatch) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      try {
        out[i] = estimate_stain_basis(rgb_to_od(ds.items[i].patch, cfg.background_intensity), cfg);
      } catch (const Error &err) {
        if (err.code() != ErrorCode::InsufficientTissue && err.code() != ErrorCode::DegenerateStains)
          throw;
      }
    }
    return out;
  }
  // Pool at most ~1M pixels, taking every k-th pixel of every patch.
  std::size_t total = 0;
  for (const auto &item : ds.items) total += item.patch.pixel_count();
  const std::size_t stride = std::max<std::size_t>(1, total / 1000000);
  OdPatch pooled;
  pooled.background_intensity = cfg.background_intensity;
  std::vector<Eigen::RowVector3d> rows;
  for (const auto &item : ds.items) {
    const OdPatch od = rgb_to_od(item.patch, cfg.background_intensity);
    for (Eigen::Index r = 0; r < od.od.rows(); r += static_cast<Eigen::Index>(stride))
      rows.push_back(od.od.row(r));
  }
  pooled.od.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) pooled.od.row(static_cast<Eigen::Index>(i)) = rows[i];
  pooled.width = static_cast<int>(rows.size());
  pooled.height = 1;
  const StainBasis shared = estimate_stain_basis(pooled, cfg);
  for (auto &b : out) b = shared;
  return out;
}

// ---------------------------------------------------------------- manifest

struct ManifestRow {
  std::string id;
  StainAlphas alphas1;
  std::optional<StainAlphas> alphas2; // empty columns for single-view output
};

inline void write_manifest(const std::filesystem::path &path, const std::vector<ManifestRow> &rows) {
  csv::Table t;
  t.header = {"identifier", "alpha_h1", "alpha_e1", "alpha_h2", "alpha_e2"};
  for (const auto &r : rows)
    t.rows.push_back({r.id, csv::format_double(r.alphas1.h), csv::format_double(r.alphas1.e),
                      r.alphas2 ? csv::format_double(r.alphas2->h) : "",
                      r.alphas2 ? csv::format_double(r.alphas2->e) : ""});
  csv::write(path, t);
}

} // namespace lmc
