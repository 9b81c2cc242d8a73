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

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>

#include "lmc/csv.hpp"
#include "lmc/encoder.hpp"
#include "lmc/error.hpp"
#include "lmc/trainer.hpp"

// Flat key = value training configuration. Blank lines and lines starting
// with '#' are ignored. Keys:
//
//   batch_size, base_lr, final_lr, warmup_steps, total_steps,
//   anneal_start_step, weight_decay, lambda, seed, center_embeddings,
//   grad_clip_norm, alpha_min, alpha_max, basis_mode (per_patch|dataset),
//   background_intensity
//   depth, heads, embed_dim, token_size, input_side, mlp_ratio,
//   projector_dim, encoder_seed
//
// When total_steps is set and warmup_steps / anneal_start_step are not, they
// default to 5% and 70% of total_steps.

namespace lmc {

struct RunConfig {
  EncoderConfig encoder = EncoderConfig::tiny();
  TrainConfig train = TrainConfig::for_steps(200);
};

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream &in, const std::string &source) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view t = csv::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string_view::npos, ErrorCode::Config,
            source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key(csv::trim(t.substr(0, eq)));
    const std::string value(csv::trim(t.substr(eq + 1)));
    require(!key.empty(), ErrorCode::Config, source + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path &path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Config, "cannot open config file " + path.string());
  return parse_key_values(in, path.string());
}

namespace detail {

template <typename T> T parse_config_number(const std::string &key, const std::string &value) {
  T v{};
  const auto *end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  require(ec == std::errc() && ptr == end, ErrorCode::Config,
          "invalid value '" + value + "' for config key '" + key + "'");
  return v;
}

inline bool parse_config_bool(const std::string &key, const std::string &value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error(ErrorCode::Config, "invalid boolean '" + value + "' for config key '" + key + "'");
}

} // namespace detail

/// Applies `kv` on top of `cfg`. Unknown keys are rejected by name.
inline void apply_key_values(RunConfig &cfg, const KeyValues &kv) {
  using detail::parse_config_number;
  bool warmup_set = false;
  bool anneal_set = false;
  for (const auto &[key, value] : kv) {
    auto sz = [&] { return parse_config_number<std::size_t>(key, value); };
    auto real = [&] { return parse_config_number<double>(key, value); };
    auto integer = [&] { return parse_config_number<int>(key, value); };
    auto u64 = [&] { return parse_config_number<std::uint64_t>(key, value); };
    TrainConfig &t = cfg.train;
    EncoderConfig &e = cfg.encoder;
    if (key == "batch_size") t.batch_size = sz();
    else if (key == "base_lr") t.base_lr = real();
    else if (key == "final_lr") t.final_lr = real();
    else if (key == "warmup_steps") { t.warmup_steps = sz(); warmup_set = true; }
    else if (key == "total_steps") t.total_steps = sz();
    else if (key == "anneal_start_step") { t.anneal_start_step = sz(); anneal_set = true; }
    else if (key == "weight_decay") t.weight_decay = real();
    else if (key == "lambda") t.lambda = real();
    else if (key == "seed") t.seed = u64();
    else if (key == "center_embeddings") t.center_embeddings = detail::parse_config_bool(key, value);
    else if (key == "grad_clip_norm") t.grad_clip_norm = real();
    else if (key == "alpha_min") t.range.alpha_min = real();
    else if (key == "alpha_max") t.range.alpha_max = real();
    else if (key == "background_intensity") t.background_intensity = real();
    else if (key == "basis_mode") {
      if (value == "per_patch") t.basis_mode = BasisMode::PerPatch;
      else if (value == "dataset") t.basis_mode = BasisMode::Dataset;
      else throw Error(ErrorCode::Config, "invalid basis_mode '" + value + "' (per_patch|dataset)");
    }
    else if (key == "depth") e.depth = integer();
    else if (key == "heads") e.heads = integer();
    else if (key == "embed_dim") e.embed_dim = integer();
    else if (key == "token_size") e.token_size = integer();
    else if (key == "input_side") e.input_side = integer();
    else if (key == "mlp_ratio") e.mlp_ratio = integer();
    else if (key == "projector_dim") e.projector_dim = integer();
    else if (key == "encoder_seed") e.seed = u64();
    else throw Error(ErrorCode::Config, "unknown config key '" + key + "'");
  }
  if (kv.count("total_steps")) {
    const TrainConfig d = TrainConfig::for_steps(cfg.train.total_steps);
    if (!warmup_set) cfg.train.warmup_steps = d.warmup_steps;
    if (!anneal_set) cfg.train.anneal_start_step = d.anneal_start_step;
  }
}

inline void validate_run_config(const RunConfig &cfg) {
  try {
    cfg.encoder.validate();
    cfg.train.validate();
  } catch (const Error &e) {
    throw Error(ErrorCode::Config, e.what());
  }
}

inline void print_run_config(std::ostream &os, const RunConfig &cfg) {
  const TrainConfig &t = cfg.train;
  const EncoderConfig &e = cfg.encoder;
  os << "batch_size = " << t.batch_size << '\n'
     << "base_lr = " << csv::format_double(t.base_lr) << '\n'
     << "final_lr = " << csv::format_double(t.final_lr) << '\n'
     << "warmup_steps = " << t.warmup_steps << '\n'
     << "total_steps = " << t.total_steps << '\n'
     << "anneal_start_step = " << t.anneal_start_step << '\n'
     << "weight_decay = " << csv::format_double(t.weight_decay) << '\n'
     << "lambda = " << csv::format_double(t.lambda) << '\n'
     << "seed = " << t.seed << '\n'
     << "center_embeddings = " << (t.center_embeddings ? "true" : "false") << '\n'
     << "grad_clip_norm = " << csv::format_double(t.grad_clip_norm) << '\n'
     << "alpha_min = " << csv::format_double(t.range.alpha_min) << '\n'
     << "alpha_max = " << csv::format_double(t.range.alpha_max) << '\n'
     << "basis_mode = " << (t.basis_mode == BasisMode::Dataset ? "dataset" : "per_patch") << '\n'
     << "background_intensity = " << csv::format_double(t.background_intensity) << '\n'
     << "depth = " << e.depth << '\n'
     << "heads = " << e.heads << '\n'
     << "embed_dim = " << e.embed_dim << '\n'
     << "token_size = " << e.token_size << '\n'
     << "input_side = " << e.input_side << '\n'
     << "mlp_ratio = " << e.mlp_ratio << '\n'
     << "projector_dim = " << e.projector_dim << '\n'
     << "encoder_seed = " << e.seed << '\n';
}

} // namespace lmc
