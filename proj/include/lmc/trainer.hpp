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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lmc/checkpoint.hpp"
#include "lmc/csv.hpp"
#include "lmc/encoder.hpp"
#include "lmc/error.hpp"
#include "lmc/loss.hpp"
#include "lmc/manifold.hpp"
#include "lmc/rng.hpp"
#include "lmc/stain.hpp"

namespace lmc {

struct TrainConfig {
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double final_lr = 1e-7;
  std::size_t warmup_steps = 50;
  std::size_t total_steps = 1000;
  std::size_t anneal_start_step = 700;
  double weight_decay = 0.01;
  double lambda = kDefaultLambda;
  std::uint64_t seed = 0;
  bool center_embeddings = true; // false gives the raw second-moment form
  double grad_clip_norm = 0.0; // 0 disables clipping
  AugmentationRange range;
  BasisMode basis_mode = BasisMode::PerPatch;
  double background_intensity = 255.0;

  /// Warmup over the first 5% of steps, cosine anneal over the last 30%.
  static TrainConfig for_steps(std::size_t total) {
    TrainConfig c;
    c.total_steps = total;
    c.warmup_steps = static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(total)));
    c.anneal_start_step = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(total)));
    return c;
  }

  void validate() const {
    require(warmup_steps <= anneal_start_step && anneal_start_step <= total_steps, ErrorCode::InvalidArgument,
            "schedule requires warmup_steps <= anneal_start_step <= total_steps");
    require(base_lr >= 0.0 && final_lr >= 0.0 && final_lr <= base_lr, ErrorCode::InvalidArgument,
            "learning rates require 0 <= final_lr <= base_lr");
    require(batch_size >= 2, ErrorCode::InvalidArgument, "batch_size must be >= 2");
    require(weight_decay >= 0.0, ErrorCode::InvalidArgument, "weight_decay must be >= 0");
    require(lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be >= 0");
    require(grad_clip_norm >= 0.0, ErrorCode::InvalidArgument, "grad_clip_norm must be >= 0");
    range.validate();
  }

  friend bool operator==(const TrainConfig &, const TrainConfig &) = default;
};

/// Linear warmup from 0, constant base rate, cosine decay to final_lr.
inline double lr_at(std::size_t step, const TrainConfig &cfg) {
  require(step <= cfg.total_steps, ErrorCode::InvalidArgument,
          "step " + std::to_string(step) + " beyond total_steps " + std::to_string(cfg.total_steps));
  if (step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step <= cfg.anneal_start_step || cfg.total_steps == cfg.anneal_start_step) return cfg.base_lr;
  const double t = static_cast<double>(step - cfg.anneal_start_step) /
                   static_cast<double>(cfg.total_steps - cfg.anneal_start_step);
  return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------- AdamW

struct AdamWConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  EncoderParams m;
  EncoderParams v;
  std::uint64_t step = 0;
};

inline OptimizerState make_optimizer_state(const EncoderParams &params) {
  return {zeros_like(params), zeros_like(params), 0};
}

/// Decoupled weight decay (theta -= lr*wd*theta) followed by the
/// bias-corrected Adam update. Parameters are untouched if any gradient is
/// non-finite.
inline void adamw_step(EncoderParams &params, const EncoderParams &grads, OptimizerState &state, double lr,
                       double weight_decay, const AdamWConstants &k = {}) {
  require(lr >= 0.0, ErrorCode::InvalidArgument, "learning rate must be >= 0");
  auto p = tensor_refs(params);
  const auto g = tensor_refs(grads);
  auto m = tensor_refs(state.m);
  auto v = tensor_refs(state.v);
  require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(), ErrorCode::ShapeMismatch,
          "optimizer state does not mirror parameters");
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(g[i].second->rows() == p[i].second->rows() && g[i].second->cols() == p[i].second->cols(),
            ErrorCode::ShapeMismatch, "gradient shape mismatch for " + p[i].first);
    require(g[i].second->allFinite(), ErrorCode::NonFinite, "non-finite gradient in " + p[i].first);
  }

  state.step += 1;
  const auto t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(k.beta1, t);
  const double bc2 = 1.0 - std::pow(k.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Mat &theta = *p[i].second;
    const Mat &grad = *g[i].second;
    Mat &m1 = *m[i].second;
    Mat &m2 = *v[i].second;
    theta -= lr * weight_decay * theta;
    m1 = k.beta1 * m1 + (1.0 - k.beta1) * grad;
    m2 = k.beta2 * m2 + (1.0 - k.beta2) * grad.cwiseProduct(grad);
    theta.array() -= lr * (m1.array() / bc1) / ((m2.array() / bc2).sqrt() + k.epsilon);
  }
}

// ---------------------------------------------------------------- logging

struct LossLogRow {
  std::size_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;

  friend bool operator==(const LossLogRow &a, const LossLogRow &b) {
    return a.step == b.step && a.lr == b.lr && a.loss.invariance == b.loss.invariance &&
           a.loss.redundancy == b.loss.redundancy && a.loss.total == b.loss.total;
  }
};

inline void write_loss_log(const std::filesystem::path &path, const std::vector<LossLogRow> &rows) {
  csv::Table t;
  t.header = {"step", "invariance", "redundancy", "total", "lr"};
  for (const auto &r : rows)
    t.rows.push_back({std::to_string(r.step), csv::format_double(r.loss.invariance),
                      csv::format_double(r.loss.redundancy), csv::format_double(r.loss.total),
                      csv::format_double(r.lr)});
  csv::write(path, t);
}

// ---------------------------------------------------------------- checkpoint

struct Checkpoint {
  EncoderConfig encoder_config;
  EncoderParams params;
  OptimizerState optimizer;
  TrainConfig train_config;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  std::vector<std::uint64_t> order;
  std::string rng_state;
  std::uint64_t dataset_fingerprint = 0;
};

inline std::uint64_t dataset_fingerprint(const PatchDataset &ds) {
  std::uint64_t h = derive_seed(ds.size(), static_cast<std::uint64_t>(ds.patch_size));
  for (const auto &item : ds.items) h = derive_seed(h, fnv1a(item.id));
  return h;
}

namespace ckpt {

inline void write_train_config(Writer &w, const TrainConfig &c) {
  w.u64(c.batch_size);
  w.f64(c.base_lr);
  w.f64(c.final_lr);
  w.u64(c.warmup_steps);
  w.u64(c.total_steps);
  w.u64(c.anneal_start_step);
  w.f64(c.weight_decay);
  w.f64(c.lambda);
  w.u64(c.seed);
  w.u32(c.center_embeddings ? 1u : 0u);
  w.f64(c.grad_clip_norm);
  w.f64(c.range.alpha_min);
  w.f64(c.range.alpha_max);
  w.u32(c.basis_mode == BasisMode::Dataset ? 1u : 0u);
  w.f64(c.background_intensity);
}

inline TrainConfig read_train_config(Reader &r) {
  TrainConfig c;
  c.batch_size = r.u64();
  c.base_lr = r.f64();
  c.final_lr = r.f64();
  c.warmup_steps = r.u64();
  c.total_steps = r.u64();
  c.anneal_start_step = r.u64();
  c.weight_decay = r.f64();
  c.lambda = r.f64();
  c.seed = r.u64();
  c.center_embeddings = r.u32() != 0;
  c.grad_clip_norm = r.f64();
  c.range.alpha_min = r.f64();
  c.range.alpha_max = r.f64();
  c.basis_mode = r.u32() != 0 ? BasisMode::Dataset : BasisMode::PerPatch;
  c.background_intensity = r.f64();
  return c;
}

} // namespace ckpt

inline void save_checkpoint(const std::filesystem::path &path, const Checkpoint &c) {
  ckpt::Writer w;
  ckpt::write_header(w, ckpt::kFlagTrainer);
  ckpt::write_encoder_config(w, c.encoder_config);
  ckpt::write_tensors(w, c.params);
  ckpt::write_train_config(w, c.train_config);
  w.u64(c.step);
  w.u64(c.epoch);
  w.u64(c.cursor);
  w.u64(c.dataset_fingerprint);
  w.u32(static_cast<std::uint32_t>(c.order.size()));
  for (auto idx : c.order) w.u64(idx);
  w.str(c.rng_state);
  w.u64(c.optimizer.step);
  ckpt::write_tensors(w, c.optimizer.m);
  ckpt::write_tensors(w, c.optimizer.v);
  w.bytes(ckpt::kEndMarker);
  ckpt::write_file(path, w.buffer());
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  ckpt::Reader r(ckpt::read_file(path));
  const std::uint32_t flags = ckpt::read_header(r);
  require((flags & ckpt::kFlagTrainer) != 0, ErrorCode::Format,
          "checkpoint has no trainer state (encoder-only file): " + path.string());
  Checkpoint c;
  c.encoder_config = ckpt::read_encoder_config(r);
  c.params = zero_params(c.encoder_config);
  ckpt::read_tensors(r, c.params);
  c.train_config = ckpt::read_train_config(r);
  c.step = r.u64();
  c.epoch = r.u64();
  c.cursor = r.u64();
  c.dataset_fingerprint = r.u64();
  c.order.resize(r.u32());
  for (auto &idx : c.order) idx = r.u64();
  c.rng_state = r.str();
  c.optimizer = make_optimizer_state(c.params);
  c.optimizer.step = r.u64();
  ckpt::read_tensors(r, c.optimizer.m);
  ckpt::read_tensors(r, c.optimizer.v);
  require(r.bytes(ckpt::kEndMarker.size()) == ckpt::kEndMarker, ErrorCode::Format,
          "missing checkpoint end marker");
  require(r.at_end(), ErrorCode::Format, "trailing bytes after checkpoint end marker");
  return c;
}

// ---------------------------------------------------------------- trainer

inline double global_norm(const EncoderParams &g) {
  double sq = 0.0;
  for_each_tensor(g, [&](const std::string &, const Mat &m) { sq += m.squaredNorm(); });
  return std::sqrt(sq);
}

/// Owns parameters and optimizer state for one training run. Steps are
/// strictly sequential; view generation for a step depends only on
/// (seed, step, patch identifier), never on wall clock or thread timing.
class Trainer {
public:
  Trainer(const PatchDataset &dataset, const EncoderConfig &encoder_config, const TrainConfig &config,
          std::ostream *progress = nullptr)
      : dataset_(&dataset), encoder_config_(encoder_config), config_(config), progress_(progress) {
    encoder_config_.validate();
    config_.validate();
    params_ = init_params(encoder_config_);
    optimizer_ = make_optimizer_state(params_);
    shuffle_rng_ = Rng(derive_seed(config_.seed, 0x5348u));
    prepare_dataset();
    reshuffle();
  }

  Trainer(const PatchDataset &dataset, Checkpoint ckpt, std::ostream *progress = nullptr)
      : dataset_(&dataset), encoder_config_(ckpt.encoder_config), config_(ckpt.train_config),
        progress_(progress) {
    encoder_config_.validate();
    config_.validate();
    require(ckpt.dataset_fingerprint == dataset_fingerprint(dataset), ErrorCode::InvalidArgument,
            "checkpoint was written for a different dataset");
    params_ = std::move(ckpt.params);
    optimizer_ = std::move(ckpt.optimizer);
    step_ = ckpt.step;
    epoch_ = ckpt.epoch;
    cursor_ = ckpt.cursor;
    order_ = std::move(ckpt.order);
    shuffle_rng_ = deserialize_rng(ckpt.rng_state);
    prepare_dataset();
  }

  bool done() const noexcept { return step_ >= config_.total_steps; }
  std::size_t current_step() const noexcept { return step_; }
  std::size_t excluded_count() const noexcept { return dataset_->size() - usable_.size(); }

  /// Runs one optimization step and returns its log row.
  LossLogRow step() {
    require(!done(), ErrorCode::InvalidArgument, "training already reached total_steps");
    const std::size_t b = config_.batch_size;
    if (cursor_ + b > order_.size()) {
      ++epoch_;
      reshuffle();
    }

    std::vector<RgbPatch> view1, view2;
    view1.reserve(b);
    view2.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      const auto idx = static_cast<std::size_t>(order_[cursor_ + i]);
      const PatchItem &item = dataset_->items[idx];
      Rng rng(derive_seed(config_.seed, 0x5649u, step_, fnv1a(item.id)));
      ViewPair vp = make_view_pair(item.patch, *bases_[idx], rng, config_.range, item.id,
                                   config_.background_intensity);
      view1.push_back(std::move(vp.x1));
      view2.push_back(std::move(vp.x2));
    }
    cursor_ += b;

    const EncoderTape tape1(encoder_config_, params_, view1);
    const EncoderTape tape2(encoder_config_, params_, view2);
    const CorrelationOptions opts{1e-12, config_.center_embeddings};
    const LossGradients lg = loss_gradients(tape1.embeddings(), tape2.embeddings(), config_.lambda, opts);
    require(std::isfinite(lg.breakdown.total), ErrorCode::NonFinite,
            "non-finite loss at step " + std::to_string(step_));

    EncoderParams grads = zeros_like(params_);
    tape1.backward(lg.dz1, grads);
    tape2.backward(lg.dz2, grads);
    if (config_.grad_clip_norm > 0.0) {
      const double n = global_norm(grads);
      if (n > config_.grad_clip_norm)
        for_each_tensor(grads, [&](const std::string &, Mat &m) { m *= config_.grad_clip_norm / n; });
    }

    const double lr = lr_at(step_, config_);
    try {
      adamw_step(params_, grads, optimizer_, lr, config_.weight_decay);
    } catch (const Error &e) {
      throw Error(e.code(), "step " + std::to_string(step_) + ": " + e.what());
    }

    LossLogRow row{step_, lg.breakdown, lr};
    log_.push_back(row);
    if (progress_ && (step_ % 10 == 0 || step_ + 1 == config_.total_steps))
      *progress_ << "step " << step_ << " loss " << row.loss.total << " (inv " << row.loss.invariance
                 << ", red " << row.loss.redundancy << ") lr " << lr << '\n';
    ++step_;
    return row;
  }

  /// Steps until `until` (clamped to total_steps).
  void run_until(std::size_t until) {
    until = std::min(until, config_.total_steps);
    while (step_ < until) step();
  }

  void run() { run_until(config_.total_steps); }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.encoder_config = encoder_config_;
    c.params = params_;
    c.optimizer = optimizer_;
    c.train_config = config_;
    c.step = step_;
    c.epoch = epoch_;
    c.cursor = cursor_;
    c.order = order_;
    c.rng_state = serialize_rng(shuffle_rng_);
    c.dataset_fingerprint = dataset_fingerprint(*dataset_);
    return c;
  }

  const EncoderParams &params() const noexcept { return params_; }
  const EncoderConfig &encoder_config() const noexcept { return encoder_config_; }
  const TrainConfig &config() const noexcept { return config_; }
  const std::vector<LossLogRow> &log() const noexcept { return log_; }

private:
  void prepare_dataset() {
    require(!dataset_->empty(), ErrorCode::EmptyDataset, "training dataset is empty");
    StainEstimationConfig est;
    est.background_intensity = config_.background_intensity;
    bases_ = estimate_dataset_bases(*dataset_, config_.basis_mode, est);
    usable_.clear();
    for (std::size_t i = 0; i < bases_.size(); ++i)
      if (bases_[i]) usable_.push_back(i);
    if (progress_ && excluded_count() > 0)
      *progress_ << "excluded " << excluded_count() << " patches without a usable stain basis\n";
    require(usable_.size() >= config_.batch_size, ErrorCode::EmptyDataset,
            "only " + std::to_string(usable_.size()) + " usable patches for batch size " +
                std::to_string(config_.batch_size));
  }

  void reshuffle() {
    order_.assign(usable_.begin(), usable_.end());
    shuffle(order_, shuffle_rng_);
    cursor_ = 0;
  }

  const PatchDataset *dataset_;
  EncoderConfig encoder_config_;
  TrainConfig config_;
  std::ostream *progress_;
  EncoderParams params_;
  OptimizerState optimizer_;
  Rng shuffle_rng_;
  std::vector<std::optional<StainBasis>> bases_;
  std::vector<std::size_t> usable_;
  std::vector<std::uint64_t> order_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<LossLogRow> log_;
};

struct TrainResult {
  EncoderParams params;
  std::vector<LossLogRow> log;
};

inline TrainResult train(const PatchDataset &dataset, const EncoderConfig &encoder_config,
                         const TrainConfig &config, std::ostream *progress = nullptr) {
  Trainer t(dataset, encoder_config, config, progress);
  t.run();
  return {t.params(), t.log()};
}

} // namespace lmc
