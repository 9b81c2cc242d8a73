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
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lmc/error.hpp"
#include "lmc/image.hpp"
#include "lmc/rng.hpp"

namespace lmc {

using Mat = Eigen::MatrixXd;

/// Row per sample, embed_dim (or projector_dim) columns.
using EmbeddingBatch = Eigen::MatrixXd;

struct EncoderConfig {
  int depth = 12;
  int heads = 3;
  int embed_dim = 192;
  int token_size = 16; // side of the square pixel patch behind one token
  int input_side = 256;
  int mlp_ratio = 4;
  int projector_dim = 0; // 0 disables the optional two-layer projector
  std::uint64_t seed = 0;

  /// Tiny configuration used for tests and desk-scale runs.
  static EncoderConfig tiny() {
    EncoderConfig c;
    c.depth = 2;
    c.heads = 1;
    c.embed_dim = 16;
    c.token_size = 8;
    c.input_side = 32;
    return c;
  }

  int grid() const { return input_side / token_size; }
  int tokens() const { return grid() * grid(); }
  int token_features() const { return token_size * token_size * 3; }
  int head_dim() const { return embed_dim / heads; }
  int hidden_dim() const { return embed_dim * mlp_ratio; }
  int output_dim() const { return projector_dim > 0 ? projector_dim : embed_dim; }

  void validate() const {
    require(depth >= 1, ErrorCode::InvalidArgument, "encoder depth must be >= 1");
    require(heads >= 1 && embed_dim >= 1 && embed_dim % heads == 0, ErrorCode::InvalidArgument,
            "embed_dim must be a positive multiple of heads");
    require(token_size >= 1 && input_side >= token_size && input_side % token_size == 0,
            ErrorCode::InvalidArgument, "input_side must be a multiple of token_size");
    require(mlp_ratio >= 1, ErrorCode::InvalidArgument, "mlp_ratio must be >= 1");
    require(projector_dim >= 0, ErrorCode::InvalidArgument, "projector_dim must be >= 0");
  }

  friend bool operator==(const EncoderConfig &, const EncoderConfig &) = default;
};

// ---------------------------------------------------------------- parameters

struct Linear {
  Mat w; // in x out
  Mat b; // 1 x out
};

struct LayerNormParams {
  Mat gamma; // 1 x d
  Mat beta;  // 1 x d
};

struct BlockParams {
  LayerNormParams norm1;
  Linear q, k, v, proj;
  LayerNormParams norm2;
  Linear fc1, fc2;
};

struct EncoderParams {
  Linear patch_embed;
  Mat pos_embed; // tokens x d
  std::vector<BlockParams> blocks;
  LayerNormParams final_norm;
  Linear head;
  Linear proj1, proj2; // empty unless projector_dim > 0

  bool has_projector() const { return proj1.w.size() > 0; }
};

/// Visits every tensor with a stable dotted path. Enumeration order defines
/// the checkpoint layout and the initialization draw order.
template <typename Params, typename Fn> void for_each_tensor(Params &p, Fn &&fn) {
  auto linear = [&](const std::string &name, auto &l) {
    fn(name + ".weight", l.w);
    fn(name + ".bias", l.b);
  };
  auto norm = [&](const std::string &name, auto &n) {
    fn(name + ".gamma", n.gamma);
    fn(name + ".beta", n.beta);
  };
  linear("patch_embed", p.patch_embed);
  fn(std::string("pos_embed"), p.pos_embed);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    auto &b = p.blocks[i];
    norm(pre + "norm1", b.norm1);
    linear(pre + "attn.q", b.q);
    linear(pre + "attn.k", b.k);
    linear(pre + "attn.v", b.v);
    linear(pre + "attn.proj", b.proj);
    norm(pre + "norm2", b.norm2);
    linear(pre + "mlp.fc1", b.fc1);
    linear(pre + "mlp.fc2", b.fc2);
  }
  norm("final_norm", p.final_norm);
  linear("head", p.head);
  if (p.has_projector()) {
    linear("projector.fc1", p.proj1);
    linear("projector.fc2", p.proj2);
  }
}

template <typename Params> auto tensor_refs(Params &p) {
  using Ptr = std::conditional_t<std::is_const_v<Params>, const Mat *, Mat *>;
  std::vector<std::pair<std::string, Ptr>> out;
  for_each_tensor(p, [&](const std::string &path, auto &m) { out.emplace_back(path, &m); });
  return out;
}

inline std::size_t parameter_count(const EncoderParams &p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string &, const Mat &m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

/// Allocates every tensor at its configured shape, filled with zeros.
inline EncoderParams zero_params(const EncoderConfig &cfg) {
  cfg.validate();
  const int d = cfg.embed_dim;
  auto linear = [](int in, int out) { return Linear{Mat::Zero(in, out), Mat::Zero(1, out)}; };
  auto norm = [](int n) { return LayerNormParams{Mat::Zero(1, n), Mat::Zero(1, n)}; };
  EncoderParams p;
  p.patch_embed = linear(cfg.token_features(), d);
  p.pos_embed = Mat::Zero(cfg.tokens(), d);
  p.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (auto &b : p.blocks) {
    b.norm1 = norm(d);
    b.q = linear(d, d);
    b.k = linear(d, d);
    b.v = linear(d, d);
    b.proj = linear(d, d);
    b.norm2 = norm(d);
    b.fc1 = linear(d, cfg.hidden_dim());
    b.fc2 = linear(cfg.hidden_dim(), d);
  }
  p.final_norm = norm(d);
  p.head = linear(d, d);
  if (cfg.projector_dim > 0) {
    p.proj1 = linear(d, cfg.projector_dim);
    p.proj2 = linear(cfg.projector_dim, cfg.projector_dim);
  }
  return p;
}

inline EncoderParams zeros_like(const EncoderParams &p) {
  EncoderParams z = p;
  for_each_tensor(z, [](const std::string &, Mat &m) { m.setZero(); });
  return z;
}

/// Truncated-normal (std 0.02, +-2 sigma) weights and positional embeddings,
/// zero biases, unit normalization scales.
inline EncoderParams init_params(const EncoderConfig &cfg) {
  EncoderParams p = zero_params(cfg);
  Rng rng(derive_seed(cfg.seed, 0x1417u));
  for_each_tensor(p, [&](const std::string &path, Mat &m) {
    const bool is_gamma = path.ends_with(".gamma");
    const bool is_zero = path.ends_with(".bias") || path.ends_with(".beta");
    if (is_gamma) {
      m.setOnes();
    } else if (!is_zero) {
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = truncated_normal(rng, 0.02);
    }
  });
  return p;
}

inline bool all_finite(const EncoderParams &p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string &, const Mat &m) { ok = ok && m.allFinite(); });
  return ok;
}

// ---------------------------------------------------------------- kernels

namespace detail {

inline constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

inline Mat layer_norm(const Mat &x, const LayerNormParams &p, LayerNormCache &cache) {
  const Eigen::Index d = x.cols();
  cache.xhat.resize(x.rows(), d);
  cache.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = centered * inv;
  }
  return (cache.xhat.array().rowwise() * p.gamma.row(0).array()).rowwise() + p.beta.row(0).array();
}

inline Mat layer_norm_backward(const Mat &dy, const LayerNormParams &p, const LayerNormCache &cache,
                               LayerNormParams &grad) {
  grad.gamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  grad.beta += dy.colwise().sum();
  const Mat dxhat = (dy.array().rowwise() * p.gamma.row(0).array()).matrix();
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_dxhat = dxhat.row(r).sum() * inv_d;
    const double mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.inv_std(r) *
                ((dxhat.row(r).array() - mean_dxhat) - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

inline Mat linear(const Mat &x, const Linear &l) {
  return (x * l.w).rowwise() + l.b.row(0);
}

inline Mat linear_backward(const Mat &dy, const Mat &x, const Linear &l, Linear &grad) {
  grad.w.noalias() += x.transpose() * dy;
  grad.b += dy.colwise().sum();
  return dy * l.w.transpose();
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline void softmax_rows(Mat &s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

struct BlockCache {
  LayerNormCache ln1;
  Mat h1, q, k, v;
  std::vector<Mat> attn; // per head, tokens x tokens
  Mat o;
  LayerNormCache ln2;
  Mat h2, pre_act, act;
};

struct ImageCache {
  Mat tokens;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  Mat pooled;
  Mat head_out;
  Mat proj_pre, proj_act;
};

} // namespace detail

/// Flattens an image into one row per token: (py, px, channel) order, pixel
/// values scaled to [0, 1].
inline Mat image_to_tokens(const RgbPatch &img, const EncoderConfig &cfg) {
  require(img.width() == cfg.input_side && img.height() == cfg.input_side, ErrorCode::ShapeMismatch,
          "encoder expects " + std::to_string(cfg.input_side) + "x" + std::to_string(cfg.input_side) +
              " images, got " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
  const int g = cfg.grid();
  const int t = cfg.token_size;
  Mat tokens(cfg.tokens(), cfg.token_features());
  for (int ty = 0; ty < g; ++ty)
    for (int tx = 0; tx < g; ++tx) {
      const Eigen::Index row = static_cast<Eigen::Index>(ty) * g + tx;
      Eigen::Index col = 0;
      for (int py = 0; py < t; ++py)
        for (int px = 0; px < t; ++px)
          for (int c = 0; c < 3; ++c)
            tokens(row, col++) = img.at(tx * t + px, ty * t + py, c) / 255.0;
    }
  return tokens;
}

/// Records one forward pass over a batch so the adjoint can be replayed.
class EncoderTape {
public:
  EncoderTape(const EncoderConfig &cfg, const EncoderParams &params, std::span<const RgbPatch> images)
      : cfg_(cfg), params_(&params) {
    cfg.validate();
    embeddings_.resize(static_cast<Eigen::Index>(images.size()), cfg.output_dim());
    caches_.resize(images.size());
    for (std::size_t i = 0; i < images.size(); ++i)
      embeddings_.row(static_cast<Eigen::Index>(i)) = forward_one(image_to_tokens(images[i], cfg), caches_[i]);
  }

  const EmbeddingBatch &embeddings() const noexcept { return embeddings_; }

  /// Accumulates d<embeddings, upstream>/d(params) into `grads`.
  void backward(const Mat &upstream, EncoderParams &grads) const {
    require(upstream.rows() == embeddings_.rows() && upstream.cols() == embeddings_.cols(),
            ErrorCode::ShapeMismatch, "upstream gradient shape does not match embeddings");
    require(upstream.allFinite(), ErrorCode::NonFinite, "upstream gradient is not finite");
    for (std::size_t i = 0; i < caches_.size(); ++i)
      backward_one(upstream.row(static_cast<Eigen::Index>(i)), caches_[i], grads);
  }

private:
  Eigen::RowVectorXd forward_one(Mat tokens_in, detail::ImageCache &cache) const {
    using namespace detail;
    const EncoderParams &p = *params_;
    const int dh = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.tokens = std::move(tokens_in);
    Mat x = linear(cache.tokens, p.patch_embed) + p.pos_embed;
    cache.blocks.resize(p.blocks.size());
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
      const BlockParams &bp = p.blocks[l];
      BlockCache &bc = cache.blocks[l];
      bc.h1 = layer_norm(x, bp.norm1, bc.ln1);
      bc.q = linear(bc.h1, bp.q);
      bc.k = linear(bc.h1, bp.k);
      bc.v = linear(bc.h1, bp.v);
      bc.o.resize(x.rows(), x.cols());
      bc.attn.resize(static_cast<std::size_t>(cfg_.heads));
      for (int h = 0; h < cfg_.heads; ++h) {
        Mat s = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose() * scale;
        softmax_rows(s);
        bc.o.middleCols(h * dh, dh) = s * bc.v.middleCols(h * dh, dh);
        bc.attn[static_cast<std::size_t>(h)] = std::move(s);
      }
      const Mat x_mid = x + linear(bc.o, bp.proj);
      bc.h2 = layer_norm(x_mid, bp.norm2, bc.ln2);
      bc.pre_act = linear(bc.h2, bp.fc1);
      bc.act = bc.pre_act.unaryExpr([](double v) { return gelu(v); });
      x = x_mid + linear(bc.act, bp.fc2);
    }
    const Mat f = layer_norm(x, p.final_norm, cache.final_ln);
    cache.pooled = f.colwise().mean();
    cache.head_out = linear(cache.pooled, p.head);
    if (!p.has_projector()) return cache.head_out.row(0);
    cache.proj_pre = linear(cache.head_out, p.proj1);
    cache.proj_act = cache.proj_pre.unaryExpr([](double v) { return gelu(v); });
    return linear(cache.proj_act, p.proj2).row(0);
  }

  void backward_one(const Eigen::RowVectorXd &upstream, const detail::ImageCache &cache,
                    EncoderParams &g) const {
    using namespace detail;
    const EncoderParams &p = *params_;
    const int dh = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat d_out = upstream;
    if (p.has_projector()) {
      Mat d_act = linear_backward(d_out, cache.proj_act, p.proj2, g.proj2);
      Mat d_pre = d_act.array() * cache.proj_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
      d_out = linear_backward(d_pre, cache.head_out, p.proj1, g.proj1);
    }
    const Mat d_pooled = linear_backward(d_out, cache.pooled, p.head, g.head);
    const auto n_tokens = static_cast<double>(cache.tokens.rows());
    const Mat d_f = Mat::Ones(cache.tokens.rows(), 1) * (d_pooled / n_tokens);
    Mat dx = layer_norm_backward(d_f, p.final_norm, cache.final_ln, g.final_norm);

    for (std::size_t l = p.blocks.size(); l-- > 0;) {
      const BlockParams &bp = p.blocks[l];
      BlockParams &gb = g.blocks[l];
      const BlockCache &bc = cache.blocks[l];

      // x_out = x_mid + fc2(gelu(fc1(norm2(x_mid))))
      const Mat d_act = linear_backward(dx, bc.act, bp.fc2, gb.fc2);
      const Mat d_pre = d_act.array() * bc.pre_act.unaryExpr([](double v) { return gelu_grad(v); }).array();
      const Mat d_h2 = linear_backward(d_pre, bc.h2, bp.fc1, gb.fc1);
      Mat d_mid = dx + layer_norm_backward(d_h2, bp.norm2, bc.ln2, gb.norm2);

      // x_mid = x_in + proj(attention(norm1(x_in)))
      const Mat d_o = linear_backward(d_mid, bc.o, bp.proj, gb.proj);
      Mat d_q(bc.q.rows(), bc.q.cols()), d_k(bc.k.rows(), bc.k.cols()), d_v(bc.v.rows(), bc.v.cols());
      for (int h = 0; h < cfg_.heads; ++h) {
        const Mat &a = bc.attn[static_cast<std::size_t>(h)];
        const auto d_oh = d_o.middleCols(h * dh, dh);
        const Mat d_a = d_oh * bc.v.middleCols(h * dh, dh).transpose();
        d_v.middleCols(h * dh, dh) = a.transpose() * d_oh;
        const Eigen::VectorXd row_dot = (d_a.array() * a.array()).rowwise().sum();
        const Mat d_s = (a.array() * (d_a.array().colwise() - row_dot.array())).matrix() * scale;
        d_q.middleCols(h * dh, dh) = d_s * bc.k.middleCols(h * dh, dh);
        d_k.middleCols(h * dh, dh) = d_s.transpose() * bc.q.middleCols(h * dh, dh);
      }
      Mat d_h1 = linear_backward(d_q, bc.h1, bp.q, gb.q);
      d_h1 += linear_backward(d_k, bc.h1, bp.k, gb.k);
      d_h1 += linear_backward(d_v, bc.h1, bp.v, gb.v);
      dx = d_mid + layer_norm_backward(d_h1, bp.norm1, bc.ln1, gb.norm1);
    }
    g.pos_embed += dx;
    linear_backward(dx, cache.tokens, p.patch_embed, g.patch_embed);
  }

  EncoderConfig cfg_;
  const EncoderParams *params_;
  EmbeddingBatch embeddings_;
  std::vector<detail::ImageCache> caches_;
};

inline EmbeddingBatch forward(const EncoderConfig &cfg, const EncoderParams &params,
                              std::span<const RgbPatch> images) {
  return EncoderTape(cfg, params, images).embeddings();
}

/// Exact gradient of <forward(images), upstream> with respect to every parameter.
inline EncoderParams forward_with_gradients(const EncoderConfig &cfg, const EncoderParams &params,
                                            std::span<const RgbPatch> images, const Mat &upstream) {
  EncoderParams grads = zeros_like(params);
  EncoderTape(cfg, params, images).backward(upstream, grads);
  return grads;
}

} // namespace lmc
