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
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmc/csv.hpp"
#include "lmc/encoder.hpp"
#include "lmc/error.hpp"
#include "lmc/manifold.hpp"
#include "lmc/rng.hpp"

namespace lmc {

// ---------------------------------------------------------------- embedding sets

struct EmbeddingRow {
  std::string id;
  std::string batch_id;
  std::optional<int> label;
  Eigen::RowVectorXd values;
};

struct EmbeddingSet {
  std::vector<EmbeddingRow> rows;

  Eigen::Index dim() const { return rows.empty() ? 0 : rows.front().values.size(); }

  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), dim());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].values;
    return m;
  }
};

inline EmbeddingSet make_embedding_set(const Eigen::MatrixXd &values, const std::string &batch_id,
                                       const std::vector<std::optional<int>> &labels = {}) {
  EmbeddingSet s;
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    EmbeddingRow row;
    row.id = batch_id + "_" + std::to_string(r);
    row.batch_id = batch_id;
    if (!labels.empty()) row.label = labels[static_cast<std::size_t>(r)];
    row.values = values.row(r);
    s.rows.push_back(std::move(row));
  }
  return s;
}

// ---------------------------------------------------------------- Gaussian W2

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::size_t count = 0;
};

/// Sample mean and unbiased covariance of the rows of `x`.
inline GaussianSummary fit_gaussian(const Eigen::MatrixXd &x) {
  require(x.rows() >= 2, ErrorCode::InvalidArgument, "fit_gaussian needs at least 2 rows");
  GaussianSummary g;
  g.count = static_cast<std::size_t>(x.rows());
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
  const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  g.covariance = 0.5 * (cov + cov.transpose());
  return g;
}

namespace detail {

/// Symmetric PSD square root; eigenvalues below zero are clamped.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd &a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  require(es.info() == Eigen::Success, ErrorCode::NonFinite, "eigendecomposition did not converge");
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace detail

inline constexpr double kCovarianceRegularization = 1e-8;

/// Bures-Wasserstein closed form between two Gaussians.
inline double w2_gaussian(const GaussianSummary &g1, const GaussianSummary &g2,
                          double regularization = kCovarianceRegularization) {
  require(g1.mean.size() == g2.mean.size() && g1.covariance.rows() == g2.covariance.rows(),
          ErrorCode::ShapeMismatch, "w2_gaussian: dimension mismatch");
  const Eigen::Index d = g1.mean.size();
  const Eigen::MatrixXd reg = regularization * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd s1 = g1.covariance + reg;
  const Eigen::MatrixXd s2 = g2.covariance + reg;
  const Eigen::MatrixXd r2 = detail::psd_sqrt(s2);
  const Eigen::MatrixXd cross = detail::psd_sqrt(r2 * s1 * r2);
  const double traces = s1.trace() + s2.trace();
  double bures = traces - 2.0 * cross.trace();
  // Roundoff floor: the trace difference is only known to ~eps * traces.
  if (bures < 64.0 * std::numeric_limits<double>::epsilon() * traces) bures = 0.0;
  const double w2sq = (g1.mean - g2.mean).squaredNorm() + bures;
  return std::sqrt(std::max(0.0, w2sq));
}

// ---------------------------------------------------------------- separation report

struct SeparationRow {
  std::string group; // class label, or "overall"
  double w2 = 0.0;
};

struct SeparationReport {
  std::string batch_a;
  std::string batch_b;
  std::vector<SeparationRow> rows;

  double overall() const {
    for (const auto &r : rows)
      if (r.group == "overall") return r.w2;
    throw Error(ErrorCode::InvalidArgument, "report has no overall row");
  }
};

inline SeparationReport batch_separation_report(const EmbeddingSet &set) {
  std::set<std::string> batches;
  for (const auto &r : set.rows) batches.insert(r.batch_id);
  require(batches.size() == 2, ErrorCode::InvalidArgument,
          "batch separation needs exactly 2 batch ids, found " + std::to_string(batches.size()));
  SeparationReport rep;
  rep.batch_a = *batches.begin();
  rep.batch_b = *std::next(batches.begin());

  auto gather = [&](const std::string &batch, std::optional<int> label) {
    std::vector<Eigen::RowVectorXd> rows;
    for (const auto &r : set.rows)
      if (r.batch_id == batch && (!label || r.label == label)) rows.push_back(r.values);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), set.dim());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
    return m;
  };
  auto w2_between = [&](std::optional<int> label, const std::string &name) {
    const Eigen::MatrixXd a = gather(rep.batch_a, label);
    const Eigen::MatrixXd b = gather(rep.batch_b, label);
    require(a.rows() >= 2 && b.rows() >= 2, ErrorCode::InvalidArgument,
            "group '" + name + "' has fewer than 2 rows in one batch");
    return w2_gaussian(fit_gaussian(a), fit_gaussian(b));
  };

  std::map<std::string, std::set<int>> labels_per_batch;
  for (const auto &r : set.rows)
    if (r.label) labels_per_batch[r.batch_id].insert(*r.label);
  for (int label : labels_per_batch[rep.batch_a])
    if (labels_per_batch[rep.batch_b].count(label))
      rep.rows.push_back({std::to_string(label), w2_between(label, std::to_string(label))});
  rep.rows.push_back({"overall", w2_between(std::nullopt, "overall")});
  return rep;
}

inline void write_separation_report(const std::filesystem::path &path, const SeparationReport &rep) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "class,w2\n";
  for (const auto &r : rep.rows) out << r.group << ',' << csv::format_double(r.w2) << '\n';
  out << "# W2: Gaussian (Bures) closed form on fitted moments, batches " << rep.batch_a << " vs "
      << rep.batch_b << "\n";
  out << "# CFD: not implemented (external definition)\n";
}

// ---------------------------------------------------------------- alignment

/// Mean cosine similarity between paired rows.
inline double alignment_score(const Eigen::MatrixXd &z1, const Eigen::MatrixXd &z2) {
  require(z1.rows() == z2.rows() && z1.cols() == z2.cols(), ErrorCode::ShapeMismatch,
          "alignment_score: pair shapes differ");
  require(z1.rows() >= 1, ErrorCode::InvalidArgument, "alignment_score needs at least one pair");
  double acc = 0.0;
  for (Eigen::Index r = 0; r < z1.rows(); ++r) {
    const double n1 = z1.row(r).norm();
    const double n2 = z2.row(r).norm();
    require(n1 > 0.0 && n2 > 0.0, ErrorCode::InvalidArgument, "alignment_score: zero-norm vector");
    acc += z1.row(r).dot(z2.row(r)) / (n1 * n2);
  }
  return acc / static_cast<double>(z1.rows());
}

// ---------------------------------------------------------------- linear probe

struct ProbeOptions {
  int epochs = 500;
  double lr = 0.5;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression on standardized features.
struct LinearProbe {
  Eigen::RowVectorXd feature_mean;
  Eigen::RowVectorXd feature_scale;
  Eigen::MatrixXd weights; // dim x classes
  Eigen::RowVectorXd bias;
  std::vector<int> classes;

  Eigen::MatrixXd logits(const Eigen::MatrixXd &x) const {
    require(x.cols() == weights.rows(), ErrorCode::ShapeMismatch, "probe feature dimension mismatch");
    const Eigen::MatrixXd xs =
        ((x.rowwise() - feature_mean).array().rowwise() / feature_scale.array()).matrix();
    return (xs * weights).rowwise() + bias;
  }

  std::vector<int> predict(const Eigen::MatrixXd &x) const {
    const Eigen::MatrixXd z = logits(x);
    std::vector<int> out(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      z.row(r).maxCoeff(&best);
      out[static_cast<std::size_t>(r)] = classes[static_cast<std::size_t>(best)];
    }
    return out;
  }
};

inline LinearProbe linear_probe_train(const Eigen::MatrixXd &x, const std::vector<int> &labels,
                                      const ProbeOptions &opts = {}) {
  require(static_cast<std::size_t>(x.rows()) == labels.size(), ErrorCode::ShapeMismatch,
          "probe: one label per row required");
  LinearProbe p;
  const std::set<int> distinct(labels.begin(), labels.end());
  p.classes.assign(distinct.begin(), distinct.end());
  require(p.classes.size() >= 2, ErrorCode::InvalidArgument, "probe training needs at least 2 classes");
  const auto k = static_cast<Eigen::Index>(p.classes.size());
  const auto n = static_cast<double>(x.rows());

  p.feature_mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - p.feature_mean;
  p.feature_scale = (centered.colwise().squaredNorm() / n).cwiseSqrt();
  for (Eigen::Index j = 0; j < p.feature_scale.size(); ++j)
    if (!(p.feature_scale(j) > 1e-12)) p.feature_scale(j) = 1.0;
  const Eigen::MatrixXd xs = (centered.array().rowwise() / p.feature_scale.array()).matrix();

  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = std::lower_bound(p.classes.begin(), p.classes.end(), labels[i]) - p.classes.begin();
    y(static_cast<Eigen::Index>(i), c) = 1.0;
  }

  Rng rng(derive_seed(opts.seed, 0x50524fu));
  p.weights.resize(x.cols(), k);
  for (Eigen::Index c = 0; c < k; ++c)
    for (Eigen::Index r = 0; r < x.cols(); ++r) p.weights(r, c) = 0.01 * standard_normal(rng);
  p.bias = Eigen::RowVectorXd::Zero(k);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Eigen::MatrixXd z = (xs * p.weights).rowwise() + p.bias;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      z.row(r).array() -= z.row(r).maxCoeff();
      z.row(r) = z.row(r).array().exp().matrix();
      z.row(r) /= z.row(r).sum();
    }
    const Eigen::MatrixXd dz = (z - y) / n;
    p.weights -= opts.lr * (xs.transpose() * dz + opts.l2 * p.weights);
    p.bias -= opts.lr * dz.colwise().sum();
  }
  return p;
}

struct ProbeReport {
  double accuracy = 0.0;
  std::vector<std::pair<int, double>> per_class; // (label, accuracy)
  std::size_t count = 0;
};

inline ProbeReport linear_probe_eval(const LinearProbe &probe, const Eigen::MatrixXd &x,
                                     const std::vector<int> &labels) {
  require(static_cast<std::size_t>(x.rows()) == labels.size(), ErrorCode::ShapeMismatch,
          "probe: one label per row required");
  require(!labels.empty(), ErrorCode::InvalidArgument, "probe evaluation set is empty");
  const std::vector<int> pred = probe.predict(x);
  std::map<int, std::pair<std::size_t, std::size_t>> tally; // label -> (correct, total)
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool ok = pred[i] == labels[i];
    correct += ok;
    auto &t = tally[labels[i]];
    t.first += ok;
    t.second += 1;
  }
  ProbeReport rep;
  rep.count = labels.size();
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  for (const auto &[label, t] : tally)
    rep.per_class.emplace_back(label, static_cast<double>(t.first) / static_cast<double>(t.second));
  return rep;
}

inline void write_probe_report(const std::filesystem::path &path, const ProbeReport &rep) {
  csv::Table t;
  t.header = {"class", "accuracy"};
  for (const auto &[label, acc] : rep.per_class) t.rows.push_back({std::to_string(label), csv::format_double(acc)});
  t.rows.push_back({"overall", csv::format_double(rep.accuracy)});
  csv::write(path, t);
}

// ---------------------------------------------------------------- export / import

inline EmbeddingBatch embed_dataset(const EncoderConfig &cfg, const EncoderParams &params,
                                    const PatchDataset &ds, std::size_t chunk = 64) {
  EmbeddingBatch out(static_cast<Eigen::Index>(ds.size()), cfg.output_dim());
  std::vector<RgbPatch> buf;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    buf.clear();
    const std::size_t end = std::min(ds.size(), start + chunk);
    for (std::size_t i = start; i < end; ++i) buf.push_back(ds.items[i].patch);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        forward(cfg, params, buf);
  }
  return out;
}

inline std::vector<std::string> embedding_header(Eigen::Index dim) {
  std::vector<std::string> h{"identifier", "batch_id", "label"};
  for (Eigen::Index j = 0; j < dim; ++j) h.push_back("v" + std::to_string(j + 1));
  return h;
}

/// Writes "identifier,batch_id,label,v1..v_dim" in dataset order.
inline void export_embeddings(const EncoderConfig &cfg, const EncoderParams &params, const PatchDataset &ds,
                              const std::string &batch_id, const std::filesystem::path &path) {
  csv::Table t;
  t.header = embedding_header(cfg.output_dim());
  if (!ds.empty()) {
    const EmbeddingBatch z = embed_dataset(cfg, params, ds);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::vector<std::string> row{ds.items[i].id, batch_id,
                                   ds.items[i].label ? std::to_string(*ds.items[i].label) : ""};
      for (Eigen::Index j = 0; j < z.cols(); ++j)
        row.push_back(csv::format_double(z(static_cast<Eigen::Index>(i), j)));
      t.rows.push_back(std::move(row));
    }
  }
  csv::write(path, t);
}

inline EmbeddingSet read_embeddings(const std::filesystem::path &path) {
  const csv::Table t = csv::read(path);
  require(t.header.size() >= 4 && t.header[0] == "identifier" && t.header[1] == "batch_id" &&
              t.header[2] == "label",
          ErrorCode::Format, "embedding CSV must start with identifier,batch_id,label: " + path.string());
  EmbeddingSet s;
  const auto dim = static_cast<Eigen::Index>(t.header.size() - 3);
  for (const auto &row : t.rows) {
    EmbeddingRow r;
    r.id = row[0];
    r.batch_id = row[1];
    if (!row[2].empty()) r.label = static_cast<int>(csv::parse_int(row[2], path.string()));
    r.values.resize(dim);
    for (Eigen::Index j = 0; j < dim; ++j)
      r.values(j) = csv::parse_double(row[static_cast<std::size_t>(j + 3)], path.string());
    s.rows.push_back(std::move(r));
  }
  return s;
}

} // namespace lmc
