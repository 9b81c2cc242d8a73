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

#include <cmath>
#include <numbers>

#include "lmc/lmc.hpp"
#include "support.hpp"

using namespace lmc;

namespace {

GaussianSummary gaussian(std::initializer_list<double> mean, const Eigen::MatrixXd &cov) {
  GaussianSummary g;
  g.mean = Eigen::VectorXd(static_cast<Eigen::Index>(mean.size()));
  Eigen::Index i = 0;
  for (double m : mean) g.mean(i++) = m;
  g.covariance = cov;
  g.count = 100;
  return g;
}

Eigen::MatrixXd sigma1(double s) { return Eigen::MatrixXd::Constant(1, 1, s * s); }

// 1-D optimal transport between two gridded densities. The monotone
// (north-west corner) coupling of sorted supports is optimal on the line.
double discretized_w2_1d(double mu1, double s1, double mu2, double s2, int n = 20000) {
  auto grid = [&](double mu, double s) {
    std::vector<double> x(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      x[static_cast<std::size_t>(i)] = mu - 10.0 * s + 20.0 * s * (i + 0.5) / n;
      const double z = (x[static_cast<std::size_t>(i)] - mu) / s;
      w[static_cast<std::size_t>(i)] = std::exp(-0.5 * z * z);
      total += w[static_cast<std::size_t>(i)];
    }
    for (auto &v : w) v /= total;
    return std::pair{x, w};
  };
  auto [x, a] = grid(mu1, s1);
  auto [y, b] = grid(mu2, s2);
  std::size_t i = 0, j = 0;
  double cost = 0.0;
  while (i < x.size() && j < y.size()) {
    const double m = std::min(a[i], b[j]);
    cost += m * (x[i] - y[j]) * (x[i] - y[j]);
    a[i] -= m;
    b[j] -= m;
    if (a[i] <= 1e-300) ++i;
    if (j < y.size() && b[j] <= 1e-300) ++j;
  }
  return std::sqrt(cost);
}

Eigen::MatrixXd random_rows(Rng &rng, Eigen::Index n, Eigen::Index d) {
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

Eigen::MatrixXd random_rotation(Rng &rng, Eigen::Index d) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_rows(rng, d, d));
  return qr.householderQ();
}

} // namespace

TEST(FitGaussian, HandExample) {
  Eigen::MatrixXd x(2, 2);
  x << 0, 0, 2, 0;
  const GaussianSummary g = fit_gaussian(x);
  EXPECT_EQ(g.mean, Eigen::Vector2d(1, 0));
  Eigen::Matrix2d expected;
  expected << 2, 0, 0, 0;
  EXPECT_EQ(g.covariance, Eigen::MatrixXd(expected));
  EXPECT_EQ(g.count, 2u);
}

TEST(FitGaussian, IdenticalRowsAndPermutation) {
  const Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 3, 0.7);
  EXPECT_EQ(fit_gaussian(same).covariance.cwiseAbs().maxCoeff(), 0.0);
  Rng rng(1);
  const Eigen::MatrixXd x = random_rows(rng, 9, 3);
  Eigen::MatrixXd rev = x.colwise().reverse();
  const GaussianSummary a = fit_gaussian(x), b = fit_gaussian(rev);
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((a.covariance - b.covariance).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(fit_gaussian(x.topRows(1)), Error);
}

TEST(W2Gaussian, IdenticalIsZero) {
  Rng rng(2);
  const GaussianSummary g = fit_gaussian(random_rows(rng, 30, 4));
  EXPECT_EQ(w2_gaussian(g, g), 0.0);
}

TEST(W2Gaussian, OneDimensionalClosedForm) {
  EXPECT_NEAR(w2_gaussian(gaussian({0}, sigma1(1)), gaussian({3}, sigma1(1))), 3.0, 1e-9);
  EXPECT_NEAR(w2_gaussian(gaussian({1}, sigma1(2)), gaussian({-1}, sigma1(0.5)), 0.0),
              std::sqrt(4.0 + 2.25), 1e-12);
}

TEST(W2Gaussian, AgreesWithDiscretizedTransport) {
  for (const auto &[m1, s1, m2, s2] :
       std::vector<std::array<double, 4>>{{0, 1, 3, 1}, {0, 1, 0.5, 1}, {1, 0.5, -1, 2}, {0, 1.5, 0, 0.7}}) {
    const double oracle = discretized_w2_1d(m1, s1, m2, s2);
    EXPECT_NEAR(w2_gaussian(gaussian({m1}, sigma1(s1)), gaussian({m2}, sigma1(s2)), 0.0), oracle, 2e-3)
        << m1 << " " << s1 << " " << m2 << " " << s2;
  }
}

TEST(W2Gaussian, MeanShiftWithEqualCovariance) {
  Rng rng(3);
  const GaussianSummary g = fit_gaussian(random_rows(rng, 40, 3));
  GaussianSummary shifted = g;
  const Eigen::Vector3d delta(0.3, -1.2, 2.0);
  shifted.mean += delta;
  EXPECT_NEAR(w2_gaussian(g, shifted), delta.norm(), 1e-6);
}

TEST(W2Gaussian, SymmetricAndTriangle) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const GaussianSummary a = fit_gaussian(random_rows(rng, 10, 2) * 2.0);
    const GaussianSummary b = fit_gaussian(random_rows(rng, 10, 2).array() + 1.0);
    const GaussianSummary c = fit_gaussian(random_rows(rng, 10, 2) * 0.5);
    EXPECT_NEAR(w2_gaussian(a, b), w2_gaussian(b, a), 1e-10);
    EXPECT_LE(w2_gaussian(a, c), w2_gaussian(a, b) + w2_gaussian(b, c) + 1e-10);
  }
}

TEST(W2Gaussian, RotationInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd x = random_rows(rng, 25, 5);
    const Eigen::MatrixXd y = random_rows(rng, 25, 5) * 1.7;
    const Eigen::MatrixXd q = random_rotation(rng, 5);
    EXPECT_NEAR(w2_gaussian(fit_gaussian(x), fit_gaussian(y)), w2_gaussian(fit_gaussian(x * q), fit_gaussian(y * q)),
                1e-8);
  }
}

TEST(W2Gaussian, DimensionMismatchRejected) {
  EXPECT_THROW(w2_gaussian(gaussian({0}, sigma1(1)), gaussian({0, 0}, Eigen::MatrixXd::Identity(2, 2))), Error);
}

TEST(SeparationReport, DuplicatedBatchIsZero) {
  Rng rng(6);
  const Eigen::MatrixXd z = random_rows(rng, 12, 3);
  std::vector<std::optional<int>> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i % 2);
  EmbeddingSet s = make_embedding_set(z, "A", labels);
  const EmbeddingSet b = make_embedding_set(z, "B", labels);
  s.rows.insert(s.rows.end(), b.rows.begin(), b.rows.end());
  const SeparationReport rep = batch_separation_report(s);
  ASSERT_EQ(rep.rows.size(), 3u);
  for (const auto &r : rep.rows) EXPECT_EQ(r.w2, 0.0) << r.group;
}

TEST(SeparationReport, OffsetGivesOffsetNorm) {
  Rng rng(7);
  const Eigen::MatrixXd z = random_rows(rng, 20, 4);
  Eigen::RowVectorXd offset(4);
  offset << 1.0, -0.5, 0.25, 2.0;
  EmbeddingSet s = make_embedding_set(z, "A");
  const EmbeddingSet b = make_embedding_set(z.rowwise() + offset, "B");
  s.rows.insert(s.rows.end(), b.rows.begin(), b.rows.end());
  EXPECT_NEAR(batch_separation_report(s).overall(), offset.norm(), 1e-6);
}

TEST(SeparationReport, RequiresExactlyTwoBatches) {
  Rng rng(8);
  EmbeddingSet s = make_embedding_set(random_rows(rng, 4, 2), "A");
  EXPECT_THROW(batch_separation_report(s), Error);
  for (const char *id : {"B", "C"}) {
    const EmbeddingSet more = make_embedding_set(random_rows(rng, 4, 2), id);
    s.rows.insert(s.rows.end(), more.rows.begin(), more.rows.end());
  }
  EXPECT_THROW(batch_separation_report(s), Error);
}

TEST(SeparationReport, FileNamesEstimatorAndOmitsCfd) {
  const auto dir = test::scratch_dir("separation");
  SeparationReport rep{"A", "B", {{"0", 0.5}, {"overall", 0.75}}};
  write_separation_report(dir / "r.csv", rep);
  const std::string text = ckpt::read_file(dir / "r.csv");
  EXPECT_EQ(text.rfind("class,w2\n0,0.5\noverall,0.75\n", 0), 0u);
  EXPECT_NE(text.find("Bures"), std::string::npos);
  EXPECT_NE(text.find("CFD: not implemented"), std::string::npos);
}

TEST(Alignment, IdenticalOrthogonalAndMixed) {
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 0, 1, 1, 0;
  EXPECT_DOUBLE_EQ(alignment_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(alignment_score(a, b), 0.0);
  Eigen::MatrixXd m1(4, 2), m2(4, 2);
  m1 << 1, 0, 2, 1, 0, 3, 1, 1;
  m2 << 5, 0, 2, 1, 3, 0, -1, 1;
  EXPECT_DOUBLE_EQ(alignment_score(m1, m2), 0.5);
  EXPECT_THROW(alignment_score(Eigen::MatrixXd::Zero(1, 2), a.topRows(1)), Error);
}

TEST(LinearProbe, SeparableDataLearned) {
  Rng rng(9);
  const Eigen::Vector3d w(1.0, -2.0, 0.5);
  Eigen::MatrixXd x(200, 3);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::RowVector3d r;
    double score = 0.0;
    do {
      r << standard_normal(rng), standard_normal(rng), standard_normal(rng);
      score = r.dot(w);
    } while (std::abs(score) < 0.3);
    x.row(i) = r;
    y.push_back(score > 0 ? 1 : 0);
  }
  // Oracle: a threshold search on the projection onto w separates perfectly.
  const Eigen::VectorXd proj = x * w;
  bool separable = false;
  for (Eigen::Index i = 0; i < proj.size() && !separable; ++i) {
    int ok = 0;
    for (Eigen::Index k = 0; k < proj.size(); ++k) ok += (proj(k) > proj(i)) == (y[static_cast<std::size_t>(k)] == 1);
    separable = ok >= proj.size() - 1;
  }
  ASSERT_TRUE(separable);
  const LinearProbe p = linear_probe_train(x, y);
  const ProbeReport train_rep = linear_probe_eval(p, x, y);
  EXPECT_GE(train_rep.accuracy, 0.99);
  int correct = 0;
  const auto pred = p.predict(x);
  for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  EXPECT_DOUBLE_EQ(train_rep.accuracy, correct / 200.0);
  ASSERT_EQ(train_rep.per_class.size(), 2u);
}

TEST(LinearProbe, UninformativeFeaturesGiveChance) {
  Rng rng(10);
  const Eigen::MatrixXd x = random_rows(rng, 400, 4);
  std::vector<int> y;
  for (int i = 0; i < 400; ++i) y.push_back(i % 2);
  shuffle(y, rng);
  const LinearProbe p = linear_probe_train(x.topRows(200), std::vector<int>(y.begin(), y.begin() + 200));
  EXPECT_NEAR(linear_probe_eval(p, x.bottomRows(200), std::vector<int>(y.begin() + 200, y.end())).accuracy, 0.5, 0.1);
}

TEST(LinearProbe, InformativeFeatureGeneralizes) {
  Rng rng(12);
  Eigen::MatrixXd x = random_rows(rng, 400, 4);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    y.push_back(static_cast<int>(i % 2));
    x(i, 0) += 3.0 * y.back();
  }
  const LinearProbe p = linear_probe_train(x.topRows(200), std::vector<int>(y.begin(), y.begin() + 200));
  EXPECT_GE(linear_probe_eval(p, x.bottomRows(200), std::vector<int>(y.begin() + 200, y.end())).accuracy, 0.9);
}

TEST(LinearProbe, DeterministicAndBounded) {
  Rng rng(11);
  const Eigen::MatrixXd x = random_rows(rng, 60, 3);
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) y.push_back(i % 3);
  const LinearProbe a = linear_probe_train(x, y, {100, 0.5, 1e-4, 7});
  const LinearProbe b = linear_probe_train(x, y, {100, 0.5, 1e-4, 7});
  EXPECT_EQ(a.weights, b.weights);
  const double acc = linear_probe_eval(a, x, y).accuracy;
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_THROW(linear_probe_train(x, std::vector<int>(60, 1)), Error);
}

TEST(Export, EmptyDatasetWritesHeaderOnly) {
  const auto dir = test::scratch_dir("export_empty");
  const EncoderConfig cfg = EncoderConfig::tiny();
  PatchDataset empty;
  empty.patch_size = 32;
  export_embeddings(cfg, init_params(cfg), empty, "A", dir / "e.csv");
  const std::string text = ckpt::read_file(dir / "e.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_EQ(text.rfind("identifier,batch_id,label,v1,", 0), 0u);
}

TEST(Export, RowCountRoundTripAndByteIdentical) {
  const auto dir = test::scratch_dir("export");
  const EncoderConfig cfg = EncoderConfig::tiny();
  const EncoderParams p = init_params(cfg);
  const PatchDataset ds = generate_synthetic_dataset(1, 5, 32, StainBasis::conventional(), 2);
  export_embeddings(cfg, p, ds, "A", dir / "a.csv");
  export_embeddings(cfg, p, ds, "A", dir / "b.csv");
  EXPECT_EQ(ckpt::read_file(dir / "a.csv"), ckpt::read_file(dir / "b.csv"));
  const EmbeddingSet s = read_embeddings(dir / "a.csv");
  ASSERT_EQ(s.rows.size(), ds.size());
  const EmbeddingBatch z = embed_dataset(cfg, p, ds);
  EXPECT_EQ(s.matrix(), z);
  EXPECT_EQ(s.rows[3].label, ds.items[3].label);
  EXPECT_EQ(s.rows[3].batch_id, "A");
}
