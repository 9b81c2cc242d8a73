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

#include <Eigen/Dense>

#include "lmc/error.hpp"

namespace lmc {

inline constexpr double kDefaultLambda = 0.005;

struct CorrelationOptions {
  double epsilon = 1e-12; // dimensions with batch norm <= epsilon are treated as dead
  bool center = false;    // subtract the batch mean per dimension first
};

/// C(i, j): normalized inner product over the batch of dimension i of the
/// first view with dimension j of the second.
struct CorrelationMatrix {
  Eigen::MatrixXd values;

  Eigen::Index dim() const noexcept { return values.rows(); }
};

struct LossBreakdown {
  double invariance = 0.0; // sum_i (1 - C_ii)^2
  double redundancy = 0.0; // sum_{i != j} C_ij^2
  double lambda = kDefaultLambda;
  double total = 0.0;
};

namespace detail {

inline void check_pair(const Eigen::MatrixXd &z1, const Eigen::MatrixXd &z2) {
  require(z1.rows() == z2.rows() && z1.cols() == z2.cols(), ErrorCode::ShapeMismatch,
          "embedding batches must have identical shape");
  require(z1.rows() >= 2, ErrorCode::InvalidArgument, "cross-correlation needs a batch of at least 2");
  require(z1.cols() >= 1, ErrorCode::InvalidArgument, "embeddings must have at least one dimension");
}

inline Eigen::MatrixXd centered(const Eigen::MatrixXd &z) {
  return z.rowwise() - z.colwise().mean();
}

struct CorrelationParts {
  Eigen::MatrixXd c;
  Eigen::VectorXd n1, n2;       // per-dimension batch norms
  Eigen::Array<bool, -1, 1> live1, live2;
};

inline CorrelationParts correlate(const Eigen::MatrixXd &z1, const Eigen::MatrixXd &z2, double eps) {
  CorrelationParts p;
  p.n1 = z1.colwise().norm().transpose();
  p.n2 = z2.colwise().norm().transpose();
  p.live1 = p.n1.array() > eps;
  p.live2 = p.n2.array() > eps;
  const Eigen::MatrixXd s = z1.transpose() * z2;
  p.c = Eigen::MatrixXd::Zero(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.cols(); ++j)
    for (Eigen::Index i = 0; i < s.rows(); ++i)
      if (p.live1(i) && p.live2(j)) p.c(i, j) = s(i, j) / (p.n1(i) * p.n2(j));
  return p;
}

} // namespace detail

inline CorrelationMatrix cross_correlation(const Eigen::MatrixXd &z1, const Eigen::MatrixXd &z2,
                                           const CorrelationOptions &opts = {}) {
  detail::check_pair(z1, z2);
  if (opts.center)
    return {detail::correlate(detail::centered(z1), detail::centered(z2), opts.epsilon).c};
  return {detail::correlate(z1, z2, opts.epsilon).c};
}

inline LossBreakdown lmc_loss(const CorrelationMatrix &c, double lambda = kDefaultLambda) {
  require(lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be nonnegative");
  LossBreakdown out;
  out.lambda = lambda;
  const Eigen::MatrixXd &m = c.values;
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (i == j) {
        const double d = 1.0 - m(i, i);
        out.invariance += d * d;
      } else {
        out.redundancy += m(i, j) * m(i, j);
      }
    }
  out.total = out.invariance + lambda * out.redundancy;
  return out;
}

struct LossGradients {
  Eigen::MatrixXd dz1;
  Eigen::MatrixXd dz2;
  LossBreakdown breakdown;
  CorrelationMatrix correlation;
};

/// Loss value and its exact gradient with respect to both embedding batches.
inline LossGradients loss_gradients(const Eigen::MatrixXd &z1_in, const Eigen::MatrixXd &z2_in,
                                    double lambda = kDefaultLambda, const CorrelationOptions &opts = {}) {
  detail::check_pair(z1_in, z2_in);
  const Eigen::MatrixXd z1 = opts.center ? detail::centered(z1_in) : z1_in;
  const Eigen::MatrixXd z2 = opts.center ? detail::centered(z2_in) : z2_in;
  const detail::CorrelationParts p = detail::correlate(z1, z2, opts.epsilon);

  LossGradients out;
  out.correlation.values = p.c;
  out.breakdown = lmc_loss(out.correlation, lambda);

  // dL/dC
  const Eigen::Index d = p.c.rows();
  Eigen::MatrixXd g = 2.0 * lambda * p.c;
  g.diagonal() = -2.0 * (Eigen::VectorXd::Ones(d) - p.c.diagonal());

  // C_ij = S_ij / (n1_i n2_j):
  //   dZ1[:, i] = sum_j G_ij (Z2[:, j] / (n1_i n2_j) - C_ij Z1[:, i] / n1_i^2)
  //   dZ2[:, j] = sum_i G_ij (Z1[:, i] / (n1_i n2_j) - C_ij Z2[:, j] / n2_j^2)
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index i = 0; i < d; ++i)
      if (p.live1(i) && p.live2(j)) a(i, j) = g(i, j) / (p.n1(i) * p.n2(j));
  const Eigen::MatrixXd gc = g.cwiseProduct(p.c);
  Eigen::VectorXd k1 = Eigen::VectorXd::Zero(d), k2 = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    if (p.live1(i)) k1(i) = gc.row(i).sum() / (p.n1(i) * p.n1(i));
    if (p.live2(i)) k2(i) = gc.col(i).sum() / (p.n2(i) * p.n2(i));
  }
  out.dz1 = z2 * a.transpose() - z1 * k1.asDiagonal();
  out.dz2 = z1 * a - z2 * k2.asDiagonal();

  if (opts.center) {
    // Adjoint of mean removal.
    out.dz1 = detail::centered(out.dz1);
    out.dz2 = detail::centered(out.dz2);
  }
  return out;
}

} // namespace lmc
