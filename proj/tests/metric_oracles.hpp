#pragma once

// Closed-form Fréchet distance for 2-D Gaussians and a sampler, shared by the
// metric tests and the acceptance run.

#include <cmath>

#include <Eigen/Dense>

#include "vpcsv/rng.hpp"

namespace vpcsv::testing {

/// Rows drawn from N(mean, L L^T).
inline Eigen::MatrixXd sample_gaussian(const Eigen::Vector2d& mean, const Eigen::Matrix2d& L, int n, Rng& rng) {
  Eigen::MatrixXd x(n, 2);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d e(rng.normal(), rng.normal());
    x.row(i) = (mean + L * e).transpose();
  }
  return x;
}

/// Closed form for 2x2: Tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)) when M has
/// nonnegative eigenvalues.
inline double frechet_2d(const Eigen::Vector2d& m1, const Eigen::Matrix2d& s1, const Eigen::Vector2d& m2,
                         const Eigen::Matrix2d& s2) {
  const Eigen::Matrix2d prod = s1 * s2;
  const double tr_sqrt = std::sqrt(prod.trace() + 2.0 * std::sqrt(prod.determinant()));
  return (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

}  // namespace vpcsv::testing
