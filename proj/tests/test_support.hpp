#pragma once

// Test-only helpers: random correlation matrices and oracles that do not go
// through the library's implementation paths.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "sortsel/mvn.hpp"

namespace sortsel::testing {

inline Mat random_correlation(int dim, std::mt19937_64& rng, double ridge = 0.3) {
  std::normal_distribution<double> n01;
  Mat a(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) a(i, j) = n01(rng);
  Mat c = a * a.transpose() + ridge * Mat::Identity(dim, dim);
  Vec d = c.diagonal().cwiseSqrt().cwiseInverse();
  Mat r = d.asDiagonal() * c * d.asDiagonal();
  r.diagonal().setOnes();
  return 0.5 * (r + r.transpose());
}

/// Phi via long double erfc.
inline long double erf_cdf(long double x) {
  return 0.5L * std::erfc(-x / std::sqrt(2.0L));
}

/// Crude Monte Carlo orthant probability with raw normal draws.
struct CrudeMc {
  double prob;
  double se;
};

inline CrudeMc crude_orthant(const Vec& upper, const Mat& corr, long draws,
                             std::uint64_t seed) {
  const int n = static_cast<int>(upper.size());
  Eigen::LLT<Mat> llt(corr);
  const Mat l = llt.matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Vec e(n);
  long hits = 0;
  for (long r = 0; r < draws; ++r) {
    for (int k = 0; k < n; ++k) e(k) = n01(rng);
    const Vec x = l * e;
    bool in = true;
    for (int k = 0; k < n && in; ++k) in = x(k) <= upper(k);
    hits += in ? 1 : 0;
  }
  const double p = static_cast<double>(hits) / static_cast<double>(draws);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(draws))};
}

}  // namespace sortsel::testing
