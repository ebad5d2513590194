#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace obsdef {

using Scalar = double;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

inline double gaussian(Rng& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

inline Vec gaussian_vec(Rng& rng, Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gaussian(rng);
  return v;
}

inline Mat gaussian_mat(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = gaussian(rng);
  return m;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_finite(const Vec& v, const std::string& what) {
  if (!v.allFinite()) throw std::invalid_argument(what + " contains non-finite values");
}

// wrap angle into [-pi, pi)
inline double wrap_angle(double theta) {
  const double two_pi = 2.0 * M_PI;
  double w = std::fmod(theta + M_PI, two_pi);
  if (w < 0) w += two_pi;
  return w - M_PI;
}

}  // namespace obsdef
