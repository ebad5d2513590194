#pragma once

#include "obsdef/common.hpp"

namespace obsdef::attack {

// l-infinity attack budget. epsilon is a single radius in normalized
// observation units; scale carries the per-dimension observation std from
// D_normal, so the raw-space radius of dimension d is epsilon * scale[d].
// An empty scale means raw units (scale = 1).
struct AttackBudget {
  double epsilon = 0.1;
  Vec scale;

  Vec radius(Eigen::Index dim) const {
    require(epsilon > 0, "AttackBudget: epsilon must be positive");
    if (scale.size() == 0) return Vec::Constant(dim, epsilon);
    require(scale.size() == dim, "AttackBudget: scale dimension mismatch");
    return epsilon * scale;
  }
};

// Componentwise clip of o_hat into [o - radius, o + radius]; idempotent.
inline Vec project_linf(const Vec& o_hat, const Vec& o, const Vec& radius) {
  require(o_hat.size() == o.size(), "project_linf: dimension mismatch");
  return o_hat.cwiseMax(o - radius).cwiseMin(o + radius);
}

inline Vec project_linf(const Vec& o_hat, const Vec& o, double epsilon) {
  return project_linf(o_hat, o, Vec::Constant(o.size(), epsilon));
}

inline Mat project_linf(const Mat& o_hat, const Mat& o, const Vec& radius) {
  Mat lo = o.colwise() - radius;
  Mat hi = o.colwise() + radius;
  return o_hat.cwiseMax(lo).cwiseMin(hi);
}

// Max per-dimension violation of the budget, in units of radius; <= 0 inside.
inline double budget_violation(const Vec& o_hat, const Vec& o, const Vec& radius) {
  return ((o_hat - o).cwiseAbs() - radius).maxCoeff();
}

}  // namespace obsdef::attack
