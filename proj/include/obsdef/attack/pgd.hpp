#pragma once

#include <functional>

#include "obsdef/attack/budget.hpp"

namespace obsdef::attack {

// Sign-gradient projected ascent. Step size is step_frac * radius per
// dimension; the paper-shaped default eta = 2.5 eps / K comes out as
// step_frac = 2.5 / steps.
struct PgdConfig {
  int steps = 10;
  double step_frac = 0.25;
  bool random_init = true;
  int restarts = 1;  // random restarts in addition to the clean start

  void validate() const {
    require(steps >= 0, "PgdConfig: steps must be >= 0");
    require(step_frac >= 0, "PgdConfig: step_frac must be >= 0");
  }
};

// Batched objective: value per column plus gradient of each column's value
// with respect to that column.
struct BatchLoss {
  Eigen::RowVectorXd value;
  Mat grad;
};
using BatchLossFn = std::function<BatchLoss(const Mat& o_hat)>;

struct PgdBatchResult {
  Mat o_hat;
  Eigen::RowVectorXd objective;        // best achieved value per column
  std::vector<bool> gradient_failed;   // column fell back to the clean point
};

// Maximizes loss_fn per column inside the l-inf ball of `radius` around the
// matching column of `o`. Candidate set always includes the clean point, so
// the result never scores below it. Non-finite gradients abort that column
// back to the clean observation.
PgdBatchResult pgd_maximize_batch(const BatchLossFn& loss_fn, const Mat& o, const Vec& radius,
                                  const PgdConfig& cfg, Rng& rng);

struct PgdResult {
  Vec o_hat;
  double objective = 0.0;
  bool gradient_failed = false;
};

PgdResult pgd_maximize(const BatchLossFn& loss_fn, const Vec& o, const AttackBudget& budget,
                       const PgdConfig& cfg, Rng& rng);

}  // namespace obsdef::attack
