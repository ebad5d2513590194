#pragma once

#include <functional>

#include "obsdef/env/env.hpp"

namespace obsdef::attack {

struct CemConfig {
  int horizon = 15;
  int population = 64;
  int elites = 8;
  int iters = 5;
  double init_std_frac = 0.5;  // of the action half-width

  void validate() const {
    require(population > elites && elites >= 1, "CemConfig: need population > elites >= 1");
    require(horizon >= 1 && iters >= 0, "CemConfig: horizon >= 1, iters >= 0");
  }
};

// Cost of a candidate action sequence (action_dim x horizon columns).
using SequenceCostFn = std::function<double(const Mat& actions)>;

// Generic cross-entropy minimizer over action sequences: samples a
// population from a diagonal Gaussian, refits mean/std to the lowest-cost
// elites, returns the final mean. Std is floored at 1e-3. iters = 0 returns
// the initialization mean (the box midpoint).
Mat cem_optimize(const SequenceCostFn& cost, int action_dim, const Vec& low, const Vec& high,
                 const CemConfig& cfg, Rng& rng);

// Adversarial planning against the true toy dynamics: minimizes cumulative
// reward from `state` over cfg.horizon model steps. The model rollout does
// not touch the environment step counter.
Mat cem_plan_min_reward(const env::EnvSpec& spec, const Vec& state, const CemConfig& cfg,
                        Rng& rng);

}  // namespace obsdef::attack
