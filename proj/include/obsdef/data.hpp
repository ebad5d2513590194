#pragma once

#include <vector>

#include "obsdef/env/rollout.hpp"

namespace obsdef {

// A set of trajectories plus the observation statistics computed from them.
// The stats define the normalized units all attack budgets are expressed in.
struct Dataset {
  std::vector<env::Trajectory> trajectories;
  Vec obs_mean;
  Vec obs_std;

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps.size();
    return n;
  }

  void compute_stats() {
    if (trajectories.empty() || trajectories.front().steps.empty()) {
      obs_mean = Vec();
      obs_std = Vec();
      return;
    }
    Eigen::Index d = trajectories.front().steps.front().obs.size();
    Vec sum = Vec::Zero(d), sumsq = Vec::Zero(d);
    double n = 0;
    for (const auto& tr : trajectories) {
      for (const auto& s : tr.steps) {
        sum += s.obs;
        sumsq += s.obs.cwiseProduct(s.obs);
        n += 1;
      }
    }
    obs_mean = sum / n;
    Vec var = (sumsq / n) - obs_mean.cwiseProduct(obs_mean);
    obs_std = var.cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
  }
};

}  // namespace obsdef
