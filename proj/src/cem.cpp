#include "obsdef/attack/cem.hpp"

#include <algorithm>
#include <numeric>

namespace obsdef::attack {

Mat cem_optimize(const SequenceCostFn& cost, int action_dim, const Vec& low, const Vec& high,
                 const CemConfig& cfg, Rng& rng) {
  cfg.validate();
  Vec mid = 0.5 * (low + high);
  Vec half = 0.5 * (high - low);

  Mat mean = mid.replicate(1, cfg.horizon);
  Mat stddev = (cfg.init_std_frac * half).replicate(1, cfg.horizon);

  for (int it = 0; it < cfg.iters; ++it) {
    std::vector<Mat> samples(cfg.population);
    std::vector<double> costs(cfg.population);
    for (int p = 0; p < cfg.population; ++p) {
      Mat a(action_dim, cfg.horizon);
      for (int t = 0; t < cfg.horizon; ++t)
        for (int d = 0; d < action_dim; ++d)
          a(d, t) = std::clamp(mean(d, t) + stddev(d, t) * gaussian(rng), low[d], high[d]);
      samples[p] = a;
      costs[p] = cost(a);
    }
    std::vector<int> order(cfg.population);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return costs[a] < costs[b]; });

    Mat new_mean = Mat::Zero(action_dim, cfg.horizon);
    for (int e = 0; e < cfg.elites; ++e) new_mean += samples[order[e]];
    new_mean /= double(cfg.elites);
    Mat var = Mat::Zero(action_dim, cfg.horizon);
    for (int e = 0; e < cfg.elites; ++e) {
      Mat d = samples[order[e]] - new_mean;
      var += d.cwiseProduct(d);
    }
    mean = new_mean;
    stddev = (var / double(cfg.elites)).cwiseSqrt().cwiseMax(1e-3);
  }
  return mean;
}

Mat cem_plan_min_reward(const env::EnvSpec& spec, const Vec& state, const CemConfig& cfg,
                        Rng& rng) {
  auto cost = [&](const Mat& actions) {
    Vec s = state;
    double total = 0.0;
    for (int t = 0; t < int(actions.cols()); ++t) {
      env::StepResult r = env::step_model(spec, s, Vec(actions.col(t)), 0);
      total += r.reward;
      s = r.next_state;
    }
    return total;  // minimized: the planner seeks the worst reward
  };
  return cem_optimize(cost, spec.action_dim, spec.action_low, spec.action_high, cfg, rng);
}

}  // namespace obsdef::attack
