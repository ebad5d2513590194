#pragma once

#include "obsdef/data.hpp"
#include "obsdef/policy/bundle.hpp"

namespace obsdef::policy {

struct Td3Config {
  long total_steps = 20000;
  long start_steps = 1000;
  int buffer_size = 100000;
  int batch_size = 128;
  double tau = 0.005;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  double expl_noise = 0.1;    // stddev, in units of the action half-width
  double target_noise = 0.2;
  double noise_clip = 0.5;
  int policy_delay = 2;
  std::vector<int> hidden = {64, 64};
};

struct PpoConfig {
  long total_steps = 240000;
  int episodes_per_iter = 10;
  int epochs = 20;
  int minibatch = 256;
  double clip = 0.2;
  double gae_lambda = 0.95;
  double lr = 1e-3;
  double vf_coef = 0.5;
  double sigma = 0.3;  // constant stddev, in units of the action half-width
  std::vector<int> hidden = {64, 64};
};

struct FittedQConfig {
  int epochs = 60;
  int batch_size = 256;
  double lr = 1e-3;
  std::vector<int> hidden = {64, 64};
};

struct TrainLog {
  std::vector<double> episode_returns;
  std::vector<double> losses;
};

PolicyBundle train_td3(const env::EnvSpec& spec, const Td3Config& cfg, long seed,
                       TrainLog* log = nullptr);

PolicyBundle train_ppo(const env::EnvSpec& spec, const PpoConfig& cfg, long seed,
                       TrainLog* log = nullptr);

// Episodic environment surface for the PPO core. reset() returns the initial
// observation and owns any internal state; step() returns (reward, next_obs).
// Episodes run exactly `horizon` steps. Lets the same trainer drive both the
// toy environments and the adversary-vs-victim wrapper.
struct PpoEnvIface {
  int obs_dim = 0;
  int action_dim = 0;
  Vec action_low, action_high;
  double gamma = 0.99;
  int horizon = 200;
  std::function<Vec(long episode_seed)> reset;
  std::function<std::pair<double, Vec>(const Vec& action, int t)> step;
};

PolicyBundle train_ppo_env(const PpoEnvIface& iface, const PpoConfig& cfg, long seed,
                           TrainLog* log = nullptr);

// Offline fitted-Q regression on D_normal transitions; fills bundle.q1.
void train_q_for_ppo(PolicyBundle& bundle, const Dataset& d_normal, const FittedQConfig& cfg,
                     double gamma, long seed, TrainLog* log = nullptr);

// Shift to zero mean, scale to unit std.
Vec normalize_advantages(const Vec& adv);

// Mean undiscounted return over n seeded rollouts.
double mean_return(const env::EnvSpec& spec, const PolicyBundle& bundle, int n_rollouts,
                   long seed_base, ActMode mode = ActMode::kMean);

double random_policy_baseline(const env::EnvSpec& spec, int n_rollouts, long seed_base);

}  // namespace obsdef::policy
