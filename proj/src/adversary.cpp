#include "obsdef/attack/adversary.hpp"

#include <memory>

namespace obsdef::attack {

AdversaryPolicy train_optimal_adversary(env::PolicyAdapter& victim, const env::EnvSpec& spec,
                                        const AttackBudget& budget,
                                        const policy::PpoConfig& cfg, long seed,
                                        policy::TrainLog* log) {
  spec.validate();
  Vec radius = budget.radius(spec.obs_dim);

  auto state = std::make_shared<Vec>();
  auto t_index = std::make_shared<int>(0);

  policy::PpoEnvIface iface;
  iface.obs_dim = spec.obs_dim;
  iface.action_dim = spec.obs_dim;  // one perturbation component per obs dim
  iface.action_low = -radius;
  iface.action_high = radius;
  iface.gamma = spec.gamma;
  iface.horizon = spec.horizon;
  iface.reset = [&spec, &victim, state, t_index](long ep_seed) {
    *state = env::reset(spec, ep_seed);
    *t_index = 0;
    victim.begin_episode();
    return env::observe(spec, *state);
  };
  iface.step = [&spec, &victim, state, t_index, radius](const Vec& delta, int) {
    Vec obs = env::observe(spec, *state);
    Vec o_hat = project_linf(obs + delta, obs, radius);
    Vec action = victim.act(o_hat);
    action = action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
    env::StepResult res = env::step(spec, *state, action, *t_index);
    *state = res.next_state;
    ++(*t_index);
    return std::make_pair(-res.reward, res.next_obs);
  };

  AdversaryPolicy adv;
  adv.radius = radius;
  adv.bundle = policy::train_ppo_env(iface, cfg, seed, log);
  return adv;
}

}  // namespace obsdef::attack
