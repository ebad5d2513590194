#pragma once

#include "obsdef/attack/budget.hpp"
#include "obsdef/policy/train.hpp"

namespace obsdef::attack {

// Learned adversary: maps the clean observation to a perturbation inside
// [-radius, radius]^d via the bundle's tanh squashing; the applied
// observation is project_linf(o + delta, o, radius) as a second guard.
struct AdversaryPolicy {
  policy::PolicyBundle bundle;  // action space = perturbation space
  Vec radius;

  Vec perturbation(const Vec& obs) const { return policy::policy_mean(bundle, obs); }
  Vec apply(const Vec& obs) const {
    return project_linf(obs + perturbation(obs), obs, radius);
  }
};

// Trains the adversary with the PPO trainer on the negated victim reward.
// The victim acts through `victim` (a plain bundle or a defended policy);
// this attack is online by construction.
AdversaryPolicy train_optimal_adversary(env::PolicyAdapter& victim, const env::EnvSpec& spec,
                                        const AttackBudget& budget,
                                        const policy::PpoConfig& cfg, long seed,
                                        policy::TrainLog* log = nullptr);

}  // namespace obsdef::attack
