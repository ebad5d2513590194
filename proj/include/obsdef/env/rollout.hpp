#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "obsdef/env/env.hpp"

namespace obsdef::env {

// One recorded environment step. obs is the true (clean) observation,
// obs_presented what the policy's input pipeline saw after any attack,
// obs_used what the policy actually consumed after any defense.
struct TrajStep {
  int t = 0;
  Vec obs;
  Vec obs_presented;
  Vec obs_used;
  Vec action;
  double reward = 0.0;
  bool done = false;
  bool attacked = false;
  std::string attack_name;
  bool has_verdict = false;
  bool verdict = false;
};

struct Trajectory {
  std::vector<TrajStep> steps;
  double discounted_return = 0.0;
  double undiscounted_return = 0.0;
};

// Anything that maps observations to actions during a rollout. Stateful
// adapters (recurrent defenses, exploration schedules) reset per episode.
class PolicyAdapter {
 public:
  virtual ~PolicyAdapter() = default;
  virtual void begin_episode() {}
  virtual Vec act(const Vec& obs) = 0;
  // Set when the adapter ran a detector this step (defended policies).
  virtual std::optional<bool> last_verdict() const { return std::nullopt; }
  // Set when the adapter substituted the observation it consumed.
  virtual std::optional<Vec> last_obs_used() const { return std::nullopt; }
};

struct StepContext {
  int t = 0;
  Vec clean_obs;
  Vec state;  // true environment state, white-box attacks may use it
};

struct AttackResult {
  Vec obs;
  bool attacked = false;
};

// Observation interposition, applied between the environment and the policy:
// observe -> attack (optional) -> policy (which may defend internally).
struct StepHooks {
  std::function<void()> begin_episode;
  std::function<AttackResult(const StepContext&)> attack;
  std::string attack_name;
};

inline Trajectory rollout(const EnvSpec& spec, PolicyAdapter& policy, long seed,
                          const StepHooks* hooks = nullptr) {
  spec.validate();
  Trajectory traj;
  Vec state = reset(spec, seed);
  policy.begin_episode();
  if (hooks && hooks->begin_episode) hooks->begin_episode();
  double discount = 1.0;
  for (int t = 0; t < spec.horizon; ++t) {
    TrajStep s;
    s.t = t;
    s.obs = observe(spec, state);
    s.obs_presented = s.obs;
    if (hooks && hooks->attack) {
      AttackResult ar = hooks->attack(StepContext{t, s.obs, state});
      require(ar.obs.size() == s.obs.size(), "rollout: attack hook returned wrong dimension");
      s.obs_presented = ar.obs;
      s.attacked = ar.attacked;
      if (ar.attacked) s.attack_name = hooks->attack_name;
    }
    s.obs_used = s.obs_presented;
    s.action = policy.act(s.obs_presented);
    s.action = s.action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
    if (auto v = policy.last_verdict()) {
      s.has_verdict = true;
      s.verdict = *v;
    }
    if (auto used = policy.last_obs_used()) s.obs_used = *used;
    StepResult res = step(spec, state, s.action, t);
    s.reward = res.reward;
    s.done = res.done;
    traj.discounted_return += discount * res.reward;
    traj.undiscounted_return += res.reward;
    discount *= spec.gamma;
    state = res.next_state;
    traj.steps.push_back(std::move(s));
  }
  return traj;
}

// Plain wrapper over a stateless act function.
class FunctionPolicy : public PolicyAdapter {
 public:
  explicit FunctionPolicy(std::function<Vec(const Vec&)> fn) : fn_(std::move(fn)) {}
  Vec act(const Vec& obs) override { return fn_(obs); }

 private:
  std::function<Vec(const Vec&)> fn_;
};

}  // namespace obsdef::env
