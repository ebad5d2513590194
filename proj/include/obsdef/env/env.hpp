#pragma once

#include <atomic>
#include <string>

#include "obsdef/common.hpp"

namespace obsdef::env {

enum class EnvName { kPointMass2d, kPendulumSwingup };

inline EnvName env_name_from_string(const std::string& s) {
  if (s == "point_mass_2d" || s == "point_mass") return EnvName::kPointMass2d;
  if (s == "pendulum_swingup" || s == "pendulum") return EnvName::kPendulumSwingup;
  throw std::invalid_argument("unknown env name: " + s);
}

inline std::string to_string(EnvName n) {
  return n == EnvName::kPointMass2d ? "point_mass_2d" : "pendulum_swingup";
}

struct EnvSpec {
  EnvName name = EnvName::kPointMass2d;
  int obs_dim = 4;
  int action_dim = 2;
  int state_dim = 4;
  Vec action_low;
  Vec action_high;
  double dt = 0.05;
  int horizon = 200;
  double gamma = 0.99;

  void validate() const {
    require(obs_dim > 0 && action_dim > 0, "EnvSpec: dims must be positive");
    require(horizon >= 1, "EnvSpec: horizon must be >= 1");
    require(gamma >= 0.0 && gamma < 1.0, "EnvSpec: gamma must be in [0,1)");
    require((action_low.array() < action_high.array()).all(),
            "EnvSpec: action_low must be < action_high componentwise");
  }
};

inline EnvSpec make_spec(EnvName name, int horizon = 200) {
  EnvSpec s;
  s.name = name;
  s.horizon = horizon;
  if (name == EnvName::kPointMass2d) {
    s.obs_dim = 4;
    s.state_dim = 4;
    s.action_dim = 2;
    s.action_low = Vec::Constant(2, -1.0);
    s.action_high = Vec::Constant(2, 1.0);
  } else {
    s.obs_dim = 3;
    s.state_dim = 2;
    s.action_dim = 1;
    s.action_low = Vec::Constant(1, -2.0);
    s.action_high = Vec::Constant(1, 2.0);
  }
  return s;
}

struct StepResult {
  Vec next_state;
  Vec next_obs;
  double reward = 0.0;
  bool done = false;
};

// Process-wide environment interaction counter. Offline stages assert this
// stays constant while they run.
inline std::atomic<long>& step_counter() {
  static std::atomic<long> counter{0};
  return counter;
}

// state -> observation; identity for point_mass, (cos, sin, thetadot) for pendulum
inline Vec observe(const EnvSpec& spec, const Vec& state) {
  if (spec.name == EnvName::kPointMass2d) return state;
  Vec o(3);
  o << std::cos(state[0]), std::sin(state[0]), state[1];
  return o;
}

inline Vec reset(const EnvSpec& spec, long seed) {
  spec.validate();
  Rng rng(0x9e3779b97f4a7c15ULL ^ (uint64_t(seed) * 0xbf58476d1ce4e5b9ULL));
  if (spec.name == EnvName::kPointMass2d) {
    Vec s(4);
    for (int i = 0; i < 4; ++i) s[i] = uniform(rng, -0.05, 0.05);
    return s;
  }
  Vec s(2);
  s[0] = uniform(rng, -M_PI, M_PI);
  s[1] = uniform(rng, -1.0, 1.0);
  return s;
}

// Point mass: semi-implicit Euler, pos += v*dt then v += a*dt.
// Reward: -||pos' - (1,1)||_2 - 0.01 ||a||^2.
// Pendulum: gravity pendulum g=10, m=l=1, theta measured from upright.
// Reward: -(wrap(theta)^2 + 0.1 thetadot^2 + 0.001 a^2) on the pre-step state.
inline StepResult step_impl(const EnvSpec& spec, const Vec& state, const Vec& action,
                            int step_index, bool count) {
  require(action.size() == spec.action_dim, "step: action dimension mismatch");
  require_finite(state, "state");
  require_finite(action, "action");
  if (count) step_counter().fetch_add(1, std::memory_order_relaxed);

  Vec a = action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
  StepResult r;
  if (spec.name == EnvName::kPointMass2d) {
    Vec pos = state.head(2);
    Vec vel = state.tail(2);
    pos += vel * spec.dt;
    vel += a * spec.dt;
    r.next_state = Vec(4);
    r.next_state << pos, vel;
    Vec goal = Vec::Constant(2, 1.0);
    r.reward = -(pos - goal).norm() - 0.01 * a.squaredNorm();
  } else {
    const double g = 10.0, m = 1.0, l = 1.0;
    double th = state[0], thdot = state[1], u = a[0];
    double cost = wrap_angle(th) * wrap_angle(th) + 0.1 * thdot * thdot + 0.001 * u * u;
    double new_thdot = thdot + (3.0 * g / (2.0 * l) * std::sin(th) + 3.0 / (m * l * l) * u) * spec.dt;
    new_thdot = std::clamp(new_thdot, -8.0, 8.0);
    double new_th = th + new_thdot * spec.dt;
    r.next_state = Vec(2);
    r.next_state << new_th, new_thdot;
    r.reward = -cost;
  }
  r.next_obs = observe(spec, r.next_state);
  r.done = (step_index + 1 >= spec.horizon);
  return r;
}

inline StepResult step(const EnvSpec& spec, const Vec& state, const Vec& action,
                       int step_index) {
  return step_impl(spec, state, action, step_index, true);
}

// Planner-side use of the dynamics as a model; not an environment interaction.
inline StepResult step_model(const EnvSpec& spec, const Vec& state, const Vec& action,
                             int step_index) {
  return step_impl(spec, state, action, step_index, false);
}

}  // namespace obsdef::env
