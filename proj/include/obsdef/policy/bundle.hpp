#pragma once

#include "obsdef/diff/nn.hpp"
#include "obsdef/env/env.hpp"

namespace obsdef::policy {

using diff::MlpParams;

enum class Algo { kTd3, kPpo };

inline std::string to_string(Algo a) { return a == Algo::kTd3 ? "td3" : "ppo"; }
inline Algo algo_from_string(const std::string& s) {
  if (s == "td3" || s == "TD3") return Algo::kTd3;
  if (s == "ppo" || s == "PPO") return Algo::kPpo;
  throw std::invalid_argument("unknown algo: " + s);
}

// A trained victim policy with its value machinery. TD3 bundles carry twin
// Q networks; PPO bundles carry a V network, a constant diagonal covariance
// and (after fit_q_for_ppo) an offline-fitted Q.
struct PolicyBundle {
  Algo algo = Algo::kTd3;
  int obs_dim = 0;
  int action_dim = 0;
  Vec action_low, action_high;

  MlpParams policy;  // obs -> pre-squash action
  MlpParams q1, q2;  // obs+action -> scalar (TD3 twins, or PPO fitted Q in q1)
  MlpParams v;       // obs -> scalar (PPO)
  Vec sigma;         // PPO diagonal stddev, constant
  bool has_q = false;
  bool has_v = false;

  void validate() const {
    require(obs_dim > 0 && action_dim > 0, "PolicyBundle: dims unset");
    if (algo == Algo::kPpo) {
      require(sigma.size() == action_dim && (sigma.array() > 0).all(),
              "PolicyBundle: PPO sigma must be positive diagonal");
    }
  }
};

// Squash a pre-activation network output into the action box.
inline Vec squash_action(const PolicyBundle& b, const Vec& raw) {
  Vec mid = 0.5 * (b.action_low + b.action_high);
  Vec half = 0.5 * (b.action_high - b.action_low);
  return mid.array() + half.array() * raw.array().tanh();
}

inline Mat squash_action(const PolicyBundle& b, const Mat& raw) {
  Vec mid = 0.5 * (b.action_low + b.action_high);
  Vec half = 0.5 * (b.action_high - b.action_low);
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j)
    out.col(j) = mid.array() + half.array() * raw.col(j).array().tanh();
  return out;
}

// Deterministic action / Gaussian mean at an observation.
inline Vec policy_mean(const PolicyBundle& b, const Vec& obs) {
  return squash_action(b, diff::mlp_forward(b.policy, obs));
}

inline Mat policy_mean(const PolicyBundle& b, const Mat& obs) {
  return squash_action(b, diff::mlp_forward(b.policy, obs));
}

// Tape version: squashed mean as a differentiable function of obs (and,
// when lifted with gradients, of the policy parameters).
inline diff::Var policy_mean_op(diff::Tape& t, const diff::MlpVars& pv, const PolicyBundle& b,
                                diff::Var obs) {
  diff::Var raw = diff::mlp_apply(t, pv, b.policy, obs);
  Vec mid = 0.5 * (b.action_low + b.action_high);
  Vec half = 0.5 * (b.action_high - b.action_low);
  diff::Var th = t.tanh_(raw);
  diff::Var scaled = t.cmul(th, t.leaf(Mat(half.replicate(1, t.val(raw).cols()))));
  return t.add(scaled, t.leaf(Mat(mid.replicate(1, t.val(raw).cols()))));
}

struct ActionDecision {
  Vec mean_action;
  Vec sampled_action;
  double log_prob = 0.0;  // PPO only, of the pre-clip sample
};

enum class ActMode { kMean, kSample };

inline double diag_gaussian_log_prob(const Vec& x, const Vec& mu, const Vec& sigma) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double z = (x[i] - mu[i]) / sigma[i];
    lp += -0.5 * z * z - std::log(sigma[i]) - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

inline ActionDecision act(const PolicyBundle& b, const Vec& obs, ActMode mode, Rng& rng) {
  require_finite(obs, "obs");
  require(obs.size() == b.obs_dim, "act: obs dimension mismatch");
  ActionDecision d;
  d.mean_action = policy_mean(b, obs);
  if (b.algo == Algo::kTd3 || mode == ActMode::kMean) {
    d.sampled_action = d.mean_action;
    if (b.algo == Algo::kPpo) {
      d.log_prob = diag_gaussian_log_prob(d.sampled_action, d.mean_action, b.sigma);
    }
    return d;
  }
  Vec noise = gaussian_vec(rng, b.action_dim);
  Vec sample = d.mean_action.array() + b.sigma.array() * noise.array();
  d.log_prob = diag_gaussian_log_prob(sample, d.mean_action, b.sigma);
  d.sampled_action = sample.cwiseMax(b.action_low).cwiseMin(b.action_high);
  return d;
}

// Twin minimum for TD3, fitted head for PPO. Q input is [obs; action].
inline double q_value(const PolicyBundle& b, const Vec& obs, const Vec& action) {
  require(b.has_q, "q_value: bundle has no usable Q function");
  Vec oa(obs.size() + action.size());
  oa << obs, action;
  double q1 = diff::mlp_forward(b.q1, oa)[0];
  if (b.algo == Algo::kTd3) {
    double q2 = diff::mlp_forward(b.q2, oa)[0];
    return std::min(q1, q2);
  }
  return q1;
}

// V(o): Q(o, pi(o)) for TD3, the V network for PPO.
inline double state_value(const PolicyBundle& b, const Vec& obs) {
  if (b.algo == Algo::kTd3) return q_value(b, obs, policy_mean(b, obs));
  require(b.has_v, "state_value: PPO bundle has no V network");
  return diff::mlp_forward(b.v, obs)[0];
}

// Adapter used by rollouts: mean-mode by default, sample mode for PPO
// exploration-style evaluation.
class BundlePolicy : public env::PolicyAdapter {
 public:
  BundlePolicy(const PolicyBundle& b, ActMode mode, long seed)
      : bundle_(b), mode_(mode), rng_(uint64_t(seed)) {}
  Vec act(const Vec& obs) override {
    return policy::act(bundle_, obs, mode_, rng_).sampled_action;
  }

 private:
  const PolicyBundle& bundle_;
  ActMode mode_;
  Rng rng_;
};

}  // namespace obsdef::policy
