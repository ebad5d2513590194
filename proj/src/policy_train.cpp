#include "obsdef/policy/train.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

namespace obsdef::policy {

using diff::Adam;
using diff::MlpParams;
using diff::Tape;
using diff::Var;

namespace {

void check_finite_loss(double loss, const char* where) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(std::string(where) + ": training diverged (non-finite loss)");
  }
}

struct Transition {
  Vec obs, action, next_obs;
  double reward = 0.0;
  bool done = false;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}
  void push(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }
  std::size_t size() const { return data_.size(); }
  const Transition& sample(Rng& rng) const {
    std::uniform_int_distribution<std::size_t> d(0, data_.size() - 1);
    return data_[d(rng)];
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> data_;
};

std::vector<Mat*> all_ptrs(std::initializer_list<MlpParams*> nets) {
  std::vector<Mat*> out;
  for (MlpParams* n : nets) {
    for (auto& [name, p] : diff::named_params(*n, "x")) out.push_back(p);
  }
  return out;
}

void polyak(MlpParams& target, const MlpParams& src, double tau) {
  for (std::size_t l = 0; l < src.weights.size(); ++l) {
    target.weights[l] = (1 - tau) * target.weights[l] + tau * src.weights[l];
    target.biases[l] = (1 - tau) * target.biases[l] + tau * src.biases[l];
  }
}

Mat batch_q_input(const Mat& obs, const Mat& act) {
  Mat oa(obs.rows() + act.rows(), obs.cols());
  oa.topRows(obs.rows()) = obs;
  oa.bottomRows(act.rows()) = act;
  return oa;
}

}  // namespace

double mean_return(const env::EnvSpec& spec, const PolicyBundle& bundle, int n_rollouts,
                   long seed_base, ActMode mode) {
  double total = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    BundlePolicy p(bundle, mode, seed_base + i);
    total += env::rollout(spec, p, seed_base + i).undiscounted_return;
  }
  return total / n_rollouts;
}

double random_policy_baseline(const env::EnvSpec& spec, int n_rollouts, long seed_base) {
  double total = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    Rng rng(uint64_t(seed_base + i) * 0x2545f4914f6cdd1dULL + 17);
    env::FunctionPolicy p([&](const Vec&) {
      Vec a(spec.action_dim);
      for (int k = 0; k < spec.action_dim; ++k)
        a[k] = uniform(rng, spec.action_low[k], spec.action_high[k]);
      return a;
    });
    total += env::rollout(spec, p, seed_base + i).undiscounted_return;
  }
  return total / n_rollouts;
}

PolicyBundle train_td3(const env::EnvSpec& spec, const Td3Config& cfg, long seed, TrainLog* log) {
  spec.validate();
  Rng rng(uint64_t(seed) * 0x9e3779b97f4a7c15ULL + 1);

  PolicyBundle b;
  b.algo = Algo::kTd3;
  b.obs_dim = spec.obs_dim;
  b.action_dim = spec.action_dim;
  b.action_low = spec.action_low;
  b.action_high = spec.action_high;

  std::vector<int> pi_dims = {spec.obs_dim};
  pi_dims.insert(pi_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  pi_dims.push_back(spec.action_dim);
  std::vector<int> q_dims = {spec.obs_dim + spec.action_dim};
  q_dims.insert(q_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  q_dims.push_back(1);

  b.policy = diff::make_mlp(pi_dims, rng);
  b.q1 = diff::make_mlp(q_dims, rng);
  b.q2 = diff::make_mlp(q_dims, rng);
  // ReLU critics: point_mass observations are unbounded, and tanh hidden units
  // saturate once a mid-training policy wanders far from the goal.
  b.q1.hidden = diff::Activation::kRelu;
  b.q2.hidden = diff::Activation::kRelu;
  b.has_q = true;

  MlpParams pi_tgt = b.policy, q1_tgt = b.q1, q2_tgt = b.q2;

  Adam actor_opt(cfg.actor_lr), critic_opt(cfg.critic_lr);
  actor_opt.register_params(all_ptrs({&b.policy}));
  critic_opt.register_params(all_ptrs({&b.q1, &b.q2}));

  ReplayBuffer buffer(cfg.buffer_size);
  Vec half = 0.5 * (spec.action_high - spec.action_low);

  long step_count = 0;
  int episode = 0;
  long updates = 0;
  while (step_count < cfg.total_steps) {
    Vec state = env::reset(spec, seed * 131071 + episode);
    double ep_return = 0.0;
    for (int t = 0; t < spec.horizon && step_count < cfg.total_steps; ++t) {
      Vec obs = env::observe(spec, state);
      Vec action(spec.action_dim);
      if (step_count < cfg.start_steps) {
        for (int k = 0; k < spec.action_dim; ++k)
          action[k] = uniform(rng, spec.action_low[k], spec.action_high[k]);
      } else {
        action = policy_mean(b, obs);
        for (int k = 0; k < spec.action_dim; ++k)
          action[k] += cfg.expl_noise * half[k] * gaussian(rng);
        action = action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
      }
      env::StepResult res = env::step(spec, state, action, t);
      buffer.push({obs, action, res.next_obs, res.reward, res.done});
      ep_return += res.reward;
      state = res.next_state;
      ++step_count;

      if (long(buffer.size()) < cfg.batch_size || step_count < cfg.start_steps) continue;

      // critic update
      int B = cfg.batch_size;
      Mat O(spec.obs_dim, B), A(spec.action_dim, B), O2(spec.obs_dim, B);
      Vec R(B), D(B);
      for (int i = 0; i < B; ++i) {
        const Transition& tr = buffer.sample(rng);
        O.col(i) = tr.obs;
        A.col(i) = tr.action;
        O2.col(i) = tr.next_obs;
        R[i] = tr.reward;
        // done only ever marks horizon truncation in these envs, not a true
        // terminal state, so always bootstrap.
        D[i] = 0.0;
      }
      Mat a2;
      {
        // target policy smoothing
        PolicyBundle tgt_view = b;
        tgt_view.policy = pi_tgt;
        a2 = policy_mean(tgt_view, O2);
        for (int i = 0; i < B; ++i) {
          for (int k = 0; k < spec.action_dim; ++k) {
            double n = std::clamp(cfg.target_noise * half[k] * gaussian(rng),
                                  -cfg.noise_clip * half[k], cfg.noise_clip * half[k]);
            a2(k, i) = std::clamp(a2(k, i) + n, spec.action_low[k], spec.action_high[k]);
          }
        }
      }
      Mat oa2 = batch_q_input(O2, a2);
      Eigen::RowVectorXd qt = diff::mlp_forward(q1_tgt, oa2)
                                  .cwiseMin(diff::mlp_forward(q2_tgt, oa2))
                                  .row(0);
      Eigen::RowVectorXd y = R.transpose().array() +
                             spec.gamma * (1.0 - D.transpose().array()) * qt.array();

      Tape tp;
      auto q1v = diff::lift(tp, b.q1, true);
      auto q2v = diff::lift(tp, b.q2, true);
      Var oa = tp.leaf(batch_q_input(O, A));
      Var yv = tp.leaf(Mat(y));
      Var l1 = tp.sum_sq(tp.sub(diff::mlp_apply(tp, q1v, b.q1, oa), yv));
      Var l2 = tp.sum_sq(tp.sub(diff::mlp_apply(tp, q2v, b.q2, oa), yv));
      Var loss = tp.scale(tp.add(l1, l2), 1.0 / B);
      check_finite_loss(tp.val(loss)(0, 0), "train_td3/critic");
      if (log) log->losses.push_back(tp.val(loss)(0, 0));
      tp.backward(loss);
      std::vector<Var> cv = diff::flatten(q1v);
      for (Var v : diff::flatten(q2v)) cv.push_back(v);
      critic_opt.step(diff::collect_grads(tp, cv));
      ++updates;

      if (updates % cfg.policy_delay == 0) {
        Tape ta;
        auto piv = diff::lift(ta, b.policy, true);
        auto q1f = diff::lift(ta, b.q1, false);
        Var ov = ta.leaf(O);
        Var act = policy_mean_op(ta, piv, b, ov);
        Var q = diff::mlp_apply(ta, q1f, b.q1, ta.vcat(ov, act));
        Var aloss = ta.neg(ta.mean(q));
        check_finite_loss(ta.val(aloss)(0, 0), "train_td3/actor");
        ta.backward(aloss);
        actor_opt.step(diff::collect_grads(ta, diff::flatten(piv)));
        polyak(pi_tgt, b.policy, cfg.tau);
        polyak(q1_tgt, b.q1, cfg.tau);
        polyak(q2_tgt, b.q2, cfg.tau);
      }
    }
    if (log) log->episode_returns.push_back(ep_return);
    ++episode;
  }
  return b;
}

Vec normalize_advantages(const Vec& adv) {
  double mean = adv.mean();
  double sd = std::sqrt((adv.array() - mean).square().sum() / std::max<double>(1.0, adv.size()));
  return (adv.array() - mean) / (sd + 1e-8);
}

PolicyBundle train_ppo(const env::EnvSpec& spec, const PpoConfig& cfg, long seed, TrainLog* log) {
  spec.validate();
  auto state = std::make_shared<Vec>();
  PpoEnvIface iface;
  iface.obs_dim = spec.obs_dim;
  iface.action_dim = spec.action_dim;
  iface.action_low = spec.action_low;
  iface.action_high = spec.action_high;
  iface.gamma = spec.gamma;
  iface.horizon = spec.horizon;
  iface.reset = [&spec, state](long ep_seed) {
    *state = env::reset(spec, ep_seed);
    return env::observe(spec, *state);
  };
  iface.step = [&spec, state](const Vec& action, int t) {
    env::StepResult res = env::step(spec, *state, action, t);
    *state = res.next_state;
    return std::make_pair(res.reward, res.next_obs);
  };
  return train_ppo_env(iface, cfg, seed, log);
}

PolicyBundle train_ppo_env(const PpoEnvIface& iface, const PpoConfig& cfg, long seed,
                           TrainLog* log) {
  Rng rng(uint64_t(seed) * 0x9e3779b97f4a7c15ULL + 2);

  PolicyBundle b;
  b.algo = Algo::kPpo;
  b.obs_dim = iface.obs_dim;
  b.action_dim = iface.action_dim;
  b.action_low = iface.action_low;
  b.action_high = iface.action_high;
  Vec half = 0.5 * (iface.action_high - iface.action_low);
  b.sigma = cfg.sigma * half;

  std::vector<int> pi_dims = {iface.obs_dim};
  pi_dims.insert(pi_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  pi_dims.push_back(iface.action_dim);
  std::vector<int> v_dims = {iface.obs_dim};
  v_dims.insert(v_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  v_dims.push_back(1);

  b.policy = diff::make_mlp(pi_dims, rng);
  b.v = diff::make_mlp(v_dims, rng);
  b.v.hidden = diff::Activation::kRelu;  // see critic note in train_td3
  b.has_v = true;

  Adam opt(cfg.lr);
  {
    std::vector<Mat*> params = all_ptrs({&b.policy, &b.v});
    opt.register_params(params);
  }

  Vec inv_sigma = b.sigma.cwiseInverse();

  long step_count = 0;
  int episode = 0;
  while (step_count < cfg.total_steps) {
    // collect a batch of whole episodes
    std::vector<Vec> obs_buf, act_buf;
    std::vector<double> rew_buf, val_buf, lp_buf, boot_vals;
    std::vector<int> ep_ends;
    for (int e = 0; e < cfg.episodes_per_iter && step_count < cfg.total_steps; ++e) {
      Vec obs = iface.reset(seed * 131071 + episode);
      double ep_ret = 0.0;
      for (int t = 0; t < iface.horizon; ++t) {
        Vec mu = policy_mean(b, obs);
        Vec noise = gaussian_vec(rng, iface.action_dim);
        Vec sample = mu.array() + b.sigma.array() * noise.array();
        double lp = -0.5 * ((sample - mu).cwiseProduct(inv_sigma)).squaredNorm();
        Vec a_env = sample.cwiseMax(iface.action_low).cwiseMin(iface.action_high);
        auto [reward, next_obs] = iface.step(a_env, t);
        obs_buf.push_back(obs);
        act_buf.push_back(sample);  // unclipped, matching the stored log-prob
        rew_buf.push_back(reward);
        val_buf.push_back(diff::mlp_forward(b.v, obs)[0]);
        lp_buf.push_back(lp);
        ep_ret += reward;
        obs = next_obs;
        ++step_count;
      }
      ep_ends.push_back(int(obs_buf.size()));
      // value of the observation after the last step: the horizon is a
      // truncation, not a terminal state, so GAE bootstraps through it
      boot_vals.push_back(diff::mlp_forward(b.v, obs)[0]);
      if (log) log->episode_returns.push_back(ep_ret);
      ++episode;
    }

    // GAE with a bootstrap value at the truncated horizon
    int N = int(obs_buf.size());
    Vec adv(N), ret(N);
    int start = 0;
    for (std::size_t e = 0; e < ep_ends.size(); ++e) {
      int end = ep_ends[e];
      double last_adv = 0.0;
      for (int i = end - 1; i >= start; --i) {
        double next_v = (i + 1 < end) ? val_buf[i + 1] : boot_vals[e];
        double delta = rew_buf[i] + iface.gamma * next_v - val_buf[i];
        last_adv = delta + iface.gamma * cfg.gae_lambda * ((i + 1 < end) ? last_adv : 0.0);
        adv[i] = last_adv;
        ret[i] = adv[i] + val_buf[i];
      }
      start = end;
    }
    adv = normalize_advantages(adv);

    std::vector<int> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    for (int ep = 0; ep < cfg.epochs; ++ep) {
      std::shuffle(idx.begin(), idx.end(), rng);
      for (int ofs = 0; ofs + cfg.minibatch <= N; ofs += cfg.minibatch) {
        int B = cfg.minibatch;
        Mat O(iface.obs_dim, B), A(iface.action_dim, B);
        Mat advm(1, B), lpold(1, B), retm(1, B);
        for (int i = 0; i < B; ++i) {
          int k = idx[ofs + i];
          O.col(i) = obs_buf[k];
          A.col(i) = act_buf[k];
          advm(0, i) = adv[k];
          lpold(0, i) = lp_buf[k];
          retm(0, i) = ret[k];
        }
        Tape t;
        auto piv = diff::lift(t, b.policy, true);
        auto vv = diff::lift(t, b.v, true);
        Var ov = t.leaf(O);
        Var mu = policy_mean_op(t, piv, b, ov);
        Var diffa = t.cmul(t.sub(t.leaf(A), mu),
                           t.leaf(Mat(inv_sigma.replicate(1, B))));
        Var lp_new = t.scale(t.colwise_sum(t.square_(diffa)), -0.5);
        Var ratio = t.exp_(t.sub(lp_new, t.leaf(lpold)));
        Var advv = t.leaf(advm);
        Var s1 = t.cmul(ratio, advv);
        Var s2 = t.cmul(t.clamp_(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), advv);
        Var pi_loss = t.neg(t.mean(t.cmin(s1, s2)));
        Var vpred = diff::mlp_apply(t, vv, b.v, ov);
        Var v_loss = t.mean(t.square_(t.sub(vpred, t.leaf(retm))));
        Var loss = t.add(pi_loss, t.scale(v_loss, cfg.vf_coef));
        check_finite_loss(t.val(loss)(0, 0), "train_ppo");
        if (log) log->losses.push_back(t.val(loss)(0, 0));
        t.backward(loss);
        std::vector<Var> vars = diff::flatten(piv);
        for (Var v : diff::flatten(vv)) vars.push_back(v);
        opt.step(diff::collect_grads(t, vars));
      }
    }
  }
  return b;
}

void train_q_for_ppo(PolicyBundle& bundle, const Dataset& d_normal, const FittedQConfig& cfg,
                     double gamma, long seed, TrainLog* log) {
  require(bundle.algo == Algo::kPpo, "train_q_for_ppo: bundle must be PPO");
  require(!d_normal.trajectories.empty(), "train_q_for_ppo: empty dataset");
  Rng rng(uint64_t(seed) * 0x9e3779b97f4a7c15ULL + 3);

  std::vector<Transition> data;
  for (const auto& tr : d_normal.trajectories) {
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
      const auto& s = tr.steps[i];
      Vec next = (i + 1 < tr.steps.size()) ? tr.steps[i + 1].obs : s.obs;
      data.push_back({s.obs, s.action, next, s.reward, s.done});
    }
  }

  std::vector<int> q_dims = {bundle.obs_dim + bundle.action_dim};
  q_dims.insert(q_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  q_dims.push_back(1);
  bundle.q1 = diff::make_mlp(q_dims, rng);
  bundle.q1.hidden = diff::Activation::kRelu;  // see critic note in train_td3
  // near-zero head keeps early TD targets small
  bundle.q1.weights.back() *= 1e-3;
  bundle.has_q = true;
  MlpParams q_tgt = bundle.q1;

  Adam opt(cfg.lr);
  opt.register_params(all_ptrs({&bundle.q1}));

  int N = int(data.size());
  std::vector<int> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    std::shuffle(idx.begin(), idx.end(), rng);
    double ep_loss = 0.0;
    int batches = 0;
    for (int ofs = 0; ofs + cfg.batch_size <= N; ofs += cfg.batch_size) {
      int B = cfg.batch_size;
      Mat O(bundle.obs_dim, B), A(bundle.action_dim, B), O2(bundle.obs_dim, B);
      Vec R(B), D(B);
      for (int i = 0; i < B; ++i) {
        const Transition& tr = data[idx[ofs + i]];
        O.col(i) = tr.obs;
        A.col(i) = tr.action;
        O2.col(i) = tr.next_obs;
        R[i] = tr.reward;
        // horizon truncation is not a terminal state; the last step self-loops
        // on its own observation, so bootstrapping is safe there too.
        D[i] = 0.0;
      }
      Mat a2 = policy_mean(bundle, O2);
      Eigen::RowVectorXd qt = diff::mlp_forward(q_tgt, batch_q_input(O2, a2)).row(0);
      Eigen::RowVectorXd y =
          R.transpose().array() + gamma * (1.0 - D.transpose().array()) * qt.array();

      Tape t;
      auto qv = diff::lift(t, bundle.q1, true);
      Var pred = diff::mlp_apply(t, qv, bundle.q1, t.leaf(batch_q_input(O, A)));
      Var loss = t.scale(t.sum_sq(t.sub(pred, t.leaf(Mat(y)))), 1.0 / B);
      check_finite_loss(t.val(loss)(0, 0), "train_q_for_ppo");
      ep_loss += t.val(loss)(0, 0);
      ++batches;
      t.backward(loss);
      opt.step(diff::collect_grads(t, diff::flatten(qv)));
      polyak(q_tgt, bundle.q1, 0.01);
    }
    if (log && batches > 0) log->losses.push_back(ep_loss / batches);
  }
}

}  // namespace obsdef::policy
