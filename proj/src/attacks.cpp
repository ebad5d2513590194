#include "obsdef/attack/attacks.hpp"

#include <algorithm>

namespace obsdef::attack {

using diff::Tape;
using diff::Var;
using policy::PolicyBundle;

PgdBatchResult pgd_maximize_batch(const BatchLossFn& loss_fn, const Mat& o, const Vec& radius,
                                  const PgdConfig& cfg, Rng& rng) {
  cfg.validate();
  const int B = int(o.cols());
  PgdBatchResult out;
  out.gradient_failed.assign(B, false);

  // clean point is always a candidate
  BatchLoss clean = loss_fn(o);
  out.o_hat = o;
  out.objective = clean.value;

  auto update_best = [&](const Eigen::RowVectorXd& value, const Mat& x) {
    for (int j = 0; j < B; ++j) {
      if (out.gradient_failed[j]) continue;
      if (value[j] > out.objective[j]) {
        out.objective[j] = value[j];
        out.o_hat.col(j) = x.col(j);
      }
    }
  };

  Vec step = cfg.step_frac * radius;
  int runs = 1 + std::max(0, cfg.restarts);
  for (int run = 0; run < runs; ++run) {
    Mat x = o;
    if (run > 0 && cfg.random_init) {
      for (int j = 0; j < B; ++j)
        for (Eigen::Index i = 0; i < o.rows(); ++i)
          x(i, j) += uniform(rng, -radius[i], radius[i]);
    }
    for (int k = 0; k < cfg.steps; ++k) {
      BatchLoss l = loss_fn(x);
      update_best(l.value, x);
      for (int j = 0; j < B; ++j) {
        if (!l.grad.col(j).allFinite()) {
          out.gradient_failed[j] = true;
          continue;
        }
        x.col(j) += step.cwiseProduct(l.grad.col(j).cwiseSign());
      }
      x = project_linf(x, o, radius);
    }
    BatchLoss last = loss_fn(x);
    update_best(last.value, x);
  }
  for (int j = 0; j < B; ++j) {
    if (out.gradient_failed[j]) {
      out.o_hat.col(j) = o.col(j);
      out.objective[j] = clean.value[j];
    }
  }
  return out;
}

PgdResult pgd_maximize(const BatchLossFn& loss_fn, const Vec& o, const AttackBudget& budget,
                       const PgdConfig& cfg, Rng& rng) {
  PgdBatchResult r = pgd_maximize_batch(loss_fn, Mat(o), budget.radius(o.size()), cfg, rng);
  return PgdResult{Vec(r.o_hat.col(0)), r.objective[0], r.gradient_failed[0]};
}

namespace {

// Per-column objective as a 1xB row plus backward through the summed row;
// columns are independent so each column's gradient is exact.
BatchLoss row_objective_with_grad(Tape& t, Var row, Var input) {
  Var total = t.sum(row);
  t.backward(total);
  return BatchLoss{Eigen::RowVectorXd(t.val(row).row(0)), t.grad(input)};
}

Var column_l2_norm(Tape& t, Var m) { return t.sqrt_(t.colwise_sum(t.square_(m))); }

}  // namespace

BatchLossFn opposite_loss(const PolicyBundle& bundle, const Mat& clean_obs) {
  Mat mu_clean = policy::policy_mean(bundle, clean_obs);
  bool ppo = bundle.algo == policy::Algo::kPpo;
  Vec inv_sigma2;
  if (ppo) inv_sigma2 = bundle.sigma.array().square().inverse();
  return [&bundle, mu_clean, ppo, inv_sigma2](const Mat& o_hat) {
    Tape t;
    auto pv = diff::lift(t, bundle.policy, false);
    Var x = t.leaf(o_hat, true);
    Var mu = policy::policy_mean_op(t, pv, bundle, x);
    Var delta = t.sub(t.leaf(mu_clean), mu);
    Var row;
    if (ppo) {
      Var w = t.leaf(Mat(inv_sigma2.replicate(1, o_hat.cols())));
      row = t.colwise_sum(t.cmul(t.square_(delta), w));
    } else {
      row = column_l2_norm(t, delta);
    }
    return row_objective_with_grad(t, row, x);
  };
}

BatchLossFn q_attack_loss(const PolicyBundle& bundle, const Mat& clean_obs) {
  require(bundle.has_q, "q_attack: bundle has no usable Q function");
  bool twin = bundle.algo == policy::Algo::kTd3;
  return [&bundle, clean_obs, twin](const Mat& o_hat) {
    Tape t;
    auto pv = diff::lift(t, bundle.policy, false);
    auto q1v = diff::lift(t, bundle.q1, false);
    Var x = t.leaf(o_hat, true);
    Var a = policy::policy_mean_op(t, pv, bundle, x);
    Var oa = t.vcat(t.leaf(clean_obs), a);
    Var q = diff::mlp_apply(t, q1v, bundle.q1, oa);
    if (twin) {
      auto q2v = diff::lift(t, bundle.q2, false);
      q = t.cmin(q, diff::mlp_apply(t, q2v, bundle.q2, oa));
    }
    return row_objective_with_grad(t, t.neg(q), x);
  };
}

BatchLossFn enchanting_loss(const PolicyBundle& bundle, const Mat& a_target) {
  return [&bundle, a_target](const Mat& o_hat) {
    Tape t;
    auto pv = diff::lift(t, bundle.policy, false);
    Var x = t.leaf(o_hat, true);
    Var mu = policy::policy_mean_op(t, pv, bundle, x);
    Var row = t.neg(column_l2_norm(t, t.sub(mu, t.leaf(a_target))));
    return row_objective_with_grad(t, row, x);
  };
}

AttackOutcome opposite_attack(const PolicyBundle& bundle, const Vec& o,
                              const AttackBudget& budget, const PgdConfig& cfg, Rng& rng) {
  bundle.validate();
  PgdResult r = pgd_maximize(opposite_loss(bundle, Mat(o)), o, budget, cfg, rng);
  return {r.o_hat, r.objective};
}

AttackOutcome q_attack(const PolicyBundle& bundle, const Vec& o, const AttackBudget& budget,
                       const PgdConfig& cfg, Rng& rng) {
  bundle.validate();
  PgdResult r = pgd_maximize(q_attack_loss(bundle, Mat(o)), o, budget, cfg, rng);
  // report the achieved Q, not its negation
  return {r.o_hat, -r.objective};
}

AttackOutcome enchanting_attack(const PolicyBundle& bundle, const Vec& o, const Vec& a_target,
                                const AttackBudget& budget, const PgdConfig& cfg, Rng& rng) {
  bundle.validate();
  PgdResult r = pgd_maximize(enchanting_loss(bundle, Mat(a_target)), o, budget, cfg, rng);
  return {r.o_hat, -r.objective};
}

bool should_attack(const VulnerabilityIndicator& ind, const Vec& o) {
  require(ind.bundle != nullptr, "should_attack: indicator has no value function");
  return policy::state_value(*ind.bundle, o) < ind.c_vul;
}

double tune_c_vul(const PolicyBundle& bundle, const env::EnvSpec& spec,
                  const StepAttackFn& attack, double f_max,
                  const std::vector<double>& quantiles, const Dataset& d_normal,
                  int eval_rollouts, long seed, std::vector<CvulTrial>* trials) {
  require(!quantiles.empty(), "tune_c_vul: empty candidate grid");

  std::vector<double> values;
  for (const auto& tr : d_normal.trajectories)
    for (const auto& s : tr.steps) values.push_back(policy::state_value(bundle, s.obs));
  require(!values.empty(), "tune_c_vul: empty dataset");
  std::sort(values.begin(), values.end());

  auto quantile = [&](double q) {
    double pos = std::clamp(q, 0.0, 1.0) * double(values.size() - 1);
    return values[std::size_t(pos)];
  };

  double best_c = quantile(quantiles.front());
  double best_reward = std::numeric_limits<double>::infinity();
  double best_freq = std::numeric_limits<double>::infinity();
  bool any_admissible = false;

  for (double q : quantiles) {
    double c = quantile(q);
    double total_reward = 0.0;
    long attacked_steps = 0, total_steps = 0;
    for (int i = 0; i < eval_rollouts; ++i) {
      Rng rng(uint64_t(seed) * 0x9e3779b97f4a7c15ULL + uint64_t(i) + 11);
      policy::BundlePolicy pol(bundle, policy::ActMode::kMean, seed + i);
      env::StepHooks hooks;
      hooks.attack = [&](const env::StepContext& ctx) {
        ++total_steps;
        if (policy::state_value(bundle, ctx.clean_obs) < c) {
          ++attacked_steps;
          return env::AttackResult{attack(ctx.clean_obs, rng), true};
        }
        return env::AttackResult{ctx.clean_obs, false};
      };
      total_reward += env::rollout(spec, pol, seed + i, &hooks).undiscounted_return;
    }
    double mean_reward = total_reward / eval_rollouts;
    double freq = total_steps > 0 ? double(attacked_steps) / double(total_steps) : 0.0;
    if (trials) trials->push_back({c, mean_reward, freq});
    if (freq > f_max + 1e-12) continue;
    if (!any_admissible || mean_reward < best_reward ||
        (mean_reward == best_reward && freq < best_freq)) {
      best_c = c;
      best_reward = mean_reward;
      best_freq = freq;
    }
    any_admissible = true;
  }
  if (!any_admissible) {
    // no candidate meets the frequency budget: disable attacks entirely
    best_c = values.front() - 1.0;
  }
  return best_c;
}

AdversarialDataset build_adv_dataset(const Dataset& d_normal, const PolicyBundle& bundle,
                                     const std::vector<AttackKind>& attacks,
                                     const AttackBudget& budget, const PgdConfig& cfg,
                                     long seed, const VulnerabilityIndicator* indicator) {
  for (AttackKind k : attacks) {
    require(k == AttackKind::kOpposite || k == AttackKind::kQFunction,
            "build_adv_dataset: attack '" + to_string(k) +
                "' needs online environment access and cannot build an offline dataset");
  }
  AdversarialDataset out;
  if (d_normal.trajectories.empty()) return out;

  Rng rng(uint64_t(seed) * 0x9e3779b97f4a7c15ULL + 23);
  for (AttackKind kind : attacks) {
    for (const auto& tr : d_normal.trajectories) {
      AdvSequence seq;
      seq.kind = kind;
      int T = int(tr.steps.size());
      if (T == 0) continue;
      Mat O(tr.steps.front().obs.size(), T);
      for (int i = 0; i < T; ++i) O.col(i) = tr.steps[i].obs;

      std::vector<bool> flags(T, true);
      if (indicator) {
        for (int i = 0; i < T; ++i) flags[i] = should_attack(*indicator, O.col(i));
      }

      BatchLossFn loss = kind == AttackKind::kOpposite ? opposite_loss(bundle, O)
                                                       : q_attack_loss(bundle, O);
      PgdBatchResult res = pgd_maximize_batch(loss, O, budget.radius(O.rows()), cfg, rng);
      for (int i = 0; i < T; ++i) {
        seq.clean.push_back(Vec(O.col(i)));
        seq.attacked.push_back(flags[i] ? Vec(res.o_hat.col(i)) : Vec(O.col(i)));
        seq.flags.push_back(flags[i]);
      }
      out.sequences.push_back(std::move(seq));
    }
  }
  return out;
}

}  // namespace obsdef::attack
