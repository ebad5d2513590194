#pragma once

#include "obsdef/attack/pgd.hpp"
#include "obsdef/data.hpp"
#include "obsdef/policy/bundle.hpp"

namespace obsdef::attack {

enum class AttackKind { kOpposite, kQFunction, kOptimal, kEnchanting };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kOpposite: return "opposite";
    case AttackKind::kQFunction: return "q_function";
    case AttackKind::kOptimal: return "optimal";
    case AttackKind::kEnchanting: return "enchanting";
  }
  return "?";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "opposite" || s == "ops") return AttackKind::kOpposite;
  if (s == "q_function" || s == "q") return AttackKind::kQFunction;
  if (s == "optimal" || s == "opt") return AttackKind::kOptimal;
  if (s == "enchanting" || s == "enc") return AttackKind::kEnchanting;
  throw std::invalid_argument("unknown attack: " + s);
}

// Batched objectives for the PGD inner optimizer. Each returns per-column
// values and input gradients; clean_obs columns align with o_hat columns.

// l_op: action divergence between pi(o) and pi(o_hat). Mahalanobis under
// Sigma for PPO, Euclidean for TD3.
BatchLossFn opposite_loss(const policy::PolicyBundle& bundle, const Mat& clean_obs);

// -Q(o, pi(o_hat)): the Q keeps the clean observation as its first argument.
BatchLossFn q_attack_loss(const policy::PolicyBundle& bundle, const Mat& clean_obs);

// -||pi(o_hat) - a_target||_2 per column.
BatchLossFn enchanting_loss(const policy::PolicyBundle& bundle, const Mat& a_target);

struct AttackOutcome {
  Vec o_hat;
  double objective = 0.0;
};

AttackOutcome opposite_attack(const policy::PolicyBundle& bundle, const Vec& o,
                              const AttackBudget& budget, const PgdConfig& cfg, Rng& rng);

AttackOutcome q_attack(const policy::PolicyBundle& bundle, const Vec& o,
                       const AttackBudget& budget, const PgdConfig& cfg, Rng& rng);

// a_target is the first planned adversarial action; objective reported as
// the residual action distance ||pi(o_hat) - a_target||_2.
AttackOutcome enchanting_attack(const policy::PolicyBundle& bundle, const Vec& o,
                                const Vec& a_target, const AttackBudget& budget,
                                const PgdConfig& cfg, Rng& rng);

// Attack-timing rule: attack iff V(o) < c_vul.
struct VulnerabilityIndicator {
  double c_vul = std::numeric_limits<double>::infinity();
  const policy::PolicyBundle* bundle = nullptr;
};

bool should_attack(const VulnerabilityIndicator& ind, const Vec& o);

// Per-step attack used while tuning c_vul; returns the attacked observation.
using StepAttackFn = std::function<Vec(const Vec& obs, Rng& rng)>;

struct CvulTrial {
  double c_vul = 0.0;
  double mean_reward = 0.0;
  double attack_frequency = 0.0;
};

// Linear search: among candidates whose measured attack frequency stays
// <= f_max, picks the one minimizing attacked mean reward; ties resolve to
// the lower frequency. Candidates are V-quantiles over d_normal.
double tune_c_vul(const policy::PolicyBundle& bundle, const env::EnvSpec& spec,
                  const StepAttackFn& attack, double f_max,
                  const std::vector<double>& quantiles, const Dataset& d_normal,
                  int eval_rollouts, long seed, std::vector<CvulTrial>* trials = nullptr);

struct AdvSequence {
  std::vector<Vec> clean;
  std::vector<Vec> attacked;
  std::vector<bool> flags;
  AttackKind kind = AttackKind::kOpposite;
};

struct AdversarialDataset {
  std::vector<AdvSequence> sequences;
  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.clean.size();
    return n;
  }
};

// Offline augmentation: attacked copies of every observation in d_normal,
// one sequence per (trajectory, attack). Only the opposite and Q-function
// attacks are offline-eligible; anything else is rejected. Performs zero
// environment steps. If indicator is non-null, flags follow the
// vulnerability rule evaluated on the clean observation; otherwise every
// step is flagged and attacked.
AdversarialDataset build_adv_dataset(const Dataset& d_normal,
                                     const policy::PolicyBundle& bundle,
                                     const std::vector<AttackKind>& attacks,
                                     const AttackBudget& budget, const PgdConfig& cfg,
                                     long seed,
                                     const VulnerabilityIndicator* indicator = nullptr);

}  // namespace obsdef::attack
