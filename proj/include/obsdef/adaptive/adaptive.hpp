#pragma once

#include "obsdef/attack/adversary.hpp"
#include "obsdef/attack/attacks.hpp"
#include "obsdef/attack/cem.hpp"
#include "obsdef/shield/defense.hpp"

namespace obsdef::adaptive {

// Defense-aware attacks. The attacker holds copies of the detector and
// denoiser, mirrors their recurrent states on the stream it actually
// emitted, differentiates through denoiser -> policy, and couples the base
// objective with a detector term
//   l_det(o, o_hat) = || det(o_hat) - o ||_inf
// (the detector's reconstruction of the perturbed point against the clean
// observation). The default sign *adds* l_det to the maximized objective;
// det_term_sign = -1 flips it so the attacker instead evades the detector.
struct AdaptiveConfig {
  attack::AttackKind kind = attack::AttackKind::kOpposite;
  double lambda_det = 1.0;
  double det_term_sign = 1.0;
  int expectation_samples = 4; // latent noise draws averaged per objective eval;
                               // <= 0 means mean-mode models
  attack::PgdConfig pgd;
  attack::CemConfig cem;       // enchanting only
};

// || det(o_hat) - o ||_inf with frozen detector state (plain eval).
double l_det_loss(const shield::GruVae& detector, const Vec& o, const Vec& o_hat,
                  const shield::GruVaeState& state);

// The per-step PGD objective (single column): base attack objective through
// denoiser -> policy plus det_term_sign * lambda_det * l_det, averaged over
// the given latent noise draws (empty noises = mean mode). a_ref is the
// reference action for the opposite/enchanting bases; ignored for q_function.
attack::BatchLossFn adaptive_objective(const policy::PolicyBundle& bundle,
                                       const shield::GruVae& detector,
                                       const shield::GruVae& denoiser,
                                       const shield::GruVaeState& det_state,
                                       const shield::GruVaeState& den_state,
                                       const Vec& o_clean, const Vec& a_ref,
                                       const AdaptiveConfig& cfg,
                                       const std::vector<Vec>& noises);

class AdaptiveAttacker {
 public:
  AdaptiveAttacker(const policy::PolicyBundle& bundle, const shield::GruVae& detector,
                   const shield::GruVae& denoiser, const env::EnvSpec& spec,
                   const attack::AttackBudget& budget, const AdaptiveConfig& cfg,
                   uint64_t seed);

  // Set for kind == kOptimal: the adversary trained against the defended
  // victim; other kinds run PGD per step.
  void set_adversary(attack::AdversaryPolicy adv) { adversary_ = std::move(adv); }

  void begin_episode();
  // Crafts the perturbed observation for this step and advances the
  // mirrored detector/denoiser states on it.
  env::AttackResult attack(const env::StepContext& ctx);

  env::StepHooks hooks();

 private:
  Vec craft(const env::StepContext& ctx);

  const policy::PolicyBundle& bundle_;
  const shield::GruVae& detector_;
  const shield::GruVae& denoiser_;
  env::EnvSpec spec_;
  attack::AttackBudget budget_;
  AdaptiveConfig cfg_;
  Rng rng_;
  shield::GruVaeState det_state_, den_state_;
  std::optional<attack::AdversaryPolicy> adversary_;
};

// Convenience: trains the optimal adversary directly against the defended
// policy (online; steps the real environment).
attack::AdversaryPolicy train_adaptive_adversary(
    const policy::PolicyBundle& bundle, const shield::GruVae& detector,
    const shield::GruVae& denoiser, const shield::DefendedConfig& dcfg,
    const env::EnvSpec& spec, const attack::AttackBudget& budget,
    const policy::PpoConfig& cfg, long seed, policy::TrainLog* log = nullptr);

}  // namespace obsdef::adaptive
