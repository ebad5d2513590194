#include "obsdef/adaptive/adaptive.hpp"

namespace obsdef::adaptive {

using attack::AttackKind;
using shield::GruVae;
using shield::GruVaeState;
using shield::LatentMode;

double l_det_loss(const GruVae& detector, const Vec& o, const Vec& o_hat,
                  const GruVaeState& state) {
  GruVaeState tmp = state;
  Vec recon = shield::vae_step(detector, o_hat, tmp, LatentMode::kMean).o_out;
  return (recon - o).lpNorm<Eigen::Infinity>();
}

namespace {

// Denoiser step on the tape from frozen-state constants; returns the
// reconstruction node. `noise` null means mean mode.
diff::Var denoise_op(diff::Tape& t, const GruVae& den, const GruVaeState& state, diff::Var x,
                     const Vec* noise) {
  diff::GruCellVars enc = diff::lift(t, den.encoder, false);
  diff::GruCellVars dec = diff::lift(t, den.decoder, false);
  diff::Var h_enc = diff::gru_cell_apply(t, enc, x, t.leaf(state.h_enc));
  diff::Var mu = t.add_bias(t.matmul(t.leaf(den.W_mu), h_enc), t.leaf(den.b_mu));
  diff::Var z = mu;
  if (noise) {
    diff::Var ls = t.add_bias(t.matmul(t.leaf(den.W_logsig), h_enc), t.leaf(den.b_logsig));
    z = diff::gaussian_reparam_op(t, mu, ls, t.leaf(*noise));
  }
  diff::Var h_dec = diff::gru_cell_apply(t, dec, z, t.leaf(state.h_dec));
  return t.add_bias(t.matmul(t.leaf(den.W_out), h_dec), t.leaf(den.b_out));
}

}  // namespace

AdaptiveAttacker::AdaptiveAttacker(const policy::PolicyBundle& bundle, const GruVae& detector,
                                   const GruVae& denoiser, const env::EnvSpec& spec,
                                   const attack::AttackBudget& budget,
                                   const AdaptiveConfig& cfg, uint64_t seed)
    : bundle_(bundle),
      detector_(detector),
      denoiser_(denoiser),
      spec_(spec),
      budget_(budget),
      cfg_(cfg),
      rng_(seed),
      det_state_(shield::zero_state(detector)),
      den_state_(shield::zero_state(denoiser)) {}

void AdaptiveAttacker::begin_episode() {
  det_state_ = shield::zero_state(detector_);
  den_state_ = shield::zero_state(denoiser_);
}

Vec AdaptiveAttacker::craft(const env::StepContext& ctx) {
  const Vec& o = ctx.clean_obs;
  if (cfg_.kind == AttackKind::kOptimal) {
    require(adversary_.has_value(), "adaptive optimal attack needs a trained adversary");
    return adversary_->apply(o);
  }

  // Reference quantities for the base objective, from the attacker's
  // mirrored (frozen) states.
  Vec a_ref;
  if (cfg_.kind == AttackKind::kOpposite) {
    GruVaeState tmp = den_state_;
    Vec den_clean = shield::vae_step(denoiser_, o, tmp, LatentMode::kMean).o_out;
    a_ref = policy::policy_mean(bundle_, den_clean);
  } else if (cfg_.kind == AttackKind::kEnchanting) {
    Mat plan = attack::cem_plan_min_reward(spec_, ctx.state, cfg_.cem, rng_);
    a_ref = plan.col(0);
  }

  // Fixed noise draws per step keep the PGD objective deterministic.
  std::vector<Vec> noises;
  if (cfg_.expectation_samples > 0)
    for (int k = 0; k < cfg_.expectation_samples; ++k)
      noises.push_back(gaussian_vec(rng_, denoiser_.latent_dim));

  attack::BatchLossFn fn = adaptive_objective(bundle_, detector_, denoiser_, det_state_,
                                              den_state_, o, a_ref, cfg_, noises);
  attack::PgdResult r = attack::pgd_maximize(fn, o, budget_, cfg_.pgd, rng_);
  return r.o_hat;
}

attack::BatchLossFn adaptive_objective(const policy::PolicyBundle& bundle,
                                       const GruVae& detector, const GruVae& denoiser,
                                       const GruVaeState& det_state,
                                       const GruVaeState& den_state, const Vec& o_clean,
                                       const Vec& a_ref, const AdaptiveConfig& cfg,
                                       const std::vector<Vec>& noises) {
  int samples = noises.empty() ? 1 : int(noises.size());
  bool sampled = !noises.empty();
  Vec o = o_clean;
  return [=, &bundle, &detector, &denoiser](const Mat& oh) {
    attack::BatchLoss out;
    out.value = Eigen::RowVectorXd::Zero(1);
    out.grad = Mat::Zero(oh.rows(), 1);
    for (int k = 0; k < samples; ++k) {
      diff::Tape t;
      diff::Var x = t.leaf(Vec(oh.col(0)), true);
      diff::Var recon =
          denoise_op(t, denoiser, den_state, x, sampled ? &noises[std::size_t(k)] : nullptr);
      diff::MlpVars pv = diff::lift(t, bundle.policy, false);
      diff::Var act = policy::policy_mean_op(t, pv, bundle, recon);
      diff::Var base{-1};
      switch (cfg.kind) {
        case AttackKind::kOpposite: {
          diff::Var d = t.sub(act, t.leaf(a_ref));
          if (bundle.algo == policy::Algo::kPpo)
            d = t.cmul(d, t.leaf(Vec(bundle.sigma.cwiseInverse())));
          base = t.sum_sq(d);
          break;
        }
        case AttackKind::kQFunction: {
          diff::Var oa = t.vcat(t.leaf(o), act);
          diff::MlpVars q1v = diff::lift(t, bundle.q1, false);
          diff::Var q = diff::mlp_apply(t, q1v, bundle.q1, oa);
          if (bundle.algo == policy::Algo::kTd3) {
            diff::MlpVars q2v = diff::lift(t, bundle.q2, false);
            q = t.cmin(q, diff::mlp_apply(t, q2v, bundle.q2, oa));
          }
          base = t.neg(t.sum(q));
          break;
        }
        case AttackKind::kEnchanting:
          base = t.neg(t.sum_sq(t.sub(act, t.leaf(a_ref))));
          break;
        case AttackKind::kOptimal:
          break;  // never reaches PGD
      }
      // Detector term, mean-mode detector on the frozen state.
      diff::GruCellVars denc = diff::lift(t, detector.encoder, false);
      diff::GruCellVars ddec = diff::lift(t, detector.decoder, false);
      diff::Var dh_enc = diff::gru_cell_apply(t, denc, x, t.leaf(det_state.h_enc));
      diff::Var dmu = t.add_bias(t.matmul(t.leaf(detector.W_mu), dh_enc),
                                 t.leaf(detector.b_mu));
      diff::Var dh_dec = diff::gru_cell_apply(t, ddec, dmu, t.leaf(det_state.h_dec));
      diff::Var drecon =
          t.add_bias(t.matmul(t.leaf(detector.W_out), dh_dec), t.leaf(detector.b_out));
      diff::Var score = t.max_abs(t.sub(drecon, t.leaf(o)));
      diff::Var obj = t.add(base, t.scale(score, cfg.det_term_sign * cfg.lambda_det));
      t.backward(obj);
      out.value(0) += t.val(obj)(0, 0) / double(samples);
      out.grad.col(0) += t.grad(x).col(0) / double(samples);
    }
    return out;
  };
}

env::AttackResult AdaptiveAttacker::attack(const env::StepContext& ctx) {
  Vec o_hat = craft(ctx);
  // Mirror the defense's recurrent updates on the stream it will see.
  shield::vae_step(detector_, o_hat, det_state_, LatentMode::kMean);
  shield::vae_step(denoiser_, o_hat, den_state_, LatentMode::kMean);
  return {o_hat, true};
}

env::StepHooks AdaptiveAttacker::hooks() {
  env::StepHooks h;
  h.begin_episode = [this] { begin_episode(); };
  h.attack = [this](const env::StepContext& ctx) { return attack(ctx); };
  h.attack_name = "adaptive_" + attack::to_string(cfg_.kind);
  return h;
}

attack::AdversaryPolicy train_adaptive_adversary(
    const policy::PolicyBundle& bundle, const GruVae& detector, const GruVae& denoiser,
    const shield::DefendedConfig& dcfg, const env::EnvSpec& spec,
    const attack::AttackBudget& budget, const policy::PpoConfig& cfg, long seed,
    policy::TrainLog* log) {
  shield::DefendedPolicy victim(bundle, detector, denoiser, dcfg, uint64_t(seed) * 977 + 11);
  return attack::train_optimal_adversary(victim, spec, budget, cfg, seed, log);
}

}  // namespace obsdef::adaptive
