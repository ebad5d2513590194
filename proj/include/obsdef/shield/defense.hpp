#pragma once

#include <optional>

#include "obsdef/attack/attacks.hpp"
#include "obsdef/data.hpp"
#include "obsdef/env/rollout.hpp"
#include "obsdef/policy/bundle.hpp"
#include "obsdef/shield/gru_vae.hpp"

namespace obsdef::shield {

struct ShieldConfig {
  int hidden_dim = 64;
  int latent_dim = 64;
  double lr = 1e-3;
  int batch = 128;
  int epochs = 50;
  int window = 64;             // truncated-BPTT window length
  LatentMode train_mode = LatentMode::kSample;
  double reg_weight = 0.0;     // robustness regularizer weight (denoiser only)
  attack::PgdConfig reg_pgd;   // inner attack settings for the regularizer
};

struct TrainShieldLog {
  std::vector<double> epoch_loss;
};

// Detector: trained on clean trajectories only, reconstruction target = input.
GruVae train_detector(const Dataset& d_normal, const ShieldConfig& cfg, uint64_t seed,
                      TrainShieldLog* log = nullptr);

// Denoiser: inputs are attacked streams from d_adv plus clean streams from
// d_normal (identity pairs); targets are always the clean observations.
// When cfg.reg_weight > 0 the smoothness regularizer is added, using `bundle`
// and `budget` to craft worst-case perturbations of the window's last step.
GruVae train_denoiser(const Dataset& d_normal, const attack::AdversarialDataset& d_adv,
                      const ShieldConfig& cfg, const policy::PolicyBundle* bundle,
                      const attack::AttackBudget* budget, uint64_t seed,
                      TrainShieldLog* log = nullptr);

// Standalone regularizer value for one observation with given recurrent state:
//   R = l_op( pi(den(o)), pi(den(o_hat*)) )  maximized over the budget ball,
// where l_op is the policy-space distance used by the opposite attack.
double robustness_regularizer(const policy::PolicyBundle& bundle, const GruVae& denoiser,
                              const Vec& obs, const GruVaeState& state,
                              const attack::AttackBudget& budget,
                              const attack::PgdConfig& pgd, Rng& rng);

struct AnomalyVerdict {
  double score = 0.0;       // one-step reconstruction residual ||o - o_out||_inf
  double threshold = 0.0;
  bool is_anomaly = false;
};

// Scores one observation and advances the detector state.
AnomalyVerdict detect(const GruVae& detector, const Vec& obs, GruVaeState& state,
                      double c_anomaly, LatentMode mode, Rng* rng = nullptr);

// Reconstruction scores for every step of every trajectory (state reset at
// episode starts). `attacked_only`: for adversarial data, restrict to steps
// whose attack flag is set.
std::vector<double> detector_scores(const GruVae& detector, const Dataset& data,
                                    LatentMode mode, Rng* rng = nullptr);
std::vector<double> detector_scores(const GruVae& detector,
                                    const attack::AdversarialDataset& adv, bool attacked_only,
                                    LatentMode mode, Rng* rng = nullptr);

struct ThresholdChoice {
  double c_anomaly = 0.0;
  double fnr = 1.0;   // attacked steps scored below threshold
  double f1 = 0.0;
  bool fnr_met = false;
};

// Picks the threshold lexicographically: among candidates with
// FNR <= fnr_max choose max F1 (the largest threshold achieving it);
// if none qualifies, minimize FNR.
ThresholdChoice tune_c_anomaly(const std::vector<double>& clean_scores,
                               const std::vector<double>& attacked_scores,
                               double fnr_max = 0.02);

struct DefendedConfig {
  double c_anomaly = 0.0;
  LatentMode mode = LatentMode::kSample;          // defense-time latent mode
  policy::ActMode act_mode = policy::ActMode::kMean;
};

// Detect-and-denoise wrapper: every step the raw observation is scored by the
// detector and fed to the denoiser (both recurrent states always advance, on
// raw observations). The policy sees the denoised reconstruction only when
// the detector flags the step.
class DefendedPolicy : public env::PolicyAdapter {
 public:
  DefendedPolicy(const policy::PolicyBundle& bundle, const GruVae& detector,
                 const GruVae& denoiser, const DefendedConfig& cfg, uint64_t seed);

  void begin_episode() override;
  Vec act(const Vec& obs) override;
  std::optional<bool> last_verdict() const override { return last_flag_; }
  std::optional<Vec> last_obs_used() const override { return obs_used_; }

  const AnomalyVerdict& verdict() const { return verdict_; }

 private:
  const policy::PolicyBundle& bundle_;
  const GruVae& detector_;
  const GruVae& denoiser_;
  DefendedConfig cfg_;
  GruVaeState det_state_, den_state_;
  Rng rng_;
  AnomalyVerdict verdict_;
  std::optional<bool> last_flag_;
  std::optional<Vec> obs_used_;
};

}  // namespace obsdef::shield
