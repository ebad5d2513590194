#pragma once

#include "obsdef/adaptive/adaptive.hpp"
#include "obsdef/harness/io.hpp"
#include "obsdef/policy/train.hpp"

namespace obsdef::harness {

// Layered experiment configuration: compiled defaults, then a JSON config
// file, then individual CLI overrides. Unknown keys are config errors.
struct ExperimentConfig {
  std::string env = "point_mass_2d";
  std::string algo = "td3";
  std::string out = "runs/default";
  long seed = 0;

  double epsilon = 0.1;  // l-inf budget, normalized units
  std::vector<std::string> attacks = {"opposite", "q_function", "optimal", "enchanting"};

  int n_traj = 60;          // D_normal size (desk-scale default)
  int eval_rollouts = 20;   // rollouts per evaluation cell
  double collect_noise = 0.1;  // TD3 collect-time exploration noise
                               // (fraction of the action half-width)

  policy::Td3Config td3;
  policy::PpoConfig ppo;
  policy::FittedQConfig fitted_q;
  policy::PpoConfig adversary_ppo;  // optimal-attack adversary training

  shield::ShieldConfig shield;
  double reg_weight = 0.0;

  attack::PgdConfig pgd;
  attack::CemConfig cem;
  adaptive::AdaptiveConfig adaptive;

  double fnr_max = 0.02;     // c_anomaly search constraint
  double f_vul_max = 0.5;    // c_vul search: max admissible attack frequency
  int c_vul_rollouts = 5;    // rollouts per c_vul candidate
  bool use_indicator = true; // time attacks with the vulnerability rule
  std::string defense_mode = "mean";  // "mean" | "sample"

  env::EnvSpec spec() const;
  shield::LatentMode latent_mode() const;

  // Artifact paths inside `out`.
  std::string policy_path() const { return out + "/policy.json"; }
  std::string d_normal_path() const { return out + "/d_normal.ndjson"; }
  std::string d_adv_path(const std::string& attack) const {
    return out + "/d_adv_" + attack + ".ndjson";
  }
  std::string detector_path() const { return out + "/detector.json"; }
  std::string denoiser_path() const { return out + "/denoiser.json"; }
  std::string adversary_path() const { return out + "/adversary.json"; }
  std::string thresholds_path() const { return out + "/thresholds.json"; }
  std::string metrics_path() const { return out + "/metrics.json"; }
  std::string adaptive_metrics_path() const { return out + "/adaptive_metrics.json"; }
};

ExperimentConfig config_from_json(const json& j);
json config_to_json(const ExperimentConfig& c);
// Apply one "key=value" override (dotted keys, e.g. "pgd.steps=5").
void apply_override(json& j, const std::string& kv);

// --- metrics -------------------------------------------------------------

struct DetectorScore {
  double accuracy = 0.0;  // TN / (TN + FP); defined when negatives exist
  double f1 = 0.0;
  double fnr = 0.0;
  long tp = 0, fp = 0, tn = 0, fn = 0;
  bool accuracy_defined = false, f1_defined = false, fnr_defined = false;
  std::string reason;  // set when something is undefined
};

DetectorScore score_detector(const std::vector<bool>& attacked_labels,
                             const std::vector<bool>& verdicts);

// Mean absolute per-dimension error in normalized units (divide by obs_std).
double score_denoiser(const std::vector<Vec>& clean, const std::vector<Vec>& denoised,
                      const Vec& obs_std);

struct AttackCell {
  std::string attack;
  double undefended_return = 0.0, undefended_std = 0.0;
  double defended_return = 0.0, defended_std = 0.0;
  double recovery = 0.0;  // (defended - attacked) / (clean - attacked)
  DetectorScore detector;
  double denoiser_mae = 0.0;
  double attack_frequency = 0.0;
};

struct MetricsReport {
  json header;  // config echo + scale notes
  double clean_undefended = 0.0, clean_undefended_std = 0.0;
  double clean_defended = 0.0, clean_defended_std = 0.0;
  double retention = 0.0;  // clean_defended / clean_undefended
  double clean_flag_rate = 0.0;
  std::vector<AttackCell> cells;
  double avg_undefended = 0.0, min_undefended = 0.0;
  double avg_defended = 0.0, min_defended = 0.0;
  std::string best_attack;  // lowest undefended return

  json to_json() const;
  static MetricsReport from_json(const json& j);
};

struct AdaptiveCell {
  std::string attack;
  double defended_return = 0.0;          // under the non-adaptive attack
  double adaptive_return = 0.0;          // under the adaptive attack
  double pct_change = 0.0;               // (adaptive - defended) / |defended|
  double max_violation = 0.0;            // budget check, <= 0 means inside
};

// --- pipeline stages (CLI subcommands) -----------------------------------

void run_train_policy(const ExperimentConfig& cfg);
void run_collect(const ExperimentConfig& cfg);
void run_augment(const ExperimentConfig& cfg);
void run_train_detector(const ExperimentConfig& cfg);
void run_train_denoiser(const ExperimentConfig& cfg);
void run_tune_thresholds(const ExperimentConfig& cfg);
MetricsReport run_evaluate(const ExperimentConfig& cfg);
json run_adaptive_eval(const ExperimentConfig& cfg);
void run_report(const ExperimentConfig& cfg);

}  // namespace obsdef::harness
