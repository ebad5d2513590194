#include "obsdef/harness/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace obsdef::harness {

env::EnvSpec ExperimentConfig::spec() const {
  return env::make_spec(env::env_name_from_string(env));
}

shield::LatentMode ExperimentConfig::latent_mode() const {
  if (defense_mode == "mean") return shield::LatentMode::kMean;
  if (defense_mode == "sample") return shield::LatentMode::kSample;
  throw ConfigError("defense_mode must be mean or sample, got " + defense_mode);
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["env"] = c.env;
  j["algo"] = c.algo;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["epsilon"] = c.epsilon;
  j["attacks"] = c.attacks;
  j["n_traj"] = c.n_traj;
  j["eval_rollouts"] = c.eval_rollouts;
  j["collect_noise"] = c.collect_noise;
  j["td3"] = {{"total_steps", c.td3.total_steps},
              {"start_steps", c.td3.start_steps},
              {"batch_size", c.td3.batch_size},
              {"hidden", c.td3.hidden}};
  j["ppo"] = {{"total_steps", c.ppo.total_steps},
              {"episodes_per_iter", c.ppo.episodes_per_iter},
              {"sigma", c.ppo.sigma},
              {"hidden", c.ppo.hidden}};
  j["fitted_q"] = {{"epochs", c.fitted_q.epochs}, {"batch_size", c.fitted_q.batch_size}};
  j["adversary_ppo"] = {{"total_steps", c.adversary_ppo.total_steps},
                        {"episodes_per_iter", c.adversary_ppo.episodes_per_iter}};
  j["shield"] = {{"hidden_dim", c.shield.hidden_dim}, {"latent_dim", c.shield.latent_dim},
                 {"lr", c.shield.lr},               {"batch", c.shield.batch},
                 {"epochs", c.shield.epochs},       {"window", c.shield.window},
                 {"train_mode",
                  c.shield.train_mode == shield::LatentMode::kSample ? "sample" : "mean"}};
  j["reg_weight"] = c.reg_weight;
  j["pgd"] = {{"steps", c.pgd.steps},
              {"step_frac", c.pgd.step_frac},
              {"restarts", c.pgd.restarts}};
  j["cem"] = {{"horizon", c.cem.horizon},
              {"population", c.cem.population},
              {"elites", c.cem.elites},
              {"iters", c.cem.iters}};
  j["adaptive"] = {{"lambda_det", c.adaptive.lambda_det},
                   {"det_term_sign", c.adaptive.det_term_sign},
                   {"expectation_samples", c.adaptive.expectation_samples}};
  j["fnr_max"] = c.fnr_max;
  j["f_vul_max"] = c.f_vul_max;
  j["c_vul_rollouts"] = c.c_vul_rollouts;
  j["use_indicator"] = c.use_indicator;
  j["defense_mode"] = c.defense_mode;
  return j;
}

namespace {

// Merge `user` into `base`, rejecting keys base does not know.
void merge_checked(json& base, const json& user, const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    if (base[it.key()].is_object() && it.value().is_object()) {
      merge_checked(base[it.key()], it.value(), key);
    } else {
      base[it.key()] = it.value();
    }
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& user) {
  json j = config_to_json(ExperimentConfig{});
  try {
    merge_checked(j, user, "");
    ExperimentConfig c;
    c.env = j["env"].get<std::string>();
    c.algo = j["algo"].get<std::string>();
    if (c.algo != "td3" && c.algo != "ppo")
      throw ConfigError("algo must be td3 or ppo, got " + c.algo);
    c.out = j["out"].get<std::string>();
    c.seed = j["seed"].get<long>();
    c.epsilon = j["epsilon"].get<double>();
    if (c.epsilon <= 0) throw ConfigError("epsilon must be positive");
    c.attacks = j["attacks"].get<std::vector<std::string>>();
    for (const auto& a : c.attacks) attack::attack_kind_from_string(a);
    c.n_traj = j["n_traj"].get<int>();
    c.eval_rollouts = j["eval_rollouts"].get<int>();
    c.collect_noise = j["collect_noise"].get<double>();
    if (c.collect_noise < 0) throw ConfigError("collect_noise must be >= 0");
    c.td3.total_steps = j["td3"]["total_steps"].get<long>();
    c.td3.start_steps = j["td3"]["start_steps"].get<long>();
    c.td3.batch_size = j["td3"]["batch_size"].get<int>();
    c.td3.hidden = j["td3"]["hidden"].get<std::vector<int>>();
    c.ppo.total_steps = j["ppo"]["total_steps"].get<long>();
    c.ppo.episodes_per_iter = j["ppo"]["episodes_per_iter"].get<int>();
    c.ppo.sigma = j["ppo"]["sigma"].get<double>();
    c.ppo.hidden = j["ppo"]["hidden"].get<std::vector<int>>();
    c.fitted_q.epochs = j["fitted_q"]["epochs"].get<int>();
    c.fitted_q.batch_size = j["fitted_q"]["batch_size"].get<int>();
    c.adversary_ppo = c.ppo;
    c.adversary_ppo.total_steps = j["adversary_ppo"]["total_steps"].get<long>();
    c.adversary_ppo.episodes_per_iter = j["adversary_ppo"]["episodes_per_iter"].get<int>();
    c.shield.hidden_dim = j["shield"]["hidden_dim"].get<int>();
    c.shield.latent_dim = j["shield"]["latent_dim"].get<int>();
    c.shield.lr = j["shield"]["lr"].get<double>();
    c.shield.batch = j["shield"]["batch"].get<int>();
    c.shield.epochs = j["shield"]["epochs"].get<int>();
    c.shield.window = j["shield"]["window"].get<int>();
    std::string tm = j["shield"]["train_mode"].get<std::string>();
    if (tm != "sample" && tm != "mean")
      throw ConfigError("shield.train_mode must be sample or mean, got " + tm);
    c.shield.train_mode =
        tm == "sample" ? shield::LatentMode::kSample : shield::LatentMode::kMean;
    c.reg_weight = j["reg_weight"].get<double>();
    c.pgd.steps = j["pgd"]["steps"].get<int>();
    c.pgd.step_frac = j["pgd"]["step_frac"].get<double>();
    c.pgd.restarts = j["pgd"]["restarts"].get<int>();
    c.cem.horizon = j["cem"]["horizon"].get<int>();
    c.cem.population = j["cem"]["population"].get<int>();
    c.cem.elites = j["cem"]["elites"].get<int>();
    c.cem.iters = j["cem"]["iters"].get<int>();
    c.adaptive.lambda_det = j["adaptive"]["lambda_det"].get<double>();
    c.adaptive.det_term_sign = j["adaptive"]["det_term_sign"].get<double>();
    c.adaptive.expectation_samples = j["adaptive"]["expectation_samples"].get<int>();
    c.adaptive.pgd = c.pgd;
    c.adaptive.cem = c.cem;
    c.fnr_max = j["fnr_max"].get<double>();
    c.f_vul_max = j["f_vul_max"].get<double>();
    c.c_vul_rollouts = j["c_vul_rollouts"].get<int>();
    c.use_indicator = j["use_indicator"].get<bool>();
    c.defense_mode = j["defense_mode"].get<std::string>();
    c.latent_mode();  // validates
    c.shield.reg_weight = c.reg_weight;
    c.shield.reg_pgd = c.pgd;
    (void)c.spec();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

void apply_override(json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
  std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json* node = &j;
  std::size_t pos = 0;
  std::vector<std::string> parts;
  while (true) {
    auto dot = key.find('.', pos);
    parts.push_back(key.substr(pos, dot - pos));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    node = &((*node)[parts[i]]);
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // plain string
  }
  (*node)[parts.back()] = value;
}

// --- metrics -------------------------------------------------------------

DetectorScore score_detector(const std::vector<bool>& attacked_labels,
                             const std::vector<bool>& verdicts) {
  require(attacked_labels.size() == verdicts.size(), "score_detector: length mismatch");
  DetectorScore s;
  for (std::size_t i = 0; i < attacked_labels.size(); ++i) {
    bool a = attacked_labels[i], v = verdicts[i];
    if (a && v) ++s.tp;
    else if (a && !v) ++s.fn;
    else if (!a && v) ++s.fp;
    else ++s.tn;
  }
  long neg = s.tn + s.fp, pos = s.tp + s.fn;
  if (neg > 0) {
    s.accuracy = double(s.tn) / double(neg);
    s.accuracy_defined = true;
  } else {
    s.reason = "no negative labels; ";
  }
  if (pos > 0) {
    s.fnr = double(s.fn) / double(pos);
    s.fnr_defined = true;
  } else {
    s.reason += "no positive labels (F1, FNR undefined)";
  }
  if (2 * s.tp + s.fp + s.fn > 0 && pos > 0) {
    s.f1 = 2.0 * double(s.tp) / double(2 * s.tp + s.fp + s.fn);
    s.f1_defined = true;
  }
  return s;
}

double score_denoiser(const std::vector<Vec>& clean, const std::vector<Vec>& denoised,
                      const Vec& obs_std) {
  require(clean.size() == denoised.size(), "score_denoiser: length mismatch");
  if (clean.empty()) return 0.0;
  double total = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    Vec d = (denoised[i] - clean[i]).cwiseAbs();
    if (obs_std.size()) d = d.cwiseQuotient(obs_std);
    total += d.sum();
    n += d.size();
  }
  return total / double(n);
}

namespace {

json detector_score_json(const DetectorScore& s) {
  json j;
  j["tp"] = s.tp;
  j["fp"] = s.fp;
  j["tn"] = s.tn;
  j["fn"] = s.fn;
  j["accuracy"] = s.accuracy_defined ? json(s.accuracy) : json(nullptr);
  j["f1"] = s.f1_defined ? json(s.f1) : json(nullptr);
  j["fnr"] = s.fnr_defined ? json(s.fnr) : json(nullptr);
  if (!s.reason.empty()) j["reason"] = s.reason;
  return j;
}

DetectorScore detector_score_from_json(const json& j) {
  DetectorScore s;
  s.tp = j["tp"].get<long>();
  s.fp = j["fp"].get<long>();
  s.tn = j["tn"].get<long>();
  s.fn = j["fn"].get<long>();
  if (!j["accuracy"].is_null()) { s.accuracy = j["accuracy"].get<double>(); s.accuracy_defined = true; }
  if (!j["f1"].is_null()) { s.f1 = j["f1"].get<double>(); s.f1_defined = true; }
  if (!j["fnr"].is_null()) { s.fnr = j["fnr"].get<double>(); s.fnr_defined = true; }
  if (j.contains("reason")) s.reason = j["reason"].get<std::string>();
  return s;
}

}  // namespace

json MetricsReport::to_json() const {
  json j;
  j["header"] = header;
  j["clean"] = {{"undefended", clean_undefended},
                {"undefended_std", clean_undefended_std},
                {"defended", clean_defended},
                {"defended_std", clean_defended_std},
                {"retention", retention},
                {"flag_rate", clean_flag_rate}};
  j["attacks"] = json::array();
  for (const auto& c : cells) {
    json cj;
    cj["attack"] = c.attack;
    cj["undefended"] = c.undefended_return;
    cj["undefended_std"] = c.undefended_std;
    cj["defended"] = c.defended_return;
    cj["defended_std"] = c.defended_std;
    cj["recovery"] = c.recovery;
    cj["detector"] = detector_score_json(c.detector);
    cj["denoiser_mae"] = c.denoiser_mae;
    cj["attack_frequency"] = c.attack_frequency;
    j["attacks"].push_back(cj);
  }
  j["summary"] = {{"avg_undefended", avg_undefended},
                  {"min_undefended", min_undefended},
                  {"avg_defended", avg_defended},
                  {"min_defended", min_defended},
                  {"best_attack", best_attack}};
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport m;
  m.header = j["header"];
  m.clean_undefended = j["clean"]["undefended"].get<double>();
  m.clean_undefended_std = j["clean"]["undefended_std"].get<double>();
  m.clean_defended = j["clean"]["defended"].get<double>();
  m.clean_defended_std = j["clean"]["defended_std"].get<double>();
  m.retention = j["clean"]["retention"].get<double>();
  m.clean_flag_rate = j["clean"]["flag_rate"].get<double>();
  for (const auto& cj : j["attacks"]) {
    AttackCell c;
    c.attack = cj["attack"].get<std::string>();
    c.undefended_return = cj["undefended"].get<double>();
    c.undefended_std = cj["undefended_std"].get<double>();
    c.defended_return = cj["defended"].get<double>();
    c.defended_std = cj["defended_std"].get<double>();
    c.recovery = cj["recovery"].get<double>();
    c.detector = detector_score_from_json(cj["detector"]);
    c.denoiser_mae = cj["denoiser_mae"].get<double>();
    c.attack_frequency = cj["attack_frequency"].get<double>();
    m.cells.push_back(c);
  }
  m.avg_undefended = j["summary"]["avg_undefended"].get<double>();
  m.min_undefended = j["summary"]["min_undefended"].get<double>();
  m.avg_defended = j["summary"]["avg_defended"].get<double>();
  m.min_defended = j["summary"]["min_defended"].get<double>();
  m.best_attack = j["summary"]["best_attack"].get<std::string>();
  return m;
}

// --- pipeline ------------------------------------------------------------

namespace {

struct MeanStd {
  double mean = 0.0, sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= double(xs.size());
  for (double x : xs) m.sd += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(m.sd / double(xs.size()));
  return m;
}

attack::AttackBudget make_budget(const ExperimentConfig& cfg, const Dataset& d_normal) {
  attack::AttackBudget b;
  b.epsilon = cfg.epsilon;
  b.scale = d_normal.obs_std;
  return b;
}

// Thresholds document accessors.
json load_thresholds(const ExperimentConfig& cfg) {
  return load_json_file(cfg.thresholds_path());
}

std::vector<attack::AttackKind> offline_kinds(const ExperimentConfig& cfg) {
  std::vector<attack::AttackKind> out;
  for (const auto& a : cfg.attacks) {
    attack::AttackKind k = attack::attack_kind_from_string(a);
    if (k == attack::AttackKind::kOpposite || k == attack::AttackKind::kQFunction)
      out.push_back(k);
  }
  return out;
}

// Per-step attack hook for one non-adaptive attack.
struct EvalAttack {
  attack::AttackKind kind;
  const policy::PolicyBundle* bundle = nullptr;
  const attack::AdversaryPolicy* adversary = nullptr;
  attack::AttackBudget budget;
  attack::PgdConfig pgd;
  attack::CemConfig cem;
  env::EnvSpec spec;
  const attack::VulnerabilityIndicator* indicator = nullptr;
  Rng rng{0};

  env::AttackResult operator()(const env::StepContext& ctx) {
    if (indicator && !attack::should_attack(*indicator, ctx.clean_obs))
      return {ctx.clean_obs, false};
    switch (kind) {
      case attack::AttackKind::kOpposite:
        return {attack::opposite_attack(*bundle, ctx.clean_obs, budget, pgd, rng).o_hat, true};
      case attack::AttackKind::kQFunction:
        return {attack::q_attack(*bundle, ctx.clean_obs, budget, pgd, rng).o_hat, true};
      case attack::AttackKind::kOptimal:
        return {adversary->apply(ctx.clean_obs), true};
      case attack::AttackKind::kEnchanting: {
        Mat plan = attack::cem_plan_min_reward(spec, ctx.state, cem, rng);
        return {attack::enchanting_attack(*bundle, ctx.clean_obs, Vec(plan.col(0)), budget,
                                          pgd, rng)
                    .o_hat,
                true};
      }
    }
    return {ctx.clean_obs, false};
  }
};

// Denoiser pass over the presented stream of a recorded trajectory; MAE of
// the reconstruction against the clean observation on attacked steps (all
// steps if none were attacked).
double trajectory_denoiser_mae(const shield::GruVae& den, const env::Trajectory& traj,
                               const Vec& obs_std) {
  shield::GruVaeState st = shield::zero_state(den);
  std::vector<Vec> clean, recon;
  std::vector<Vec> clean_all, recon_all;
  for (const auto& s : traj.steps) {
    Vec r = shield::vae_step(den, s.obs_presented, st, shield::LatentMode::kMean).o_out;
    clean_all.push_back(s.obs);
    recon_all.push_back(r);
    if (s.attacked) {
      clean.push_back(s.obs);
      recon.push_back(r);
    }
  }
  if (clean.empty()) return score_denoiser(clean_all, recon_all, obs_std);
  return score_denoiser(clean, recon, obs_std);
}

long assert_offline(const char* stage, long before) {
  long after = env::step_counter().load();
  if (after != before) {
    throw std::logic_error(std::string(stage) +
                           " performed environment steps (offline-purity violation)");
  }
  return after;
}

}  // namespace

void run_train_policy(const ExperimentConfig& cfg) {
  env::EnvSpec spec = cfg.spec();
  policy::TrainLog log;
  policy::PolicyBundle b = cfg.algo == "td3" ? policy::train_td3(spec, cfg.td3, cfg.seed, &log)
                                             : policy::train_ppo(spec, cfg.ppo, cfg.seed, &log);
  save_bundle(b, cfg.policy_path());
  json lj;
  lj["episode_returns"] = log.episode_returns;
  write_text_file(cfg.out + "/train_policy_log.json", lj.dump(2) + "\n");
}

void run_collect(const ExperimentConfig& cfg) {
  env::EnvSpec spec = cfg.spec();
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  Vec half_width = 0.5 * (spec.action_high - spec.action_low);
  Dataset d;
  for (int i = 0; i < cfg.n_traj; ++i) {
    // TD3 is deterministic; without exploration noise every trajectory from
    // the tight start box is nearly identical and the shields never see the
    // surrounding state space. PPO already samples its own actions.
    if (b.algo == policy::Algo::kTd3 && cfg.collect_noise > 0.0) {
      Rng noise_rng(uint64_t(cfg.seed) * 52361 + uint64_t(i) + 1);
      env::FunctionPolicy explorer([&](const Vec& o) {
        Vec a = policy::policy_mean(b, o) +
                cfg.collect_noise *
                    (half_width.array() * gaussian_vec(noise_rng, half_width.size()).array())
                        .matrix();
        return Vec(a.cwiseMax(spec.action_low).cwiseMin(spec.action_high));
      });
      d.trajectories.push_back(env::rollout(spec, explorer, cfg.seed * 104729 + i));
      continue;
    }
    policy::BundlePolicy pi(b, b.algo == policy::Algo::kPpo ? policy::ActMode::kSample
                                                            : policy::ActMode::kMean,
                            cfg.seed * 7919 + i);
    d.trajectories.push_back(env::rollout(spec, pi, cfg.seed * 104729 + i));
  }
  d.compute_stats();
  save_dataset(d, cfg.d_normal_path());
}

void run_augment(const ExperimentConfig& cfg) {
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  Dataset d = load_dataset(cfg.d_normal_path());
  long steps_before = env::step_counter().load();

  if (b.algo == policy::Algo::kPpo && !b.has_q) {
    policy::train_q_for_ppo(b, d, cfg.fitted_q, cfg.spec().gamma, cfg.seed + 17);
    save_bundle(b, cfg.policy_path());
  }

  attack::AttackBudget budget = make_budget(cfg, d);
  attack::VulnerabilityIndicator ind;
  const attack::VulnerabilityIndicator* ind_ptr = nullptr;
  if (cfg.use_indicator && std::filesystem::exists(cfg.thresholds_path())) {
    json th = load_thresholds(cfg);
    if (th.contains("c_vul")) {
      ind.c_vul = th["c_vul"].get<double>();
      ind.bundle = &b;
      ind_ptr = &ind;
    }
  }
  for (attack::AttackKind k : offline_kinds(cfg)) {
    attack::AdversarialDataset adv =
        attack::build_adv_dataset(d, b, {k}, budget, cfg.pgd, cfg.seed + long(k), ind_ptr);
    save_adv_dataset(adv, cfg.d_adv_path(attack::to_string(k)));
  }
  assert_offline("augment", steps_before);
}

void run_train_detector(const ExperimentConfig& cfg) {
  Dataset d = load_dataset(cfg.d_normal_path());
  long steps_before = env::step_counter().load();
  shield::ShieldConfig sc = cfg.shield;
  sc.reg_weight = 0.0;
  shield::TrainShieldLog log;
  shield::GruVae det = shield::train_detector(d, sc, uint64_t(cfg.seed) + 101, &log);
  assert_offline("train-detector", steps_before);
  save_vae(det, cfg.detector_path());
  json lj;
  lj["epoch_loss"] = log.epoch_loss;
  write_text_file(cfg.out + "/train_detector_log.json", lj.dump(2) + "\n");
}

void run_train_denoiser(const ExperimentConfig& cfg) {
  Dataset d = load_dataset(cfg.d_normal_path());
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  attack::AdversarialDataset adv;
  for (attack::AttackKind k : offline_kinds(cfg)) {
    std::string p = cfg.d_adv_path(attack::to_string(k));
    if (!std::filesystem::exists(p)) throw MissingArtifact(p);
    attack::AdversarialDataset one = load_adv_dataset(p);
    for (auto& s : one.sequences) adv.sequences.push_back(std::move(s));
  }
  long steps_before = env::step_counter().load();
  attack::AttackBudget budget = make_budget(cfg, d);
  shield::TrainShieldLog log;
  shield::GruVae den = shield::train_denoiser(d, adv, cfg.shield, &b, &budget,
                                              uint64_t(cfg.seed) + 202, &log);
  assert_offline("train-denoiser", steps_before);
  save_vae(den, cfg.denoiser_path());
  json lj;
  lj["epoch_loss"] = log.epoch_loss;
  write_text_file(cfg.out + "/train_denoiser_log.json", lj.dump(2) + "\n");
}

void run_tune_thresholds(const ExperimentConfig& cfg) {
  Dataset d = load_dataset(cfg.d_normal_path());
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  shield::GruVae det = load_vae(cfg.detector_path());
  shield::LatentMode mode = cfg.latent_mode();
  Rng score_rng(uint64_t(cfg.seed) + 303);
  Rng* rng_ptr = mode == shield::LatentMode::kSample ? &score_rng : nullptr;

  std::vector<double> clean_scores = shield::detector_scores(det, d, mode, rng_ptr);
  std::vector<double> attacked_scores;
  for (attack::AttackKind k : offline_kinds(cfg)) {
    std::string p = cfg.d_adv_path(attack::to_string(k));
    if (!std::filesystem::exists(p)) throw MissingArtifact(p);
    attack::AdversarialDataset adv = load_adv_dataset(p);
    for (double s : shield::detector_scores(det, adv, true, mode, rng_ptr))
      attacked_scores.push_back(s);
  }
  shield::ThresholdChoice choice = shield::tune_c_anomaly(clean_scores, attacked_scores,
                                                          cfg.fnr_max);

  json th;
  th["c_anomaly"] = choice.c_anomaly;
  th["fnr"] = choice.fnr;
  th["f1"] = choice.f1;
  th["fnr_met"] = choice.fnr_met;

  if (cfg.use_indicator) {
    attack::AttackBudget budget = make_budget(cfg, d);
    attack::PgdConfig pgd = cfg.pgd;
    attack::StepAttackFn step_attack = [&](const Vec& o, Rng& rng) {
      return attack::opposite_attack(b, o, budget, pgd, rng).o_hat;
    };
    std::vector<double> quantiles = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<attack::CvulTrial> trials;
    double c_vul = attack::tune_c_vul(b, cfg.spec(), step_attack, cfg.f_vul_max, quantiles, d,
                                      cfg.c_vul_rollouts, cfg.seed + 404, &trials);
    th["c_vul"] = c_vul;
    json tj = json::array();
    for (const auto& tr : trials)
      tj.push_back({{"c_vul", tr.c_vul},
                    {"mean_reward", tr.mean_reward},
                    {"attack_frequency", tr.attack_frequency}});
    th["c_vul_trials"] = tj;
  }
  write_text_file(cfg.thresholds_path(), th.dump(2) + "\n");
}

MetricsReport run_evaluate(const ExperimentConfig& cfg) {
  env::EnvSpec spec = cfg.spec();
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  Dataset d = load_dataset(cfg.d_normal_path());
  shield::GruVae det = load_vae(cfg.detector_path());
  shield::GruVae den = load_vae(cfg.denoiser_path());
  json th = load_thresholds(cfg);
  attack::AttackBudget budget = make_budget(cfg, d);

  attack::VulnerabilityIndicator ind;
  const attack::VulnerabilityIndicator* ind_ptr = nullptr;
  if (cfg.use_indicator && th.contains("c_vul")) {
    ind.c_vul = th["c_vul"].get<double>();
    ind.bundle = &b;
    ind_ptr = &ind;
  }

  shield::DefendedConfig dcfg;
  dcfg.c_anomaly = th["c_anomaly"].get<double>();
  dcfg.mode = cfg.latent_mode();

  // Optimal-attack adversary: load if present, otherwise train against the
  // undefended victim (the Table-1 protocol: attacker unaware of the defense).
  std::optional<attack::AdversaryPolicy> adversary;
  bool wants_optimal = false;
  for (const auto& a : cfg.attacks)
    wants_optimal |= attack::attack_kind_from_string(a) == attack::AttackKind::kOptimal;
  if (wants_optimal) {
    if (std::filesystem::exists(cfg.adversary_path())) {
      adversary = attack::AdversaryPolicy{load_bundle(cfg.adversary_path()),
                                          budget.radius(b.obs_dim)};
    } else {
      policy::BundlePolicy victim(b, policy::ActMode::kMean, cfg.seed + 505);
      adversary = attack::train_optimal_adversary(victim, spec, budget, cfg.adversary_ppo,
                                                  cfg.seed + 506);
      save_bundle(adversary->bundle, cfg.adversary_path());
      // Reload so evaluation always sees the checkpoint's rounded values,
      // keeping repeat runs byte-identical.
      adversary->bundle = load_bundle(cfg.adversary_path());
    }
  }

  auto eval_cell = [&](const std::string& attack_name, bool defended, long seed_salt,
                       std::vector<env::Trajectory>* keep) {
    std::vector<double> returns;
    for (int r = 0; r < cfg.eval_rollouts; ++r) {
      long ep_seed = cfg.seed * 1000003 + seed_salt * 1009 + r;
      std::unique_ptr<env::PolicyAdapter> pi;
      if (defended) {
        pi = std::make_unique<shield::DefendedPolicy>(b, det, den, dcfg,
                                                      uint64_t(ep_seed) * 31 + 7);
      } else {
        pi = std::make_unique<policy::BundlePolicy>(b, policy::ActMode::kMean, ep_seed);
      }
      env::StepHooks hooks;
      std::unique_ptr<EvalAttack> atk;
      if (!attack_name.empty()) {
        atk = std::make_unique<EvalAttack>();
        atk->kind = attack::attack_kind_from_string(attack_name);
        atk->bundle = &b;
        atk->adversary = adversary ? &*adversary : nullptr;
        atk->budget = budget;
        atk->pgd = cfg.pgd;
        atk->cem = cfg.cem;
        atk->spec = spec;
        atk->indicator = ind_ptr;
        atk->rng.seed(uint64_t(ep_seed) * 131 + 3);
        hooks.attack = [&atk](const env::StepContext& ctx) { return (*atk)(ctx); };
        hooks.attack_name = attack_name;
      }
      env::Trajectory traj =
          env::rollout(spec, *pi, ep_seed, attack_name.empty() ? nullptr : &hooks);
      returns.push_back(traj.undiscounted_return);
      if (keep) keep->push_back(std::move(traj));
    }
    return returns;
  };

  MetricsReport m;
  m.header = config_to_json(cfg);
  m.header["note"] = "desk-scale analogue: sizes shrunk relative to the reference protocol";

  std::vector<env::Trajectory> clean_def_trajs;
  auto clean_undef = mean_std(eval_cell("", false, 1, nullptr));
  auto clean_def = mean_std(eval_cell("", true, 2, &clean_def_trajs));
  m.clean_undefended = clean_undef.mean;
  m.clean_undefended_std = clean_undef.sd;
  m.clean_defended = clean_def.mean;
  m.clean_defended_std = clean_def.sd;
  m.retention = clean_undef.mean != 0.0 ? clean_def.mean / clean_undef.mean : 1.0;
  long flags = 0, steps = 0;
  for (const auto& tr : clean_def_trajs)
    for (const auto& s : tr.steps) {
      if (s.has_verdict && s.verdict) ++flags;
      ++steps;
    }
  m.clean_flag_rate = steps ? double(flags) / double(steps) : 0.0;

  long salt = 10;
  for (const auto& attack_name : cfg.attacks) {
    AttackCell cell;
    cell.attack = attack_name;
    auto undef = mean_std(eval_cell(attack_name, false, salt + 1, nullptr));
    std::vector<env::Trajectory> def_trajs;
    auto defn = mean_std(eval_cell(attack_name, true, salt + 2, &def_trajs));
    salt += 10;
    cell.undefended_return = undef.mean;
    cell.undefended_std = undef.sd;
    cell.defended_return = defn.mean;
    cell.defended_std = defn.sd;
    double gap = m.clean_undefended - undef.mean;
    cell.recovery = std::abs(gap) > 1e-9 ? (defn.mean - undef.mean) / gap : 1.0;

    std::vector<bool> labels, verdicts;
    long attacked_steps = 0, total_steps = 0;
    double mae_sum = 0.0;
    for (const auto& tr : def_trajs) {
      for (const auto& s : tr.steps) {
        labels.push_back(s.attacked);
        verdicts.push_back(s.has_verdict && s.verdict);
        if (s.attacked) ++attacked_steps;
        ++total_steps;
      }
      mae_sum += trajectory_denoiser_mae(den, tr, d.obs_std);
    }
    cell.detector = score_detector(labels, verdicts);
    cell.denoiser_mae = def_trajs.empty() ? 0.0 : mae_sum / double(def_trajs.size());
    cell.attack_frequency = total_steps ? double(attacked_steps) / double(total_steps) : 0.0;
    m.cells.push_back(cell);
  }

  if (!m.cells.empty()) {
    double au = 0, ad = 0, mu = m.cells[0].undefended_return, md = m.cells[0].defended_return;
    for (const auto& c : m.cells) {
      au += c.undefended_return;
      ad += c.defended_return;
      mu = std::min(mu, c.undefended_return);
      md = std::min(md, c.defended_return);
      if (c.undefended_return <= mu) m.best_attack = c.attack;
    }
    m.avg_undefended = au / double(m.cells.size());
    m.avg_defended = ad / double(m.cells.size());
    m.min_undefended = mu;
    m.min_defended = md;
  }

  write_text_file(cfg.metrics_path(), m.to_json().dump(2) + "\n");
  return m;
}

json run_adaptive_eval(const ExperimentConfig& cfg) {
  env::EnvSpec spec = cfg.spec();
  policy::PolicyBundle b = load_bundle(cfg.policy_path());
  Dataset d = load_dataset(cfg.d_normal_path());
  shield::GruVae det = load_vae(cfg.detector_path());
  shield::GruVae den = load_vae(cfg.denoiser_path());
  json th = load_thresholds(cfg);
  MetricsReport base = MetricsReport::from_json(load_json_file(cfg.metrics_path()));
  attack::AttackBudget budget = make_budget(cfg, d);
  Vec radius = budget.radius(b.obs_dim);

  shield::DefendedConfig dcfg;
  dcfg.c_anomaly = th["c_anomaly"].get<double>();
  dcfg.mode = cfg.latent_mode();

  json out;
  out["header"] = config_to_json(cfg);
  out["cells"] = json::array();
  for (const auto& attack_name : cfg.attacks) {
    attack::AttackKind kind = attack::attack_kind_from_string(attack_name);
    adaptive::AdaptiveConfig acfg = cfg.adaptive;
    acfg.kind = kind;
    acfg.pgd = cfg.pgd;
    acfg.cem = cfg.cem;
    adaptive::AdaptiveAttacker attacker(b, det, den, spec, budget, acfg,
                                        uint64_t(cfg.seed) + 909);
    if (kind == attack::AttackKind::kOptimal) {
      attacker.set_adversary(adaptive::train_adaptive_adversary(
          b, det, den, dcfg, spec, budget, cfg.adversary_ppo, cfg.seed + 910));
    }
    std::vector<double> returns;
    double max_violation = -1e9;
    for (int r = 0; r < cfg.eval_rollouts; ++r) {
      long ep_seed = cfg.seed * 2000003 + r;
      shield::DefendedPolicy pi(b, det, den, dcfg, uint64_t(ep_seed) * 37 + 5);
      env::StepHooks hooks = attacker.hooks();
      env::Trajectory traj = env::rollout(spec, pi, ep_seed, &hooks);
      returns.push_back(traj.undiscounted_return);
      for (const auto& s : traj.steps) {
        if (!s.attacked) continue;
        double v = attack::budget_violation(s.obs_presented, s.obs, radius);
        max_violation = std::max(max_violation, v);
      }
    }
    auto ms = mean_std(returns);
    double defended = 0.0;
    for (const auto& c : base.cells)
      if (c.attack == attack_name) defended = c.defended_return;
    AdaptiveCell cell;
    cell.attack = attack_name;
    cell.defended_return = defended;
    cell.adaptive_return = ms.mean;
    cell.pct_change =
        std::abs(defended) > 1e-12 ? 100.0 * (ms.mean - defended) / std::abs(defended) : 0.0;
    cell.max_violation = max_violation;
    out["cells"].push_back({{"attack", cell.attack},
                            {"defended_return", cell.defended_return},
                            {"adaptive_return", cell.adaptive_return},
                            {"adaptive_std", ms.sd},
                            {"pct_change", cell.pct_change},
                            {"max_budget_violation", cell.max_violation}});
  }
  write_text_file(cfg.adaptive_metrics_path(), out.dump(2) + "\n");
  return out;
}

namespace {

std::string md_num(const json& v) {
  if (v.is_null()) return "undefined";
  return fmt9(v.get<double>());
}

// Minimal grouped bar chart.
std::string svg_reward_chart(const MetricsReport& m) {
  std::vector<std::pair<std::string, std::pair<double, double>>> rows;
  rows.push_back({"clean", {m.clean_undefended, m.clean_defended}});
  for (const auto& c : m.cells) rows.push_back({c.attack, {c.undefended_return, c.defended_return}});
  double lo = 0, hi = 0;
  for (auto& r : rows) {
    lo = std::min({lo, r.second.first, r.second.second});
    hi = std::max({hi, r.second.first, r.second.second});
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  int W = 640, H = 360, pad = 50;
  auto y_of = [&](double v) { return pad + (hi - v) / (hi - lo) * (H - 2 * pad); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  double y0 = y_of(0.0);
  s << "<line x1=\"" << pad << "\" y1=\"" << y0 << "\" x2=\"" << W - pad << "\" y2=\"" << y0
    << "\" stroke=\"black\"/>\n";
  double group_w = double(W - 2 * pad) / double(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double x = pad + double(i) * group_w;
    auto bar = [&](double v, double off, const char* color) {
      double yt = y_of(std::max(0.0, v)), yb = y_of(std::min(0.0, v));
      s << "<rect x=\"" << x + off << "\" y=\"" << yt << "\" width=\"" << group_w * 0.35
        << "\" height=\"" << std::max(1.0, yb - yt) << "\" fill=\"" << color << "\"/>\n";
    };
    bar(rows[i].second.first, group_w * 0.1, "#888888");
    bar(rows[i].second.second, group_w * 0.5, "#3366cc");
    s << "<text x=\"" << x + group_w * 0.5 << "\" y=\"" << H - pad / 2.0
      << "\" font-size=\"12\" text-anchor=\"middle\">" << rows[i].first << "</text>\n";
  }
  s << "<text x=\"" << pad << "\" y=\"" << pad / 2.0
    << "\" font-size=\"12\">gray = undefended, blue = defended (mean return)</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace

void run_report(const ExperimentConfig& cfg) {
  json mj = load_json_file(cfg.metrics_path());
  MetricsReport m = MetricsReport::from_json(mj);

  // CSV: one row per cell.
  std::ostringstream csv;
  csv << "cell,attack,undefended,defended,recovery,detector_f1,detector_fnr,denoiser_mae,"
         "attack_frequency\n";
  csv << "clean,," << fmt9(m.clean_undefended) << "," << fmt9(m.clean_defended) << ","
      << fmt9(m.retention) << ",,,,\n";
  for (const auto& c : m.cells) {
    csv << "attack," << c.attack << "," << fmt9(c.undefended_return) << ","
        << fmt9(c.defended_return) << "," << fmt9(c.recovery) << ","
        << (c.detector.f1_defined ? fmt9(c.detector.f1) : "undefined") << ","
        << (c.detector.fnr_defined ? fmt9(c.detector.fnr) : "undefined") << ","
        << fmt9(c.denoiser_mae) << "," << fmt9(c.attack_frequency) << "\n";
  }
  write_text_file(cfg.out + "/report.csv", csv.str());

  std::ostringstream md;
  md << "# Evaluation report\n\n";
  md << "env: " << m.header["env"].get<std::string>()
     << ", algo: " << m.header["algo"].get<std::string>()
     << ", epsilon: " << fmt9(m.header["epsilon"].get<double>())
     << ", seed: " << m.header["seed"].get<long>() << "\n\n";
  md << "## Rewards under attack\n\n";
  md << "| cell | undefended | defended | recovery |\n|---|---|---|---|\n";
  md << "| clean | " << fmt9(m.clean_undefended) << " | " << fmt9(m.clean_defended)
     << " | retention " << fmt9(m.retention) << " |\n";
  for (const auto& c : m.cells)
    md << "| " << c.attack << " | " << fmt9(c.undefended_return) << " | "
       << fmt9(c.defended_return) << " | " << fmt9(c.recovery) << " |\n";
  md << "\n## Detector and denoiser\n\n";
  md << "clean flag rate: " << fmt9(m.clean_flag_rate) << "\n\n";
  md << "| attack | F1 | FNR | denoiser MAE | attack freq |\n|---|---|---|---|---|\n";
  for (const auto& c : m.cells)
    md << "| " << c.attack << " | " << (c.detector.f1_defined ? fmt9(c.detector.f1) : "undefined")
       << " | " << (c.detector.fnr_defined ? fmt9(c.detector.fnr) : "undefined") << " | "
       << fmt9(c.denoiser_mae) << " | " << fmt9(c.attack_frequency) << " |\n";
  if (std::filesystem::exists(cfg.adaptive_metrics_path())) {
    json aj = load_json_file(cfg.adaptive_metrics_path());
    md << "\n## Adaptive attacks (% change vs defended reward)\n\n";
    md << "| attack | defended | adaptive | % change |\n|---|---|---|---|\n";
    for (const auto& c : aj["cells"])
      md << "| " << c["attack"].get<std::string>() << " | " << md_num(c["defended_return"])
         << " | " << md_num(c["adaptive_return"]) << " | " << md_num(c["pct_change"])
         << " |\n";
  }
  write_text_file(cfg.out + "/report.md", md.str());
  write_text_file(cfg.out + "/report_rewards.svg", svg_reward_chart(m));
}

}  // namespace obsdef::harness
