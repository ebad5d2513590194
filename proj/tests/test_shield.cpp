#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "obsdef/policy/train.hpp"
#include "obsdef/shield/defense.hpp"
#include "test_util.hpp"

using namespace obsdef;
using shield::GruVae;
using shield::GruVaeState;
using shield::LatentMode;
using testutil::fd_grad;
using testutil::max_rel_err;

namespace {

GruVae zero_vae(int obs_dim, int hidden, int latent) {
  Rng rng(0);
  GruVae m = shield::make_gru_vae(obs_dim, hidden, latent, rng);
  for (auto& [name, p] : shield::named_params(m, "z")) p->setZero();
  return m;
}

policy::PolicyBundle pm_bundle(Rng& rng) {
  env::EnvSpec spec = env::make_spec(env::EnvName::kPointMass2d);
  policy::PolicyBundle b;
  b.algo = policy::Algo::kTd3;
  b.obs_dim = 4;
  b.action_dim = 2;
  b.action_low = spec.action_low;
  b.action_high = spec.action_high;
  b.policy = diff::make_mlp({4, 8, 2}, rng);
  b.q1 = diff::make_mlp({6, 8, 1}, rng);
  b.q2 = diff::make_mlp({6, 8, 1}, rng);
  b.has_q = true;
  return b;
}

Dataset tiny_dataset(int n_traj, long seed) {
  env::EnvSpec spec = env::make_spec(env::EnvName::kPointMass2d);
  Rng rng{uint64_t(seed)};
  policy::PolicyBundle b = pm_bundle(rng);
  Dataset d;
  for (int i = 0; i < n_traj; ++i) {
    policy::BundlePolicy p(b, policy::ActMode::kMean, seed + i);
    d.trajectories.push_back(env::rollout(spec, p, seed + i));
  }
  d.compute_stats();
  return d;
}

}  // namespace

TEST_CASE("zero-parameter VAE reproduces zero everywhere") {
  GruVae m = zero_vae(3, 4, 2);
  GruVaeState st = shield::zero_state(m);
  Vec o = Vec::Ones(3);
  shield::VaeStepOut out = shield::vae_step(m, o, st, LatentMode::kMean);
  CHECK(out.o_out.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.mu.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.log_sigma.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.mu_prior.cwiseAbs().maxCoeff() == 0.0);
  CHECK(st.h_enc.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mean-mode vae_step is deterministic and matches the batch path") {
  Rng rng(1);
  GruVae m = shield::make_gru_vae(3, 6, 4, rng);
  std::vector<Vec> obs = {gaussian_vec(rng, 3), gaussian_vec(rng, 3), gaussian_vec(rng, 3)};
  GruVaeState s1 = shield::zero_state(m), s2 = shield::zero_state(m);
  GruVaeState sb = shield::zero_state(m, 1);
  for (const Vec& o : obs) {
    shield::VaeStepOut a = shield::vae_step(m, o, s1, LatentMode::kMean);
    shield::VaeStepOut b = shield::vae_step(m, o, s2, LatentMode::kMean);
    CHECK((a.o_out - b.o_out).cwiseAbs().maxCoeff() == 0.0);
    shield::VaeBatchStepOut c = shield::vae_step_batch(m, Mat(o), sb, LatentMode::kMean);
    CHECK((a.o_out - c.o_out.col(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("vae_step equals a manual unroll through the public primitives") {
  Rng rng(2);
  GruVae m = shield::make_gru_vae(3, 5, 4, rng);
  std::vector<Vec> obs = {gaussian_vec(rng, 3), gaussian_vec(rng, 3)};
  GruVaeState st = shield::zero_state(m);
  Mat h_enc = Mat::Zero(5, 1), h_dec = Mat::Zero(5, 1);
  for (const Vec& o : obs) {
    shield::VaeStepOut got = shield::vae_step(m, o, st, LatentMode::kMean);
    // independent recomputation: encoder cell, heads, decoder cell, output
    h_enc = diff::gru_cell(m.encoder, Mat(o), h_enc);
    Vec mu = m.W_mu * h_enc.col(0) + m.b_mu.col(0);
    Vec ls = m.W_logsig * h_enc.col(0) + m.b_logsig.col(0);
    Vec mu_prior = m.W_prior * h_dec.col(0) + m.b_prior.col(0);
    h_dec = diff::gru_cell(m.decoder, Mat(mu), h_dec);
    Vec o_out = m.W_out * h_dec.col(0) + m.b_out.col(0);
    CHECK((got.o_out - o_out).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((got.mu - mu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((got.log_sigma - ls).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((got.mu_prior - mu_prior).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sample mode uses the reparameterized latent") {
  Rng rng(3);
  GruVae m = shield::make_gru_vae(3, 5, 4, rng);
  Vec o = gaussian_vec(rng, 3);
  Vec noise = gaussian_vec(rng, 4);
  GruVaeState s1 = shield::zero_state(m), s2 = shield::zero_state(m);
  shield::VaeStepOut a = shield::vae_step(m, o, s1, LatentMode::kSample, noise);
  // manual: z = mu + exp(log_sigma) .* noise through the decoder
  shield::VaeStepOut mref = shield::vae_step(m, o, s2, LatentMode::kMean);
  Vec z = mref.mu.array() + mref.log_sigma.array().exp() * noise.array();
  Mat h_dec = diff::gru_cell(m.decoder, Mat(z), Mat(Mat::Zero(5, 1)));
  Vec o_out = m.W_out * h_dec.col(0) + m.b_out.col(0);
  CHECK((a.o_out - o_out).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("elbo of the zero model on zero sequences is zero") {
  GruVae m = zero_vae(2, 3, 2);
  std::vector<Vec> zeros(4, Vec::Zero(2));
  CHECK(shield::elbo_loss(m, zeros, zeros) == doctest::Approx(0.0));
}

TEST_CASE("elbo decomposes into reconstruction plus KL computed by hand") {
  Rng rng(4);
  GruVae m = shield::make_gru_vae(2, 4, 3, rng);
  std::vector<Vec> in = {gaussian_vec(rng, 2), gaussian_vec(rng, 2), gaussian_vec(rng, 2)};
  std::vector<Vec> tg = {gaussian_vec(rng, 2), gaussian_vec(rng, 2), gaussian_vec(rng, 2)};
  double got = shield::elbo_loss(m, in, tg);
  GruVaeState st = shield::zero_state(m);
  double want = 0.0;
  for (std::size_t t = 0; t < in.size(); ++t) {
    shield::VaeStepOut s = shield::vae_step(m, in[t], st, LatentMode::kMean);
    want += 0.5 * (s.o_out - tg[t]).squaredNorm();
    want += diff::kl_diag_gaussian(s.mu, s.log_sigma, s.mu_prior);
  }
  want /= double(in.size());
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("elbo_with_grad matches elbo_loss and finite differences") {
  Rng rng(5);
  GruVae m = shield::make_gru_vae(2, 3, 2, rng);
  std::vector<Vec> in = {gaussian_vec(rng, 2), gaussian_vec(rng, 2)};
  std::vector<Vec> tg = {gaussian_vec(rng, 2), gaussian_vec(rng, 2)};
  std::vector<Vec> noise = {gaussian_vec(rng, 2), gaussian_vec(rng, 2)};
  const std::vector<Vec>* noise_opts[] = {nullptr, &noise};
  for (const std::vector<Vec>* nz : noise_opts) {
    std::vector<Mat> grads;
    double v = shield::elbo_with_grad(m, in, tg, nz, grads);
    CHECK(v == doctest::Approx(shield::elbo_loss(m, in, tg, nz)).epsilon(1e-12));
    diff::NamedParams np = shield::named_params(m, "m");
    REQUIRE(np.size() == grads.size());
    for (std::size_t i = 0; i < np.size(); ++i) {
      Mat fd = fd_grad([&]() { return shield::elbo_loss(m, in, tg, nz); }, *np[i].second);
      CHECK(max_rel_err(grads[i], fd) < 1e-4);
    }
  }
}

TEST_CASE("detect scores the l-infinity residual with strict threshold semantics") {
  GruVae m = zero_vae(2, 3, 2);  // reconstruction is always zero
  GruVaeState st = shield::zero_state(m);
  Vec o(2);
  o << 0.3, -0.6;  // residual = max(|0.3|, |0.6|) = 0.6
  shield::AnomalyVerdict v = shield::detect(m, o, st, 0.7, LatentMode::kMean);
  CHECK(v.score == doctest::Approx(0.6));
  CHECK_FALSE(v.is_anomaly);
  GruVaeState st2 = shield::zero_state(m);
  v = shield::detect(m, o, st2, 0.5, LatentMode::kMean);
  CHECK(v.is_anomaly);
  // boundary: score == threshold is not an anomaly (strict >)
  GruVaeState st3 = shield::zero_state(m);
  v = shield::detect(m, o, st3, 0.6, LatentMode::kMean);
  CHECK_FALSE(v.is_anomaly);
}

TEST_CASE("perfect reconstruction scores zero") {
  GruVae m = zero_vae(3, 4, 2);
  GruVaeState st = shield::zero_state(m);
  shield::AnomalyVerdict v = shield::detect(m, Vec(Vec::Zero(3)), st, 0.0, LatentMode::kMean);
  CHECK(v.score == 0.0);
  CHECK_FALSE(v.is_anomaly);
}

TEST_CASE("tune_c_anomaly separates disjoint score distributions perfectly") {
  std::vector<double> clean = {0.01, 0.02, 0.05, 0.04, 0.03};
  std::vector<double> attacked = {0.5, 0.6, 0.7, 0.8};
  shield::ThresholdChoice c = shield::tune_c_anomaly(clean, attacked, 0.02);
  CHECK(c.fnr == doctest::Approx(0.0));
  CHECK(c.f1 == doctest::Approx(1.0));
  CHECK(c.fnr_met);
  CHECK(c.c_anomaly >= 0.05);
  CHECK(c.c_anomaly < 0.5);
}

TEST_CASE("tune_c_anomaly is lexicographically optimal against exhaustive search") {
  Rng rng(6);
  std::vector<double> clean, attacked;
  for (int i = 0; i < 60; ++i) clean.push_back(std::abs(gaussian(rng)) * 0.1);
  for (int i = 0; i < 60; ++i) attacked.push_back(0.05 + std::abs(gaussian(rng)) * 0.15);
  double fnr_max = 0.1;
  shield::ThresholdChoice got = shield::tune_c_anomaly(clean, attacked, fnr_max);
  // exhaustive oracle over a dense grid of candidate thresholds
  auto eval = [&](double c) {
    int tp = 0, fp = 0, fn = 0;
    for (double s : attacked) (s > c ? tp : fn)++;
    for (double s : clean)
      if (s > c) ++fp;
    double fnr = double(fn) / double(attacked.size());
    double denom = 2.0 * tp + fp + fn;
    double f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    return std::make_pair(fnr, f1);
  };
  double best_f1 = -1.0, min_fnr = 2.0;
  for (double c = -0.01; c < 0.5; c += 0.0005) {
    auto [fnr, f1] = eval(c);
    min_fnr = std::min(min_fnr, fnr);
    if (fnr <= fnr_max) best_f1 = std::max(best_f1, f1);
  }
  auto [gfnr, gf1] = eval(got.c_anomaly);
  CHECK(gfnr == doctest::Approx(got.fnr).epsilon(1e-12));
  if (best_f1 >= 0.0) {
    CHECK(got.fnr <= fnr_max);
    CHECK(gf1 >= best_f1 - 1e-9);
  } else {
    CHECK(gfnr <= min_fnr + 1e-9);
  }
}

TEST_CASE("tune_c_anomaly degenerate inputs") {
  // empty score sets are rejected
  CHECK_THROWS_AS(shield::tune_c_anomaly({0.1, 0.2}, {}, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(shield::tune_c_anomaly({}, {0.1}, 0.02), std::invalid_argument);
  // identical distributions: still returns a usable finite threshold
  std::vector<double> same = {0.1, 0.1, 0.1};
  shield::ThresholdChoice c2 = shield::tune_c_anomaly(same, same, 0.02);
  CHECK(std::isfinite(c2.c_anomaly));
}

TEST_CASE("detector training reduces the epoch loss and is seed-deterministic") {
  Dataset d = tiny_dataset(2, 40);
  shield::ShieldConfig cfg;
  cfg.hidden_dim = 8;
  cfg.latent_dim = 4;
  cfg.epochs = 6;
  cfg.window = 32;
  cfg.batch = 16;
  shield::TrainShieldLog log1, log2;
  GruVae m1 = shield::train_detector(d, cfg, 7, &log1);
  GruVae m2 = shield::train_detector(d, cfg, 7, &log2);
  REQUIRE(log1.epoch_loss.size() == 6);
  CHECK(log1.epoch_loss.back() < log1.epoch_loss.front());
  for (auto& [name, p] : shield::named_params(m1, "a")) {
    Mat* q = nullptr;
    for (auto& [name2, p2] : shield::named_params(m2, "a"))
      if (name2 == name) q = p2;
    REQUIRE(q != nullptr);
    CHECK((*p - *q).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("denoiser trained on attacked pairs lowers reconstruction error vs raw attack") {
  Dataset d = tiny_dataset(3, 50);
  // synthetic "attack": constant offset on every observation
  attack::AdversarialDataset adv;
  for (const auto& tr : d.trajectories) {
    attack::AdvSequence seq;
    seq.kind = attack::AttackKind::kOpposite;
    for (const auto& s : tr.steps) {
      seq.clean.push_back(s.obs);
      Vec a = s.obs;
      a[0] += 0.3;
      a[2] -= 0.3;
      seq.attacked.push_back(a);
      seq.flags.push_back(true);
    }
    adv.sequences.push_back(std::move(seq));
  }
  shield::ShieldConfig cfg;
  cfg.hidden_dim = 32;
  cfg.latent_dim = 16;
  cfg.epochs = 80;
  cfg.window = 32;
  cfg.batch = 16;
  cfg.train_mode = LatentMode::kMean;
  GruVae den = shield::train_denoiser(d, adv, cfg, nullptr, nullptr, 11);
  double mae_raw = 0.0, mae_den = 0.0;
  long n = 0;
  GruVaeState st = shield::zero_state(den);
  const auto& seq = adv.sequences[0];
  for (std::size_t i = 0; i < seq.clean.size(); ++i) {
    Vec recon = shield::vae_step(den, seq.attacked[i], st, LatentMode::kMean).o_out;
    mae_raw += (seq.attacked[i] - seq.clean[i]).cwiseAbs().mean();
    mae_den += (recon - seq.clean[i]).cwiseAbs().mean();
    ++n;
  }
  CHECK(mae_den / double(n) < mae_raw / double(n));
}

TEST_CASE("robustness regularizer vanishes for a constant policy and tiny budgets") {
  Rng rng(8);
  policy::PolicyBundle b = pm_bundle(rng);
  GruVae den = shield::make_gru_vae(4, 6, 4, rng);
  GruVaeState st = shield::zero_state(den);
  attack::AttackBudget budget;
  attack::PgdConfig pgd;
  pgd.steps = 5;
  // constant policy: zero out the policy net
  for (auto& w : b.policy.weights) w.setZero();
  for (auto& bb : b.policy.biases) bb.setZero();
  budget.epsilon = 0.2;
  Rng r1(9);
  CHECK(shield::robustness_regularizer(b, den, Vec(gaussian_vec(rng, 4)), st, budget, pgd, r1) ==
        doctest::Approx(0.0));
  // tiny budget, generic policy: regularizer tends to zero
  Rng rng2(10);
  policy::PolicyBundle b2 = pm_bundle(rng2);
  budget.epsilon = 1e-8;
  Rng r2(11);
  CHECK(shield::robustness_regularizer(b2, den, Vec(gaussian_vec(rng, 4)), st, budget, pgd, r2) <
        1e-6);
}

TEST_CASE("PPO regularizer with identity covariance is the square of the TD3 distance") {
  Rng rng(12);
  policy::PolicyBundle td3 = pm_bundle(rng);
  policy::PolicyBundle ppo = td3;
  ppo.algo = policy::Algo::kPpo;
  ppo.sigma = Vec::Ones(2);
  ppo.has_q = false;
  GruVae den = shield::make_gru_vae(4, 6, 4, rng);
  GruVaeState st = shield::zero_state(den);
  attack::AttackBudget budget;
  budget.epsilon = 0.15;
  attack::PgdConfig pgd;
  pgd.steps = 15;
  pgd.random_init = false;
  pgd.restarts = 0;
  Vec o = gaussian_vec(rng, 4);
  Rng r1(13), r2(13);
  double r_td3 = shield::robustness_regularizer(td3, den, o, st, budget, pgd, r1);
  double r_ppo = shield::robustness_regularizer(ppo, den, o, st, budget, pgd, r2);
  CHECK(r_ppo == doctest::Approx(r_td3 * r_td3).epsilon(1e-6));
}

TEST_CASE("defended policy is bitwise pass-through when nothing is flagged") {
  Rng rng(14);
  policy::PolicyBundle b = pm_bundle(rng);
  GruVae det = shield::make_gru_vae(4, 6, 4, rng);
  GruVae den = shield::make_gru_vae(4, 6, 4, rng);
  shield::DefendedConfig dc;
  dc.c_anomaly = std::numeric_limits<double>::infinity();  // never flags
  dc.mode = LatentMode::kMean;
  shield::DefendedPolicy defended(b, det, den, dc, 3);
  defended.begin_episode();
  Rng org(15);
  for (int i = 0; i < 20; ++i) {
    Vec o = gaussian_vec(org, 4);
    Vec a = defended.act(o);
    Vec want = policy::policy_mean(b, o);
    CHECK((a - want).cwiseAbs().maxCoeff() == 0.0);  // bitwise
    CHECK(defended.last_verdict().has_value());
    CHECK_FALSE(*defended.last_verdict());
    CHECK((defended.last_obs_used().value() - o).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("defended policy substitutes the reconstruction when flagged") {
  Rng rng(16);
  policy::PolicyBundle b = pm_bundle(rng);
  GruVae det = shield::make_gru_vae(4, 6, 4, rng);
  GruVae den = shield::make_gru_vae(4, 6, 4, rng);
  shield::DefendedConfig dc;
  dc.c_anomaly = -1.0;  // flags everything
  dc.mode = LatentMode::kMean;
  shield::DefendedPolicy defended(b, det, den, dc, 3);
  defended.begin_episode();
  GruVaeState den_ref = shield::zero_state(den);
  Rng org(17);
  for (int i = 0; i < 10; ++i) {
    Vec o = gaussian_vec(org, 4);
    Vec a = defended.act(o);
    // reference denoiser runs on the same raw stream
    Vec recon = shield::vae_step(den, o, den_ref, LatentMode::kMean).o_out;
    CHECK(*defended.last_verdict());
    CHECK((defended.last_obs_used().value() - recon).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a - policy::policy_mean(b, recon)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("defense wrapper never mutates the policy parameters") {
  Rng rng(18);
  policy::PolicyBundle b = pm_bundle(rng);
  policy::PolicyBundle before = b;
  GruVae det = shield::make_gru_vae(4, 6, 4, rng);
  GruVae den = shield::make_gru_vae(4, 6, 4, rng);
  shield::DefendedConfig dc;
  dc.c_anomaly = 0.0;
  shield::DefendedPolicy defended(b, det, den, dc, 3);
  env::EnvSpec spec = env::make_spec(env::EnvName::kPointMass2d);
  env::rollout(spec, defended, 77);
  for (std::size_t l = 0; l < b.policy.weights.size(); ++l)
    CHECK((b.policy.weights[l] - before.policy.weights[l]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("detector_scores resets state at episode boundaries") {
  Rng rng(19);
  GruVae det = shield::make_gru_vae(4, 6, 4, rng);
  Dataset d = tiny_dataset(2, 60);
  std::vector<double> scores = shield::detector_scores(det, d, LatentMode::kMean);
  std::size_t total = 0;
  for (const auto& tr : d.trajectories) total += tr.steps.size();
  REQUIRE(scores.size() == total);
  // first step of each trajectory must score identically to a fresh manual pass
  std::size_t idx = 0;
  for (const auto& tr : d.trajectories) {
    GruVaeState st = shield::zero_state(det);
    Vec recon = shield::vae_step(det, tr.steps[0].obs, st, LatentMode::kMean).o_out;
    double want = (tr.steps[0].obs - recon).lpNorm<Eigen::Infinity>();
    CHECK(scores[idx] == doctest::Approx(want).epsilon(1e-12));
    idx += tr.steps.size();
  }
}
