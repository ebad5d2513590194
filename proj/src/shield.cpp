#include "obsdef/shield/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace obsdef::shield {

namespace {

Vec linear_head(const Mat& W, const Mat& b, const Vec& x) {
  return W * x + b.col(0);
}

Mat linear_head(const Mat& W, const Mat& b, const Mat& x) {
  return (W * x).colwise() + b.col(0);
}

}  // namespace

GruVae make_gru_vae(int obs_dim, int hidden_dim, int latent_dim, Rng& rng) {
  require(obs_dim > 0 && hidden_dim > 0 && latent_dim > 0, "make_gru_vae: bad dimensions");
  GruVae m;
  m.obs_dim = obs_dim;
  m.hidden_dim = hidden_dim;
  m.latent_dim = latent_dim;
  m.encoder = diff::make_gru(obs_dim, hidden_dim, rng);
  m.decoder = diff::make_gru(latent_dim, hidden_dim, rng);
  double sh = std::sqrt(1.0 / double(hidden_dim));
  m.W_mu = gaussian_mat(rng, latent_dim, hidden_dim) * sh;
  m.b_mu = Mat::Zero(latent_dim, 1);
  m.W_logsig = gaussian_mat(rng, latent_dim, hidden_dim) * sh;
  m.b_logsig = Mat::Zero(latent_dim, 1);
  m.W_out = gaussian_mat(rng, obs_dim, hidden_dim) * sh;
  m.b_out = Mat::Zero(obs_dim, 1);
  m.W_prior = gaussian_mat(rng, latent_dim, hidden_dim) * sh;
  m.b_prior = Mat::Zero(latent_dim, 1);
  return m;
}

diff::NamedParams named_params(GruVae& m, const std::string& prefix) {
  diff::NamedParams out = diff::named_params(m.encoder, prefix + ".enc");
  diff::NamedParams dec = diff::named_params(m.decoder, prefix + ".dec");
  out.insert(out.end(), dec.begin(), dec.end());
  out.emplace_back(prefix + ".W_mu", &m.W_mu);
  out.emplace_back(prefix + ".b_mu", &m.b_mu);
  out.emplace_back(prefix + ".W_logsig", &m.W_logsig);
  out.emplace_back(prefix + ".b_logsig", &m.b_logsig);
  out.emplace_back(prefix + ".W_out", &m.W_out);
  out.emplace_back(prefix + ".b_out", &m.b_out);
  out.emplace_back(prefix + ".W_prior", &m.W_prior);
  out.emplace_back(prefix + ".b_prior", &m.b_prior);
  return out;
}

VaeBatchStepOut vae_step_batch(const GruVae& m, const Mat& o, GruVaeState& state,
                               LatentMode mode, const Mat& noise) {
  require(o.rows() == m.obs_dim, "vae_step: observation dimension mismatch");
  require(state.h_enc.cols() == o.cols() && state.h_dec.cols() == o.cols(),
          "vae_step: state batch width mismatch");
  VaeBatchStepOut out;
  state.h_enc = diff::gru_cell(m.encoder, o, state.h_enc);
  out.mu = linear_head(m.W_mu, m.b_mu, state.h_enc);
  out.log_sigma = linear_head(m.W_logsig, m.b_logsig, state.h_enc);
  out.mu_prior = linear_head(m.W_prior, m.b_prior, state.h_dec);
  Mat z = out.mu;
  if (mode == LatentMode::kSample) {
    require(noise.rows() == m.latent_dim && noise.cols() == o.cols(),
            "vae_step: noise shape mismatch in sample mode");
    z = out.mu.array() + out.log_sigma.array().exp() * noise.array();
  }
  state.h_dec = diff::gru_cell(m.decoder, z, state.h_dec);
  out.o_out = linear_head(m.W_out, m.b_out, state.h_dec);
  return out;
}

VaeStepOut vae_step(const GruVae& m, const Vec& o, GruVaeState& state, LatentMode mode,
                    const Vec& noise) {
  Mat n = noise.size() ? Mat(noise) : Mat();
  VaeBatchStepOut b = vae_step_batch(m, Mat(o), state, mode, n);
  return {Vec(b.o_out.col(0)), Vec(b.mu.col(0)), Vec(b.log_sigma.col(0)),
          Vec(b.mu_prior.col(0))};
}

double elbo_loss(const GruVae& m, const std::vector<Vec>& inputs,
                 const std::vector<Vec>& targets, const std::vector<Vec>* noise) {
  require(!inputs.empty() && inputs.size() == targets.size(), "elbo_loss: bad sequence");
  if (noise) require(noise->size() == inputs.size(), "elbo_loss: noise length mismatch");
  GruVaeState st = zero_state(m);
  double total = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    VaeStepOut s = noise ? vae_step(m, inputs[t], st, LatentMode::kSample, (*noise)[t])
                         : vae_step(m, inputs[t], st, LatentMode::kMean);
    total += 0.5 * (s.o_out - targets[t]).squaredNorm();
    total += diff::kl_diag_gaussian(s.mu, s.log_sigma, s.mu_prior);
  }
  return total / double(inputs.size());
}

namespace {

struct Window {
  std::vector<Vec> in, tgt;
};

// Chop trajectories into fixed-length windows; a trailing partial window is
// kept if it is at least 2 steps long (short, early-failure episodes still
// contribute).
void chop(std::vector<Window>& out, const std::vector<Vec>& in, const std::vector<Vec>& tgt,
          int window) {
  std::size_t n = in.size();
  for (std::size_t start = 0; start < n; start += std::size_t(window)) {
    std::size_t end = std::min(n, start + std::size_t(window));
    if (end - start < 2) break;
    Window w;
    for (std::size_t i = start; i < end; ++i) {
      w.in.push_back(in[i]);
      w.tgt.push_back(tgt[i]);
    }
    out.push_back(std::move(w));
  }
}

// Tape-resident copy of a GruVae for one training step.
struct GruVaeVars {
  diff::GruCellVars enc, dec;
  diff::Var W_mu, b_mu, W_logsig, b_logsig, W_out, b_out, W_prior, b_prior;
};

GruVaeVars lift_vae(diff::Tape& t, const GruVae& m, bool requires_grad) {
  GruVaeVars v;
  v.enc = diff::lift(t, m.encoder, requires_grad);
  v.dec = diff::lift(t, m.decoder, requires_grad);
  v.W_mu = t.leaf(m.W_mu, requires_grad);
  v.b_mu = t.leaf(m.b_mu, requires_grad);
  v.W_logsig = t.leaf(m.W_logsig, requires_grad);
  v.b_logsig = t.leaf(m.b_logsig, requires_grad);
  v.W_out = t.leaf(m.W_out, requires_grad);
  v.b_out = t.leaf(m.b_out, requires_grad);
  v.W_prior = t.leaf(m.W_prior, requires_grad);
  v.b_prior = t.leaf(m.b_prior, requires_grad);
  return v;
}

std::vector<diff::Var> flatten_vae(const GruVaeVars& v) {
  std::vector<diff::Var> out = diff::flatten(v.enc);
  std::vector<diff::Var> dec = diff::flatten(v.dec);
  out.insert(out.end(), dec.begin(), dec.end());
  for (diff::Var x : {v.W_mu, v.b_mu, v.W_logsig, v.b_logsig, v.W_out, v.b_out, v.W_prior,
                      v.b_prior}) {
    out.push_back(x);
  }
  return out;
}

struct VaeStepVars {
  diff::Var o_out, mu, log_sigma, mu_prior;
};

// One recurrence step on the tape; advances h_enc/h_dec vars in place.
VaeStepVars vae_step_op(diff::Tape& t, const GruVaeVars& v, diff::Var x, diff::Var& h_enc,
                        diff::Var& h_dec, const Mat* noise) {
  VaeStepVars s;
  h_enc = diff::gru_cell_apply(t, v.enc, x, h_enc);
  s.mu = t.add_bias(t.matmul(v.W_mu, h_enc), v.b_mu);
  s.log_sigma = t.add_bias(t.matmul(v.W_logsig, h_enc), v.b_logsig);
  s.mu_prior = t.add_bias(t.matmul(v.W_prior, h_dec), v.b_prior);
  diff::Var z = s.mu;
  if (noise) z = diff::gaussian_reparam_op(t, s.mu, s.log_sigma, t.leaf(*noise));
  h_dec = diff::gru_cell_apply(t, v.dec, z, h_dec);
  s.o_out = t.add_bias(t.matmul(v.W_out, h_dec), v.b_out);
  return s;
}

// Per-column action distance: Mahalanobis under Sigma for PPO, squared
// Euclidean for TD3 (squared keeps the gradient smooth at zero; the argmax
// over the ball is unchanged).
diff::Var action_gap_row(diff::Tape& t, const policy::PolicyBundle& b, diff::Var a1,
                         diff::Var a2) {
  diff::Var d = t.sub(a1, a2);
  if (b.algo == policy::Algo::kPpo) {
    Vec inv_sig = b.sigma.cwiseInverse();
    int cols = int(t.val(d).cols());
    d = t.cmul(d, t.leaf(Mat(inv_sig.replicate(1, cols))));
  }
  return t.colwise_sum(t.square_(d));
}

// Batched objective for attacking the denoiser+policy composition with
// frozen recurrent states: maximize gap between pi(den(o_hat)) and fixed
// clean actions.
attack::BatchLoss composed_gap_loss(const policy::PolicyBundle& bundle, const GruVae& den,
                                    const GruVaeState& frozen, const Mat& a_clean,
                                    const Mat& o_hat) {
  diff::Tape t;
  diff::Var x = t.leaf(o_hat, true);
  GruVaeVars v = lift_vae(t, den, false);
  diff::Var h_enc = t.leaf(frozen.h_enc);
  diff::Var h_dec = t.leaf(frozen.h_dec);
  VaeStepVars s = vae_step_op(t, v, x, h_enc, h_dec, nullptr);
  diff::MlpVars pv = diff::lift(t, bundle.policy, false);
  diff::Var act = policy::policy_mean_op(t, pv, bundle, s.o_out);
  diff::Var row = action_gap_row(t, bundle, act, t.leaf(a_clean));
  diff::Var total = t.sum(row);
  t.backward(total);
  attack::BatchLoss out;
  out.value = Eigen::RowVectorXd(t.val(row).row(0));
  out.grad = t.grad(x);
  return out;
}

// Shared trainer for detector and denoiser.
GruVae train_vae(std::vector<Window> windows, int obs_dim, const ShieldConfig& cfg,
                 const policy::PolicyBundle* bundle, const attack::AttackBudget* budget,
                 uint64_t seed, TrainShieldLog* log) {
  require(!windows.empty(), "train_vae: no training windows");
  const bool regularize = cfg.reg_weight > 0;
  if (regularize) {
    require(bundle && budget, "train_vae: regularizer needs a policy bundle and a budget");
  }
  Rng rng(seed);
  GruVae model = make_gru_vae(obs_dim, cfg.hidden_dim, cfg.latent_dim, rng);
  diff::NamedParams np = named_params(model, "vae");
  diff::Adam opt(cfg.lr);
  opt.register_params(diff::param_ptrs(np));

  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  Vec radius = budget ? budget->radius(obs_dim) : Vec();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += std::size_t(cfg.batch)) {
      std::size_t bend = std::min(order.size(), pos + std::size_t(cfg.batch));
      // Group by window length so the batch stacks cleanly.
      std::vector<std::size_t> batch(order.begin() + long(pos), order.begin() + long(bend));
      std::size_t wlen = windows[batch[0]].in.size();
      std::vector<std::size_t> kept;
      for (std::size_t i : batch)
        if (windows[i].in.size() == wlen) kept.push_back(i);
      int B = int(kept.size());

      std::vector<Mat> X(wlen), Tg(wlen);
      for (std::size_t t = 0; t < wlen; ++t) {
        X[t] = Mat(obs_dim, B);
        Tg[t] = Mat(obs_dim, B);
        for (int c = 0; c < B; ++c) {
          X[t].col(c) = windows[kept[std::size_t(c)]].in[t];
          Tg[t].col(c) = windows[kept[std::size_t(c)]].tgt[t];
        }
      }

      // Worst-case perturbation of the final step, against the current
      // model with states frozen at t = T-1 (plain forward, mean mode).
      Mat o_att;
      Mat a_clean;
      GruVaeState frozen = zero_state(model, B);
      if (regularize) {
        for (std::size_t t = 0; t + 1 < wlen; ++t) {
          vae_step_batch(model, X[t], frozen, LatentMode::kMean);
        }
        GruVaeState tmp = frozen;
        Mat den_clean = vae_step_batch(model, Tg.back(), tmp, LatentMode::kMean).o_out;
        a_clean = policy::policy_mean(*bundle, den_clean);
        attack::BatchLossFn fn = [&](const Mat& oh) {
          return composed_gap_loss(*bundle, model, frozen, a_clean, oh);
        };
        attack::PgdBatchResult pr =
            attack::pgd_maximize_batch(fn, Tg.back(), radius, cfg.reg_pgd, rng);
        o_att = pr.o_hat;
      }

      diff::Tape t;
      GruVaeVars v = lift_vae(t, model, true);
      diff::Var h_enc = t.leaf(Mat(Mat::Zero(cfg.hidden_dim, B)));
      diff::Var h_dec = t.leaf(Mat(Mat::Zero(cfg.hidden_dim, B)));
      diff::Var loss{-1};
      for (std::size_t step = 0; step < wlen; ++step) {
        Mat noise;
        const Mat* np_noise = nullptr;
        if (cfg.train_mode == LatentMode::kSample) {
          noise = gaussian_mat(rng, cfg.latent_dim, B);
          np_noise = &noise;
        }
        VaeStepVars s = vae_step_op(t, v, t.leaf(X[step]), h_enc, h_dec, np_noise);
        diff::Var recon = t.scale(t.sum_sq(t.sub(s.o_out, t.leaf(Tg[step]))), 0.5);
        diff::Var kl = diff::kl_diag_gaussian_op(t, s.mu, s.log_sigma, s.mu_prior);
        diff::Var term = t.add(recon, kl);
        loss = (loss.id < 0) ? term : t.add(loss, term);
      }
      diff::Var reg{-1};
      if (regularize) {
        // Separate branch sharing parameters (state frozen as constants, as
        // in the attack): gap between pi(den(clean)) and pi(den(attacked)).
        diff::Var he1 = t.leaf(frozen.h_enc), hd1 = t.leaf(frozen.h_dec);
        diff::Var he2 = t.leaf(frozen.h_enc), hd2 = t.leaf(frozen.h_dec);
        VaeStepVars sc = vae_step_op(t, v, t.leaf(Tg.back()), he1, hd1, nullptr);
        VaeStepVars sa = vae_step_op(t, v, t.leaf(o_att), he2, hd2, nullptr);
        diff::MlpVars pv = diff::lift(t, bundle->policy, false);
        diff::Var ac = policy::policy_mean_op(t, pv, *bundle, sc.o_out);
        diff::Var aa = policy::policy_mean_op(t, pv, *bundle, sa.o_out);
        reg = t.mean(action_gap_row(t, *bundle, ac, aa));
      }
      diff::Var total = t.scale(loss, 1.0 / double(wlen * std::size_t(B)));
      if (reg.id >= 0) total = t.add(total, t.scale(reg, cfg.reg_weight));
      t.backward(total);
      double lv = t.val(total)(0, 0);
      if (!std::isfinite(lv)) throw std::runtime_error("shield training diverged");
      epoch_loss += lv;
      ++n_batches;
      opt.step(diff::collect_grads(t, flatten_vae(v)));
    }
    if (log) log->epoch_loss.push_back(epoch_loss / std::max(1, n_batches));
  }
  return model;
}

}  // namespace

double elbo_with_grad(const GruVae& m, const std::vector<Vec>& inputs,
                      const std::vector<Vec>& targets, const std::vector<Vec>* noise,
                      std::vector<Mat>& grads) {
  require(!inputs.empty() && inputs.size() == targets.size(), "elbo_with_grad: bad sequence");
  diff::Tape t;
  GruVaeVars v = lift_vae(t, m, true);
  diff::Var h_enc = t.leaf(Mat(Mat::Zero(m.hidden_dim, 1)));
  diff::Var h_dec = t.leaf(Mat(Mat::Zero(m.hidden_dim, 1)));
  diff::Var loss{-1};
  for (std::size_t step = 0; step < inputs.size(); ++step) {
    Mat nz;
    const Mat* np = nullptr;
    if (noise) {
      nz = (*noise)[step];
      np = &nz;
    }
    VaeStepVars s = vae_step_op(t, v, t.leaf(inputs[step]), h_enc, h_dec, np);
    diff::Var recon = t.scale(t.sum_sq(t.sub(s.o_out, t.leaf(targets[step]))), 0.5);
    diff::Var term = t.add(recon, diff::kl_diag_gaussian_op(t, s.mu, s.log_sigma, s.mu_prior));
    loss = (loss.id < 0) ? term : t.add(loss, term);
  }
  diff::Var total = t.scale(loss, 1.0 / double(inputs.size()));
  t.backward(total);
  grads = diff::collect_grads(t, flatten_vae(v));
  return t.val(total)(0, 0);
}

GruVae train_detector(const Dataset& d_normal, const ShieldConfig& cfg, uint64_t seed,
                      TrainShieldLog* log) {
  require(!d_normal.trajectories.empty(), "train_detector: empty dataset");
  std::vector<Window> windows;
  for (const auto& tr : d_normal.trajectories) {
    std::vector<Vec> obs;
    for (const auto& s : tr.steps) obs.push_back(s.obs);
    chop(windows, obs, obs, cfg.window);
  }
  int obs_dim = int(d_normal.trajectories.front().steps.front().obs.size());
  ShieldConfig c = cfg;
  c.reg_weight = 0.0;  // detector never uses the regularizer
  return train_vae(std::move(windows), obs_dim, c, nullptr, nullptr, seed, log);
}

GruVae train_denoiser(const Dataset& d_normal, const attack::AdversarialDataset& d_adv,
                      const ShieldConfig& cfg, const policy::PolicyBundle* bundle,
                      const attack::AttackBudget* budget, uint64_t seed,
                      TrainShieldLog* log) {
  require(!d_adv.sequences.empty() || !d_normal.trajectories.empty(),
          "train_denoiser: no data");
  std::vector<Window> windows;
  for (const auto& seq : d_adv.sequences) chop(windows, seq.attacked, seq.clean, cfg.window);
  for (const auto& tr : d_normal.trajectories) {
    std::vector<Vec> obs;
    for (const auto& s : tr.steps) obs.push_back(s.obs);
    chop(windows, obs, obs, cfg.window);
  }
  require(!windows.empty(), "train_denoiser: no training windows");
  int obs_dim = int(windows.front().in.front().size());
  return train_vae(std::move(windows), obs_dim, cfg, bundle, budget, seed, log);
}

double robustness_regularizer(const policy::PolicyBundle& bundle, const GruVae& denoiser,
                              const Vec& obs, const GruVaeState& state,
                              const attack::AttackBudget& budget,
                              const attack::PgdConfig& pgd, Rng& rng) {
  GruVaeState tmp = state;
  Vec den_clean = vae_step(denoiser, obs, tmp, LatentMode::kMean).o_out;
  Mat a_clean = Mat(policy::policy_mean(bundle, den_clean));
  attack::BatchLossFn fn = [&](const Mat& oh) {
    return composed_gap_loss(bundle, denoiser, state, a_clean, oh);
  };
  attack::PgdBatchResult pr =
      attack::pgd_maximize_batch(fn, Mat(obs), budget.radius(obs.size()), pgd, rng);
  // PGD maximizes the squared gap for both algorithms (same argmax, smooth
  // gradient); the reported value is the Euclidean distance for TD3 and the
  // squared Mahalanobis distance for PPO.
  if (bundle.algo == policy::Algo::kTd3) return std::sqrt(pr.objective(0));
  return pr.objective(0);
}

AnomalyVerdict detect(const GruVae& detector, const Vec& obs, GruVaeState& state,
                      double c_anomaly, LatentMode mode, Rng* rng) {
  Vec noise;
  if (mode == LatentMode::kSample) {
    require(rng != nullptr, "detect: sample mode needs an rng");
    noise = gaussian_vec(*rng, detector.latent_dim);
  }
  VaeStepOut s = vae_step(detector, obs, state, mode, noise);
  AnomalyVerdict v;
  v.score = (obs - s.o_out).lpNorm<Eigen::Infinity>();
  v.threshold = c_anomaly;
  v.is_anomaly = v.score > c_anomaly;
  return v;
}

namespace {

void score_sequence(const GruVae& det, const std::vector<Vec>& obs,
                    const std::vector<bool>* flags, LatentMode mode, Rng* rng,
                    std::vector<double>& out) {
  GruVaeState st = zero_state(det);
  for (std::size_t t = 0; t < obs.size(); ++t) {
    AnomalyVerdict v = detect(det, obs[t], st, 0.0, mode, rng);
    if (!flags || (*flags)[t]) out.push_back(v.score);
  }
}

}  // namespace

std::vector<double> detector_scores(const GruVae& detector, const Dataset& data,
                                    LatentMode mode, Rng* rng) {
  std::vector<double> out;
  for (const auto& tr : data.trajectories) {
    std::vector<Vec> obs;
    for (const auto& s : tr.steps) obs.push_back(s.obs);
    score_sequence(detector, obs, nullptr, mode, rng, out);
  }
  return out;
}

std::vector<double> detector_scores(const GruVae& detector,
                                    const attack::AdversarialDataset& adv, bool attacked_only,
                                    LatentMode mode, Rng* rng) {
  std::vector<double> out;
  for (const auto& seq : adv.sequences) {
    score_sequence(detector, seq.attacked, attacked_only ? &seq.flags : nullptr, mode, rng,
                   out);
  }
  return out;
}

ThresholdChoice tune_c_anomaly(const std::vector<double>& clean_scores,
                               const std::vector<double>& attacked_scores, double fnr_max) {
  require(!clean_scores.empty() && !attacked_scores.empty(),
          "tune_c_anomaly: need both score sets");
  std::vector<double> all = clean_scores;
  all.insert(all.end(), attacked_scores.begin(), attacked_scores.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  // Candidate thresholds: every distinct score plus one below the minimum
  // (flag everything). Cap the sweep at ~512 evenly spaced candidates.
  std::vector<double> candidates;
  candidates.push_back(all.front() - 1.0);
  std::size_t step = std::max<std::size_t>(1, all.size() / 512);
  for (std::size_t i = 0; i < all.size(); i += step) candidates.push_back(all[i]);

  std::vector<double> att_sorted = attacked_scores, cl_sorted = clean_scores;
  std::sort(att_sorted.begin(), att_sorted.end());
  std::sort(cl_sorted.begin(), cl_sorted.end());
  auto count_leq = [](const std::vector<double>& v, double c) {
    return double(std::upper_bound(v.begin(), v.end(), c) - v.begin());
  };

  ThresholdChoice best;
  bool have = false;
  for (double c : candidates) {
    double fn = count_leq(att_sorted, c);
    double tp = double(att_sorted.size()) - fn;
    double fp = double(cl_sorted.size()) - count_leq(cl_sorted, c);
    double fnr = fn / double(att_sorted.size());
    double f1 = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    ThresholdChoice cur{c, fnr, f1, fnr <= fnr_max};
    bool better;
    if (!have) {
      better = true;
    } else if (best.fnr_met != cur.fnr_met) {
      better = cur.fnr_met;
    } else if (cur.fnr_met) {
      // >= so ties go to the larger threshold: at equal F1 the higher cut
      // emits fewer false flags on streams slightly off the tuning data.
      better = cur.f1 >= best.f1 - 1e-12;
    } else {
      better = cur.fnr < best.fnr + 1e-12;
    }
    if (better) {
      best = cur;
      have = true;
    }
  }
  return best;
}

DefendedPolicy::DefendedPolicy(const policy::PolicyBundle& bundle, const GruVae& detector,
                               const GruVae& denoiser, const DefendedConfig& cfg,
                               uint64_t seed)
    : bundle_(bundle),
      detector_(detector),
      denoiser_(denoiser),
      cfg_(cfg),
      det_state_(zero_state(detector)),
      den_state_(zero_state(denoiser)),
      rng_(seed) {}

void DefendedPolicy::begin_episode() {
  det_state_ = zero_state(detector_);
  den_state_ = zero_state(denoiser_);
  last_flag_.reset();
  obs_used_.reset();
}

Vec DefendedPolicy::act(const Vec& obs) {
  verdict_ = detect(detector_, obs, det_state_, cfg_.c_anomaly, cfg_.mode,
                    cfg_.mode == LatentMode::kSample ? &rng_ : nullptr);
  Vec noise;
  if (cfg_.mode == LatentMode::kSample) noise = gaussian_vec(rng_, denoiser_.latent_dim);
  // The denoiser always consumes the raw stream so its state matches what it
  // saw in training, whether or not this step's output is used.
  Vec recon = vae_step(denoiser_, obs, den_state_, cfg_.mode, noise).o_out;
  Vec used = verdict_.is_anomaly ? recon : obs;
  last_flag_ = verdict_.is_anomaly;
  obs_used_ = used;
  return policy::act(bundle_, used, cfg_.act_mode, rng_).sampled_action;
}

}  // namespace obsdef::shield
