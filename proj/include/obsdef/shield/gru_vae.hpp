#pragma once

#include "obsdef/diff/nn.hpp"

namespace obsdef::shield {

enum class LatentMode { kSample, kMean };

// Recurrent variational autoencoder with a learnable prior mean.
// Encoder GRU reads the observation stream; two linear heads produce the
// latent mean and log-variance. The decoder GRU consumes the latent sample
// and a linear head emits the reconstruction. The prior mean mu_z for step
// t comes from a linear head on the decoder hidden state of step t-1; the
// prior covariance is the identity and is never parameterized.
struct GruVae {
  int obs_dim = 0;
  int hidden_dim = 64;
  int latent_dim = 64;
  diff::GruCellParams encoder;  // obs -> hidden
  Mat W_mu, b_mu;               // hidden -> latent
  Mat W_logsig, b_logsig;       // hidden -> latent
  diff::GruCellParams decoder;  // latent -> hidden
  Mat W_out, b_out;             // hidden -> obs
  Mat W_prior, b_prior;         // hidden -> latent
};

GruVae make_gru_vae(int obs_dim, int hidden_dim, int latent_dim, Rng& rng);

diff::NamedParams named_params(GruVae& m, const std::string& prefix);

// Per-episode recurrent state; columns are batch lanes.
struct GruVaeState {
  Mat h_enc, h_dec;
};

inline GruVaeState zero_state(const GruVae& m, int batch = 1) {
  return {Mat::Zero(m.hidden_dim, batch), Mat::Zero(m.hidden_dim, batch)};
}

struct VaeStepOut {
  Vec o_out, mu, log_sigma, mu_prior;
};

// One recurrent step. noise must have latent_dim entries in sample mode;
// mean mode uses z = mu. Advances `state` in place.
VaeStepOut vae_step(const GruVae& m, const Vec& o, GruVaeState& state, LatentMode mode,
                    const Vec& noise = Vec());

// Batched plain forward over a window (columns = batch); returns
// reconstructions per step, advancing state.
struct VaeBatchStepOut {
  Mat o_out, mu, log_sigma, mu_prior;
};
VaeBatchStepOut vae_step_batch(const GruVae& m, const Mat& o, GruVaeState& state,
                               LatentMode mode, const Mat& noise = Mat());

// Sequence ELBO-style loss:
//   sum_t [ 0.5 ||o_out,t - target_t||^2 + KL(q_t || N(mu_z,t, I)) ] / T.
// Sample mode draws z through the supplied noise columns (one Vec per step);
// a null noise pointer means mean mode.
double elbo_loss(const GruVae& m, const std::vector<Vec>& inputs,
                 const std::vector<Vec>& targets,
                 const std::vector<Vec>* noise = nullptr);

// elbo_loss plus its analytic gradient with respect to every parameter, in
// named_params order. Returns the loss value.
double elbo_with_grad(const GruVae& m, const std::vector<Vec>& inputs,
                      const std::vector<Vec>& targets, const std::vector<Vec>* noise,
                      std::vector<Mat>& grads);

}  // namespace obsdef::shield
