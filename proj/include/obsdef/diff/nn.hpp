#pragma once

#include <string>
#include <utility>
#include <vector>

#include "obsdef/diff/tape.hpp"

namespace obsdef::diff {

enum class Activation { kTanh, kRelu, kLinear };

// Fully connected network, tanh hidden layers and linear output by default.
// All parameter blocks are matrices; biases are (n x 1).
struct MlpParams {
  std::vector<Mat> weights;
  std::vector<Mat> biases;
  Activation hidden = Activation::kTanh;
  Activation output = Activation::kLinear;

  int input_dim() const { return int(weights.front().cols()); }
  int output_dim() const { return int(weights.back().rows()); }
};

inline MlpParams make_mlp(const std::vector<int>& dims, Rng& rng, double init_scale = -1.0) {
  require(dims.size() >= 2, "make_mlp: need at least input and output dims");
  MlpParams p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    double s = init_scale > 0 ? init_scale : std::sqrt(1.0 / double(dims[l]));
    p.weights.push_back(gaussian_mat(rng, dims[l + 1], dims[l]) * s);
    p.biases.push_back(Mat::Zero(dims[l + 1], 1));
  }
  return p;
}

inline Mat apply_activation(Activation a, const Mat& x) {
  switch (a) {
    case Activation::kTanh: return x.array().tanh();
    case Activation::kRelu: return x.cwiseMax(0.0);
    case Activation::kLinear: return x;
  }
  return x;
}

// Plain forward pass; columns of x are batch samples.
inline Mat mlp_forward(const MlpParams& p, const Mat& x) {
  require(x.rows() == p.weights.front().cols(), "mlp_forward: input dimension mismatch");
  Mat h = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    Mat z = (p.weights[l] * h).colwise() + p.biases[l].col(0);
    h = apply_activation(l + 1 < p.weights.size() ? p.hidden : p.output, z);
  }
  return h;
}

inline Vec mlp_forward(const MlpParams& p, const Vec& x) {
  return Vec(mlp_forward(p, Mat(x)));
}

// Tape-resident copy of an MLP's parameters.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

inline MlpVars lift(Tape& t, const MlpParams& p, bool requires_grad) {
  MlpVars v;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    v.weights.push_back(t.leaf(p.weights[l], requires_grad));
    v.biases.push_back(t.leaf(p.biases[l], requires_grad));
  }
  return v;
}

inline Var activation_op(Tape& t, Activation a, Var x) {
  switch (a) {
    case Activation::kTanh: return t.tanh_(x);
    case Activation::kRelu: return t.clamp_(x, 0.0, 1e30);
    case Activation::kLinear: return x;
  }
  return x;
}

inline Var mlp_apply(Tape& t, const MlpVars& v, const MlpParams& p, Var x) {
  Var h = x;
  for (std::size_t l = 0; l < v.weights.size(); ++l) {
    Var z = t.add_bias(t.matmul(v.weights[l], h), v.biases[l]);
    h = activation_op(t, l + 1 < v.weights.size() ? p.hidden : p.output, z);
  }
  return h;
}

// GRU cell, gate convention:
//   z = sigmoid(Wz x + Uz h + bz)    (update)
//   r = sigmoid(Wr x + Ur h + br)    (reset)
//   c = tanh(Wc x + Uc (r .* h) + bc)
//   h' = (1 - z) .* h + z .* c
struct GruCellParams {
  int input_dim = 0;
  int hidden_dim = 0;
  Mat Wz, Uz, Wr, Ur, Wc, Uc;
  Mat bz, br, bc;  // (hidden x 1)
};

inline GruCellParams make_gru(int input_dim, int hidden_dim, Rng& rng) {
  GruCellParams g;
  g.input_dim = input_dim;
  g.hidden_dim = hidden_dim;
  double si = std::sqrt(1.0 / double(input_dim));
  double sh = std::sqrt(1.0 / double(hidden_dim));
  g.Wz = gaussian_mat(rng, hidden_dim, input_dim) * si;
  g.Wr = gaussian_mat(rng, hidden_dim, input_dim) * si;
  g.Wc = gaussian_mat(rng, hidden_dim, input_dim) * si;
  g.Uz = gaussian_mat(rng, hidden_dim, hidden_dim) * sh;
  g.Ur = gaussian_mat(rng, hidden_dim, hidden_dim) * sh;
  g.Uc = gaussian_mat(rng, hidden_dim, hidden_dim) * sh;
  g.bz = Mat::Zero(hidden_dim, 1);
  g.br = Mat::Zero(hidden_dim, 1);
  g.bc = Mat::Zero(hidden_dim, 1);
  return g;
}

inline Mat gru_cell(const GruCellParams& g, const Mat& x, const Mat& h) {
  Mat z = (1.0 / (1.0 + (-(((g.Wz * x + g.Uz * h).colwise() + g.bz.col(0))).array()).exp())).matrix();
  Mat r = (1.0 / (1.0 + (-(((g.Wr * x + g.Ur * h).colwise() + g.br.col(0))).array()).exp())).matrix();
  Mat c = (((g.Wc * x + g.Uc * (r.cwiseProduct(h))).colwise() + g.bc.col(0))).array().tanh();
  return ((1.0 - z.array()) * h.array() + z.array() * c.array()).matrix();
}

// Left-to-right recurrence; outputs[t] is the hidden state after consuming inputs[t].
inline std::vector<Vec> gru_forward(const GruCellParams& g, const std::vector<Vec>& inputs,
                                    const Vec& h0, Vec* h_final = nullptr) {
  require(!inputs.empty(), "gru_forward: empty sequence");
  require(h0.size() == g.hidden_dim, "gru_forward: h0 dimension mismatch");
  std::vector<Vec> outputs;
  Mat h = h0;
  for (const Vec& x : inputs) {
    require(x.size() == g.input_dim, "gru_forward: input dimension mismatch");
    h = gru_cell(g, Mat(x), h);
    outputs.push_back(Vec(h.col(0)));
  }
  if (h_final) *h_final = Vec(h.col(0));
  return outputs;
}

struct GruCellVars {
  Var Wz, Uz, Wr, Ur, Wc, Uc, bz, br, bc;
};

inline GruCellVars lift(Tape& t, const GruCellParams& g, bool requires_grad) {
  GruCellVars v;
  v.Wz = t.leaf(g.Wz, requires_grad);
  v.Uz = t.leaf(g.Uz, requires_grad);
  v.Wr = t.leaf(g.Wr, requires_grad);
  v.Ur = t.leaf(g.Ur, requires_grad);
  v.Wc = t.leaf(g.Wc, requires_grad);
  v.Uc = t.leaf(g.Uc, requires_grad);
  v.bz = t.leaf(g.bz, requires_grad);
  v.br = t.leaf(g.br, requires_grad);
  v.bc = t.leaf(g.bc, requires_grad);
  return v;
}

inline Var gru_cell_apply(Tape& t, const GruCellVars& v, Var x, Var h) {
  Var z = t.sigmoid_(t.add_bias(t.add(t.matmul(v.Wz, x), t.matmul(v.Uz, h)), v.bz));
  Var r = t.sigmoid_(t.add_bias(t.add(t.matmul(v.Wr, x), t.matmul(v.Ur, h)), v.br));
  Var c = t.tanh_(t.add_bias(t.add(t.matmul(v.Wc, x), t.matmul(v.Uc, t.cmul(r, h))), v.bc));
  Var one_minus_z = t.add_const(t.neg(z), 1.0);
  return t.add(t.cmul(one_minus_z, h), t.cmul(z, c));
}

// z = mu + exp(log_sigma) .* noise
inline Vec gaussian_reparam_sample(const Vec& mu, const Vec& log_sigma, const Vec& noise) {
  require(mu.size() == log_sigma.size() && mu.size() == noise.size(),
          "gaussian_reparam_sample: dimension mismatch");
  return mu.array() + log_sigma.array().exp() * noise.array();
}

inline Var gaussian_reparam_op(Tape& t, Var mu, Var log_sigma, Var noise) {
  return t.add(mu, t.cmul(t.exp_(log_sigma), noise));
}

// KL( N(mu_q, diag(exp(2 log_sigma_q))) || N(mu_p, I) )
//   = 0.5 * sum_d ( sigma_d^2 + (mu_q,d - mu_p,d)^2 - 1 - 2 log sigma_d )
inline double kl_diag_gaussian(const Vec& mu_q, const Vec& log_sigma_q, const Vec& mu_p) {
  require(mu_q.size() == log_sigma_q.size() && mu_q.size() == mu_p.size(),
          "kl_diag_gaussian: dimension mismatch");
  Eigen::ArrayXd s2 = (2.0 * log_sigma_q.array()).exp();
  Eigen::ArrayXd d = mu_q.array() - mu_p.array();
  return 0.5 * (s2 + d.square() - 1.0 - 2.0 * log_sigma_q.array()).sum();
}

// Same KL summed over all entries (batch columns included); returns a 1x1 node.
inline Var kl_diag_gaussian_op(Tape& t, Var mu_q, Var log_sigma_q, Var mu_p) {
  Var s2 = t.exp_(t.scale(log_sigma_q, 2.0));
  Var d2 = t.square_(t.sub(mu_q, mu_p));
  Var inner = t.add_const(t.sub(t.add(s2, d2), t.scale(log_sigma_q, 2.0)), -1.0);
  return t.scale(t.sum(inner), 0.5);
}

// Adam over a flat list of parameter blocks.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void register_params(std::vector<Mat*> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (Mat* p : params_) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
    t_ = 0;
  }

  void step(const std::vector<Mat>& grads) {
    require(grads.size() == params_.size(), "Adam::step: gradient count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
      params_[i]->array() -= lr_ * (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + eps_);
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<Mat*> params_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

using NamedParams = std::vector<std::pair<std::string, Mat*>>;

inline NamedParams named_params(MlpParams& p, const std::string& prefix) {
  NamedParams out;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    out.emplace_back(prefix + ".W" + std::to_string(l), &p.weights[l]);
    out.emplace_back(prefix + ".b" + std::to_string(l), &p.biases[l]);
  }
  return out;
}

inline NamedParams named_params(GruCellParams& g, const std::string& prefix) {
  return {
      {prefix + ".Wz", &g.Wz}, {prefix + ".Uz", &g.Uz}, {prefix + ".bz", &g.bz},
      {prefix + ".Wr", &g.Wr}, {prefix + ".Ur", &g.Ur}, {prefix + ".br", &g.br},
      {prefix + ".Wc", &g.Wc}, {prefix + ".Uc", &g.Uc}, {prefix + ".bc", &g.bc},
  };
}

inline std::vector<Mat*> param_ptrs(const NamedParams& np) {
  std::vector<Mat*> out;
  for (auto& [name, ptr] : np) out.push_back(ptr);
  return out;
}

// Collect tape gradients in the same order params were lifted.
inline std::vector<Mat> collect_grads(const Tape& t, const std::vector<Var>& vars) {
  std::vector<Mat> out;
  for (Var v : vars) out.push_back(t.grad(v));
  return out;
}

inline std::vector<Var> flatten(const MlpVars& v) {
  std::vector<Var> out;
  for (std::size_t l = 0; l < v.weights.size(); ++l) {
    out.push_back(v.weights[l]);
    out.push_back(v.biases[l]);
  }
  return out;
}

inline std::vector<Var> flatten(const GruCellVars& v) {
  return {v.Wz, v.Uz, v.bz, v.Wr, v.Ur, v.br, v.Wc, v.Uc, v.bc};
}

}  // namespace obsdef::diff
