#include "obsdef/harness/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace obsdef::harness {

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

namespace {

json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(json::parse(fmt9(v[i])));
  return a;
}

Vec vec_from_json(const json& a) {
  Vec v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[long(i)] = a[i].get<double>();
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact(path);
  return f;
}

}  // namespace

json load_json_file(const std::string& path) {
  std::ifstream f = open_in(path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  open_out(path) << text;
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f = open_out(path);
  int traj_id = 0;
  for (const auto& tr : d.trajectories) {
    for (const auto& s : tr.steps) {
      json r;
      r["traj_id"] = traj_id;
      r["t"] = s.t;
      r["obs"] = vec_to_json(s.obs);
      r["action"] = vec_to_json(s.action);
      r["reward"] = json::parse(fmt9(s.reward));
      r["done"] = s.done;
      r["attacked"] = s.attacked;
      r["attack"] = s.attacked ? json(s.attack_name) : json(nullptr);
      f << r.dump() << "\n";
    }
    ++traj_id;
  }
  json stats;
  stats["n_traj"] = d.trajectories.size();
  stats["total_steps"] = d.total_steps();
  stats["obs_mean"] = vec_to_json(d.obs_mean);
  stats["obs_std"] = vec_to_json(d.obs_std);
  open_out(path + ".stats.json") << stats.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f = open_in(path);
  Dataset d;
  std::string line;
  int cur_id = -1;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json r = json::parse(line);
    int id = r["traj_id"].get<int>();
    if (id != cur_id) {
      d.trajectories.emplace_back();
      cur_id = id;
    }
    env::TrajStep s;
    s.t = r["t"].get<int>();
    s.obs = vec_from_json(r["obs"]);
    s.obs_presented = s.obs;
    s.obs_used = s.obs;
    s.action = vec_from_json(r["action"]);
    s.reward = r["reward"].get<double>();
    s.done = r["done"].get<bool>();
    s.attacked = r["attacked"].get<bool>();
    if (!r["attack"].is_null()) s.attack_name = r["attack"].get<std::string>();
    d.trajectories.back().undiscounted_return += s.reward;
    d.trajectories.back().steps.push_back(std::move(s));
  }
  std::ifstream sf(path + ".stats.json");
  if (sf) {
    json stats;
    sf >> stats;
    d.obs_mean = vec_from_json(stats["obs_mean"]);
    d.obs_std = vec_from_json(stats["obs_std"]);
  } else {
    d.compute_stats();
  }
  return d;
}

void save_adv_dataset(const attack::AdversarialDataset& d, const std::string& path) {
  std::ofstream f = open_out(path);
  int traj_id = 0;
  for (const auto& seq : d.sequences) {
    for (std::size_t t = 0; t < seq.clean.size(); ++t) {
      json r;
      r["traj_id"] = traj_id;
      r["t"] = int(t);
      r["obs"] = vec_to_json(seq.attacked[t]);
      r["clean_obs"] = vec_to_json(seq.clean[t]);
      r["action"] = json::array();
      r["reward"] = 0.0;
      r["done"] = false;
      r["attacked"] = bool(seq.flags[t]);
      r["attack"] = seq.flags[t] ? json(attack::to_string(seq.kind)) : json(nullptr);
      f << r.dump() << "\n";
    }
    ++traj_id;
  }
}

attack::AdversarialDataset load_adv_dataset(const std::string& path) {
  std::ifstream f = open_in(path);
  attack::AdversarialDataset d;
  std::string line;
  int cur_id = -1;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json r = json::parse(line);
    int id = r["traj_id"].get<int>();
    if (id != cur_id) {
      d.sequences.emplace_back();
      cur_id = id;
    }
    auto& seq = d.sequences.back();
    seq.attacked.push_back(vec_from_json(r["obs"]));
    seq.clean.push_back(vec_from_json(r["clean_obs"]));
    seq.flags.push_back(r["attacked"].get<bool>());
    if (!r["attack"].is_null())
      seq.kind = attack::attack_kind_from_string(r["attack"].get<std::string>());
  }
  return d;
}

json tensors_to_json(const diff::NamedParams& np) {
  json t = json::object();
  for (const auto& [name, mat] : np) {
    json shape = json::array({mat->rows(), mat->cols()});
    json data = json::array();
    for (Eigen::Index r = 0; r < mat->rows(); ++r)
      for (Eigen::Index c = 0; c < mat->cols(); ++c)
        data.push_back(json::parse(fmt9((*mat)(r, c))));
    t[name] = {{"shape", shape}, {"data", data}};
  }
  return t;
}

void tensors_from_json(const json& j, const diff::NamedParams& np) {
  for (const auto& [name, mat] : np) {
    if (!j.contains(name)) throw MissingArtifact("checkpoint lacks tensor " + name);
    const json& tj = j.at(name);
    long rows = tj["shape"][0].get<long>(), cols = tj["shape"][1].get<long>();
    require(rows == mat->rows() && cols == mat->cols(),
            "checkpoint tensor shape mismatch: " + name);
    const json& data = tj["data"];
    require(long(data.size()) == rows * cols, "checkpoint tensor size mismatch: " + name);
    std::size_t k = 0;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) (*mat)(r, c) = data[k++].get<double>();
  }
}

namespace {

// Rebuild an MLP from tensors named <prefix>.W0 / .b0 / .W1 ...
diff::MlpParams mlp_from_tensors(const json& t, const std::string& prefix) {
  diff::MlpParams p;
  for (int l = 0;; ++l) {
    std::string wk = prefix + ".W" + std::to_string(l);
    if (!t.contains(wk)) break;
    const json& wj = t.at(wk);
    const json& bj = t.at(prefix + ".b" + std::to_string(l));
    long r = wj["shape"][0].get<long>(), c = wj["shape"][1].get<long>();
    Mat W(r, c), b(r, 1);
    std::size_t k = 0;
    for (long i = 0; i < r; ++i)
      for (long jx = 0; jx < c; ++jx) W(i, jx) = wj["data"][k++].get<double>();
    for (long i = 0; i < r; ++i) b(i, 0) = bj["data"][std::size_t(i)].get<double>();
    p.weights.push_back(std::move(W));
    p.biases.push_back(std::move(b));
  }
  require(!p.weights.empty(), "checkpoint lacks MLP " + prefix);
  return p;
}

const char* act_name(diff::Activation a) {
  switch (a) {
    case diff::Activation::kRelu: return "relu";
    case diff::Activation::kLinear: return "linear";
    default: return "tanh";
  }
}

diff::Activation act_from_name(const std::string& s) {
  if (s == "relu") return diff::Activation::kRelu;
  if (s == "linear") return diff::Activation::kLinear;
  require(s == "tanh", "checkpoint: unknown activation " + s);
  return diff::Activation::kTanh;
}

}  // namespace

void save_bundle(const policy::PolicyBundle& b, const std::string& path) {
  policy::PolicyBundle copy = b;
  diff::NamedParams np = diff::named_params(copy.policy, "policy");
  if (copy.has_q) {
    for (auto& e : diff::named_params(copy.q1, "q1")) np.push_back(e);
    if (copy.algo == policy::Algo::kTd3)
      for (auto& e : diff::named_params(copy.q2, "q2")) np.push_back(e);
  }
  if (copy.has_v)
    for (auto& e : diff::named_params(copy.v, "v")) np.push_back(e);
  json j;
  j["meta"] = {{"kind", "policy_bundle"},
               {"algo", copy.algo == policy::Algo::kTd3 ? "td3" : "ppo"},
               {"obs_dim", copy.obs_dim},
               {"action_dim", copy.action_dim},
               {"action_low", vec_to_json(copy.action_low)},
               {"action_high", vec_to_json(copy.action_high)},
               {"has_q", copy.has_q},
               {"has_v", copy.has_v},
               {"hidden_act",
                {{"policy", act_name(copy.policy.hidden)},
                 {"q1", act_name(copy.q1.hidden)},
                 {"q2", act_name(copy.q2.hidden)},
                 {"v", act_name(copy.v.hidden)}}}};
  if (copy.algo == policy::Algo::kPpo) j["meta"]["sigma"] = vec_to_json(copy.sigma);
  j["tensors"] = tensors_to_json(np);
  std::ofstream f = open_out(path);
  f << j.dump() << "\n";
}

policy::PolicyBundle load_bundle(const std::string& path) {
  json j = load_json_file(path);
  const json& meta = j.at("meta");
  const json& t = j.at("tensors");
  policy::PolicyBundle b;
  b.algo = meta["algo"].get<std::string>() == "td3" ? policy::Algo::kTd3 : policy::Algo::kPpo;
  b.obs_dim = meta["obs_dim"].get<int>();
  b.action_dim = meta["action_dim"].get<int>();
  b.action_low = vec_from_json(meta["action_low"]);
  b.action_high = vec_from_json(meta["action_high"]);
  b.has_q = meta["has_q"].get<bool>();
  b.has_v = meta["has_v"].get<bool>();
  if (meta.contains("sigma")) b.sigma = vec_from_json(meta["sigma"]);
  b.policy = mlp_from_tensors(t, "policy");
  if (b.has_q) {
    b.q1 = mlp_from_tensors(t, "q1");
    if (b.algo == policy::Algo::kTd3) b.q2 = mlp_from_tensors(t, "q2");
  }
  if (b.has_v) b.v = mlp_from_tensors(t, "v");
  if (meta.contains("hidden_act")) {
    const json& ha = meta["hidden_act"];
    b.policy.hidden = act_from_name(ha["policy"].get<std::string>());
    b.q1.hidden = act_from_name(ha["q1"].get<std::string>());
    b.q2.hidden = act_from_name(ha["q2"].get<std::string>());
    b.v.hidden = act_from_name(ha["v"].get<std::string>());
  }
  b.validate();
  return b;
}

void save_vae(const shield::GruVae& m, const std::string& path) {
  shield::GruVae copy = m;
  json j;
  j["meta"] = {{"kind", "gru_vae"},
               {"obs_dim", copy.obs_dim},
               {"hidden_dim", copy.hidden_dim},
               {"latent_dim", copy.latent_dim}};
  j["tensors"] = tensors_to_json(shield::named_params(copy, "vae"));
  std::ofstream f = open_out(path);
  f << j.dump() << "\n";
}

shield::GruVae load_vae(const std::string& path) {
  json j = load_json_file(path);
  const json& meta = j.at("meta");
  Rng rng(0);
  shield::GruVae m = shield::make_gru_vae(meta["obs_dim"].get<int>(),
                                          meta["hidden_dim"].get<int>(),
                                          meta["latent_dim"].get<int>(), rng);
  tensors_from_json(j.at("tensors"), shield::named_params(m, "vae"));
  return m;
}

}  // namespace obsdef::harness
