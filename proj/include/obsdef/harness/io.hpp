#pragma once

#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>

#include "obsdef/attack/attacks.hpp"
#include "obsdef/data.hpp"
#include "obsdef/policy/bundle.hpp"
#include "obsdef/shield/gru_vae.hpp"

namespace obsdef::harness {

using nlohmann::json;

// CLI exit-code mapping: 2 config error, 3 missing artifact, 4 numeric.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Doubles in datasets and checkpoints are serialized with 9 significant
// digits; parse(fmt9(x)) is the canonical stored value.
std::string fmt9(double v);

// --- dataset files -------------------------------------------------------
// Newline-delimited JSON, one record per step:
//   {traj_id, t, obs:[...], action:[...], reward, done, attacked, attack}
// Adversarial datasets add clean_obs:[...]. Stats live in <path>.stats.json.

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

void save_adv_dataset(const attack::AdversarialDataset& d, const std::string& path);
attack::AdversarialDataset load_adv_dataset(const std::string& path);

// --- checkpoints ---------------------------------------------------------
// Single JSON document: { "meta": {...}, "tensors": { name: {shape, data} } }
// with row-major data.

json tensors_to_json(const diff::NamedParams& np);
void tensors_from_json(const json& j, const diff::NamedParams& np);  // shapes must match

void save_bundle(const policy::PolicyBundle& b, const std::string& path);
policy::PolicyBundle load_bundle(const std::string& path);

void save_vae(const shield::GruVae& m, const std::string& path);
shield::GruVae load_vae(const std::string& path);

json load_json_file(const std::string& path);      // MissingArtifact on absence
void write_text_file(const std::string& path, const std::string& text);

}  // namespace obsdef::harness
