#pragma once

// Flat JSON run configuration shared by every pipeline stage.
//
//   synthetic data   d_in n_concepts concepts_per_instance noise_sigma n_train n_val
//                    n_test n_min n_max tumor_concepts spurious_concept rho_train rho_test
//                    tumor_fraction_min tumor_fraction_max
//   SAE              lambda d_hid sae_lr sae_epochs sae_batch_size renormalize_decoder
//   probing          n_per_class k
//   ProtoMIL         mil_lr mil_epochs attention_dim
//   all stages       seed

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "protomil/bagio.hpp"
#include "protomil/error.hpp"
#include "protomil/mil.hpp"
#include "protomil/sae.hpp"

namespace protomil {

struct RunConfig {
  data::SynthConfig synth;
  sae::SaeTrainConfig sae;
  mil::MilTrainConfig mil;
  std::size_t n_per_class = 10000;
  std::size_t k = 10;
  std::uint64_t seed = 0;

  void set_seed(std::uint64_t s) {
    seed = s;
    synth.seed = s;
    sae.seed = s;
    mil.seed = s;
  }

  void validate() const {
    synth.validate();
    sae.validate();
    mil.validate();
    if (n_per_class < 1) throw Error("config: n_per_class must be >= 1");
    if (k < 1) throw Error("config: k must be >= 1");
  }
};

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys{
      "d_in", "n_concepts", "concepts_per_instance", "noise_sigma", "n_train", "n_val", "n_test",
      "n_min", "n_max", "tumor_concepts", "spurious_concept", "rho_train", "rho_test",
      "tumor_fraction_min", "tumor_fraction_max", "lambda", "d_hid", "sae_lr", "sae_epochs",
      "sae_batch_size", "renormalize_decoder", "n_per_class", "k", "mil_lr", "mil_epochs",
      "attention_dim", "seed"};
  return keys;
}

// Overwrites the fields named in `j`; unknown keys are rejected.
inline void merge_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!config_keys().count(key)) throw Error("unknown config key '" + key + "'");
  }
  try {
    data::merge_json(j, c.synth);
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("lambda", c.sae.lambda);
    take("d_hid", c.sae.d_hid);
    take("sae_lr", c.sae.lr);
    take("sae_epochs", c.sae.epochs);
    take("sae_batch_size", c.sae.batch_size);
    take("renormalize_decoder", c.sae.renormalize_decoder);
    take("n_per_class", c.n_per_class);
    take("k", c.k);
    take("mil_lr", c.mil.lr);
    take("mil_epochs", c.mil.epochs);
    take("attention_dim", c.mil.attention_dim);
    if (j.contains("seed")) c.set_seed(j.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad config value: ") + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig c;
  merge_json(data::read_json(path), c);
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = c.synth;
  j["lambda"] = c.sae.lambda;
  j["d_hid"] = c.sae.d_hid;
  j["sae_lr"] = c.sae.lr;
  j["sae_epochs"] = c.sae.epochs;
  j["sae_batch_size"] = c.sae.batch_size;
  j["renormalize_decoder"] = c.sae.renormalize_decoder;
  j["n_per_class"] = c.n_per_class;
  j["k"] = c.k;
  j["mil_lr"] = c.mil.lr;
  j["mil_epochs"] = c.mil.epochs;
  j["attention_dim"] = c.mil.attention_dim;
  j["seed"] = c.seed;
  return j;
}

}  // namespace protomil
