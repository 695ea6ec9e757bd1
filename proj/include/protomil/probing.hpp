#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "protomil/bagio.hpp"
#include "protomil/error.hpp"
#include "protomil/numerics.hpp"
#include "protomil/sae.hpp"

namespace protomil::probe {

struct ProbeInstance {
  std::string bag_id;
  std::size_t instance_index = 0;
  std::size_t label = 0;
  Vector embedding;

  bool operator==(const ProbeInstance&) const = default;
};

using ProbeSet = std::vector<ProbeInstance>;

// Uniformly samples up to `n_per_class` train-split instances per class;
// instances inherit their bag's label. Output is grouped by class and sorted
// by (bag_id, instance_index) within each class.
inline ProbeSet build_probe_set(const data::BagDataset& ds, std::size_t n_per_class,
                                std::uint64_t seed) {
  Rng rng(seed);
  ProbeSet out;
  const auto train = ds.indices(data::Split::train);
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    std::vector<std::pair<std::size_t, std::size_t>> pool;  // (bag, instance)
    for (auto b : train) {
      if (ds.bags[b].label != c) continue;
      for (std::size_t p = 0; p < ds.bags[b].instances.rows(); ++p) pool.emplace_back(b, p);
    }
    if (pool.empty()) {
      throw Error("class " + std::to_string(c) + " is absent from the train split");
    }
    const std::size_t take = std::min(n_per_class, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(take);
    std::sort(pool.begin(), pool.end(), [&](const auto& a, const auto& b) {
      const auto& ia = ds.bags[a.first].bag_id;
      const auto& ib = ds.bags[b.first].bag_id;
      return ia != ib ? ia < ib : a.second < b.second;
    });
    for (const auto& [b, p] : pool) {
      const auto row = ds.bags[b].instances.row(p);
      out.push_back({ds.bags[b].bag_id, p, c, Vector(row.begin(), row.end())});
    }
  }
  return out;
}

// Concept activations of every probe instance, one row each.
inline Matrix probe_activations(const ProbeSet& probe, const sae::SaeParams& sae) {
  Matrix h(probe.size(), sae.d_hid());
  for (std::size_t r = 0; r < probe.size(); ++r) {
    const auto a = sae::encode(probe[r].embedding, sae);
    std::copy(a.begin(), a.end(), h.row(r).begin());
  }
  return h;
}

// Concepts with at least one positive activation over the probe set.
inline std::vector<std::size_t> activated_concepts(const Matrix& activations) {
  std::vector<bool> on(activations.cols(), false);
  for (std::size_t r = 0; r < activations.rows(); ++r) {
    const auto row = activations.row(r);
    for (std::size_t i = 0; i < row.size(); ++i)
      if (row[i] > 0.0) on[i] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < on.size(); ++i)
    if (on[i]) out.push_back(i);
  return out;
}

inline std::vector<std::size_t> activated_concepts(const ProbeSet& probe,
                                                   const sae::SaeParams& sae) {
  if (probe.empty()) throw Error("activated_concepts: empty probe set");
  return activated_concepts(probe_activations(probe, sae));
}

struct PatchRef {
  std::string bag_id;
  std::size_t instance_index = 0;
  double activation = 0.0;

  bool operator==(const PatchRef&) const = default;
};

// Descending activation; ties by bag_id, then instance index.
inline bool prototype_order(const PatchRef& a, const PatchRef& b) {
  if (a.activation != b.activation) return a.activation > b.activation;
  if (a.bag_id != b.bag_id) return a.bag_id < b.bag_id;
  return a.instance_index < b.instance_index;
}

inline std::vector<PatchRef> top_k_prototypes(const ProbeSet& probe, const Matrix& activations,
                                              std::size_t concept_index, std::size_t k) {
  if (concept_index >= activations.cols()) {
    throw Error("concept index " + std::to_string(concept_index) + " out of range");
  }
  if (k == 0) throw Error("top_k_prototypes: k must be >= 1");
  std::vector<PatchRef> refs;
  for (std::size_t r = 0; r < probe.size(); ++r) {
    const double a = activations(r, concept_index);
    if (a > 0.0) refs.push_back({probe[r].bag_id, probe[r].instance_index, a});
  }
  const std::size_t keep = std::min(k, refs.size());
  std::partial_sort(refs.begin(), refs.begin() + static_cast<std::ptrdiff_t>(keep), refs.end(),
                    prototype_order);
  refs.resize(keep);
  return refs;
}

inline std::vector<PatchRef> top_k_prototypes(const ProbeSet& probe, const sae::SaeParams& sae,
                                              std::size_t concept_index, std::size_t k) {
  return top_k_prototypes(probe, probe_activations(probe, sae), concept_index, k);
}

struct CatalogEntry {
  std::size_t id = 0;
  std::optional<std::string> name;
  bool flagged_spurious = false;
  std::vector<PatchRef> prototypes;

  bool operator==(const CatalogEntry&) const = default;
};

struct ConceptCatalog {
  std::size_t k = 10;
  std::vector<CatalogEntry> concepts;  // ascending id

  const CatalogEntry* find(std::size_t id) const {
    for (const auto& e : concepts)
      if (e.id == id) return &e;
    return nullptr;
  }

  std::vector<std::size_t> flagged() const {
    std::vector<std::size_t> out;
    for (const auto& e : concepts)
      if (e.flagged_spurious) out.push_back(e.id);
    return out;
  }

  bool operator==(const ConceptCatalog&) const = default;
};

inline ConceptCatalog build_catalog(const ProbeSet& probe, const sae::SaeParams& sae,
                                    std::size_t k) {
  if (k == 0) throw Error("build_catalog: k must be >= 1");
  ConceptCatalog cat;
  cat.k = k;
  if (probe.empty()) return cat;
  const auto acts = probe_activations(probe, sae);
  for (auto id : activated_concepts(acts)) {
    cat.concepts.push_back({id, std::nullopt, false, top_k_prototypes(probe, acts, id, k)});
  }
  return cat;
}

// Marks `ids` as spurious. Unknown ids are rejected with the list of valid ones.
inline void flag_concepts(ConceptCatalog& cat, const std::vector<std::size_t>& ids) {
  for (auto id : ids) {
    if (!cat.find(id)) {
      std::string valid;
      for (const auto& e : cat.concepts) valid += (valid.empty() ? "" : ", ") + std::to_string(e.id);
      throw Error("unknown concept id " + std::to_string(id) + "; valid ids: [" + valid + "]");
    }
  }
  for (auto& e : cat.concepts)
    if (std::find(ids.begin(), ids.end(), e.id) != ids.end()) e.flagged_spurious = true;
}

inline void to_json(nlohmann::json& j, const PatchRef& r) {
  j = {{"bag_id", r.bag_id}, {"instance_index", r.instance_index}, {"activation", r.activation}};
}

inline void from_json(const nlohmann::json& j, PatchRef& r) {
  r.bag_id = j.at("bag_id").get<std::string>();
  r.instance_index = j.at("instance_index").get<std::size_t>();
  r.activation = j.at("activation").get<double>();
}

inline void to_json(nlohmann::json& j, const ConceptCatalog& cat) {
  j = {{"k", cat.k}, {"concepts", nlohmann::json::array()}};
  for (const auto& e : cat.concepts) {
    j["concepts"].push_back({{"id", e.id},
                             {"name", e.name ? nlohmann::json(*e.name) : nullptr},
                             {"flagged_spurious", e.flagged_spurious},
                             {"prototypes", e.prototypes}});
  }
}

inline void from_json(const nlohmann::json& j, ConceptCatalog& cat) {
  cat.k = j.at("k").get<std::size_t>();
  cat.concepts.clear();
  for (const auto& c : j.at("concepts")) {
    CatalogEntry e;
    e.id = c.at("id").get<std::size_t>();
    if (c.contains("name") && !c.at("name").is_null()) e.name = c.at("name").get<std::string>();
    e.flagged_spurious = c.value("flagged_spurious", false);
    e.prototypes = c.at("prototypes").get<std::vector<PatchRef>>();
    cat.concepts.push_back(std::move(e));
  }
}

inline void save_catalog(const std::filesystem::path& path, const ConceptCatalog& cat) {
  data::write_json(path, nlohmann::json(cat));
}

inline ConceptCatalog load_catalog(const std::filesystem::path& path) {
  const auto j = data::read_json(path);
  try {
    return j.get<ConceptCatalog>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed catalog: " + e.what());
  }
}

}  // namespace protomil::probe
