#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "protomil/bagio.hpp"
#include "protomil/error.hpp"
#include "protomil/mil.hpp"
#include "protomil/probing.hpp"
#include "protomil/sae.hpp"

namespace protomil::explain {

inline constexpr int kSchemaVersion = 1;

struct ConceptContribution {
  std::size_t id = 0;
  double kappa = 0.0;
  std::optional<std::string> name;
  std::vector<probe::PatchRef> prototypes;

  bool operator==(const ConceptContribution&) const = default;
};

struct AttentionEntry {
  std::size_t instance_index = 0;
  double attention = 0.0;

  bool operator==(const AttentionEntry&) const = default;
};

struct LocalExplanation {
  std::string bag_id;
  std::size_t predicted_class = 0;
  Vector probs;
  Vector logits;
  double bias = 0.0;            // b_c of the predicted class
  Vector contributions;         // full kappa row of the predicted class
  std::vector<AttentionEntry> attention;
  std::vector<ConceptContribution> top_concepts;

  bool operator==(const LocalExplanation&) const = default;
};

// Nonzero entries of `values`, largest first, ties by concept id.
inline std::vector<std::pair<std::size_t, double>> ranked_nonzero(const Vector& values,
                                                                  std::size_t limit) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] != 0.0) out.emplace_back(i, values[i]);
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (out.size() > limit) out.resize(limit);
  return out;
}

inline LocalExplanation explain_local(const data::EmbeddingBag& bag, const sae::SaeParams& sae,
                                      const mil::ProtoMilParams& params,
                                      const mil::InterventionMask& mask,
                                      const probe::ConceptCatalog* catalog, std::size_t top_m) {
  if (top_m == 0) throw Error("explain_local: top_m must be >= 1");
  const auto out = mil::forward(bag, sae, params, mask);
  LocalExplanation e;
  e.bag_id = bag.bag_id;
  e.predicted_class = argmax(out.probs);
  e.probs = out.probs;
  e.logits = out.logits;
  e.bias = params.cls_b[e.predicted_class];
  const auto row = out.contributions.row(e.predicted_class);
  e.contributions.assign(row.begin(), row.end());
  for (std::size_t p = 0; p < out.attention.size(); ++p) e.attention.push_back({p, out.attention[p]});
  for (const auto& [id, kappa] : ranked_nonzero(e.contributions, top_m)) {
    ConceptContribution c;
    c.id = id;
    c.kappa = kappa;
    if (catalog) {
      if (const auto* entry = catalog->find(id)) {
        c.name = entry->name;
        c.prototypes = entry->prototypes;
      }
    }
    e.top_concepts.push_back(std::move(c));
  }
  return e;
}

struct ClassSummary {
  std::size_t class_index = 0;
  Vector mean_over_all;          // mean kappa row over every bag of the split
  Vector mean_over_class_bags;   // mean over bags labelled with this class
  std::size_t class_bag_count = 0;
  std::vector<std::pair<std::size_t, double>> top;  // from mean_over_all

  bool operator==(const ClassSummary&) const = default;
};

struct GlobalExplanation {
  std::string split;
  std::size_t bag_count = 0;
  std::vector<ClassSummary> classes;

  bool operator==(const GlobalExplanation&) const = default;
};

inline GlobalExplanation explain_global(const data::BagDataset& ds, data::Split split,
                                        const sae::SaeParams& sae,
                                        const mil::ProtoMilParams& params,
                                        const mil::InterventionMask& mask, std::size_t top_k) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw Error("split '" + std::string(data::to_string(split)) + "' is empty");
  const std::size_t classes = params.class_count(), d_hid = params.d_hid();
  GlobalExplanation g;
  g.split = std::string(data::to_string(split));
  g.bag_count = idx.size();
  g.classes.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    g.classes[c].class_index = c;
    g.classes[c].mean_over_all.assign(d_hid, 0.0);
    g.classes[c].mean_over_class_bags.assign(d_hid, 0.0);
  }
  for (auto b : idx) {
    const auto out = mil::forward(ds.bags[b], sae, params, mask);
    const std::size_t label = ds.bags[b].label;
    ++g.classes.at(label).class_bag_count;
    for (std::size_t c = 0; c < classes; ++c) {
      axpy(1.0, out.contributions.row(c), g.classes[c].mean_over_all);
      if (c == label) axpy(1.0, out.contributions.row(c), g.classes[c].mean_over_class_bags);
    }
  }
  for (auto& cs : g.classes) {
    for (double& v : cs.mean_over_all) v /= static_cast<double>(idx.size());
    if (cs.class_bag_count > 0)
      for (double& v : cs.mean_over_class_bags) v /= static_cast<double>(cs.class_bag_count);
    cs.top = ranked_nonzero(cs.mean_over_all, top_k);
  }
  return g;
}

inline void to_json(nlohmann::json& j, const LocalExplanation& e) {
  nlohmann::json att = nlohmann::json::array();
  for (const auto& a : e.attention)
    att.push_back({{"instance_index", a.instance_index}, {"attention", a.attention}});
  nlohmann::json top = nlohmann::json::array();
  for (const auto& c : e.top_concepts) {
    top.push_back({{"id", c.id},
                   {"kappa", c.kappa},
                   {"name", c.name ? nlohmann::json(*c.name) : nullptr},
                   {"prototypes", c.prototypes}});
  }
  j = {{"schema", kSchemaVersion},
       {"bag_id", e.bag_id},
       {"predicted_class", e.predicted_class},
       {"probs", e.probs},
       {"logits", e.logits},
       {"bias", e.bias},
       {"contributions", e.contributions},
       {"attention", att},
       {"top_concepts", top}};
}

inline void from_json(const nlohmann::json& j, LocalExplanation& e) {
  if (j.at("schema").get<int>() != kSchemaVersion) throw Error("unsupported explanation schema");
  e.bag_id = j.at("bag_id").get<std::string>();
  e.predicted_class = j.at("predicted_class").get<std::size_t>();
  e.probs = j.at("probs").get<Vector>();
  e.logits = j.at("logits").get<Vector>();
  e.bias = j.at("bias").get<double>();
  e.contributions = j.at("contributions").get<Vector>();
  e.attention.clear();
  for (const auto& a : j.at("attention"))
    e.attention.push_back({a.at("instance_index").get<std::size_t>(), a.at("attention").get<double>()});
  e.top_concepts.clear();
  for (const auto& c : j.at("top_concepts")) {
    ConceptContribution cc;
    cc.id = c.at("id").get<std::size_t>();
    cc.kappa = c.at("kappa").get<double>();
    if (!c.at("name").is_null()) cc.name = c.at("name").get<std::string>();
    cc.prototypes = c.at("prototypes").get<std::vector<probe::PatchRef>>();
    e.top_concepts.push_back(std::move(cc));
  }
}

inline void to_json(nlohmann::json& j, const GlobalExplanation& g) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : g.classes) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [id, v] : c.top) top.push_back({{"id", id}, {"mean_contribution", v}});
    classes.push_back({{"class", c.class_index},
                       {"mean_over_all", c.mean_over_all},
                       {"mean_over_class_bags", c.mean_over_class_bags},
                       {"class_bag_count", c.class_bag_count},
                       {"top_concepts", top}});
  }
  j = {{"schema", kSchemaVersion}, {"split", g.split}, {"bag_count", g.bag_count}, {"classes", classes}};
}

inline void from_json(const nlohmann::json& j, GlobalExplanation& g) {
  if (j.at("schema").get<int>() != kSchemaVersion) throw Error("unsupported explanation schema");
  g.split = j.at("split").get<std::string>();
  g.bag_count = j.at("bag_count").get<std::size_t>();
  g.classes.clear();
  for (const auto& c : j.at("classes")) {
    ClassSummary cs;
    cs.class_index = c.at("class").get<std::size_t>();
    cs.mean_over_all = c.at("mean_over_all").get<Vector>();
    cs.mean_over_class_bags = c.at("mean_over_class_bags").get<Vector>();
    cs.class_bag_count = c.at("class_bag_count").get<std::size_t>();
    for (const auto& t : c.at("top_concepts"))
      cs.top.emplace_back(t.at("id").get<std::size_t>(), t.at("mean_contribution").get<double>());
    g.classes.push_back(std::move(cs));
  }
}

}  // namespace protomil::explain
