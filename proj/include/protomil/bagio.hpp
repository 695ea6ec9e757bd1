#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "protomil/binio.hpp"
#include "protomil/error.hpp"
#include "protomil/numerics.hpp"

namespace protomil::data {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kBagFormatVersion = 1;

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

// One slide analogue: N instance embeddings plus a slide-level label.
struct EmbeddingBag {
  std::string bag_id;
  std::size_t label = 0;
  Matrix instances;  // N x d_in

  bool operator==(const EmbeddingBag&) const = default;
};

struct BagDataset {
  std::size_t d_in = 0;
  std::size_t class_count = 2;
  std::vector<EmbeddingBag> bags;
  std::vector<Split> splits;  // parallel to bags

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  const EmbeddingBag* find(std::string_view bag_id) const {
    for (const auto& b : bags)
      if (b.bag_id == bag_id) return &b;
    return nullptr;
  }

  bool operator==(const BagDataset&) const = default;
};

// ---------------------------------------------------------------------------
// PMB1 bag files

inline std::vector<char> encode_bag(const EmbeddingBag& bag) {
  binio::Writer w;
  w.magic("PMB1");
  w.u32(kBagFormatVersion);
  w.u32(static_cast<std::uint32_t>(bag.instances.cols()));
  w.u32(static_cast<std::uint32_t>(bag.instances.rows()));
  w.u32(static_cast<std::uint32_t>(bag.bag_id.size()));
  w.raw(bag.bag_id);
  for (double v : bag.instances.data()) w.f32(static_cast<float>(v));
  return w.bytes();
}

inline void write_bag(const fs::path& path, const EmbeddingBag& bag) {
  binio::write_file(path, encode_bag(bag));
}

// The label lives in the manifest, so a bag read from disk carries label 0
// until the manifest assigns one.
inline EmbeddingBag read_bag(const fs::path& path) {
  if (!fs::exists(path)) throw Error("missing bag file " + path.string());
  auto r = binio::Reader::open(path);
  if (!r.expect_magic("PMB1")) throw Error(path.string() + ": not a PMB1 file");
  const auto version = r.u32();
  if (version != kBagFormatVersion) {
    throw Error(path.string() + ": unsupported PMB1 version " + std::to_string(version));
  }
  const std::size_t d_in = r.u32();
  const std::size_t n = r.u32();
  const std::size_t id_len = r.u32();
  EmbeddingBag bag;
  bag.bag_id = r.raw(id_len);
  if (n == 0) throw Error(path.string() + ": bag has no instances");
  if (d_in == 0) throw Error(path.string() + ": zero embedding dimension");
  if (r.remaining() != n * d_in * 4) throw Error(path.string() + ": payload size mismatch");
  bag.instances = Matrix(n, d_in);
  for (double& v : bag.instances.data()) {
    v = r.f32();
    if (!std::isfinite(v)) throw Error(path.string() + ": non-finite embedding value");
  }
  return bag;
}

inline std::string bag_filename(std::string_view bag_id) {
  std::string name;
  for (char c : bag_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_' || c == '-' || c == '.';
    name.push_back(ok ? c : '_');
  }
  return name + ".pmb";
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": invalid JSON: " + e.what());
  }
}

// Writes bags/<id>.pmb for every bag plus manifest.json.
inline void save_dataset(const fs::path& dir, const BagDataset& ds) {
  fs::create_directories(dir / "bags");
  nlohmann::json manifest;
  manifest["d_in"] = ds.d_in;
  manifest["class_count"] = ds.class_count;
  manifest["bags"] = nlohmann::json::array();
  std::set<std::string> used;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    const auto& bag = ds.bags[i];
    std::string file = "bags/" + bag_filename(bag.bag_id);
    if (!used.insert(file).second) {
      file = "bags/" + std::to_string(i) + "_" + bag_filename(bag.bag_id);
      used.insert(file);
    }
    write_bag(dir / file, bag);
    manifest["bags"].push_back({{"file", file},
                                {"bag_id", bag.bag_id},
                                {"label", bag.label},
                                {"split", std::string(to_string(ds.splits[i]))}});
  }
  write_json(dir / "manifest.json", manifest);
}

inline BagDataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw Error("missing manifest " + manifest_path.string());
  const auto manifest = read_json(manifest_path);
  BagDataset ds;
  try {
    ds.d_in = manifest.at("d_in").get<std::size_t>();
    ds.class_count = manifest.at("class_count").get<std::size_t>();
    const auto& entries = manifest.at("bags");
    if (!entries.is_array() || entries.empty()) throw Error("empty dataset");
    if (ds.class_count < 2) throw Error("class_count must be at least 2");
    for (const auto& e : entries) {
      const auto file = dir / e.at("file").get<std::string>();
      auto bag = read_bag(file);
      const auto id = e.at("bag_id").get<std::string>();
      if (bag.bag_id != id) {
        throw Error(file.string() + ": bag id '" + bag.bag_id + "' does not match manifest '" +
                    id + "'");
      }
      if (bag.instances.cols() != ds.d_in) {
        throw Error("inconsistent embedding dimension: " + file.string() + " has " +
                    std::to_string(bag.instances.cols()) + ", manifest says " +
                    std::to_string(ds.d_in));
      }
      const auto label = e.at("label").get<long long>();
      if (label < 0 || static_cast<std::size_t>(label) >= ds.class_count) {
        throw Error("label out of range for bag '" + id + "': " + std::to_string(label));
      }
      bag.label = static_cast<std::size_t>(label);
      ds.splits.push_back(parse_split(e.at("split").get<std::string>()));
      ds.bags.push_back(std::move(bag));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  return ds;
}

// All instance rows of the bags in one split, stacked.
inline Matrix pool_instances(const BagDataset& ds, Split split) {
  std::size_t total = 0;
  for (auto i : ds.indices(split)) total += ds.bags[i].instances.rows();
  Matrix out(total, ds.d_in);
  std::size_t r = 0;
  for (auto i : ds.indices(split)) {
    const auto& m = ds.bags[i].instances;
    std::copy(m.data().begin(), m.data().end(), out.data().begin() + r * ds.d_in);
    r += m.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark with planted concepts

struct SynthConfig {
  std::size_t d_in = 64;
  std::size_t n_concepts = 12;
  std::size_t concepts_per_instance = 2;
  double noise_sigma = 0.05;
  std::size_t n_train = 200;
  std::size_t n_val = 50;
  std::size_t n_test = 100;
  std::size_t n_min = 16;
  std::size_t n_max = 64;
  std::vector<std::size_t> tumor_concepts{0, 1};
  std::optional<std::size_t> spurious_concept = 11;
  double rho_train = 0.95;  // also used for the validation split
  double rho_test = 0.0;
  // fraction of a positive bag's instances that carry a tumor concept, rounded
  // and at least 1
  double tumor_fraction_min = 0.04;
  double tumor_fraction_max = 0.2;
  std::uint64_t seed = 0;

  std::vector<std::size_t> background_concepts() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < n_concepts; ++k) {
      const bool tumor =
          std::find(tumor_concepts.begin(), tumor_concepts.end(), k) != tumor_concepts.end();
      if (!tumor && spurious_concept != k) out.push_back(k);
    }
    return out;
  }

  void validate() const {
    if (d_in == 0) throw Error("synth config: d_in must be positive");
    if (n_concepts == 0 || n_concepts > d_in) throw Error("synth config: need 1 <= K <= d_in");
    if (concepts_per_instance == 0 || concepts_per_instance > n_concepts) {
      throw Error("infeasible config: concepts_per_instance must be in [1, K]");
    }
    if (!(noise_sigma >= 0.0)) throw Error("synth config: noise sigma must be >= 0");
    for (double rho : {rho_train, rho_test}) {
      if (!(rho >= 0.0 && rho <= 1.0)) throw Error("synth config: rho must lie in [0, 1]");
    }
    if (n_min == 0 || n_min > n_max) throw Error("synth config: need 1 <= n_min <= n_max");
    if (tumor_concepts.empty()) throw Error("synth config: at least one tumor concept required");
    std::set<std::size_t> seen;
    for (auto k : tumor_concepts) {
      if (k >= n_concepts) throw Error("synth config: tumor concept index out of range");
      if (!seen.insert(k).second) throw Error("synth config: duplicate tumor concept");
    }
    if (spurious_concept) {
      if (*spurious_concept >= n_concepts) {
        throw Error("synth config: spurious concept index out of range");
      }
      if (seen.count(*spurious_concept)) {
        throw Error("synth config: spurious concept must differ from tumor concepts");
      }
    }
    if (concepts_per_instance > background_concepts().size()) {
      throw Error("infeasible config: concepts_per_instance exceeds the background concept count");
    }
    if (!(tumor_fraction_min > 0.0 && tumor_fraction_min <= tumor_fraction_max &&
          tumor_fraction_max <= 1.0)) {
      throw Error("synth config: need 0 < tumor_fraction_min <= tumor_fraction_max <= 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"d_in", c.d_in},
       {"n_concepts", c.n_concepts},
       {"concepts_per_instance", c.concepts_per_instance},
       {"noise_sigma", c.noise_sigma},
       {"n_train", c.n_train},
       {"n_val", c.n_val},
       {"n_test", c.n_test},
       {"n_min", c.n_min},
       {"n_max", c.n_max},
       {"tumor_concepts", c.tumor_concepts},
       {"spurious_concept", c.spurious_concept ? nlohmann::json(*c.spurious_concept) : nullptr},
       {"rho_train", c.rho_train},
       {"rho_test", c.rho_test},
       {"tumor_fraction_min", c.tumor_fraction_min},
       {"tumor_fraction_max", c.tumor_fraction_max},
       {"seed", c.seed}};
}

// Reads whichever keys are present; missing keys keep their current value.
inline void merge_json(const nlohmann::json& j, SynthConfig& c) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  take("d_in", c.d_in);
  take("n_concepts", c.n_concepts);
  take("concepts_per_instance", c.concepts_per_instance);
  take("noise_sigma", c.noise_sigma);
  take("n_train", c.n_train);
  take("n_val", c.n_val);
  take("n_test", c.n_test);
  take("n_min", c.n_min);
  take("n_max", c.n_max);
  take("tumor_concepts", c.tumor_concepts);
  if (j.contains("spurious_concept")) {
    const auto& s = j.at("spurious_concept");
    c.spurious_concept =
        s.is_null() ? std::nullopt : std::optional<std::size_t>(s.get<std::size_t>());
  }
  take("rho_train", c.rho_train);
  take("rho_test", c.rho_test);
  take("tumor_fraction_min", c.tumor_fraction_min);
  take("tumor_fraction_max", c.tumor_fraction_max);
  take("seed", c.seed);
}

// Generator bookkeeping: which planted concepts built each instance.
struct GroundTruth {
  Matrix directions;  // K x d_in, orthonormal rows
  std::vector<std::size_t> tumor_concepts;
  std::optional<std::size_t> spurious_concept;
  struct BagTruth {
    std::string bag_id;
    std::vector<std::vector<std::size_t>> instance_concepts;
    bool has_spurious = false;
    bool operator==(const BagTruth&) const = default;
  };
  std::vector<BagTruth> bags;  // parallel to dataset bags

  bool operator==(const GroundTruth&) const = default;
};

struct SyntheticData {
  BagDataset dataset;
  GroundTruth truth;
};

// Modified Gram-Schmidt, applied twice for orthogonality at round-off level.
inline void orthonormalize_rows(Matrix& m) {
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      auto ri = m.row(i);
      for (std::size_t j = 0; j < i; ++j) {
        const auto rj = m.row(j);
        axpy(-dot(ri, rj), rj, ri);
      }
      const double norm = std::sqrt(dot(ri, ri));
      if (!(norm > 1e-12)) throw Error("orthonormalize: degenerate direction");
      for (double& v : ri) v /= norm;
    }
  }
}

inline std::string padded_id(std::string_view prefix, std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
  return std::string(prefix) + "_" + digits;
}

inline SyntheticData gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  SyntheticData out;
  auto& ds = out.dataset;
  auto& truth = out.truth;
  ds.d_in = cfg.d_in;
  ds.class_count = 2;

  truth.directions = Matrix(cfg.n_concepts, cfg.d_in);
  for (double& v : truth.directions.data()) v = rng.normal();
  orthonormalize_rows(truth.directions);
  truth.tumor_concepts = cfg.tumor_concepts;
  truth.spurious_concept = cfg.spurious_concept;

  const auto background = cfg.background_concepts();
  const std::size_t s = cfg.concepts_per_instance;

  enum class Kind { background, tumor, spurious };

  auto sample_background = [&](std::size_t count, std::vector<std::size_t>& into) {
    std::vector<std::size_t> pool = background;
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
      into.push_back(pool[i]);
    }
  };

  const std::pair<Split, std::size_t> plan[] = {
      {Split::train, cfg.n_train}, {Split::val, cfg.n_val}, {Split::test, cfg.n_test}};
  for (const auto& [split, count] : plan) {
    const double rho = split == Split::test ? cfg.rho_test : cfg.rho_train;
    for (std::size_t b = 0; b < count; ++b) {
      const std::size_t label = b % 2;
      const std::size_t n =
          cfg.n_min + static_cast<std::size_t>(rng.below(cfg.n_max - cfg.n_min + 1));
      std::vector<Kind> kinds(n, Kind::background);
      bool spurious = false;
      if (label == 1) {
        const double frac = rng.uniform(cfg.tumor_fraction_min, cfg.tumor_fraction_max);
        const auto t = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(frac * static_cast<double>(n))), 1, n);
        std::fill(kinds.begin(), kinds.begin() + static_cast<std::ptrdiff_t>(t), Kind::tumor);
        if (cfg.spurious_concept && rng.uniform() < rho) {
          spurious = true;
          if (t < n) {
            kinds[t] = Kind::spurious;
          } else if (t > 1) {
            kinds[t - 1] = Kind::spurious;
          } else {
            kinds.push_back(Kind::spurious);
          }
        }
        rng.shuffle(kinds);
      }

      EmbeddingBag bag;
      bag.bag_id = padded_id(to_string(split), b);
      bag.label = label;
      bag.instances = Matrix(kinds.size(), cfg.d_in);
      GroundTruth::BagTruth bt;
      bt.bag_id = bag.bag_id;
      bt.has_spurious = spurious;
      for (std::size_t p = 0; p < kinds.size(); ++p) {
        std::vector<std::size_t> concepts;
        switch (kinds[p]) {
          case Kind::tumor:
            concepts.push_back(cfg.tumor_concepts[rng.below(cfg.tumor_concepts.size())]);
            sample_background(s - 1, concepts);
            break;
          case Kind::spurious:
            concepts.push_back(*cfg.spurious_concept);
            break;
          case Kind::background:
            sample_background(s, concepts);
            break;
        }
        auto row = bag.instances.row(p);
        for (auto k : concepts) axpy(rng.uniform(0.5, 1.5), truth.directions.row(k), row);
        for (double& v : row) {
          v += cfg.noise_sigma * rng.normal();
          v = static_cast<double>(static_cast<float>(v));  // files store 32-bit
        }
        bt.instance_concepts.push_back(std::move(concepts));
      }
      ds.bags.push_back(std::move(bag));
      ds.splits.push_back(split);
      truth.bags.push_back(std::move(bt));
    }
  }
  return out;
}

inline nlohmann::json truth_to_json(const GroundTruth& t) {
  nlohmann::json j;
  j["schema"] = 1;
  j["directions"] = nlohmann::json::array();
  for (std::size_t k = 0; k < t.directions.rows(); ++k) {
    const auto r = t.directions.row(k);
    j["directions"].push_back(std::vector<double>(r.begin(), r.end()));
  }
  j["tumor_concepts"] = t.tumor_concepts;
  j["spurious_concept"] = t.spurious_concept ? nlohmann::json(*t.spurious_concept) : nullptr;
  j["bags"] = nlohmann::json::array();
  for (const auto& b : t.bags) {
    j["bags"].push_back({{"bag_id", b.bag_id},
                         {"has_spurious", b.has_spurious},
                         {"instance_concepts", b.instance_concepts}});
  }
  return j;
}

inline GroundTruth truth_from_json(const nlohmann::json& j) {
  GroundTruth t;
  const auto& dirs = j.at("directions");
  const std::size_t k = dirs.size();
  const std::size_t d = k ? dirs.at(0).size() : 0;
  t.directions = Matrix(k, d);
  for (std::size_t r = 0; r < k; ++r) {
    const auto row = dirs.at(r).get<std::vector<double>>();
    if (row.size() != d) throw Error("truth.json: ragged direction matrix");
    std::copy(row.begin(), row.end(), t.directions.row(r).begin());
  }
  t.tumor_concepts = j.at("tumor_concepts").get<std::vector<std::size_t>>();
  if (!j.at("spurious_concept").is_null()) {
    t.spurious_concept = j.at("spurious_concept").get<std::size_t>();
  }
  for (const auto& b : j.at("bags")) {
    GroundTruth::BagTruth bt;
    bt.bag_id = b.at("bag_id").get<std::string>();
    bt.has_spurious = b.at("has_spurious").get<bool>();
    bt.instance_concepts = b.at("instance_concepts").get<std::vector<std::vector<std::size_t>>>();
    t.bags.push_back(std::move(bt));
  }
  return t;
}

}  // namespace protomil::data
