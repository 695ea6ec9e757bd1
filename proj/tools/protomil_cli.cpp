// protomil: command-line driver for the concept-based MIL pipeline.
//
//   synth -> train-sae -> probe -> (edit catalog, flag) -> train-mil -> eval / explain

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protomil/bagio.hpp"
#include "protomil/config.hpp"
#include "protomil/explain.hpp"
#include "protomil/metrics.hpp"
#include "protomil/mil.hpp"
#include "protomil/probing.hpp"
#include "protomil/sae.hpp"

namespace fs = std::filesystem;
using namespace protomil;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_config(c.config);
  if (c.seed) cfg.set_seed(*c.seed);
  return cfg;
}

void add_common(CLI::App* app, Common& c, const std::string& out_help) {
  app->add_option("--config", c.config, "flat JSON config; flags override its values");
  app->add_option("--seed", c.seed, "seed for every random choice of this stage");
  app->add_option("--out", c.out, out_help)->required();
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw Error("missing file " + path);
}

mil::InterventionMask resolve_mask(const std::string& path, std::size_t d_hid) {
  if (path.empty()) return {};
  require_file(path);
  return mil::load_mask(path, d_hid);
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error("output failed validation: " + what);
}

int cmd_synth(const Common& c) {
  const auto cfg = resolve_config(c);
  const auto syn = data::gen_synthetic(cfg.synth);
  data::save_dataset(c.out, syn.dataset);
  data::write_json(fs::path(c.out) / "truth.json", data::truth_to_json(syn.truth));
  check(data::load_dataset(c.out) == syn.dataset, "dataset reload");
  check(data::truth_from_json(data::read_json(fs::path(c.out) / "truth.json")) == syn.truth,
        "truth.json reload");
  std::printf("wrote %zu bags to %s\n", syn.dataset.bags.size(), c.out.c_str());
  return 0;
}

int cmd_train_sae(const Common& c, const std::string& data_dir) {
  const auto cfg = resolve_config(c);
  cfg.sae.validate();
  const auto ds = data::load_dataset(data_dir);
  const auto pool = data::pool_instances(ds, data::Split::train);
  const auto res = sae::train(pool, cfg.sae);
  ensure_parent(c.out);
  sae::save(c.out, res.params);
  check(sae::load(c.out) == res.params, "SAE model reload");
  const auto stats = sae::sparsity_stats(pool, res.params);
  std::printf("trained SAE %zu -> %zu on %zu instances; final loss %.6g, mean L0 %.2f, %zu active units\n",
              res.params.d_in(), res.params.d_hid(), pool.rows(), res.history.back(), stats.mean_l0,
              stats.activated);
  return 0;
}

void dump_vectors(const std::string& path, const data::BagDataset& ds, const probe::ConceptCatalog& cat) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : cat.concepts) {
    nlohmann::json protos = nlohmann::json::array();
    for (const auto& ref : e.prototypes) {
      const auto* bag = ds.find(ref.bag_id);
      const auto row = bag->instances.row(ref.instance_index);
      protos.push_back({{"bag_id", ref.bag_id},
                        {"instance_index", ref.instance_index},
                        {"embedding", std::vector<double>(row.begin(), row.end())}});
    }
    out.push_back({{"id", e.id}, {"prototypes", protos}});
  }
  ensure_parent(path);
  data::write_json(path, out);
}

int cmd_probe(const Common& c, const std::string& data_dir, const std::string& sae_path,
              const std::string& vectors_path) {
  auto cfg = resolve_config(c);
  const auto ds = data::load_dataset(data_dir);
  require_file(sae_path);
  const auto sae = sae::load(sae_path);
  const auto probe = probe::build_probe_set(ds, cfg.n_per_class, cfg.seed);
  const auto cat = probe::build_catalog(probe, sae, cfg.k);
  ensure_parent(c.out);
  probe::save_catalog(c.out, cat);
  check(probe::load_catalog(c.out) == cat, "catalog reload");
  if (!vectors_path.empty()) dump_vectors(vectors_path, ds, cat);
  std::printf("probe set of %zu instances; %zu activated concepts of %zu\n", probe.size(),
              cat.concepts.size(), sae.d_hid());
  return 0;
}

int cmd_flag(const std::string& catalog_path, const std::vector<std::size_t>& ids,
             const std::string& mask_path, std::size_t d_hid) {
  require_file(catalog_path);
  auto cat = probe::load_catalog(catalog_path);
  probe::flag_concepts(cat, ids);
  probe::save_catalog(catalog_path, cat);
  // catalog ids come from the SAE, so the largest id bounds d_hid when it is not given
  std::size_t bound = d_hid;
  if (bound == 0)
    for (const auto& e : cat.concepts) bound = std::max(bound, e.id + 1);
  const mil::InterventionMask mask(cat.flagged(), bound);
  ensure_parent(mask_path);
  mil::save_mask(mask_path, mask);
  check(probe::load_catalog(catalog_path) == cat, "catalog reload");
  check(mil::load_mask(mask_path, bound) == mask, "mask reload");
  std::printf("%zu flagged concepts written to %s\n", mask.indices().size(), mask_path.c_str());
  return 0;
}

int cmd_train_mil(const Common& c, const std::string& data_dir, const std::string& sae_path,
                  const std::string& mask_path, const std::string& history_path) {
  const auto cfg = resolve_config(c);
  cfg.mil.validate();
  const auto ds = data::load_dataset(data_dir);
  require_file(sae_path);
  const auto sae = sae::load(sae_path);
  const auto mask = resolve_mask(mask_path, sae.d_hid());
  const auto res = mil::train(ds, sae, cfg.mil, mask);
  ensure_parent(c.out);
  mil::save(c.out, res.params);
  check(mil::load(c.out) == res.params, "ProtoMIL model reload");
  if (!history_path.empty()) {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& r : res.history)
      h.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_auc", r.val_auc}, {"val_accuracy", r.val_accuracy},
                   {"val_loss", r.val_loss}});
    ensure_parent(history_path);
    data::write_json(history_path, {{"best_epoch", res.best_epoch}, {"epochs", h}});
  }
  std::printf("selected epoch %zu of %zu, validation AUC %.4f\n", res.best_epoch, res.history.size(),
              res.best_val_auc);
  return 0;
}

struct ModelInputs {
  data::BagDataset ds;
  sae::SaeParams sae;
  mil::ProtoMilParams model;
  mil::InterventionMask mask;
};

ModelInputs load_inputs(const std::string& data_dir, const std::string& sae_path,
                        const std::string& model_path, const std::string& mask_path) {
  ModelInputs in;
  in.ds = data::load_dataset(data_dir);
  require_file(sae_path);
  in.sae = sae::load(sae_path);
  require_file(model_path);
  in.model = mil::load(model_path);
  if (in.model.d_hid() != in.sae.d_hid()) throw Error("SAE and ProtoMIL model disagree on d_hid");
  in.mask = resolve_mask(mask_path, in.sae.d_hid());
  return in;
}

int cmd_eval(const Common& c, const ModelInputs& in, const std::string& split) {
  const auto r = mil::evaluate(in.ds, data::parse_split(split), in.sae, in.model, in.mask);
  ensure_parent(c.out);
  data::write_json(c.out, nlohmann::json(r));
  check(data::read_json(c.out).get<metrics::EvalResult>() == r, "eval result reload");
  std::printf("%s: n=%zu accuracy=%.4f auc=%.4f\n", split.c_str(), r.n, r.accuracy, r.auc);
  return 0;
}

int cmd_explain(const Common& c, const ModelInputs& in, const std::string& bag_id,
                const std::string& catalog_path, std::size_t top) {
  const auto* bag = in.ds.find(bag_id);
  if (!bag) throw Error("no bag with id '" + bag_id + "'");
  std::optional<probe::ConceptCatalog> cat;
  if (!catalog_path.empty()) {
    require_file(catalog_path);
    cat = probe::load_catalog(catalog_path);
  }
  const auto e = explain::explain_local(*bag, in.sae, in.model, in.mask, cat ? &*cat : nullptr, top);
  ensure_parent(c.out);
  data::write_json(c.out, nlohmann::json(e));
  check(data::read_json(c.out).get<explain::LocalExplanation>() == e, "local explanation reload");
  std::printf("%s: predicted class %zu (p=%.4f), %zu concepts reported\n", bag_id.c_str(),
              e.predicted_class, e.probs[e.predicted_class], e.top_concepts.size());
  return 0;
}

int cmd_explain_global(const Common& c, const ModelInputs& in, const std::string& split,
                       std::size_t top) {
  const auto g = explain::explain_global(in.ds, data::parse_split(split), in.sae, in.model, in.mask, top);
  ensure_parent(c.out);
  data::write_json(c.out, nlohmann::json(g));
  check(data::read_json(c.out).get<explain::GlobalExplanation>() == g, "global explanation reload");
  std::printf("global explanation over %zu %s bags\n", g.bag_count, split.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ProtoMIL: sparse-autoencoder concepts for interpretable multiple instance learning"};
  app.require_subcommand(1);

  Common common;
  std::string data_dir, sae_path, model_path, mask_path, catalog_path, split = "test";
  std::string vectors_path, history_path, bag_id;
  std::size_t top = 10;
  std::size_t d_hid = 0;
  std::vector<std::size_t> ids;

  auto* synth = app.add_subcommand("synth", "generate a synthetic bag dataset with ground truth");
  add_common(synth, common, "dataset directory");

  auto* train_sae = app.add_subcommand("train-sae", "train the sparse autoencoder on train instances");
  add_common(train_sae, common, "SAE model file (PMS1)");
  train_sae->add_option("--data", data_dir, "dataset directory")->required();

  auto* probe_cmd = app.add_subcommand("probe", "find activated concepts and their prototypes");
  add_common(probe_cmd, common, "concept catalog (JSON)");
  probe_cmd->add_option("--data", data_dir, "dataset directory")->required();
  probe_cmd->add_option("--sae", sae_path, "SAE model file")->required();
  probe_cmd->add_option("--dump-vectors", vectors_path, "also write prototype embeddings to this JSON file");

  auto* flag = app.add_subcommand("flag", "mark catalog concepts as spurious and write the mask");
  flag->add_option("--catalog", catalog_path, "concept catalog, updated in place")->required();
  flag->add_option("--ids", ids, "concept ids to flag (may be empty)")->delimiter(',');
  flag->add_option("--out", mask_path, "mask file (JSON)")->required();
  flag->add_option("--d-hid", d_hid, "SAE width used to range-check the mask");

  auto* train_mil = app.add_subcommand("train-mil", "train the attention MIL classifier on concept vectors");
  add_common(train_mil, common, "ProtoMIL model file (PMM1)");
  train_mil->add_option("--data", data_dir, "dataset directory")->required();
  train_mil->add_option("--sae", sae_path, "SAE model file")->required();
  train_mil->add_option("--mask", mask_path, "mask file of concepts to zero");
  train_mil->add_option("--history", history_path, "write per-epoch loss and validation AUC here");

  auto add_model_inputs = [&](CLI::App* cmd) {
    cmd->add_option("--data", data_dir, "dataset directory")->required();
    cmd->add_option("--sae", sae_path, "SAE model file")->required();
    cmd->add_option("--model", model_path, "ProtoMIL model file")->required();
    cmd->add_option("--mask", mask_path, "mask file of concepts to zero");
  };

  auto* eval = app.add_subcommand("eval", "accuracy and AUC on one split");
  add_common(eval, common, "evaluation result (JSON)");
  add_model_inputs(eval);
  eval->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* explain_cmd = app.add_subcommand("explain", "local explanation of one bag");
  add_common(explain_cmd, common, "local explanation (JSON)");
  add_model_inputs(explain_cmd);
  explain_cmd->add_option("--bag", bag_id, "bag id")->required();
  explain_cmd->add_option("--catalog", catalog_path, "concept catalog for names and prototypes");
  explain_cmd->add_option("--top", top, "number of concepts to report")->capture_default_str();

  auto* explain_global = app.add_subcommand("explain-global", "mean concept contributions over a split");
  add_common(explain_global, common, "global explanation (JSON)");
  add_model_inputs(explain_global);
  explain_global->add_option("--split", split, "train, val or test")->capture_default_str();
  explain_global->add_option("--top", top, "concepts listed per class")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(common);
    if (train_sae->parsed()) return cmd_train_sae(common, data_dir);
    if (probe_cmd->parsed()) return cmd_probe(common, data_dir, sae_path, vectors_path);
    if (flag->parsed()) return cmd_flag(catalog_path, ids, mask_path, d_hid);
    if (train_mil->parsed()) return cmd_train_mil(common, data_dir, sae_path, mask_path, history_path);
    if (top == 0) throw Error("--top must be >= 1");
    const auto in = load_inputs(data_dir, sae_path, model_path, mask_path);
    if (eval->parsed()) return cmd_eval(common, in, split);
    if (explain_cmd->parsed()) return cmd_explain(common, in, bag_id, catalog_path, top);
    if (explain_global->parsed()) return cmd_explain_global(common, in, split, top);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
