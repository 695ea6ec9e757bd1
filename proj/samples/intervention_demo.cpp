// End-to-end intervention on the synthetic benchmark: train the SAE, inspect
// prototypes, flag the shortcut concept, retrain with it masked and compare.
//
//   intervention_demo [config.json] [seed]

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>

#include "protomil/bagio.hpp"
#include "protomil/config.hpp"
#include "protomil/explain.hpp"
#include "protomil/mil.hpp"
#include "protomil/probing.hpp"
#include "protomil/sae.hpp"

using namespace protomil;

namespace {

// The reviewer's call, made here from ground truth: a concept whose prototypes
// are mostly the planted shortcut instances gets flagged.
std::vector<std::size_t> review(const probe::ConceptCatalog& cat, const data::SyntheticData& syn) {
  std::map<std::string, std::size_t> index;
  for (std::size_t b = 0; b < syn.dataset.bags.size(); ++b) index[syn.dataset.bags[b].bag_id] = b;
  std::vector<std::size_t> flagged;
  for (const auto& e : cat.concepts) {
    std::size_t hits = 0;
    for (const auto& r : e.prototypes) {
      const auto& cs = syn.truth.bags[index.at(r.bag_id)].instance_concepts[r.instance_index];
      hits += std::find(cs.begin(), cs.end(), *syn.truth.spurious_concept) != cs.end();
    }
    if (2 * hits >= e.prototypes.size()) flagged.push_back(e.id);
  }
  return flagged;
}

void report(const char* name, const data::BagDataset& ds, const sae::SaeParams& sae,
            const mil::TrainResult& r, const mil::InterventionMask& mask) {
  const auto test = mil::evaluate(ds, data::Split::test, sae, r.params, mask);
  std::printf("%-9s epoch %3zu  val AUC %.3f  test AUC %.3f  test accuracy %.3f\n", name, r.best_epoch,
              r.best_val_auc, test.auc, test.accuracy);
  const auto g = explain::explain_global(ds, data::Split::test, sae, r.params, mask, 5);
  std::printf("          top concepts for class 1:");
  for (const auto& [id, v] : g.classes[1].top) std::printf(" %zu (%+.3f)", id, v);
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  try {
    RunConfig cfg = argc > 1 ? load_config(argv[1]) : load_config(PROTOMIL_DESK_CONFIG);
    if (argc > 2) cfg.set_seed(std::strtoull(argv[2], nullptr, 10));
    cfg.validate();

    const auto syn = data::gen_synthetic(cfg.synth);
    std::printf("%zu bags; shortcut concept present in %.0f%% of positive train bags, absent at test\n",
                syn.dataset.bags.size(), 100.0 * cfg.synth.rho_train);

    const auto sae = sae::train(data::pool_instances(syn.dataset, data::Split::train), cfg.sae).params;
    auto cat = probe::build_catalog(probe::build_probe_set(syn.dataset, cfg.n_per_class, cfg.seed), sae, cfg.k);
    probe::flag_concepts(cat, review(cat, syn));
    const mil::InterventionMask mask(cat.flagged(), sae.d_hid());
    std::printf("%zu activated concepts, %zu flagged:", cat.concepts.size(), mask.indices().size());
    for (auto i : mask.indices()) std::printf(" %zu", i);
    std::printf("\n\n");

    report("unmasked", syn.dataset, sae, mil::train(syn.dataset, sae, cfg.mil, {}), {});
    report("masked", syn.dataset, sae, mil::train(syn.dataset, sae, cfg.mil, mask), mask);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
