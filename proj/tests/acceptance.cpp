// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Usage: protomil_acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "flat_params.hpp"
#include "oracles.hpp"
#include "protomil/bagio.hpp"
#include "protomil/config.hpp"
#include "protomil/explain.hpp"
#include "protomil/metrics.hpp"
#include "protomil/mil.hpp"
#include "protomil/probing.hpp"
#include "protomil/sae.hpp"
#include "test_util.hpp"

using namespace protomil;

namespace {

// 1
constexpr int kDecompositionTrials = 1000;
constexpr double kDecompositionTol = 1e-9;
constexpr double kDecompositionSeconds = 30.0;
// 2
constexpr int kGradPoints = 10;
constexpr double kGradEps = 1e-4;
constexpr double kGradTol = 1e-5;
constexpr double kGradSeconds = 120.0;
// 3
constexpr double kRecoveryCosine = 0.9;
constexpr double kRecoveryFraction = 0.8;
constexpr double kRecoverySeconds = 180.0;
// 5
constexpr double kCleanAuc = 0.95;
constexpr double kCleanAccuracy = 0.90;
constexpr double kCleanSeconds = 180.0;
// 6
constexpr double kShortcutGap = 0.05;
constexpr double kMaskedAuc = 0.90;
constexpr double kInterventionSeconds = 360.0;
// 7
constexpr int kAucTrials = 200;
// 9
constexpr double kPermutationTol = 1e-9;

constexpr std::uint64_t kSeeds[] = {0, 1, 2};
constexpr int kSeedsToPass = 2;

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Desk-scale run settings shared with the samples and the CLI.
RunConfig desk_config(std::uint64_t seed) {
  auto c = load_config(PROTOMIL_DESK_CONFIG);
  c.set_seed(seed);
  return c;
}

// ---------------------------------------------------------------------------

Outcome decomposition() {
  Rng rng(101);
  double worst = 0.0;
  for (int t = 0; t < kDecompositionTrials; ++t) {
    const std::size_t d_in = 4 + rng.below(29), d_hid = 4 + rng.below(61);
    const std::size_t dim = 1 + rng.below(16), classes = 2 + rng.below(3);
    const auto sae = oracle::random_sae(d_in, d_hid, rng);
    const auto p = oracle::random_mil(d_hid, dim, classes, rng);
    const data::EmbeddingBag bag{"b", 0, oracle::random_matrix(1 + rng.below(40), d_in, rng)};
    std::vector<std::size_t> masked;
    const double density = t % 4 == 0 ? 0.0 : rng.uniform(0.0, 0.6);
    for (std::size_t i = 0; i < d_hid; ++i)
      if (rng.uniform() < density) masked.push_back(i);
    const auto out = mil::forward(bag, sae, p, mil::InterventionMask(masked, d_hid));
    for (std::size_t c = 0; c < classes; ++c) {
      double sum = p.cls_b[c];
      for (double k : out.contributions.row(c)) sum += k;
      worst = std::max(worst, std::abs(sum - out.logits[c]));
    }
  }
  return {worst < kDecompositionTol, fmt("max |sum kappa + b - logit| = %.2e over %d triples", worst,
                                         kDecompositionTrials)};
}

Outcome gradients() {
  Rng rng(102);
  double sae_worst = 0.0, mil_worst = 0.0;
  for (int point = 0; point < kGradPoints; ++point) {
    const auto p = oracle::random_sae(6, 14, rng);
    const auto batch = oracle::random_matrix(5, 6, rng);
    const double lambda = point % 2 ? 3e-4 : 0.2;
    const auto g = sae::backward(batch, p, lambda);
    auto loss = [&](std::span<const double> v) { return sae::loss(batch, flat::like(v, p), lambda).total; };
    sae_worst = std::max(sae_worst, grad_check(loss, flat::of(p), flat::of(g), kGradEps));
  }
  for (int point = 0; point < kGradPoints; ++point) {
    const std::size_t d = 5 + rng.below(8), classes = 2 + point % 2;
    const auto p = oracle::random_mil(d, 4, classes, rng);
    const mil::ConceptBag bag(oracle::random_concepts(2 + rng.below(6), d, rng, 0.6));
    const std::size_t label = rng.below(classes);
    const auto g = mil::backward(bag, label, p);
    auto loss = [&](std::span<const double> v) {
      return mil::cross_entropy(mil::forward(bag, flat::like(v, p)).logits, label);
    };
    mil_worst = std::max(mil_worst, grad_check(loss, flat::of(p), flat::of(g), kGradEps));
  }
  return {std::max(sae_worst, mil_worst) < kGradTol,
          fmt("max relative error SAE %.2e, ProtoMIL %.2e", sae_worst, mil_worst)};
}

std::size_t recovered_directions(const Matrix& decoder, const Matrix& directions) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < directions.rows(); ++k) {
    const auto d = directions.row(k);
    double best = 0.0;
    for (std::size_t i = 0; i < decoder.rows(); ++i) {
      const auto f = decoder.row(i);
      const double norm = std::sqrt(dot(f, f));
      if (norm > 0.0) best = std::max(best, std::abs(dot(f, d)) / norm);
    }
    n += best >= kRecoveryCosine;
  }
  return n;
}

Outcome recovery() {
  int passed = 0;
  std::string counts;
  for (auto seed : kSeeds) {
    auto cfg = desk_config(seed);
    cfg.synth.concepts_per_instance = 1;
    const auto syn = data::gen_synthetic(cfg.synth);
    const auto sae = sae::train(data::pool_instances(syn.dataset, data::Split::train), cfg.sae).params;
    const auto n = recovered_directions(sae.decoder, syn.truth.directions);
    const auto need = static_cast<std::size_t>(std::ceil(kRecoveryFraction * cfg.synth.n_concepts));
    passed += n >= need;
    counts += fmt("%s%zu/%zu", counts.empty() ? "" : " ", n, cfg.synth.n_concepts);
  }
  return {passed >= kSeedsToPass, fmt("recovered per seed: %s (d_hid 256)", counts.c_str())};
}

Outcome sparsity() {
  const auto cfg = desk_config(0);
  const auto syn = data::gen_synthetic(cfg.synth);
  const auto train = data::pool_instances(syn.dataset, data::Split::train);
  const auto probe = probe::build_probe_set(syn.dataset, cfg.n_per_class, cfg.seed);
  auto stats = [&](double lambda) {
    auto sc = cfg.sae;
    sc.lambda = lambda;
    const auto acts = probe::probe_activations(probe, sae::train(train, sc).params);
    std::size_t nonzero = 0;
    for (double v : acts.data()) nonzero += v > 0.0;
    return std::pair{static_cast<double>(nonzero) / static_cast<double>(acts.rows()),
                     probe::activated_concepts(acts).size()};
  };
  const auto [l0_sparse, activated] = stats(cfg.sae.lambda);
  const auto [l0_dense, activated_dense] = stats(0.0);
  const std::size_t limit = cfg.sae.d_hid / 4;
  return {l0_sparse < l0_dense && activated <= limit,
          fmt("mean L0 %.1f (lambda %.0e) vs %.1f (lambda 0); activated %zu, limit %zu (d_hid %zu)",
              l0_sparse, cfg.sae.lambda, l0_dense, activated, limit, cfg.sae.d_hid)};
}

// Trained on data without the spurious signal; criterion 9 reuses it.
struct CleanRun {
  data::BagDataset ds;
  sae::SaeParams sae;
  mil::ProtoMilParams model;
};

CleanRun clean_run() {
  auto cfg = desk_config(0);
  cfg.synth.rho_train = 0.0;
  cfg.synth.rho_test = 0.0;
  CleanRun r{data::gen_synthetic(cfg.synth).dataset, {}, {}};
  r.sae = sae::train(data::pool_instances(r.ds, data::Split::train), cfg.sae).params;
  r.model = mil::train(r.ds, r.sae, cfg.mil, {}).params;
  return r;
}

Outcome classification(const CleanRun& run) {
  const auto ev = mil::evaluate(run.ds, data::Split::test, run.sae, run.model, {});
  return {ev.auc >= kCleanAuc && ev.accuracy >= kCleanAccuracy,
          fmt("test AUC %.3f, accuracy %.3f", ev.auc, ev.accuracy)};
}

// Stands in for the human reviewer: a concept is flagged when at least half
// of its prototypes are instances planted with the spurious direction.
std::vector<std::size_t> flag_by_prototypes(const probe::ConceptCatalog& cat, const data::BagDataset& ds,
                                            const data::GroundTruth& truth) {
  std::map<std::string, std::size_t> bag_index;
  for (std::size_t b = 0; b < ds.bags.size(); ++b) bag_index[ds.bags[b].bag_id] = b;
  const auto spurious = *truth.spurious_concept;
  std::vector<std::size_t> out;
  for (const auto& e : cat.concepts) {
    std::size_t hits = 0;
    for (const auto& r : e.prototypes) {
      const auto& cs = truth.bags[bag_index.at(r.bag_id)].instance_concepts[r.instance_index];
      hits += std::find(cs.begin(), cs.end(), spurious) != cs.end();
    }
    if (!e.prototypes.empty() && 2 * hits >= e.prototypes.size()) out.push_back(e.id);
  }
  return out;
}

Outcome intervention() {
  int passed = 0;
  std::string lines;
  for (auto seed : kSeeds) {
    const auto cfg = desk_config(seed);
    const auto syn = data::gen_synthetic(cfg.synth);
    const auto& ds = syn.dataset;
    const auto sae = sae::train(data::pool_instances(ds, data::Split::train), cfg.sae).params;
    auto cat = probe::build_catalog(probe::build_probe_set(ds, cfg.n_per_class, seed), sae, cfg.k);
    probe::flag_concepts(cat, flag_by_prototypes(cat, ds, syn.truth));
    const mil::InterventionMask mask(cat.flagged(), sae.d_hid());

    const auto plain = mil::train(ds, sae, cfg.mil, {});
    const double plain_test = mil::evaluate(ds, data::Split::test, sae, plain.params, {}).auc;
    bool ok = plain_test <= plain.best_val_auc - kShortcutGap && !mask.empty();
    double masked_test = 0.0;
    bool zero = false;
    if (!mask.empty()) {
      const auto masked = mil::train(ds, sae, cfg.mil, mask);
      masked_test = mil::evaluate(ds, data::Split::test, sae, masked.params, mask).auc;
      const auto g = explain::explain_global(ds, data::Split::test, sae, masked.params, mask, 10);
      zero = true;
      for (const auto& cs : g.classes)
        for (auto i : mask.indices()) zero = zero && cs.mean_over_all[i] == 0.0 && cs.mean_over_class_bags[i] == 0.0;
      ok = ok && masked_test >= kMaskedAuc && zero;
    }
    passed += ok;
    lines += fmt("%sseed %llu: val %.3f test %.3f, masked(%zu) test %.3f%s", lines.empty() ? "" : "; ",
                 static_cast<unsigned long long>(seed), plain.best_val_auc, plain_test, mask.indices().size(),
                 masked_test, zero ? ", masked contribution 0" : "");
  }
  return {passed >= kSeedsToPass, lines};
}

Outcome oracles() {
  Rng rng(107);
  int auc_mismatch = 0;
  for (int t = 0; t < kAucTrials; ++t) {
    const std::size_t n = 2 + rng.below(499);
    std::vector<double> s(n);
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(t % 2 ? 7 : 1000)) / 7.0;
      y[i] = rng.below(2);
    }
    y[0] = 0;
    y[1] = 1;
    auc_mismatch += metrics::auc_binary(s, y) != oracle::pair_count_auc(s, y);
  }

  // Coarse embeddings so that prototype activations tie.
  data::SynthConfig sc;
  sc.d_in = 8;
  sc.n_concepts = 6;
  sc.tumor_concepts = {0};
  sc.spurious_concept = 5;
  sc.n_train = 20;
  sc.n_val = 2;
  sc.n_test = 2;
  auto ds = data::gen_synthetic(sc).dataset;
  for (auto& b : ds.bags)
    for (double& v : b.instances.data()) v = std::round(v * 2.0) / 2.0;
  const auto sae = oracle::random_sae(8, 40, rng);
  const auto probe = probe::build_probe_set(ds, 300, 7);
  const auto acts = probe::probe_activations(probe, sae);
  int topk_mismatch = 0;
  for (std::size_t i = 0; i < sae.d_hid(); ++i)
    for (std::size_t k : {1u, 3u, 10u, 100000u})
      topk_mismatch += probe::top_k_prototypes(probe, acts, i, k) != oracle::full_sort_prototypes(probe, acts, i, k);
  const bool activated_ok = probe::activated_concepts(probe, sae) == oracle::exhaustive_activated(probe, sae);
  return {auc_mismatch == 0 && topk_mismatch == 0 && activated_ok,
          fmt("AUC mismatches %d/%d, top-k mismatches %d/%zu, activated set %s", auc_mismatch, kAucTrials,
              topk_mismatch, 4 * sae.d_hid(), activated_ok ? "equal" : "differs")};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PROTOMIL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Outcome determinism() {
  testutil::TempDir dir("acceptance");
  // Desk settings with short training; determinism does not depend on length.
  auto cfg = to_json(desk_config(0));
  cfg["sae_epochs"] = 5;
  cfg["mil_epochs"] = 5;
  data::write_json(dir / "cfg.json", cfg);
  const std::string c = " --config " + (dir / "cfg.json").string();
  std::vector<std::string> files{"sae.pms", "catalog.json", "model.pmm", "eval_result.json",
                                 "data/manifest.json", "data/truth.json"};
  for (const char* run : {"a", "b"}) {
    const auto r = dir.path() / run;
    const std::string d = " --data " + (r / "data").string(), s = " --sae " + (r / "sae.pms").string();
    const std::vector<std::string> steps{
        "synth" + c + " --out " + (r / "data").string(),
        "train-sae" + c + d + " --out " + (r / "sae.pms").string(),
        "probe" + c + d + s + " --out " + (r / "catalog.json").string(),
        "train-mil" + c + d + s + " --out " + (r / "model.pmm").string(),
        "eval" + c + d + s + " --model " + (r / "model.pmm").string() + " --out " +
            (r / "eval_result.json").string()};
    for (const auto& step : steps) {
      if (run_cli(step) != 0) return {false, "command failed: " + step};
    }
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir / "a/data/bags"))
    files.push_back("data/bags/" + entry.path().filename().string());
  std::size_t differ = 0;
  for (const auto& f : files) differ += testutil::slurp(dir / ("a/" + f)) != testutil::slurp(dir / ("b/" + f));
  return {differ == 0, fmt("%zu of %zu compared outputs differ between two runs", differ, files.size())};
}

Outcome permutation(const CleanRun& run) {
  data::BagDataset shuffled = run.ds;
  Rng rng(109);
  for (auto b : shuffled.indices(data::Split::test)) {
    auto& m = shuffled.bags[b].instances;
    std::vector<std::size_t> perm(m.rows());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    Matrix out(m.rows(), m.cols());
    for (std::size_t q = 0; q < perm.size(); ++q) std::copy(m.row(perm[q]).begin(), m.row(perm[q]).end(), out.row(q).begin());
    m = std::move(out);
  }
  double worst = 0.0;
  for (auto b : run.ds.indices(data::Split::test)) {
    const auto a = mil::forward(run.ds.bags[b], run.sae, run.model, {}).logits;
    const auto s = mil::forward(shuffled.bags[b], run.sae, run.model, {}).logits;
    for (std::size_t c = 0; c < a.size(); ++c) worst = std::max(worst, std::abs(a[c] - s[c]));
  }
  const bool same = mil::evaluate(run.ds, data::Split::test, run.sae, run.model, {}) ==
                    mil::evaluate(shuffled, data::Split::test, run.sae, run.model, {});
  return {worst <= kPermutationTol && same,
          fmt("max logit change %.2e, eval metrics %s", worst, same ? "identical" : "changed")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  const std::map<int, double> limits{{1, kDecompositionSeconds}, {2, kGradSeconds}, {3, kRecoverySeconds},
                                     {5, kCleanSeconds}, {6, kInterventionSeconds}};
  std::optional<CleanRun> clean;
  auto need_clean = [&] {
    if (!clean) clean = clean_run();
  };

  const std::map<int, std::function<Outcome()>> criteria{
      {1, decomposition},
      {2, gradients},
      {3, recovery},
      {4, sparsity},
      {5, [&] {
         need_clean();
         return classification(*clean);
       }},
      {6, intervention},
      {7, oracles},
      {8, determinism},
      {9, [&] {
         need_clean();
         return permutation(*clean);
       }}};

  int failures = 0;
  for (const auto& [n, fn] : criteria) {
    if (!wanted(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double t = seconds_since(t0);
    std::string timing = fmt("%.1fs", t);
    if (auto it = limits.find(n); it != limits.end()) {
      timing += fmt(" of %.0fs", it->second);
      if (t >= it->second) {
        o.pass = false;
        o.detail += "; over time";
      }
    }
    failures += !o.pass;
    std::printf("criterion %d: %s  %s (%s)\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
