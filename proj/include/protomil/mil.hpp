#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "protomil/bagio.hpp"
#include "protomil/binio.hpp"
#include "protomil/error.hpp"
#include "protomil/metrics.hpp"
#include "protomil/numerics.hpp"
#include "protomil/sae.hpp"

// Prototype MIL head: gated attention over concept vectors, attention-weighted
// sum pooling and a linear classifier whose logits split exactly into
// per-concept contributions kappa[c][i] = W[c][i] * z[i].
namespace protomil::mil {

inline constexpr std::uint32_t kModelFormatVersion = 1;

// Concept indices whose activations are forced to zero before attention.
class InterventionMask {
 public:
  InterventionMask() = default;
  InterventionMask(std::vector<std::size_t> indices, std::size_t d_hid) : masked_(std::move(indices)) {
    std::sort(masked_.begin(), masked_.end());
    if (std::adjacent_find(masked_.begin(), masked_.end()) != masked_.end()) {
      throw Error("mask contains duplicate concept indices");
    }
    for (auto i : masked_) {
      if (i >= d_hid) {
        throw Error("mask concept index " + std::to_string(i) + " out of range (d_hid = " +
                    std::to_string(d_hid) + ")");
      }
    }
  }

  const std::vector<std::size_t>& indices() const { return masked_; }
  bool empty() const { return masked_.empty(); }
  bool contains(std::size_t i) const { return std::binary_search(masked_.begin(), masked_.end(), i); }

  bool operator==(const InterventionMask&) const = default;

 private:
  std::vector<std::size_t> masked_;
};

inline Vector apply_mask(std::span<const double> h, const InterventionMask& mask) {
  Vector out(h.begin(), h.end());
  for (auto i : mask.indices()) {
    if (i >= out.size()) throw Error("mask concept index out of range");
    out[i] = 0.0;
  }
  return out;
}

inline InterventionMask load_mask(const std::filesystem::path& path, std::size_t d_hid) {
  const auto j = data::read_json(path);
  try {
    return InterventionMask(j.at("masked_concepts").get<std::vector<std::size_t>>(), d_hid);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed mask: " + e.what());
  }
}

inline void save_mask(const std::filesystem::path& path, const InterventionMask& mask) {
  data::write_json(path, nlohmann::json{{"masked_concepts", mask.indices()}});
}

struct ProtoMilParams {
  Matrix attn_v;  // D x d_hid, tanh branch
  Matrix attn_u;  // D x d_hid, sigmoid gate
  Vector attn_w;  // D
  Matrix cls_w;   // C x d_hid
  Vector cls_b;   // C

  std::size_t d_hid() const { return attn_v.cols(); }
  std::size_t attention_dim() const { return attn_v.rows(); }
  std::size_t class_count() const { return cls_w.rows(); }

  void validate() const {
    const std::size_t d = d_hid(), a = attention_dim();
    if (a < 1) throw Error("ProtoMIL: attention width must be >= 1");
    if (class_count() < 2) throw Error("ProtoMIL: need at least two classes");
    if (attn_u.rows() != a || attn_u.cols() != d || attn_w.size() != a || cls_w.cols() != d ||
        cls_b.size() != class_count()) {
      throw Error("ProtoMIL parameter shapes are inconsistent");
    }
    for (const auto* m : {&attn_v.data(), &attn_u.data(), &attn_w, &cls_w.data(), &cls_b}) {
      if (!all_finite(*m)) throw Error("ProtoMIL parameters contain non-finite values");
    }
  }

  bool operator==(const ProtoMilParams&) const = default;
};

inline ProtoMilParams init_params(std::size_t d_hid, std::size_t attention_dim,
                                  std::size_t class_count, Rng& rng) {
  ProtoMilParams p;
  p.attn_v = glorot_uniform(attention_dim, d_hid, d_hid, attention_dim, rng);
  p.attn_u = glorot_uniform(attention_dim, d_hid, d_hid, attention_dim, rng);
  const Matrix w = glorot_uniform(1, attention_dim, attention_dim, 1, rng);
  p.attn_w = w.data();
  // The classifier starts at zero. A random sign on a concept's weight can make
  // attention learn to avoid that concept before the weight is ever corrected.
  p.cls_w = Matrix(class_count, d_hid);
  p.cls_b = Vector(class_count, 0.0);
  p.validate();
  return p;
}

// Masked concept vectors of one bag plus their nonzero pattern by row and by
// column; SAE activations are sparse, so attention runs over nonzeros only.
struct ConceptBag {
  Matrix h;  // N x d_hid
  std::vector<std::vector<std::size_t>> nonzero;      // per instance: active concepts
  std::vector<std::vector<std::size_t>> active_rows;  // per concept: instances where it is active

  explicit ConceptBag(Matrix concepts) : h(std::move(concepts)) {
    if (h.rows() == 0) throw Error("empty bag");
    nonzero.resize(h.rows());
    active_rows.resize(h.cols());
    for (std::size_t p = 0; p < h.rows(); ++p) {
      const auto row = h.row(p);
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i] != 0.0) {
          nonzero[p].push_back(i);
          active_rows[i].push_back(p);
        }
      }
    }
  }

  std::size_t size() const { return h.rows(); }
};

inline ConceptBag concept_bag(const Matrix& embeddings, const sae::SaeParams& sae,
                              const InterventionMask& mask) {
  if (embeddings.rows() == 0) throw Error("empty bag");
  if (embeddings.cols() != sae.d_in()) {
    throw Error("bag embedding dimension " + std::to_string(embeddings.cols()) +
                " does not match SAE input dimension " + std::to_string(sae.d_in()));
  }
  Matrix h = sae::encode_rows(embeddings, sae);
  for (std::size_t p = 0; p < h.rows(); ++p)
    for (auto i : mask.indices()) h(p, i) = 0.0;
  return ConceptBag(std::move(h));
}

namespace detail {

// y += c_k * row_k for k = 0..count-1, where term(k) yields (c_k, row_k). Four
// rows share each pass over y but are still added one at a time, so the result
// is bitwise that of sequential axpy calls.
template <class Term>
inline void add_scaled_rows(std::span<double> y, std::size_t count, Term term) {
  double* __restrict out = y.data();
  const std::size_t m = y.size();
  std::size_t k = 0;
  for (; k + 4 <= count; k += 4) {
    const auto [c0, r0] = term(k);
    const auto [c1, r1] = term(k + 1);
    const auto [c2, r2] = term(k + 2);
    const auto [c3, r3] = term(k + 3);
    for (std::size_t j = 0; j < m; ++j) {
      out[j] = (((out[j] + c0 * r0[j]) + c1 * r1[j]) + c2 * r2[j]) + c3 * r3[j];
    }
  }
  for (; k < count; ++k) {
    const auto [c, r] = term(k);
    for (std::size_t j = 0; j < m; ++j) out[j] += c * r[j];
  }
}

// Gate weights with one row per concept: row i holds column i of V followed by
// column i of U, so a sparse h touches only the rows of its active concepts.
inline Matrix stack_gates(const ProtoMilParams& p) {
  const std::size_t dim = p.attention_dim();
  Matrix out(p.d_hid(), 2 * dim);
  for (std::size_t i = 0; i < p.d_hid(); ++i) {
    auto row = out.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      row[d] = p.attn_v(d, i);
      row[dim + d] = p.attn_u(d, i);
    }
  }
  return out;
}

inline void unstack_gates(const Matrix& gates, Matrix& v, Matrix& u) {
  const std::size_t dim = gates.cols() / 2;
  v = Matrix(dim, gates.rows());
  u = Matrix(dim, gates.rows());
  for (std::size_t i = 0; i < gates.rows(); ++i) {
    const auto row = gates.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      v(d, i) = row[d];
      u(d, i) = row[dim + d];
    }
  }
}

// Per-instance gate activations, kept for the backward pass.
struct AttentionCache {
  Matrix tanh_v;  // N x D
  Matrix sig_u;   // N x D
  Vector scores;  // pre-softmax, N
  Vector attention;
};

inline AttentionCache attend(const ConceptBag& bag, const Matrix& gates, std::span<const double> attn_w) {
  const std::size_t n = bag.size(), dim = attn_w.size();
  if (bag.h.cols() != gates.rows()) {
    throw Error("concept dimension " + std::to_string(bag.h.cols()) +
                " does not match model d_hid " + std::to_string(gates.rows()));
  }
  AttentionCache c{Matrix(n, dim), Matrix(n, dim), Vector(n), {}};
  Vector vu(2 * dim);
  for (std::size_t q = 0; q < n; ++q) {
    std::fill(vu.begin(), vu.end(), 0.0);
    const auto h = bag.h.row(q);
    const auto& active = bag.nonzero[q];
    add_scaled_rows(vu, active.size(), [&](std::size_t k) {
      return std::pair{h[active[k]], gates.row(active[k]).data()};
    });
    double score = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double t = std::tanh(vu[d]);
      const double s = sigmoid(vu[dim + d]);
      c.tanh_v(q, d) = t;
      c.sig_u(q, d) = s;
      score += attn_w[d] * t * s;
    }
    c.scores[q] = score;
  }
  c.attention = softmax(c.scores);
  return c;
}

}  // namespace detail

// a = softmax_p( w . (tanh(V h_p) * sigmoid(U h_p)) )
inline Vector attention_scores(const ConceptBag& bag, const ProtoMilParams& p) {
  return detail::attend(bag, detail::stack_gates(p), p.attn_w).attention;
}

inline Vector attention_scores(const Matrix& h, const ProtoMilParams& p) {
  return attention_scores(ConceptBag(h), p);
}

struct BagOutput {
  Vector logits;
  Vector probs;
  Vector attention;
  Matrix contributions;  // C x d_hid, kappa
  Vector pooled;         // z = sum_p a_p h_p
};

namespace detail {

inline BagOutput head(const ConceptBag& bag, const ProtoMilParams& p, Vector attention) {
  const std::size_t d_hid = p.d_hid(), classes = p.class_count();
  BagOutput out;
  out.pooled.assign(d_hid, 0.0);
  for (std::size_t q = 0; q < bag.size(); ++q) {
    const auto h = bag.h.row(q);
    for (auto i : bag.nonzero[q]) out.pooled[i] += attention[q] * h[i];
  }
  out.attention = std::move(attention);
  out.contributions = Matrix(classes, d_hid);
  out.logits.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    double logit = 0.0;
    for (std::size_t i = 0; i < d_hid; ++i) {
      const double kappa = p.cls_w(c, i) * out.pooled[i];
      out.contributions(c, i) = kappa;
      logit += kappa;
    }
    out.logits[c] = logit + p.cls_b[c];
  }
  out.probs = softmax(out.logits);
  return out;
}

// `p` supplies the classifier and attn_w; V and U are read from `gates`.
inline BagOutput forward(const ConceptBag& bag, const ProtoMilParams& p, const Matrix& gates) {
  return head(bag, p, attend(bag, gates, p.attn_w).attention);
}

}  // namespace detail

inline BagOutput forward(const ConceptBag& bag, const ProtoMilParams& p) {
  return detail::forward(bag, p, detail::stack_gates(p));
}

inline BagOutput forward(const data::EmbeddingBag& bag, const sae::SaeParams& sae,
                         const ProtoMilParams& p, const InterventionMask& mask) {
  if (sae.d_hid() != p.d_hid()) throw Error("SAE d_hid does not match ProtoMIL d_hid");
  return forward(concept_bag(bag.instances, sae, mask), p);
}

struct MilGrads {
  Matrix attn_v;
  Matrix attn_u;
  Vector attn_w;
  Matrix cls_w;
  Vector cls_b;
  double loss = 0.0;
};

inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return mx + std::log(s) - logits[label];
}

namespace detail {

struct StepGrads {
  Matrix gates;  // same layout as stack_gates
  Vector attn_w;
  Matrix cls_w;
  Vector cls_b;
  double loss = 0.0;
};

inline StepGrads backward(const ConceptBag& bag, std::size_t label, const ProtoMilParams& p,
                          const Matrix& gates) {
  if (label >= p.class_count()) throw Error("label out of range");
  auto cache = attend(bag, gates, p.attn_w);
  const auto out = head(bag, p, cache.attention);
  const std::size_t n = bag.size(), dim = p.attention_dim(), d_hid = p.d_hid();
  const std::size_t classes = p.class_count();
  StepGrads g{Matrix(d_hid, 2 * dim), Vector(dim, 0.0), Matrix(classes, d_hid), Vector(classes, 0.0),
              cross_entropy(out.logits, label)};

  Vector delta = out.probs;
  delta[label] -= 1.0;
  Vector dz(d_hid, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    g.cls_b[c] = delta[c];
    if (delta[c] == 0.0) continue;
    axpy(delta[c], out.pooled, g.cls_w.row(c));
    axpy(delta[c], p.cls_w.row(c), dz);
  }

  // d loss / d a_p, then through the softmax over instances
  Vector r(n, 0.0);
  double r_mean = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto h = bag.h.row(q);
    for (auto i : bag.nonzero[q]) r[q] += dz[i] * h[i];
    r_mean += cache.attention[q] * r[q];
  }
  // gradients w.r.t. the pre-activations (V h_q, U h_q), one row per instance
  Matrix dvu(n, 2 * dim);
  for (std::size_t q = 0; q < n; ++q) {
    const double de = cache.attention[q] * (r[q] - r_mean);
    if (de == 0.0) continue;
    auto row = dvu.row(q);
    for (std::size_t d = 0; d < dim; ++d) {
      const double t = cache.tanh_v(q, d);
      const double s = cache.sig_u(q, d);
      g.attn_w[d] += de * t * s;
      const double dm = de * p.attn_w[d];
      row[d] = dm * s * (1.0 - t * t);
      row[dim + d] = dm * t * s * (1.0 - s);
    }
  }
  for (std::size_t i = 0; i < d_hid; ++i) {
    const auto& rows = bag.active_rows[i];
    add_scaled_rows(g.gates.row(i), rows.size(), [&](std::size_t k) {
      return std::pair{bag.h(rows[k], i), dvu.row(rows[k]).data()};
    });
  }
  return g;
}

}  // namespace detail

// Gradients of -log softmax(logits)[label]; the SAE stays frozen.
inline MilGrads backward(const ConceptBag& bag, std::size_t label, const ProtoMilParams& p) {
  auto sg = detail::backward(bag, label, p, detail::stack_gates(p));
  MilGrads g{{}, {}, std::move(sg.attn_w), std::move(sg.cls_w), std::move(sg.cls_b), sg.loss};
  detail::unstack_gates(sg.gates, g.attn_v, g.attn_u);
  return g;
}

struct MilTrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 200;
  std::size_t attention_dim = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw Error("ProtoMIL config: learning rate must be > 0");
    if (epochs < 1) throw Error("ProtoMIL config: epochs must be >= 1");
    if (attention_dim < 1) throw Error("ProtoMIL config: attention width must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;  // mean cross-entropy
};

struct TrainResult {
  ProtoMilParams params;  // from the selected epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
};

struct PreparedSplit {
  std::vector<ConceptBag> bags;
  std::vector<std::size_t> labels;
};

inline PreparedSplit prepare_split(const data::BagDataset& ds, data::Split split,
                                   const sae::SaeParams& sae, const InterventionMask& mask) {
  PreparedSplit out;
  for (auto i : ds.indices(split)) {
    out.bags.push_back(concept_bag(ds.bags[i].instances, sae, mask));
    out.labels.push_back(ds.bags[i].label);
  }
  return out;
}

namespace detail {

inline std::vector<Vector> predict(const PreparedSplit& split, const ProtoMilParams& p, const Matrix& gates) {
  std::vector<Vector> probs;
  probs.reserve(split.bags.size());
  for (const auto& b : split.bags) probs.push_back(forward(b, p, gates).probs);
  return probs;
}

}  // namespace detail

inline std::vector<Vector> predict(const PreparedSplit& split, const ProtoMilParams& p) {
  return detail::predict(split, p, detail::stack_gates(p));
}

// One Adam step per bag, bags reshuffled each epoch. The returned parameters
// are those of the epoch with the best validation AUC. Validation AUC saturates
// at 1 on easy data, so ties go to the lower validation loss, then the earlier
// epoch.
inline TrainResult train(const data::BagDataset& ds, const sae::SaeParams& sae,
                         const MilTrainConfig& cfg, const InterventionMask& mask) {
  cfg.validate();
  if (ds.d_in != sae.d_in()) throw Error("dataset d_in does not match SAE input dimension");
  for (auto i : mask.indices())
    if (i >= sae.d_hid()) throw Error("mask concept index out of range");
  const auto train_split = prepare_split(ds, data::Split::train, sae, mask);
  const auto val_split = prepare_split(ds, data::Split::val, sae, mask);
  if (train_split.bags.empty()) throw Error("train split is empty");
  if (val_split.bags.empty()) throw Error("validation split is empty");

  Rng init_rng(cfg.seed);
  Rng order_rng(cfg.seed ^ 0x9a7e9a7e9a7e9a7eULL);
  ProtoMilParams p = init_params(sae.d_hid(), cfg.attention_dim, ds.class_count, init_rng);
  // V and U are trained in the stacked layout; Adam is elementwise, so the
  // layout does not change the updates.
  Matrix gates = detail::stack_gates(p);
  AdamConfig adam{cfg.lr};
  AdamState s_g(gates.size()), s_w(p.attn_w.size()), s_cw(p.cls_w.size()), s_cb(p.cls_b.size());

  TrainResult out;
  out.best_val_auc = -1.0;
  double best_val_loss = 0.0;
  std::vector<std::size_t> order(train_split.bags.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    for (auto b : order) {
      const auto g = detail::backward(train_split.bags[b], train_split.labels[b], p, gates);
      total += g.loss;
      adam_step(gates.data(), g.gates.data(), s_g, adam);
      adam_step(p.attn_w, g.attn_w, s_w, adam);
      adam_step(p.cls_w.data(), g.cls_w.data(), s_cw, adam);
      adam_step(p.cls_b, g.cls_b, s_cb, adam);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(order.size());
    const auto val_probs = detail::predict(val_split, p, gates);
    const auto val = metrics::evaluate(val_probs, val_split.labels, ds.class_count);
    rec.val_auc = val.auc;
    rec.val_accuracy = val.accuracy;
    for (std::size_t b = 0; b < val_probs.size(); ++b) {
      rec.val_loss -= std::log(std::max(val_probs[b][val_split.labels[b]], std::numeric_limits<double>::min()));
    }
    rec.val_loss /= static_cast<double>(val_probs.size());
    out.history.push_back(rec);
    if (rec.val_auc > out.best_val_auc || (rec.val_auc == out.best_val_auc && rec.val_loss < best_val_loss)) {
      best_val_loss = rec.val_loss;
      out.best_val_auc = rec.val_auc;
      out.best_epoch = epoch;
      out.params = p;
      detail::unstack_gates(gates, out.params.attn_v, out.params.attn_u);
    }
  }
  return out;
}

inline metrics::EvalResult evaluate(const data::BagDataset& ds, data::Split split,
                                    const sae::SaeParams& sae, const ProtoMilParams& p,
                                    const InterventionMask& mask) {
  const auto prepared = prepare_split(ds, split, sae, mask);
  if (prepared.bags.empty()) {
    throw Error("split '" + std::string(data::to_string(split)) + "' is empty");
  }
  return metrics::evaluate(predict(prepared, p), prepared.labels, ds.class_count);
}

// ---------------------------------------------------------------------------
// PMM1 model file

inline std::vector<char> encode_params(const ProtoMilParams& p) {
  binio::Writer w;
  w.magic("PMM1");
  w.u32(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(p.d_hid()));
  w.u32(static_cast<std::uint32_t>(p.attention_dim()));
  w.u32(static_cast<std::uint32_t>(p.class_count()));
  w.f64s(p.attn_v.data());
  w.f64s(p.attn_u.data());
  w.f64s(p.attn_w);
  w.f64s(p.cls_w.data());
  w.f64s(p.cls_b);
  return w.bytes();
}

inline void save(const std::filesystem::path& path, const ProtoMilParams& p) {
  binio::write_file(path, encode_params(p));
}

inline ProtoMilParams load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing ProtoMIL model file " + path.string());
  auto r = binio::Reader::open(path);
  if (!r.expect_magic("PMM1")) throw Error(path.string() + ": not a PMM1 file");
  const auto version = r.u32();
  if (version != kModelFormatVersion) {
    throw Error(path.string() + ": unsupported PMM1 version " + std::to_string(version));
  }
  const std::size_t d_hid = r.u32();
  const std::size_t dim = r.u32();
  const std::size_t classes = r.u32();
  ProtoMilParams p{Matrix(dim, d_hid), Matrix(dim, d_hid), Vector(dim), Matrix(classes, d_hid),
                   Vector(classes)};
  r.f64s(p.attn_v.data());
  r.f64s(p.attn_u.data());
  r.f64s(p.attn_w);
  r.f64s(p.cls_w.data());
  r.f64s(p.cls_b);
  r.expect_end();
  p.validate();
  return p;
}

}  // namespace protomil::mil
