#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protomil/error.hpp"
#include "protomil/numerics.hpp"

namespace protomil::metrics {

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) {
    throw Error("accuracy: length mismatch (" + std::to_string(predicted.size()) + " vs " +
                std::to_string(truth.size()) + ")");
  }
  if (truth.empty()) throw Error("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

namespace detail {

// Mann-Whitney U / (n_pos * n_neg) via average ranks; ties count one half.
template <typename IsPositive>
double rank_auc(std::span<const double> scores, IsPositive is_positive) {
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) n_pos += is_positive(i) ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("AUC undefined: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // ranks are 1-based; a tie group at sorted positions [i, j) gets (i + j + 1) / 2
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k)
      if (is_positive(order[k])) pos_rank_sum += rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

}  // namespace detail

// Labels must be 0 or 1; class 1 is positive.
inline double auc_binary(std::span<const double> scores, std::span<const std::size_t> labels) {
  if (scores.size() != labels.size()) throw Error("auc: length mismatch");
  for (auto l : labels)
    if (l > 1) throw Error("auc: binary labels must be 0 or 1");
  return detail::rank_auc(scores, [&](std::size_t i) { return labels[i] == 1; });
}

// Binary: AUC of the class-1 probability. C > 2: unweighted mean of the
// one-vs-rest AUCs.
inline double auc(const std::vector<Vector>& probs, std::span<const std::size_t> labels,
                  std::size_t class_count) {
  if (probs.size() != labels.size()) throw Error("auc: length mismatch");
  if (class_count == 2) {
    Vector s(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) s[i] = probs[i].at(1);
    return auc_binary(s, labels);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < class_count; ++c) {
    Vector s(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) s[i] = probs[i].at(c);
    total += detail::rank_auc(s, [&](std::size_t i) { return labels[i] == c; });
  }
  return total / static_cast<double>(class_count);
}

struct EvalResult {
  double accuracy = 0.0;
  double auc = 0.0;
  std::size_t n = 0;
  std::vector<std::size_t> class_counts;      // true labels
  std::vector<std::size_t> predicted_counts;  // argmax predictions

  bool operator==(const EvalResult&) const = default;
};

inline EvalResult evaluate(const std::vector<Vector>& probs, std::span<const std::size_t> labels,
                           std::size_t class_count) {
  if (probs.empty()) throw Error("evaluate: no samples");
  EvalResult r;
  r.n = probs.size();
  r.class_counts.assign(class_count, 0);
  r.predicted_counts.assign(class_count, 0);
  std::vector<std::size_t> predicted(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    predicted[i] = argmax(probs[i]);
    ++r.predicted_counts.at(predicted[i]);
    ++r.class_counts.at(labels[i]);
  }
  r.accuracy = accuracy(predicted, labels);
  r.auc = auc(probs, labels, class_count);
  return r;
}

inline void to_json(nlohmann::json& j, const EvalResult& r) {
  j = {{"schema", 1},
       {"accuracy", r.accuracy},
       {"auc", r.auc},
       {"n", r.n},
       {"class_counts", r.class_counts},
       {"predicted_counts", r.predicted_counts}};
}

inline void from_json(const nlohmann::json& j, EvalResult& r) {
  r.accuracy = j.at("accuracy").get<double>();
  r.auc = j.at("auc").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.class_counts = j.at("class_counts").get<std::vector<std::size_t>>();
  r.predicted_counts = j.at("predicted_counts").get<std::vector<std::size_t>>();
}

}  // namespace protomil::metrics
