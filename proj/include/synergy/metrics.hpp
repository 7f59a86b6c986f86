#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "synergy/common.hpp"

namespace synergy {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
  std::size_t negatives() const { return labels.size() - positives(); }

  void validate() const {
    if (scores.size() != labels.size()) throw ShapeError("scored set: length mismatch");
    for (double s : scores) {
      if (!std::isfinite(s)) throw MetricUndefined("scored set: non-finite score");
    }
    for (int y : labels) {
      if (y != 0 && y != 1) throw MetricUndefined("scored set: labels must be 0/1");
    }
  }
};

namespace detail {
// Indices sorted by descending score; ties keep input order (the metrics
// below treat tied scores as one block, so tie order never matters).
inline std::vector<std::size_t> order_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}
}  // namespace detail

// Mann-Whitney estimate: (concordant pairs + 0.5 * tied pairs) / (P * N).
inline double auroc(const ScoredSet& set) {
  set.validate();
  const std::size_t P = set.positives(), N = set.negatives();
  if (P == 0 || N == 0) throw MetricUndefined("auroc needs both labels");
  const auto idx = detail::order_desc(set.scores);
  // Walk from the highest score; negatives already passed rank above the
  // current block, so count negatives *below* by subtraction.
  double concordant = 0.0, tied = 0.0;
  std::size_t neg_seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, bp = 0, bn = 0;
    while (j < idx.size() && set.scores[idx[j]] == set.scores[idx[i]]) {
      (set.labels[idx[j]] == 1 ? bp : bn)++;
      ++j;
    }
    const std::size_t neg_below = N - neg_seen - bn;
    concordant += static_cast<double>(bp) * static_cast<double>(neg_below);
    tied += static_cast<double>(bp) * static_cast<double>(bn);
    neg_seen += bn;
    i = j;
  }
  return (concordant + 0.5 * tied) / (static_cast<double>(P) * static_cast<double>(N));
}

// Average precision. Tied scores form one block whose positives all take the
// precision measured at the end of the block.
inline double auprc(const ScoredSet& set) {
  set.validate();
  const std::size_t P = set.positives();
  if (P == 0) throw MetricUndefined("auprc needs at least one positive");
  const auto idx = detail::order_desc(set.scores);
  double ap = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, bp = 0, bn = 0;
    while (j < idx.size() && set.scores[idx[j]] == set.scores[idx[i]]) {
      (set.labels[idx[j]] == 1 ? bp : bn)++;
      ++j;
    }
    tp += bp;
    fp += bn;
    if (bp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      ap += precision * static_cast<double>(bp);
    }
    i = j;
  }
  // Each term is at most its block size, so the quotient stays <= 1.
  return ap / static_cast<double>(P);
}

inline double auroc(std::vector<double> scores, std::vector<int> labels) {
  return auroc(ScoredSet{std::move(scores), std::move(labels)});
}

inline double auprc(std::vector<double> scores, std::vector<int> labels) {
  return auprc(ScoredSet{std::move(scores), std::move(labels)});
}

}  // namespace synergy
