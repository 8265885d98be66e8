#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ussr/tensor.hpp"

namespace ussr {

/// Twice the number of (positive, negative) pairs ranked correctly, with
/// ties counted once; the AUC is this over 2 * P * N.
struct AucCounts {
  std::uint64_t twice_correct = 0;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;

  double auc() const {
    return static_cast<double>(twice_correct) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
  }
};

inline AucCounts auc_counts(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  AucCounts c;
  std::uint64_t negatives_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      const int y = labels[order[j]];
      if (y != 0 && y != 1) throw Error("labels must be 0 or 1");
      (y == 1 ? pos : neg) += 1;
      ++j;
    }
    c.twice_correct += 2 * pos * negatives_below + pos * neg;
    negatives_below += neg;
    c.positives += pos;
    c.negatives += neg;
    i = j;
  }
  return c;
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half.
inline double evaluate_auc(std::span<const double> scores, std::span<const int> labels) {
  for (double s : scores) {
    if (std::isnan(s)) throw Error("NaN score");
  }
  const AucCounts c = auc_counts(scores, labels);
  if (c.positives == 0 || c.negatives == 0) throw Error("undefined AUC: need both positive and negative labels");
  return c.auc();
}

}  // namespace ussr
