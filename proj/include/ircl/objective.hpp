#pragma once

#include <vector>

#include "ircl/encoder.hpp"

namespace ircl {

inline constexpr double kDefaultTemperature = 0.1;

/// Row indices of the normal and anomalous samples of a batch.
struct BatchLabels {
  std::vector<std::size_t> normal;
  std::vector<std::size_t> anomalous;

  std::size_t size() const { return normal.size() + anomalous.size(); }
  /// Throws InvalidArgument unless the two sets are disjoint and cover 0..batch-1.
  void validate(std::size_t batch) const;
  static BatchLabels from_binary(const std::vector<BinaryLabel>& labels);
};

struct LossResult {
  double loss = 0.0;
  RowMatrix<double> grad;  // same shape as the input
};

/// Mean of the normal rows; not re-normalized.
std::vector<double> normal_mean(const RowMatrix<double>& z, const BatchLabels& labels);

/// L = -(1/|N|) sum_{i in N} log softmax_i(z_j . zbar / tau), gradient taken
/// through zbar as well.
LossResult contrastive_loss(const RowMatrix<double>& z, const BatchLabels& labels,
                            double tau = kDefaultTemperature);

/// Mean negative log-softmax of the true class over an N x 2 logit batch.
LossResult cross_entropy_loss(const RowMatrix<double>& logits, const std::vector<BinaryLabel>& labels);

}  // namespace ircl
