#include "ircl/objective.hpp"

#include <algorithm>
#include <cmath>

namespace ircl {

void BatchLabels::validate(std::size_t batch) const {
  std::vector<char> seen(batch, 0);
  const auto mark = [&](const std::vector<std::size_t>& idx) {
    for (auto i : idx) {
      if (i >= batch) throw InvalidArgument("batch label index out of range");
      if (seen[i]) throw InvalidArgument("sample listed twice in batch labels");
      seen[i] = 1;
    }
  };
  mark(normal);
  mark(anomalous);
  if (size() != batch) throw InvalidArgument("batch labels do not cover the batch");
}

BatchLabels BatchLabels::from_binary(const std::vector<BinaryLabel>& labels) {
  BatchLabels out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == BinaryLabel::anomalous ? out.anomalous : out.normal).push_back(i);
  return out;
}

std::vector<double> normal_mean(const RowMatrix<double>& z, const BatchLabels& labels) {
  if (labels.normal.empty()) throw DegenerateBatch("batch has no normal samples");
  std::vector<double> mean(static_cast<std::size_t>(z.cols()), 0.0);
  for (auto i : labels.normal) {
    if (static_cast<Eigen::Index>(i) >= z.rows()) throw InvalidArgument("label index out of range");
    for (Eigen::Index c = 0; c < z.cols(); ++c) mean[static_cast<std::size_t>(c)] += z(static_cast<Eigen::Index>(i), c);
  }
  for (auto& m : mean) m /= static_cast<double>(labels.normal.size());
  return mean;
}

LossResult contrastive_loss(const RowMatrix<double>& z, const BatchLabels& labels, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  if (labels.normal.empty()) throw DegenerateBatch("batch has no normal samples");
  if (labels.anomalous.empty()) throw DegenerateBatch("batch has no anomalous samples");
  labels.validate(static_cast<std::size_t>(z.rows()));
  if (!z.allFinite()) throw NonFiniteValue("non-finite embedding in loss input");

  const auto mean = normal_mean(z, labels);
  // an owned copy: the product kernels then see the same alignment on every call
  const Eigen::RowVectorXd zbar =
      Eigen::Map<const Eigen::RowVectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  const Eigen::VectorXd s = (z * zbar.transpose()) / tau;

  const double smax = s.maxCoeff();
  const Eigen::VectorXd e = (s.array() - smax).exp().matrix();
  const double sum = e.sum();
  const double lse = smax + std::log(sum);

  const double n = static_cast<double>(labels.normal.size());
  double mean_normal = 0.0;
  for (auto i : labels.normal) mean_normal += s(static_cast<Eigen::Index>(i));
  mean_normal /= n;

  LossResult out;
  out.loss = lse - mean_normal;

  // dL/ds_j = softmax_j - [j in N]/n
  Eigen::VectorXd ds = e / sum;
  for (auto i : labels.normal) ds(static_cast<Eigen::Index>(i)) -= 1.0 / n;

  // s_j = z_j . zbar / tau, zbar = mean of normal rows.
  out.grad = ds * zbar / tau;
  const Eigen::RowVectorXd through_mean = (ds.transpose() * z) / (tau * n);
  for (auto i : labels.normal) out.grad.row(static_cast<Eigen::Index>(i)) += through_mean;
  if (!std::isfinite(out.loss) || !out.grad.allFinite())
    throw NonFiniteValue("contrastive loss is not finite");
  return out;
}

LossResult cross_entropy_loss(const RowMatrix<double>& logits, const std::vector<BinaryLabel>& labels) {
  if (logits.cols() != 2) throw InvalidArgument("cross-entropy expects two logits per sample");
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw InvalidArgument("one label per logit row required");
  if (labels.empty()) throw InvalidArgument("empty batch");
  if (!logits.allFinite()) throw NonFiniteValue("non-finite logits");

  const double inv_n = 1.0 / static_cast<double>(labels.size());
  LossResult out;
  out.grad.resize(logits.rows(), 2);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = std::max(logits(i, 0), logits(i, 1));
    const double e0 = std::exp(logits(i, 0) - m), e1 = std::exp(logits(i, 1) - m);
    const double lse = m + std::log(e0 + e1);
    const int y = labels[static_cast<std::size_t>(i)] == BinaryLabel::anomalous ? 1 : 0;
    out.loss += (lse - logits(i, y)) * inv_n;
    out.grad(i, 0) = (e0 / (e0 + e1) - (y == 0 ? 1.0 : 0.0)) * inv_n;
    out.grad(i, 1) = (e1 / (e0 + e1) - (y == 1 ? 1.0 : 0.0)) * inv_n;
  }
  return out;
}

}  // namespace ircl
