#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ircl/encoder.hpp"

namespace ircl {

inline constexpr std::size_t kDefaultK = 100;
inline constexpr double kDefaultDelta = 0.1;

struct NeighborSet {
  std::vector<std::size_t> indices;
  std::vector<double> distances;  // ascending
  double anomaly_fraction = 0.0;
};

/// Labelled source embeddings, stored in input order. Immutable once built.
class AnomalyIndex {
 public:
  /// Every embedding needs a binary label and a unit-norm vector of one
  /// common dimension.
  static AnomalyIndex build(std::span<const Embedding> embeddings);

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return labels_.size(); }
  std::span<const float> row(std::size_t i) const { return {rows_.data() + i * dim_, dim_}; }
  BinaryLabel label(std::size_t i) const { return labels_[i]; }
  const Embedding& entry(std::size_t i) const { return entries_[i]; }
  std::span<const Embedding> entries() const { return entries_; }
  double anomaly_fraction() const;

  /// Exact k nearest rows by Euclidean distance (full scan); ties go to the
  /// lower index.
  NeighborSet query(std::span<const float> z, std::size_t k) const;

 private:
  std::size_t dim_ = 0;
  std::vector<float> rows_;
  std::vector<BinaryLabel> labels_;
  std::vector<Embedding> entries_;
};

struct Prediction {
  std::uint64_t image_id = 0;
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  double score = 0.0;
  BinaryLabel verdict = BinaryLabel::normal;
  std::size_t k = kDefaultK;
  double delta = kDefaultDelta;
  std::optional<BinaryLabel> binary_label;  // ground truth, when known
  std::optional<FaultClass> fault_class;
};

/// anomalous iff score > delta.
BinaryLabel classify(double score, double delta);

std::vector<Prediction> predict_batch(const AnomalyIndex& index, std::span<const Embedding> targets,
                                      std::size_t k = kDefaultK, double delta = kDefaultDelta);

/// Recomputes verdicts for a new threshold; scores are untouched.
std::vector<Prediction> rethreshold(std::span<const Prediction> predictions, double delta);

struct ModuleVerdict {
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  std::size_t images = 0;
  std::size_t anomalous_images = 0;
  double score = 0.0;  // mean image score
  BinaryLabel verdict = BinaryLabel::normal;
  std::uint64_t representative_image = 0;  // highest-scoring image, lowest id on ties
  /// Anomalous if any labelled image of the module is anomalous.
  std::optional<BinaryLabel> binary_label;
};

/// anomalous iff at least half of the module's images are predicted anomalous.
ModuleVerdict aggregate_module(std::span<const Prediction> predictions);

/// Groups by (plant, module), ordered by that key.
std::vector<ModuleVerdict> aggregate_modules(std::span<const Prediction> predictions);

/// Per-class Lloyd k-means; `m` centroids in total, split across the classes
/// in proportion to their counts.
AnomalyIndex compress_index(const AnomalyIndex& index, std::size_t m, std::uint64_t seed);

// --- files ---------------------------------------------------------------

std::string encode_embeddings(std::span<const Embedding> embeddings);
std::vector<Embedding> decode_embeddings(const std::string& bytes);
void write_embeddings(const std::filesystem::path& file, std::span<const Embedding> embeddings);
std::vector<Embedding> read_embeddings(const std::filesystem::path& file);

/// CSV with header image_id,plant_id,module_id,score,verdict,k,delta,binary_label,fault_class.
void write_predictions(const std::filesystem::path& file, std::span<const Prediction> predictions);
std::vector<Prediction> read_predictions(const std::filesystem::path& file);

}  // namespace ircl
