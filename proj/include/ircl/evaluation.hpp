#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ircl/anomaly_index.hpp"

namespace ircl {

struct ScoredSample {
  double score = 0.0;
  BinaryLabel label = BinaryLabel::normal;
  std::optional<FaultClass> fault_class;
  std::uint32_t module_id = 0;
};

/// Labelled predictions only; unlabelled entries are dropped.
std::vector<ScoredSample> scored_samples(std::span<const Prediction> predictions);
std::vector<ScoredSample> scored_samples(std::span<const ModuleVerdict> modules);

struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  double tpr() const;  // NaN when undefined
  double fpr() const;
  double tnr() const;
  double fnr() const;
  double precision() const;
  double recall() const { return tpr(); }
};

/// Verdict anomalous iff score > delta.
ConfusionMatrix confusion(std::span<const ScoredSample> samples, double delta);

/// Trapezoidal area under the ROC curve over all distinct thresholds.
double auroc(std::span<const ScoredSample> samples);

/// sum (R_i - R_{i-1}) P_i over distinct thresholds, descending; ties enter together.
double average_precision(std::span<const ScoredSample> samples);

/// sqrt(TPR * (1 - FPR)).
double g_mean(std::span<const ScoredSample> samples, double delta);

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;  // FPR for ROC, recall for PR
  double y = 0.0;  // TPR for ROC, precision for PR
};

std::vector<CurvePoint> roc_curve(std::span<const ScoredSample> samples);
std::vector<CurvePoint> pr_curve(std::span<const ScoredSample> samples);

/// Fraction of each fault class predicted normal; nullopt for absent classes.
struct FaultErrorTable {
  std::array<std::optional<double>, kNumFaultClasses> per_class{};
  std::array<std::size_t, kNumFaultClasses> counts{};
  std::optional<double> all;
};

FaultErrorTable per_fault_errors(std::span<const ScoredSample> samples, double delta);

// --- model selection -----------------------------------------------------

struct ValidationEntry {
  std::uint64_t step = 0;
  double auroc = 0.0;
  double ap = 0.0;
};

enum class SelectionCriterion { auroc, ap };

/// Step of the best entry; the earliest wins ties.
std::uint64_t select_model(std::span<const ValidationEntry> entries, SelectionCriterion criterion);

// --- savings -------------------------------------------------------------

struct SavingsReport {
  std::size_t total_modules = 0;
  std::size_t anomalous_modules = 0;
  double tnr = 0.0;
  double anomaly_recall = 0.0;
  double seconds_per_module = 3.0;
  std::size_t kept_normals = 0;
  std::size_t found_anomalies = 0;
  std::size_t modules_to_review = 0;
  std::size_t lost_anomalies = 0;
  double review_time_s = 0.0;
  double baseline_time_s = 0.0;
};

SavingsReport savings_report(std::size_t total_modules, std::size_t anomalous_modules, double tnr,
                             double anomaly_recall, double seconds_per_module = 3.0);

nlohmann::json to_json(const SavingsReport& report);

// --- report --------------------------------------------------------------

struct LevelMetrics {
  std::size_t samples = 0;
  std::size_t anomalous = 0;
  ConfusionMatrix confusion;
  std::optional<double> auroc;  // absent for single-class data
  std::optional<double> ap;
  std::optional<double> g_mean;
  FaultErrorTable fault_errors;
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;
};

struct EvaluationReport {
  double delta = kDefaultDelta;
  std::size_t k = kDefaultK;
  LevelMetrics image;
  LevelMetrics module;
  SavingsReport savings;
};

/// Image-level and module-level metrics at `delta`. With `require_both_classes`
/// a single-class input raises UndefinedMetric instead of omitting AUROC/AP.
EvaluationReport evaluate(std::span<const Prediction> predictions, double delta,
                          bool require_both_classes = true, double seconds_per_module = 3.0);

nlohmann::json to_json(const EvaluationReport& report);
std::string render_text(const EvaluationReport& report);

}  // namespace ircl
