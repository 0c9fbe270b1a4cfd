#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "ircl/anomaly_index.hpp"
#include "ircl/dataset.hpp"
#include "ircl/evaluation.hpp"

namespace ircl {

enum class Decision { confirmed_anomalous, confirmed_normal, skipped };

std::string_view decision_name(Decision d);
std::optional<Decision> parse_decision(std::string_view s);

struct SessionRequest {
  std::filesystem::path source_store;  // embedding store of the labelled source
  std::filesystem::path predictions;   // predictions CSV or target embedding store
  double delta = kDefaultDelta;
  std::size_t k = kDefaultK;
  std::optional<std::filesystem::path> labels;  // manifest with ground truth

  static SessionRequest from_json(const nlohmann::json& j);
};

struct QueueItem {
  std::uint32_t module_id = 0;
  double score = 0.0;
  std::uint64_t representative_image = 0;
  BinaryLabel verdict = BinaryLabel::normal;
  std::optional<Decision> decision;
};

nlohmann::json to_json(const QueueItem& item);

struct QueuePage {
  std::vector<QueueItem> items;
  std::optional<std::size_t> next_cursor;
};

/// Review effort at one threshold. Lost anomalies need attached labels.
struct Projection {
  double delta = kDefaultDelta;
  std::size_t total_modules = 0;
  std::size_t modules_to_review = 0;
  double review_time_s = 0.0;
  double baseline_time_s = 0.0;
  std::optional<std::size_t> lost_anomalies;
  std::optional<SavingsReport> savings;  // labelled sessions only
};

nlohmann::json to_json(const Projection& p);

/// Module-level review of one plant's predictions. Scores are fixed at
/// creation; only the threshold and the decisions change.
class TriageSession {
 public:
  TriageSession(std::string id, std::vector<Prediction> predictions, double delta, std::size_t k,
                bool labelled, std::string created_at);

  const std::string& id() const { return id_; }
  double delta() const { return delta_; }
  std::size_t k() const { return k_; }
  bool labelled() const { return labelled_; }
  const std::string& created_at() const { return created_at_; }
  const std::vector<Prediction>& predictions() const { return predictions_; }
  std::size_t module_count() const { return modules_.size(); }
  bool has_module(std::uint32_t module_id) const;

  /// Undecided modules first, then score descending, then module id ascending.
  QueuePage queue(std::size_t cursor, std::size_t limit) const;
  Projection projection() const;
  Projection set_threshold(double delta);
  void record_decision(std::uint32_t module_id, Decision decision);
  const std::map<std::uint32_t, Decision>& decisions() const { return decisions_; }
  nlohmann::json report() const;

  static constexpr double kSecondsPerModule = 3.0;

 private:
  std::vector<ModuleVerdict> verdicts_at(double delta) const;

  std::string id_;
  std::vector<Prediction> predictions_;
  std::vector<ModuleVerdict> modules_;  // at delta_, ordered by module id
  double delta_;
  std::size_t k_;
  bool labelled_;
  std::string created_at_;
  std::map<std::uint32_t, Decision> decisions_;
};

/// Owns the sessions and their append-only logs under `state_dir/sessions`.
/// Every mutation is on disk before the call returns; construction replays
/// existing logs. Relative paths in requests resolve against `data_root`,
/// whose manifest.jsonl backs image previews.
class TriageService {
 public:
  TriageService(std::filesystem::path data_root, std::filesystem::path state_dir);

  std::string create_session(const SessionRequest& request);
  QueuePage queue(const std::string& id, std::size_t cursor, std::size_t limit) const;
  Projection set_threshold(const std::string& id, double delta);
  void record_decision(const std::string& id, std::uint32_t module_id, Decision decision);
  nlohmann::json report(const std::string& id) const;
  /// 8-bit grayscale PNG of the upright, min-max normalized image.
  std::string image_preview(std::uint64_t image_id) const;

  std::vector<std::string> session_ids() const;

 private:
  struct Entry {
    std::unique_ptr<TriageSession> session;
    mutable std::mutex mutex;
  };

  std::shared_ptr<Entry> find(const std::string& id) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::filesystem::path log_path(const std::string& id) const;
  void append(const std::string& id, const nlohmann::json& record) const;
  void replay(const std::filesystem::path& file);
  const std::map<std::uint64_t, ManifestRecord>& manifest() const;

  std::filesystem::path data_root_;
  std::filesystem::path state_dir_;
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  mutable std::once_flag manifest_once_;
  mutable std::map<std::uint64_t, ManifestRecord> manifest_;
};

/// Renders the preview bytes for an already-loaded image.
std::string render_preview(const IRImage& image);

}  // namespace ircl
