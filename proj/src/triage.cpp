#include "ircl/triage.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "ircl/png_io.hpp"

namespace ircl {

using nlohmann::json;

std::string_view decision_name(Decision d) {
  switch (d) {
    case Decision::confirmed_anomalous: return "confirmed_anomalous";
    case Decision::confirmed_normal: return "confirmed_normal";
    case Decision::skipped: return "skipped";
  }
  return "skipped";
}

std::optional<Decision> parse_decision(std::string_view s) {
  if (s == "confirmed_anomalous") return Decision::confirmed_anomalous;
  if (s == "confirmed_normal") return Decision::confirmed_normal;
  if (s == "skipped") return Decision::skipped;
  return std::nullopt;
}

SessionRequest SessionRequest::from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("session request must be an object");
  SessionRequest r;
  try {
    r.source_store = j.at("source_store").get<std::string>();
    r.predictions = j.at("predictions").get<std::string>();
    if (j.contains("delta")) r.delta = j["delta"].get<double>();
    if (j.contains("k")) {
      const auto k = j["k"].get<long long>();
      if (k < 1) throw InvalidArgument("k must be at least 1");
      r.k = static_cast<std::size_t>(k);
    }
    if (j.contains("labels") && !j["labels"].is_null()) r.labels = j["labels"].get<std::string>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad session request: ") + e.what());
  }
  if (!(r.delta >= 0.0 && r.delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  return r;
}

json to_json(const QueueItem& item) {
  return json{{"module_id", item.module_id},
              {"score", item.score},
              {"representative_image_id", item.representative_image},
              {"verdict", label_name(item.verdict)},
              {"decision", item.decision ? json(decision_name(*item.decision)) : json("undecided")}};
}

json to_json(const Projection& p) {
  json j{{"delta", p.delta},
         {"total_modules", p.total_modules},
         {"modules_to_review", p.modules_to_review},
         {"estimated_review_time_s", p.review_time_s},
         {"baseline_time_s", p.baseline_time_s}};
  if (p.lost_anomalies) j["estimated_lost_anomalies"] = *p.lost_anomalies;
  if (p.savings) j["savings"] = to_json(*p.savings);
  return j;
}

// --- session -------------------------------------------------------------

TriageSession::TriageSession(std::string id, std::vector<Prediction> predictions, double delta,
                             std::size_t k, bool labelled, std::string created_at)
    : id_(std::move(id)),
      predictions_(std::move(predictions)),
      delta_(delta),
      k_(k),
      labelled_(labelled),
      created_at_(std::move(created_at)) {
  if (predictions_.empty()) throw InvalidArgument("session has no predictions");
  if (!(delta_ >= 0.0 && delta_ <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  const auto plant = predictions_.front().plant_id;
  for (const auto& p : predictions_)
    if (p.plant_id != plant) throw InvalidArgument("a triage session covers a single plant");
  modules_ = verdicts_at(delta_);
}

std::vector<ModuleVerdict> TriageSession::verdicts_at(double delta) const {
  return aggregate_modules(rethreshold(predictions_, delta));
}

QueuePage TriageSession::queue(std::size_t cursor, std::size_t limit) const {
  std::vector<QueueItem> all;
  all.reserve(modules_.size());
  for (const auto& m : modules_) {
    QueueItem item{m.module_id, m.score, m.representative_image, m.verdict, std::nullopt};
    if (auto it = decisions_.find(m.module_id); it != decisions_.end()) item.decision = it->second;
    all.push_back(item);
  }
  std::sort(all.begin(), all.end(), [](const QueueItem& a, const QueueItem& b) {
    if (a.decision.has_value() != b.decision.has_value()) return !a.decision.has_value();
    if (a.score != b.score) return a.score > b.score;
    return a.module_id < b.module_id;
  });
  QueuePage page;
  const std::size_t begin = std::min(cursor, all.size());
  const std::size_t end = std::min(all.size(), begin + limit);
  page.items.assign(all.begin() + static_cast<std::ptrdiff_t>(begin),
                    all.begin() + static_cast<std::ptrdiff_t>(end));
  if (end < all.size()) page.next_cursor = end;
  return page;
}

Projection TriageSession::projection() const {
  Projection p;
  p.delta = delta_;
  p.total_modules = modules_.size();
  p.baseline_time_s = static_cast<double>(p.total_modules) * kSecondsPerModule;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const auto& m : modules_) {
    const bool flagged = m.verdict == BinaryLabel::anomalous;
    if (flagged) ++p.modules_to_review;
    if (!labelled_) continue;
    if (m.binary_label == BinaryLabel::anomalous) (flagged ? tp : fn)++;
    else (flagged ? fp : tn)++;
  }
  p.review_time_s = static_cast<double>(p.modules_to_review) * kSecondsPerModule;
  if (labelled_) {
    const std::size_t normals = tn + fp, anomalous = tp + fn;
    const double tnr = normals ? static_cast<double>(tn) / static_cast<double>(normals) : 1.0;
    const double recall = anomalous ? static_cast<double>(tp) / static_cast<double>(anomalous) : 1.0;
    p.savings = savings_report(p.total_modules, anomalous, tnr, recall, kSecondsPerModule);
    p.lost_anomalies = p.savings->lost_anomalies;
  }
  return p;
}

Projection TriageSession::set_threshold(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  delta_ = delta;
  modules_ = verdicts_at(delta_);
  return projection();
}

bool TriageSession::has_module(std::uint32_t module_id) const {
  return std::any_of(modules_.begin(), modules_.end(),
                     [&](const ModuleVerdict& m) { return m.module_id == module_id; });
}

void TriageSession::record_decision(std::uint32_t module_id, Decision decision) {
  if (!has_module(module_id))
    throw NotFound("module " + std::to_string(module_id) + " is not part of session " + id_);
  decisions_[module_id] = decision;
}

json TriageSession::report() const {
  std::size_t flagged = 0, flagged_decided = 0;
  std::map<Decision, std::size_t> counts;
  for (const auto& m : modules_) {
    const bool decided = decisions_.contains(m.module_id);
    if (m.verdict == BinaryLabel::anomalous) {
      ++flagged;
      if (decided) ++flagged_decided;
    }
  }
  for (const auto& [module, d] : decisions_) ++counts[d];
  json j = to_json(projection());
  j["session_id"] = id_;
  j["k"] = k_;
  j["labelled"] = labelled_;
  j["created_at"] = created_at_;
  j["progress"] = json{{"total_modules", modules_.size()},
                       {"decided", decisions_.size()},
                       {"flagged", flagged},
                       {"flagged_decided", flagged_decided},
                       {"confirmed_anomalous", counts[Decision::confirmed_anomalous]},
                       {"confirmed_normal", counts[Decision::confirmed_normal]},
                       {"skipped", counts[Decision::skipped]}};
  j["review_time_spent_s"] = static_cast<double>(decisions_.size()) * kSecondsPerModule;
  return j;
}

// --- service -------------------------------------------------------------

namespace {

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string new_session_id() {
  static std::mutex m;
  static std::mt19937_64 gen{std::random_device{}()};
  std::lock_guard lock(m);
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << gen();
  return out.str();
}

json prediction_json(const Prediction& p) {
  json j{{"image_id", p.image_id}, {"plant_id", p.plant_id}, {"module_id", p.module_id}, {"score", p.score}};
  if (p.binary_label) j["binary_label"] = label_name(*p.binary_label);
  if (p.fault_class) j["fault_class"] = fault_name(*p.fault_class);
  return j;
}

Prediction prediction_from_json(const json& j, std::size_t k, double delta) {
  Prediction p;
  p.image_id = j.at("image_id").get<std::uint64_t>();
  p.plant_id = j.at("plant_id").get<std::uint16_t>();
  p.module_id = j.at("module_id").get<std::uint32_t>();
  p.score = j.at("score").get<double>();
  p.k = k;
  p.delta = delta;
  p.verdict = classify(p.score, delta);
  if (j.contains("binary_label")) p.binary_label = parse_binary_label(j["binary_label"].get<std::string>());
  if (j.contains("fault_class")) p.fault_class = parse_fault_class(j["fault_class"].get<std::string>());
  return p;
}

bool is_embedding_store(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + file.string());
  char magic[5] = {};
  in.read(magic, 5);
  return in.gcount() == 5 && std::memcmp(magic, "IREMB", 5) == 0;
}

}  // namespace

TriageService::TriageService(std::filesystem::path data_root, std::filesystem::path state_dir)
    : data_root_(std::move(data_root)), state_dir_(std::move(state_dir)) {
  std::filesystem::create_directories(state_dir_ / "sessions");
  std::vector<std::filesystem::path> logs;
  for (const auto& e : std::filesystem::directory_iterator(state_dir_ / "sessions"))
    if (e.path().extension() == ".jsonl") logs.push_back(e.path());
  std::sort(logs.begin(), logs.end());
  for (const auto& f : logs) replay(f);
}

std::filesystem::path TriageService::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : data_root_ / p;
}

std::filesystem::path TriageService::log_path(const std::string& id) const {
  return state_dir_ / "sessions" / (id + ".jsonl");
}

void TriageService::append(const std::string& id, const json& record) const {
  const std::string line = record.dump() + '\n';
  const auto file = log_path(id);
  const int fd = ::open(file.c_str(), O_WRONLY | O_APPEND);
  if (fd < 0) throw Error("cannot open session log " + file.string());
  std::size_t done = 0;
  while (done < line.size()) {
    const auto n = ::write(fd, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw Error("cannot append to session log " + file.string());
    }
    done += static_cast<std::size_t>(n);
  }
  const int rc = ::fsync(fd);
  ::close(fd);
  if (rc != 0) throw Error("cannot sync session log " + file.string());
}

void TriageService::replay(const std::filesystem::path& file) {
  const std::string bytes = detail::read_file(file);
  std::shared_ptr<Entry> entry;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) break;  // unterminated tail: never acknowledged
    json rec;
    try {
      rec = json::parse(bytes.substr(pos, nl - pos));
    } catch (const json::exception&) {
      break;
    }
    const auto type = rec.value("type", "");
    if (type == "create") {
      const auto k = rec.at("k").get<std::size_t>();
      const auto delta = rec.at("delta").get<double>();
      std::vector<Prediction> preds;
      for (const auto& p : rec.at("predictions")) preds.push_back(prediction_from_json(p, k, delta));
      entry = std::make_shared<Entry>();
      entry->session = std::make_unique<TriageSession>(rec.at("session_id").get<std::string>(), std::move(preds),
                                                       delta, k, rec.at("labelled").get<bool>(),
                                                       rec.at("created_at").get<std::string>());
    } else if (!entry) {
      throw FormatError(file.string() + ": session log does not start with a create record");
    } else if (type == "threshold") {
      entry->session->set_threshold(rec.at("delta").get<double>());
    } else if (type == "decision") {
      const auto d = parse_decision(rec.at("verdict").get<std::string>());
      if (!d) throw FormatError(file.string() + ": bad decision record");
      entry->session->record_decision(rec.at("module_id").get<std::uint32_t>(), *d);
    } else {
      throw FormatError(file.string() + ": unknown record type '" + type + "'");
    }
    pos = nl + 1;
  }
  // Cut a torn tail so that later appends start on a fresh line.
  if (pos < bytes.size()) std::filesystem::resize_file(file, pos);
  if (entry) sessions_[entry->session->id()] = entry;
}

std::string TriageService::create_session(const SessionRequest& request) {
  if (!(request.delta >= 0.0 && request.delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  const auto predictions_file = resolve(request.predictions);
  std::vector<Prediction> preds;
  std::size_t k = request.k;
  try {
    if (is_embedding_store(predictions_file)) {
      if (request.source_store.empty())
        throw InvalidArgument("scoring target embeddings needs a source_store");
      const auto index = AnomalyIndex::build(read_embeddings(resolve(request.source_store)));
      preds = predict_batch(index, read_embeddings(predictions_file), request.k, request.delta);
    } else {
      if (!request.source_store.empty()) AnomalyIndex::build(read_embeddings(resolve(request.source_store)));
      preds = rethreshold(read_predictions(predictions_file), request.delta);
      if (!preds.empty()) k = preds.front().k;
    }
  } catch (const FormatError& e) {
    throw InvalidArgument(e.what());
  } catch (const NotFound& e) {
    throw InvalidArgument(e.what());
  }
  if (preds.empty()) throw InvalidArgument("predictions file is empty");

  const bool labelled = request.labels.has_value();
  if (labelled) {
    std::map<std::uint64_t, std::pair<std::optional<BinaryLabel>, std::optional<FaultClass>>> truth;
    try {
      for (const auto& r : read_manifest(resolve(*request.labels))) truth[r.image_id] = {r.binary_label, r.fault_class};
    } catch (const Error& e) {
      throw InvalidArgument(std::string("labels: ") + e.what());
    }
    for (auto& p : preds) {
      const auto it = truth.find(p.image_id);
      if (it == truth.end() || !it->second.first)
        throw InvalidArgument("labels manifest has no label for image " + std::to_string(p.image_id));
      p.binary_label = it->second.first;
      p.fault_class = it->second.second;
    }
  } else {
    for (auto& p : preds) {
      p.binary_label.reset();
      p.fault_class.reset();
    }
  }

  auto entry = std::make_shared<Entry>();
  entry->session = std::make_unique<TriageSession>(new_session_id(), std::move(preds), request.delta, k,
                                                   labelled, now_utc());
  const auto& s = *entry->session;
  json create{{"type", "create"},
              {"session_id", s.id()},
              {"created_at", s.created_at()},
              {"delta", s.delta()},
              {"k", s.k()},
              {"labelled", labelled},
              {"source_store", request.source_store.string()},
              {"predictions_file", request.predictions.string()}};
  json preds_json = json::array();
  for (const auto& p : s.predictions()) preds_json.push_back(prediction_json(p));
  create["predictions"] = std::move(preds_json);
  detail::write_file_atomic(log_path(s.id()), create.dump() + '\n');

  std::unique_lock lock(sessions_mutex_);
  sessions_[s.id()] = entry;
  return s.id();
}

std::shared_ptr<TriageService::Entry> TriageService::find(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("no session " + id);
  return it->second;
}

QueuePage TriageService::queue(const std::string& id, std::size_t cursor, std::size_t limit) const {
  const auto e = find(id);
  std::lock_guard lock(e->mutex);
  return e->session->queue(cursor, limit);
}

Projection TriageService::set_threshold(const std::string& id, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  const auto e = find(id);
  std::lock_guard lock(e->mutex);
  append(id, json{{"type", "threshold"}, {"delta", delta}});
  return e->session->set_threshold(delta);
}

void TriageService::record_decision(const std::string& id, std::uint32_t module_id, Decision decision) {
  const auto e = find(id);
  std::lock_guard lock(e->mutex);
  if (!e->session->has_module(module_id))
    throw NotFound("module " + std::to_string(module_id) + " is not part of session " + id);
  append(id, json{{"type", "decision"}, {"module_id", module_id}, {"verdict", decision_name(decision)}});
  e->session->record_decision(module_id, decision);
}

json TriageService::report(const std::string& id) const {
  const auto e = find(id);
  std::lock_guard lock(e->mutex);
  return e->session->report();
}

std::vector<std::string> TriageService::session_ids() const {
  std::shared_lock lock(sessions_mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, e] : sessions_) ids.push_back(id);
  return ids;
}

const std::map<std::uint64_t, ManifestRecord>& TriageService::manifest() const {
  std::call_once(manifest_once_, [&] {
    const auto file = data_root_ / "manifest.jsonl";
    if (!std::filesystem::exists(file)) return;
    for (auto& r : read_manifest(file)) manifest_[r.image_id] = std::move(r);
  });
  return manifest_;
}

std::string render_preview(const IRImage& image) { return png::encode_gray8(normalized_view(image)); }

std::string TriageService::image_preview(std::uint64_t image_id) const {
  const auto& records = manifest();
  const auto it = records.find(image_id);
  if (it == records.end()) throw NotFound("no image " + std::to_string(image_id));
  return render_preview(load_image(it->second, data_root_));
}

}  // namespace ircl
