#include "ircl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace ircl {

using nlohmann::json;

std::vector<ScoredSample> scored_samples(std::span<const Prediction> predictions) {
  std::vector<ScoredSample> out;
  for (const auto& p : predictions)
    if (p.binary_label) out.push_back({p.score, *p.binary_label, p.fault_class, p.module_id});
  return out;
}

std::vector<ScoredSample> scored_samples(std::span<const ModuleVerdict> modules) {
  std::vector<ScoredSample> out;
  for (const auto& m : modules)
    if (m.binary_label) out.push_back({m.score, *m.binary_label, std::nullopt, m.module_id});
  return out;
}

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double ratio(std::size_t a, std::size_t b) {
  return b == 0 ? kNaN : static_cast<double>(a) / static_cast<double>(b);
}

struct ClassCounts {
  std::size_t positives = 0, negatives = 0;
};

ClassCounts count_classes(std::span<const ScoredSample> samples) {
  ClassCounts c;
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw NonFiniteValue("non-finite score");
    (s.label == BinaryLabel::anomalous ? c.positives : c.negatives)++;
  }
  return c;
}

// Cumulative (fp, tp) after each group of equal scores, scanning from the top.
struct Step {
  double threshold;
  std::size_t fp, tp;
};

std::vector<Step> threshold_steps(std::span<const ScoredSample> samples) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return samples[a].score > samples[b].score; });
  std::vector<Step> steps;
  std::size_t fp = 0, tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = samples[order[i]].score;
    while (i < order.size() && samples[order[i]].score == t) {
      (samples[order[i]].label == BinaryLabel::anomalous ? tp : fp)++;
      ++i;
    }
    steps.push_back({t, fp, tp});
  }
  return steps;
}

}  // namespace

double ConfusionMatrix::tpr() const { return ratio(tp, tp + fn); }
double ConfusionMatrix::fpr() const { return ratio(fp, fp + tn); }
double ConfusionMatrix::tnr() const { return ratio(tn, tn + fp); }
double ConfusionMatrix::fnr() const { return ratio(fn, fn + tp); }
double ConfusionMatrix::precision() const { return ratio(tp, tp + fp); }

ConfusionMatrix confusion(std::span<const ScoredSample> samples, double delta) {
  ConfusionMatrix m;
  for (const auto& s : samples) {
    const bool flagged = classify(s.score, delta) == BinaryLabel::anomalous;
    if (s.label == BinaryLabel::anomalous) (flagged ? m.tp : m.fn)++;
    else (flagged ? m.fp : m.tn)++;
  }
  return m;
}

double auroc(std::span<const ScoredSample> samples) {
  const auto c = count_classes(samples);
  if (c.positives == 0 || c.negatives == 0)
    throw UndefinedMetric("AUROC is undefined without both normal and anomalous samples");
  const double p = static_cast<double>(c.positives), n = static_cast<double>(c.negatives);
  double area = 0.0, x0 = 0.0, y0 = 0.0;
  for (const auto& s : threshold_steps(samples)) {
    const double x1 = static_cast<double>(s.fp) / n, y1 = static_cast<double>(s.tp) / p;
    area += (x1 - x0) * (y0 + y1) / 2.0;
    x0 = x1;
    y0 = y1;
  }
  return area;
}

double average_precision(std::span<const ScoredSample> samples) {
  const auto c = count_classes(samples);
  if (c.positives == 0) throw UndefinedMetric("average precision is undefined without anomalous samples");
  const double p = static_cast<double>(c.positives);
  double ap = 0.0, r0 = 0.0;
  for (const auto& s : threshold_steps(samples)) {
    const double r1 = static_cast<double>(s.tp) / p;
    const double prec = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
    ap += (r1 - r0) * prec;
    r0 = r1;
  }
  return ap;
}

double g_mean(std::span<const ScoredSample> samples, double delta) {
  const auto c = count_classes(samples);
  if (c.positives == 0 || c.negatives == 0)
    throw UndefinedMetric("G-Mean is undefined without both normal and anomalous samples");
  const auto m = confusion(samples, delta);
  return std::sqrt(m.tpr() * (1.0 - m.fpr()));
}

std::vector<CurvePoint> roc_curve(std::span<const ScoredSample> samples) {
  const auto c = count_classes(samples);
  if (c.positives == 0 || c.negatives == 0)
    throw UndefinedMetric("ROC curve is undefined without both normal and anomalous samples");
  std::vector<CurvePoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  for (const auto& s : threshold_steps(samples))
    out.push_back({s.threshold, static_cast<double>(s.fp) / static_cast<double>(c.negatives),
                   static_cast<double>(s.tp) / static_cast<double>(c.positives)});
  return out;
}

std::vector<CurvePoint> pr_curve(std::span<const ScoredSample> samples) {
  const auto c = count_classes(samples);
  if (c.positives == 0) throw UndefinedMetric("PR curve is undefined without anomalous samples");
  std::vector<CurvePoint> out;
  for (const auto& s : threshold_steps(samples))
    out.push_back({s.threshold, static_cast<double>(s.tp) / static_cast<double>(c.positives),
                   static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp)});
  return out;
}

namespace {

struct Outcome {
  BinaryLabel label;
  std::optional<FaultClass> fault;
  bool flagged;
};

FaultErrorTable fault_errors(std::span<const Outcome> outcomes) {
  FaultErrorTable t;
  std::array<std::size_t, kNumFaultClasses> missed{};
  std::size_t anomalies = 0, missed_all = 0;
  for (const auto& o : outcomes) {
    if (o.label != BinaryLabel::anomalous) continue;
    ++anomalies;
    if (!o.flagged) ++missed_all;
    if (!o.fault) continue;
    const auto i = fault_index(*o.fault);
    ++t.counts[i];
    if (!o.flagged) ++missed[i];
  }
  for (std::size_t i = 0; i < kNumFaultClasses; ++i)
    if (t.counts[i] > 0) t.per_class[i] = ratio(missed[i], t.counts[i]);
  if (anomalies > 0) t.all = ratio(missed_all, anomalies);
  return t;
}

}  // namespace

FaultErrorTable per_fault_errors(std::span<const ScoredSample> samples, double delta) {
  std::vector<Outcome> o;
  o.reserve(samples.size());
  for (const auto& s : samples)
    o.push_back({s.label, s.fault_class, classify(s.score, delta) == BinaryLabel::anomalous});
  return fault_errors(o);
}

std::uint64_t select_model(std::span<const ValidationEntry> entries, SelectionCriterion criterion) {
  if (entries.empty()) throw InvalidArgument("training log has no validation entries");
  const auto value = [&](const ValidationEntry& e) {
    return criterion == SelectionCriterion::auroc ? e.auroc : e.ap;
  };
  const ValidationEntry* best = &entries.front();
  for (const auto& e : entries)
    if (value(e) > value(*best)) best = &e;
  return best->step;
}

SavingsReport savings_report(std::size_t total_modules, std::size_t anomalous_modules, double tnr,
                             double anomaly_recall, double seconds_per_module) {
  if (anomalous_modules > total_modules)
    throw InvalidArgument("more anomalous modules than modules");
  if (!(tnr >= 0.0 && tnr <= 1.0) || !(anomaly_recall >= 0.0 && anomaly_recall <= 1.0))
    throw InvalidArgument("rates must lie in [0, 1]");
  if (!(seconds_per_module >= 0.0)) throw InvalidArgument("seconds per module must be non-negative");
  SavingsReport r;
  r.total_modules = total_modules;
  r.anomalous_modules = anomalous_modules;
  r.tnr = tnr;
  r.anomaly_recall = anomaly_recall;
  r.seconds_per_module = seconds_per_module;
  const std::size_t normals = total_modules - anomalous_modules;
  r.kept_normals = std::min(normals, static_cast<std::size_t>(std::llround(static_cast<double>(normals) * (1.0 - tnr))));
  r.found_anomalies = std::min(
      anomalous_modules, static_cast<std::size_t>(std::llround(static_cast<double>(anomalous_modules) * anomaly_recall)));
  r.lost_anomalies = anomalous_modules - r.found_anomalies;
  r.modules_to_review = r.kept_normals + r.found_anomalies;
  r.review_time_s = static_cast<double>(r.modules_to_review) * seconds_per_module;
  r.baseline_time_s = static_cast<double>(total_modules) * seconds_per_module;
  return r;
}

json to_json(const SavingsReport& r) {
  return json{{"total_modules", r.total_modules},
              {"anomalous_modules", r.anomalous_modules},
              {"tnr", r.tnr},
              {"anomaly_recall", r.anomaly_recall},
              {"seconds_per_module", r.seconds_per_module},
              {"kept_normals", r.kept_normals},
              {"found_anomalies", r.found_anomalies},
              {"modules_to_review", r.modules_to_review},
              {"lost_anomalies", r.lost_anomalies},
              {"review_time_s", r.review_time_s},
              {"baseline_time_s", r.baseline_time_s}};
}

// --- report --------------------------------------------------------------

namespace {

LevelMetrics level_metrics(std::span<const ScoredSample> samples, std::span<const Outcome> outcomes) {
  LevelMetrics m;
  m.samples = samples.size();
  for (const auto& o : outcomes) {
    if (o.label == BinaryLabel::anomalous) {
      ++m.anomalous;
      (o.flagged ? m.confusion.tp : m.confusion.fn)++;
    } else {
      (o.flagged ? m.confusion.fp : m.confusion.tn)++;
    }
  }
  m.fault_errors = fault_errors(outcomes);
  if (m.anomalous > 0 && m.anomalous < m.samples) {
    m.auroc = auroc(samples);
    m.ap = average_precision(samples);
    m.g_mean = std::sqrt(m.confusion.tpr() * (1.0 - m.confusion.fpr()));
    m.roc = roc_curve(samples);
    m.pr = pr_curve(samples);
  }
  return m;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json curve_json(const std::vector<CurvePoint>& points) {
  json arr = json::array();
  for (const auto& p : points) arr.push_back({number_or_null(p.threshold), p.x, p.y});
  return arr;
}

json fault_json(const FaultErrorTable& t) {
  json j = json::object();
  for (auto c : kAllFaultClasses) {
    const auto i = fault_index(c);
    j[std::string(fault_name(c))] =
        t.per_class[i] ? json{{"count", t.counts[i]}, {"missed", *t.per_class[i]}} : json("--");
  }
  j["All"] = t.all ? json(*t.all) : json("--");
  return j;
}

json level_json(const LevelMetrics& m) {
  const auto& c = m.confusion;
  return json{{"samples", m.samples},
              {"anomalous", m.anomalous},
              {"confusion", {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}},
              {"tpr", number_or_null(c.tpr())},
              {"fpr", number_or_null(c.fpr())},
              {"tnr", number_or_null(c.tnr())},
              {"fnr", number_or_null(c.fnr())},
              {"precision", number_or_null(c.precision())},
              {"auroc", optional_number(m.auroc)},
              {"ap", optional_number(m.ap)},
              {"g_mean", optional_number(m.g_mean)},
              {"fault_errors", fault_json(m.fault_errors)},
              {"roc", curve_json(m.roc)},
              {"pr", curve_json(m.pr)}};
}

std::string pct(double v) {
  if (!std::isfinite(v)) return "--";
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << 100.0 * v;
  return out.str();
}

std::string pct(const std::optional<double>& v) { return v ? pct(*v) : "--"; }

}  // namespace

EvaluationReport evaluate(std::span<const Prediction> predictions, double delta,
                          bool require_both_classes, double seconds_per_module) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in [0, 1]");
  const auto rethresholded = rethreshold(predictions, delta);
  std::vector<Prediction> labelled;
  for (const auto& p : rethresholded)
    if (p.binary_label) labelled.push_back(p);
  if (labelled.empty()) throw UndefinedMetric("no labelled predictions to evaluate");

  EvaluationReport r;
  r.delta = delta;
  r.k = labelled.front().k;

  const auto image_samples = scored_samples(labelled);
  const auto c = count_classes(image_samples);
  if (require_both_classes && (c.positives == 0 || c.negatives == 0))
    throw UndefinedMetric(std::string("AUROC is undefined: predictions contain only ") +
                          (c.positives == 0 ? "normal" : "anomalous") + " samples");
  std::vector<Outcome> image_outcomes;
  for (const auto& p : labelled)
    image_outcomes.push_back({*p.binary_label, p.fault_class, p.verdict == BinaryLabel::anomalous});
  r.image = level_metrics(image_samples, image_outcomes);

  const auto modules = aggregate_modules(labelled);
  std::vector<ScoredSample> module_samples;
  std::vector<Outcome> module_outcomes;
  for (const auto& m : modules) {
    std::optional<FaultClass> fault;
    for (const auto& p : labelled)
      if (p.plant_id == m.plant_id && p.module_id == m.module_id && p.fault_class) {
        fault = p.fault_class;
        break;
      }
    module_samples.push_back({m.score, *m.binary_label, fault, m.module_id});
    module_outcomes.push_back({*m.binary_label, fault, m.verdict == BinaryLabel::anomalous});
  }
  r.module = level_metrics(module_samples, module_outcomes);

  const auto& mc = r.module.confusion;
  const double tnr = mc.tn + mc.fp > 0 ? mc.tnr() : 1.0;
  const double recall = mc.tp + mc.fn > 0 ? mc.tpr() : 1.0;
  r.savings = savings_report(r.module.samples, r.module.anomalous, tnr, recall, seconds_per_module);
  return r;
}

json to_json(const EvaluationReport& r) {
  return json{{"delta", r.delta},
              {"k", r.k},
              {"image", level_json(r.image)},
              {"module", level_json(r.module)},
              {"savings", to_json(r.savings)}};
}

std::string render_text(const EvaluationReport& r) {
  std::ostringstream out;
  out << "k = " << r.k << ", delta = " << r.delta << "\n\n";
  out << std::left << std::setw(8) << "level" << std::right << std::setw(8) << "n" << std::setw(8)
      << "anom" << std::setw(8) << "AUROC" << std::setw(8) << "AP" << std::setw(8) << "TPR"
      << std::setw(8) << "TNR" << std::setw(8) << "G-Mean" << '\n';
  const auto row = [&](const char* name, const LevelMetrics& m) {
    out << std::left << std::setw(8) << name << std::right << std::setw(8) << m.samples
        << std::setw(8) << m.anomalous << std::setw(8) << pct(m.auroc) << std::setw(8) << pct(m.ap)
        << std::setw(8) << pct(m.confusion.tpr()) << std::setw(8) << pct(m.confusion.tnr())
        << std::setw(8) << pct(m.g_mean) << '\n';
  };
  row("image", r.image);
  row("module", r.module);

  const auto& c = r.image.confusion;
  out << "\nimage confusion: TP " << c.tp << "  FN " << c.fn << "  FP " << c.fp << "  TN " << c.tn
      << "\n\nanomalies predicted normal, % (image level)\n";
  for (auto f : kAllFaultClasses) out << std::setw(6) << fault_name(f);
  out << std::setw(6) << "All" << '\n';
  for (auto f : kAllFaultClasses) out << std::setw(6) << pct(r.image.fault_errors.per_class[fault_index(f)]);
  out << std::setw(6) << pct(r.image.fault_errors.all) << '\n';

  const auto& s = r.savings;
  out << "\nmodule triage: review " << s.modules_to_review << " of " << s.total_modules
      << " modules (" << std::fixed << std::setprecision(1) << s.review_time_s / 60.0 << " min vs "
      << s.baseline_time_s / 3600.0 << " h), lost anomalies " << s.lost_anomalies << " of "
      << s.anomalous_modules << '\n';
  return out.str();
}

}  // namespace ircl
