// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "common/oracles.hpp"
#include "ircl/anomaly_index.hpp"
#include "ircl/dataset.hpp"
#include "ircl/encoder.hpp"
#include "ircl/evaluation.hpp"
#include "ircl/objective.hpp"
#include "ircl/synth.hpp"
#include "ircl/trainer.hpp"

using namespace ircl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  const auto start = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- gradients -----------------------------------------------------------

// |analytic - numeric| / max(|analytic|, 1e-8), the strict form.
double strict_max_error(const oracles::GradProblem& p, std::size_t samples, std::uint64_t seed,
                        std::size_t& sampled) {
  ParameterSet<double> analytic;
  oracles::problem_loss(p, p.params, &analytic);
  std::mt19937_64 gen(seed);
  double worst = 0.0;
  const double h = 1e-5;
  const std::size_t tensors = p.params.tensors.size();
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t t = s % tensors;
    std::uniform_int_distribution<std::size_t> pick(0, p.params.tensors[t].size() - 1);
    const std::size_t i = pick(gen);
    auto plus = p.params, minus = p.params;
    plus.tensors[t].values[i] += h;
    minus.tensors[t].values[i] -= h;
    const double numeric = (oracles::problem_loss(p, plus) - oracles::problem_loss(p, minus)) / (2.0 * h);
    const double a = analytic.tensors[t].values[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a), 1e-8));
    ++sampled;
  }
  return worst;
}

Outcome gradient_correctness() {
  const auto start = Clock::now();
  std::mt19937_64 gen(101);
  double worst_ad = 0.0, worst_ce = 0.0;
  std::size_t n_ad = 0, n_ce = 0;
  for (int trial = 0; trial < 3; ++trial) {
    auto p = oracles::make_problem(oracles::random_config(gen, false), oracles::Objective::contrastive, 6, 9,
                                   200 + trial);
    worst_ad = std::max(worst_ad, strict_max_error(p, 40, 300 + trial, n_ad));
    auto q = oracles::make_problem(oracles::random_config(gen, true), oracles::Objective::cross_entropy, 6, 9,
                                   400 + trial);
    worst_ce = std::max(worst_ce, strict_max_error(q, 40, 500 + trial, n_ce));
  }
  const auto desk = oracles::make_problem(EncoderConfig::desk(), oracles::Objective::contrastive, 6, 16, 7);
  worst_ad = std::max(worst_ad, strict_max_error(desk, 60, 8, n_ad));
  const auto desk_ce = oracles::make_problem(EncoderConfig::cross_entropy_classifier(),
                                             oracles::Objective::cross_entropy, 6, 16, 9);
  worst_ce = std::max(worst_ce, strict_max_error(desk_ce, 60, 10, n_ce));
  const double secs = seconds_since(start);
  return {worst_ad < 1e-4 && worst_ce < 1e-4 && n_ad >= 100 && n_ce >= 100 && secs < 60.0,
          fmt("contrastive %zu params max rel %.2e, cross-entropy %zu params max rel %.2e", n_ad, worst_ad, n_ce,
              worst_ce)};
}

// --- loss ----------------------------------------------------------------

Outcome loss_closed_form() {
  RowMatrix<double> z(3, 2);
  z << 1, 0, 0, 1, -1, 0;
  const auto r = contrastive_loss(
      z, BatchLabels::from_binary({BinaryLabel::normal, BinaryLabel::normal, BinaryLabel::anomalous}), 0.1);
  const double expected = std::log(2.0 + std::exp(-10.0));
  const double err = std::abs(r.loss - expected);
  return {err < 1e-9, fmt("loss %.12f, log(2+e^-10) %.12f, |diff| %.1e", r.loss, expected, err)};
}

// --- metrics -------------------------------------------------------------

Outcome metric_oracles() {
  const auto start = Clock::now();
  std::mt19937_64 gen(77);
  double worst_auc = 0.0;
  std::size_t ap_mismatch = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto s = oracles::random_scores(gen, 200);
    worst_auc = std::max(worst_auc, std::abs(auroc(s) - oracles::mann_whitney(s)));
    if (average_precision(s) != oracles::exhaustive_ap(s)) ++ap_mismatch;
  }
  const double secs = seconds_since(start);
  return {worst_auc <= 1e-12 && ap_mismatch == 0 && secs < 60.0,
          fmt("1000 sets, max AUROC deviation %.1e, AP mismatches %zu", worst_auc, ap_mismatch)};
}

// --- k-NN ----------------------------------------------------------------

Embedding random_unit(std::mt19937_64& gen, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = normal(gen);
  const auto u = l2_normalize(v);
  Embedding e;
  e.z.assign(u.begin(), u.end());
  return e;
}

Outcome knn_exactness() {
  const auto start = Clock::now();
  std::mt19937_64 gen(55);
  const std::size_t dim = 16, k = 100;
  std::vector<Embedding> source;
  for (std::size_t i = 0; i < 3000; ++i) {
    // every tenth row repeats an earlier one so that distance ties occur
    auto e = (i % 10 == 9) ? source[gen() % source.size()] : random_unit(gen, dim);
    e.image_id = i;
    e.binary_label = gen() % 10 == 0 ? BinaryLabel::anomalous : BinaryLabel::normal;
    source.push_back(e);
  }
  const auto index = AnomalyIndex::build(source);
  std::vector<Embedding> queries;
  for (std::size_t q = 0; q < 1000; ++q) {
    auto e = (q % 5 == 0) ? source[gen() % source.size()] : random_unit(gen, dim);
    e.image_id = 1'000'000 + q;
    e.binary_label.reset();
    queries.push_back(e);
  }
  const auto preds = predict_batch(index, queries, k, kDefaultDelta);
  std::size_t mismatches = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto oracle = oracles::brute_knn(source, queries[q].z, k);
    const auto got = index.query(queries[q].z, k);
    const auto verdict = oracle.fraction > kDefaultDelta ? BinaryLabel::anomalous : BinaryLabel::normal;
    if (got.indices != oracle.indices || got.distances != oracle.distances ||
        preds[q].score != oracle.fraction || preds[q].verdict != verdict || preds[q].image_id != queries[q].image_id)
      ++mismatches;
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && secs < 60.0, fmt("1000 queries over %zu rows, k %zu, mismatches %zu", source.size(), k,
                                              mismatches)};
}

// --- domain adaptation ---------------------------------------------------

struct Plants {
  std::vector<PreprocessedPatch> source;      // source plant, train split
  std::vector<PreprocessedPatch> validation;  // target plant, train split
  std::vector<PreprocessedPatch> test;        // target plant, test split
  std::size_t source_images = 0, target_images = 0;
  double source_anomalous = 0.0, target_anomalous = 0.0;
};

Plants reference_plants() {
  const auto images = synth_generate(SynthConfig{{reference_source_plant(), reference_target_plant()}, 1.5});
  const auto split = split_dataset(images, 0.7, 0);
  const auto stats = compute_all_plant_stats(select_images(images, split.train));
  Plants p;
  std::size_t src_anom = 0, tgt_anom = 0;
  for (const auto& img : images) {
    const bool anom = img.is_anomalous();
    (img.plant_id == 1 ? p.source_images : p.target_images) += 1;
    (img.plant_id == 1 ? src_anom : tgt_anom) += anom ? 1 : 0;
  }
  p.source_anomalous = static_cast<double>(src_anom) / static_cast<double>(p.source_images);
  p.target_anomalous = static_cast<double>(tgt_anom) / static_cast<double>(p.target_images);
  for (const auto& img : select_images(images, split.train))
    (img.plant_id == 1 ? p.source : p.validation).push_back(preprocess(img, stats));
  for (const auto& img : select_images(images, split.test))
    if (img.plant_id == 2) p.test.push_back(preprocess(img, stats));
  return p;
}

struct RunResult {
  double auroc = 0.0;
  std::uint64_t step = 0;
  double seconds = 0.0;
  EvaluationReport report;
};

// Trains on the source, picks the checkpoint with the best validation AUROC,
// and reports the target test split.
RunResult da_run(const Plants& plants, Objective objective, const std::set<FaultClass>& leaveout = {}) {
  const auto start = Clock::now();
  auto config = TrainConfig::desk();
  config.total_steps = 2000;
  config.batch_size = 64;
  config.sampling = Sampling::stratified;
  config.objective = objective;
  config.leaveout = leaveout;
  config.checkpoint_every = 500;
  config.k = kDefaultK;
  const auto encoder = objective == Objective::cross_entropy ? EncoderConfig::cross_entropy_classifier()
                                                             : EncoderConfig::desk();
  const auto result = train(config, encoder, plants.source, ValidationSet{plants.validation});
  RunResult out;
  out.step = select_model(validation_entries(result.log), SelectionCriterion::auroc);
  const auto& best = *std::find_if(result.checkpoints.begin(), result.checkpoints.end(),
                                   [&](const Checkpoint& c) { return c.step == out.step; });
  const auto reference = apply_leaveout(plants.source, leaveout);
  const auto preds = score_patches(best, reference, plants.test, kDefaultK, kDefaultDelta);
  out.report = evaluate(preds, kDefaultDelta);
  out.auroc = *out.report.image.auroc;
  out.seconds = seconds_since(start);
  return out;
}

// --- determinism ---------------------------------------------------------

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Artifacts {
  std::vector<std::string> checkpoints;
  std::string store;
  std::string report;
};

Artifacts short_run(const Plants& plants, const fs::path& dir) {
  auto config = TrainConfig::desk();
  config.total_steps = 40;
  config.batch_size = 32;
  config.sampling = Sampling::stratified;
  config.checkpoint_every = 20;
  config.seed = 5;
  auto encoder = EncoderConfig::desk();
  encoder.init_seed = 3;
  TrainHooks hooks;
  hooks.out_dir = dir;
  const auto result = train(config, encoder, plants.source, std::nullopt, hooks);
  Artifacts a;
  for (const auto& c : result.checkpoints) a.checkpoints.push_back(slurp(dir / checkpoint_file_name(c.step)));
  const auto& last = result.checkpoints.back();
  const auto source = embed_patches(last.params, last.encoder, plants.source);
  const auto target = embed_patches(last.params, last.encoder, plants.test);
  write_embeddings(dir / "target.iremb", target);
  a.store = slurp(dir / "target.iremb");
  const auto preds = predict_batch(AnomalyIndex::build(source), target, kDefaultK, kDefaultDelta);
  a.report = to_json(evaluate(preds, kDefaultDelta)).dump();
  return a;
}

}  // namespace

int main() {
  criterion("gradient correctness", gradient_correctness);
  criterion("loss closed form", loss_closed_form);
  criterion("metric oracles", metric_oracles);
  criterion("k-NN exactness", knn_exactness);

  criterion("cosine schedule", [] {
    bool ok = true;
    for (std::uint64_t t : {2ULL, 10ULL, 2000ULL, 110000ULL})
      for (double eta : {0.06, 0.1, 1.0})
        ok = ok && cosine_lr(0, t, eta) == eta && cosine_lr(t, t, eta) == 0.0 && cosine_lr(t / 2, t, eta) == eta / 2;
    return Outcome{ok, "eta(0) = eta0, eta(T) = 0, eta(T/2) = eta0/2 for T in {2, 10, 2000, 110000}"};
  });

  criterion("savings arithmetic", [] {
    const auto s = savings_report(14662, 296, 0.981, 270.0 / 296.0, 3.0);
    const double minutes = s.review_time_s / 60.0, hours = s.baseline_time_s / 3600.0;
    const bool ok = s.modules_to_review == 543 && s.found_anomalies == 270 && s.lost_anomalies == 26 &&
                    std::abs(minutes - 27.15) < 1e-9 && s.baseline_time_s == 43986.0 && std::abs(hours - 12.2) < 0.05;
    return Outcome{ok, fmt("%zu modules to review, %.2f min vs %.2f h, %zu lost", s.modules_to_review, minutes,
                           hours, s.lost_anomalies)};
  });

  const auto plants = reference_plants();
  std::printf("reference plants: source %zu images (%.1f%% anomalous), target %zu images (%.1f%% anomalous)\n",
              plants.source_images, 100 * plants.source_anomalous, plants.target_images,
              100 * plants.target_anomalous);

  RunResult contrastive;
  criterion("domain adaptation", [&] {
    contrastive = da_run(plants, Objective::contrastive);
    const auto ce = da_run(plants, Objective::cross_entropy);
    const double total = contrastive.seconds + ce.seconds;
    const bool sized = plants.source_images >= 1500 && plants.target_images >= 1500;
    return Outcome{sized && contrastive.auroc >= 0.90 && total <= 900.0,
                   fmt("contrastive target AUROC %.3f (step %llu, %.0fs); cross-entropy baseline %.3f (step %llu, "
                       "%.0fs); total %.0fs",
                       contrastive.auroc, static_cast<unsigned long long>(contrastive.step), contrastive.seconds,
                       ce.auroc, static_cast<unsigned long long>(ce.step), ce.seconds, total)};
  });

  criterion("unknown-anomaly leaveout", [&] {
    if (contrastive.seconds == 0.0) return Outcome{false, "full-source run unavailable"};
    const auto left = da_run(plants, Objective::contrastive, reference_leaveout());
    const double drop = 100.0 * (contrastive.auroc - left.auroc);
    return Outcome{drop <= 5.0, fmt("full source %.3f, five classes left out %.3f, drop %.2f points",
                                    contrastive.auroc, left.auroc, drop)};
  });

  criterion("module aggregation", [&] {
    if (contrastive.seconds == 0.0) return Outcome{false, "full-source run unavailable"};
    const double image = contrastive.report.image.confusion.tnr();
    const double module = contrastive.report.module.confusion.tnr();
    return Outcome{module >= image, fmt("normal-detection rate: module %.4f, image %.4f at delta 0.1", module, image)};
  });

  criterion("determinism", [&] {
    const fs::path root = fs::temp_directory_path() / ("ircl_acceptance_" + std::to_string(std::random_device{}()));
    const auto a = short_run(plants, root / "a");
    const auto b = short_run(plants, root / "b");
    fs::remove_all(root);
    const bool ok = a.checkpoints == b.checkpoints && a.store == b.store && a.report == b.report;
    return Outcome{ok, fmt("%zu checkpoints, embedding store (%zu bytes) and report (%zu bytes) %s",
                           a.checkpoints.size(), a.store.size(), a.report.size(), ok ? "identical" : "differ")};
  });

  return failures == 0 ? 0 : 1;
}
