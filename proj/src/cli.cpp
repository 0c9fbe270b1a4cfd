#include "ircl/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "ircl/http_service.hpp"
#include "ircl/synth.hpp"
#include "ircl/trainer.hpp"

namespace ircl {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::set<FaultClass> parse_leaveout(const std::string& text) {
  if (text == "reference") return reference_leaveout();
  std::set<FaultClass> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto f = parse_fault_class(item);
    if (!f) throw InvalidArgument("unknown fault class '" + item + "'");
    out.insert(*f);
  }
  return out;
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
}

std::vector<std::uint64_t> split_ids(std::span<const IRImage> images, const std::string& split_file,
                                     const std::string& subset) {
  if (subset == "all") {
    std::vector<std::uint64_t> ids;
    for (const auto& i : images) ids.push_back(i.image_id);
    return ids;
  }
  const auto split = split_file.empty() ? split_dataset(images, 0.7, 0) : read_split(split_file);
  if (subset == "train") return split.train;
  if (subset == "test") return split.test;
  throw InvalidArgument("subset must be all, train or test");
}

std::vector<IRImage> of_plant(std::vector<IRImage> images, std::optional<std::uint16_t> plant) {
  if (!plant) return images;
  std::erase_if(images, [&](const IRImage& i) { return i.plant_id != *plant; });
  if (images.empty()) throw NotFound("no images of plant " + std::to_string(*plant));
  return images;
}

std::vector<PreprocessedPatch> preprocess_all(std::span<const IRImage> images, const PlantStatsTable& stats) {
  std::vector<PreprocessedPatch> out;
  out.reserve(images.size());
  for (const auto& i : images) out.push_back(preprocess(i, stats));
  return out;
}

struct TrainOptions {
  std::string manifest, stats, split, out_dir, preset = "desk", objective = "contrastive",
                                                sampling = "shuffle", leaveout;
  std::optional<std::uint16_t> source_plant, val_plant;
  std::uint64_t steps = 0, seed = 0, checkpoint_every = 0, init_seed = 0;
  std::size_t batch_size = 0, k = kDefaultK;
  double lr = 0, momentum = 0, weight_decay = 0, tau = 0;
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive embeddings and k-NN anomaly detection for thermal PV module images", "ircl"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // synth
  std::string synth_config, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic two-plant dataset");
  synth->add_option("--config", synth_config, "Synthetic config file (default: the two reference plants)");
  synth->add_option("--out", synth_out, "Output dataset directory")->required();

  // stats
  std::string stats_manifest, stats_split, stats_out;
  auto* stats = app.add_subcommand("stats", "Per-plant mean/std over the train split");
  stats->add_option("--manifest", stats_manifest)->required();
  stats->add_option("--split", stats_split, "Split file (default: ratio 0.7, seed 0)");
  stats->add_option("--out", stats_out)->required();

  // split
  std::string split_manifest, split_out;
  double split_ratio = 0.7;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Module-disjoint train/test split");
  split->add_option("--manifest", split_manifest)->required();
  split->add_option("--ratio", split_ratio)->capture_default_str();
  split->add_option("--seed", split_seed)->capture_default_str();
  split->add_option("--out", split_out)->required();

  // train
  TrainOptions to;
  const auto desk = TrainConfig::desk();
  auto* trn = app.add_subcommand("train", "Train an encoder on the labelled source plant");
  trn->add_option("--manifest", to.manifest)->required();
  trn->add_option("--stats", to.stats)->required();
  trn->add_option("--split", to.split, "Split file (default: ratio 0.7, seed 0)");
  trn->add_option("--source-plant", to.source_plant, "Train on this plant only");
  trn->add_option("--val-plant", to.val_plant, "Labelled plant scored at every checkpoint");
  trn->add_option("--preset", to.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  auto* o_obj = trn->add_option("--objective", to.objective)->check(CLI::IsMember({"contrastive", "cross_entropy"}))->capture_default_str();
  auto* o_steps = trn->add_option("--steps", to.steps);
  auto* o_batch = trn->add_option("--batch-size", to.batch_size);
  auto* o_lr = trn->add_option("--lr", to.lr);
  auto* o_mom = trn->add_option("--momentum", to.momentum);
  auto* o_wd = trn->add_option("--weight-decay", to.weight_decay);
  auto* o_tau = trn->add_option("--tau", to.tau);
  trn->add_option("--seed", to.seed)->capture_default_str();
  trn->add_option("--init-seed", to.init_seed)->capture_default_str();
  trn->add_option("--sampling", to.sampling)->check(CLI::IsMember({"shuffle", "stratified"}))->capture_default_str();
  trn->add_option("--leaveout", to.leaveout, "Comma list of fault classes, or 'reference'");
  auto* o_ckpt = trn->add_option("--checkpoint-every", to.checkpoint_every);
  trn->add_option("--k", to.k, "Neighbours for validation scores")->capture_default_str();
  trn->add_option("--out-dir", to.out_dir)->required();
  (void)o_obj;

  // embed
  std::string emb_ckpt, emb_manifest, emb_stats, emb_out, emb_split, emb_subset = "all", emb_level = "embedding";
  std::optional<std::uint16_t> emb_plant;
  auto* emb = app.add_subcommand("embed", "Checkpoint + manifest -> embedding store");
  emb->add_option("--checkpoint", emb_ckpt)->required();
  emb->add_option("--manifest", emb_manifest)->required();
  emb->add_option("--stats", emb_stats)->required();
  emb->add_option("--out", emb_out)->required();
  emb->add_option("--plant", emb_plant);
  emb->add_option("--split", emb_split);
  emb->add_option("--subset", emb_subset)->check(CLI::IsMember({"all", "train", "test"}))->capture_default_str();
  emb->add_option("--level", emb_level, "embedding or features")->check(CLI::IsMember({"embedding", "features"}))->capture_default_str();

  // predict
  std::string pred_source, pred_target, pred_out, pred_ckpt, pred_manifest, pred_stats;
  std::optional<std::uint16_t> pred_plant;
  std::size_t pred_k = kDefaultK;
  double pred_delta = kDefaultDelta;
  auto* pred = app.add_subcommand("predict", "Score target embeddings against a source store");
  pred->add_option("--source", pred_source, "Source embedding store");
  pred->add_option("--target", pred_target, "Target embedding store");
  pred->add_option("--checkpoint", pred_ckpt, "Cross-entropy checkpoint scored directly on --manifest");
  pred->add_option("--manifest", pred_manifest);
  pred->add_option("--stats", pred_stats);
  pred->add_option("--plant", pred_plant);
  pred->add_option("--k", pred_k)->capture_default_str();
  pred->add_option("--delta", pred_delta)->capture_default_str();
  pred->add_option("--out", pred_out)->required();

  // eval
  std::string eval_preds, eval_labels, eval_out, eval_text;
  double eval_delta = kDefaultDelta;
  auto* evl = app.add_subcommand("eval", "Metrics report for a predictions file");
  evl->add_option("--predictions", eval_preds)->required();
  evl->add_option("--labels", eval_labels, "Manifest whose labels replace those in the predictions");
  evl->add_option("--delta", eval_delta)->capture_default_str();
  evl->add_option("--out", eval_out, "JSON report");
  evl->add_option("--text", eval_text, "Plain-text summary file");

  // compress
  std::string comp_source, comp_out;
  std::size_t comp_m = 0;
  std::uint64_t comp_seed = 0;
  auto* comp = app.add_subcommand("compress", "Replace a source store by per-class k-means centroids");
  comp->add_option("--source", comp_source)->required();
  comp->add_option("--clusters", comp_m)->required();
  comp->add_option("--seed", comp_seed)->capture_default_str();
  comp->add_option("--out", comp_out)->required();

  // serve
  const char* env_root = std::getenv("IRCL_DATA_ROOT");
  const char* env_bind = std::getenv("IRCL_BIND_ADDRESS");
  std::string srv_root = env_root ? env_root : ".", srv_host = env_bind ? env_bind : "127.0.0.1", srv_state;
  int srv_port = 8080;
  auto* srv = app.add_subcommand("serve", "Run the labelling-triage HTTP service");
  srv->add_option("--port", srv_port)->capture_default_str();
  srv->add_option("--host", srv_host, "Bind address (env IRCL_BIND_ADDRESS)")->capture_default_str();
  srv->add_option("--data-root", srv_root, "Dataset directory (env IRCL_DATA_ROOT)")->capture_default_str();
  srv->add_option("--state-dir", srv_state, "Session logs (default: <data-root>/triage)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) {
      const auto config = synth_config.empty()
                              ? SynthConfig{{reference_source_plant(), reference_target_plant()}, 1.5}
                              : read_synth_config(synth_config);
      const auto images = synth_generate(config);
      write_dataset(synth_out, images);
      std::size_t anomalous = 0;
      for (const auto& i : images) anomalous += i.is_anomalous() ? 1 : 0;
      out << "wrote " << images.size() << " images (" << anomalous << " anomalous) to " << synth_out << '\n';
    } else if (*stats) {
      const auto images = load_images(stats_manifest);
      const auto ids = split_ids(images, stats_split, "train");
      const auto table = compute_all_plant_stats(select_images(images, ids));
      write_plant_stats(stats_out, table);
      for (const auto& [plant, s] : table)
        out << "plant " << plant << ": mean " << s.mean << ", std " << s.std << '\n';
    } else if (*split) {
      const auto images = load_images(split_manifest);
      const auto s = split_dataset(images, split_ratio, split_seed);
      write_split(split_out, s);
      out << "train " << s.train.size() << ", test " << s.test.size() << '\n';
    } else if (*trn) {
      TrainConfig config = to.preset == "paper" ? TrainConfig::paper() : desk;
      config.objective = parse_objective(to.objective);
      config.sampling = parse_sampling(to.sampling);
      config.seed = to.seed;
      config.k = to.k;
      if (*o_steps) config.total_steps = to.steps;
      if (*o_batch) config.batch_size = to.batch_size;
      if (*o_lr) config.lr = to.lr;
      if (*o_mom) config.momentum = to.momentum;
      if (*o_wd) config.weight_decay = to.weight_decay;
      if (*o_tau) config.tau = to.tau;
      if (*o_ckpt) config.checkpoint_every = to.checkpoint_every;
      if (!to.leaveout.empty()) config.leaveout = parse_leaveout(to.leaveout);
      auto encoder = config.objective == Objective::cross_entropy ? EncoderConfig::cross_entropy_classifier()
                                                                  : EncoderConfig::desk();
      encoder.init_seed = to.init_seed;

      const auto images = load_images(to.manifest);
      const auto table = read_plant_stats(to.stats);
      auto source = of_plant(select_images(images, split_ids(images, to.split, "train")), to.source_plant);
      std::erase_if(source, [](const IRImage& i) { return !i.binary_label; });
      std::optional<ValidationSet> validation;
      if (to.val_plant) {
        auto val = of_plant(images, to.val_plant);
        std::erase_if(val, [](const IRImage& i) { return !i.binary_label; });
        validation = ValidationSet{preprocess_all(val, table)};
      }
      TrainHooks hooks;
      hooks.out_dir = to.out_dir;
      hooks.on_checkpoint = [&](const Checkpoint& c) { out << "checkpoint " << c.step << '\n' << std::flush; };
      const auto result = train(config, encoder, preprocess_all(source, table), validation, hooks);
      const auto entries = validation_entries(result.log);
      if (!entries.empty()) {
        const auto best = select_model(entries, SelectionCriterion::auroc);
        out << "best validation AUROC at step " << best << '\n';
      }
    } else if (*emb) {
      const auto ckpt = read_checkpoint(emb_ckpt);
      const auto images = load_images(emb_manifest);
      const auto chosen = of_plant(select_images(images, split_ids(images, emb_split, emb_subset)), emb_plant);
      const auto level = emb_level == "features" ? FeatureLevel::pooled_features : FeatureLevel::embedding;
      const auto embeddings = embed(ckpt.params, ckpt.encoder, chosen, read_plant_stats(emb_stats), level);
      write_embeddings(emb_out, embeddings);
      out << "wrote " << embeddings.size() << " embeddings of dimension "
          << (embeddings.empty() ? 0 : embeddings.front().z.size()) << '\n';
    } else if (*pred) {
      std::vector<Prediction> predictions;
      if (!pred_ckpt.empty()) {
        if (pred_manifest.empty() || pred_stats.empty())
          throw InvalidArgument("--checkpoint needs --manifest and --stats");
        const auto ckpt = read_checkpoint(pred_ckpt);
        if (ckpt.train.objective != Objective::cross_entropy)
          throw InvalidArgument("contrastive checkpoints are scored via embed + predict --source/--target");
        const auto images = of_plant(load_images(pred_manifest), pred_plant);
        predictions = score_patches(ckpt, {}, preprocess_all(images, read_plant_stats(pred_stats)), 0, pred_delta);
      } else {
        if (pred_source.empty() || pred_target.empty())
          throw InvalidArgument("predict needs --source and --target stores (or --checkpoint)");
        const auto index = AnomalyIndex::build(read_embeddings(pred_source));
        predictions = predict_batch(index, read_embeddings(pred_target), pred_k, pred_delta);
      }
      write_predictions(pred_out, predictions);
      std::size_t flagged = 0;
      for (const auto& p : predictions) flagged += p.verdict == BinaryLabel::anomalous ? 1 : 0;
      out << "scored " << predictions.size() << " images, " << flagged << " flagged\n";
    } else if (*evl) {
      auto predictions = read_predictions(eval_preds);
      if (!eval_labels.empty()) {
        std::map<std::uint64_t, ManifestRecord> truth;
        for (auto& r : read_manifest(eval_labels)) truth[r.image_id] = r;
        for (auto& p : predictions) {
          const auto it = truth.find(p.image_id);
          p.binary_label = it == truth.end() ? std::nullopt : it->second.binary_label;
          p.fault_class = it == truth.end() ? std::nullopt : it->second.fault_class;
        }
      }
      const auto report = evaluate(predictions, eval_delta);
      const auto text = render_text(report);
      if (!eval_out.empty()) write_text(eval_out, to_json(report).dump(2) + '\n');
      if (!eval_text.empty()) write_text(eval_text, text);
      out << text;
    } else if (*comp) {
      const auto index = AnomalyIndex::build(read_embeddings(comp_source));
      const auto compressed = compress_index(index, comp_m, comp_seed);
      write_embeddings(comp_out, compressed.entries());
      out << "compressed " << index.count() << " embeddings to " << compressed.count() << " centroids\n";
    } else if (*srv) {
      TriageService service(srv_root, srv_state.empty() ? fs::path(srv_root) / "triage" : fs::path(srv_state));
      HttpService http(service);
      const int port = http.bind(srv_host, srv_port);
      out << "listening on " << srv_host << ':' << port << '\n' << std::flush;
      http.listen();
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ircl
