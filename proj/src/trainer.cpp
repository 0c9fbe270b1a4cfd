#include "ircl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"

namespace ircl {

using nlohmann::json;

std::string_view objective_name(Objective o) {
  return o == Objective::contrastive ? "contrastive" : "cross_entropy";
}

Objective parse_objective(std::string_view s) {
  if (s == "contrastive") return Objective::contrastive;
  if (s == "cross_entropy" || s == "cross-entropy" || s == "ce") return Objective::cross_entropy;
  throw InvalidArgument("unknown objective '" + std::string(s) + "'");
}

std::string_view sampling_name(Sampling s) { return s == Sampling::shuffle ? "shuffle" : "stratified"; }

Sampling parse_sampling(std::string_view s) {
  if (s == "shuffle") return Sampling::shuffle;
  if (s == "stratified") return Sampling::stratified;
  throw InvalidArgument("unknown sampling '" + std::string(s) + "'");
}

std::set<FaultClass> reference_leaveout() {
  return {FaultClass::Mp, FaultClass::Sh, FaultClass::Sp, FaultClass::CmPlus, FaultClass::CsPlus};
}

// --- config --------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 2) throw InvalidArgument("batch_size must be at least 2");
  if (!(lr > 0.0)) throw InvalidArgument("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight_decay must be non-negative");
  if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
  if (checkpoint_every < 1) throw InvalidArgument("checkpoint_every must be at least 1");
  if (k < 1) throw InvalidArgument("k must be at least 1");
}

namespace {

std::string exact(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "train.total_steps=" << total_steps << '\n'
      << "train.batch_size=" << batch_size << '\n'
      << "train.lr=" << exact(lr) << '\n'
      << "train.momentum=" << exact(momentum) << '\n'
      << "train.weight_decay=" << exact(weight_decay) << '\n'
      << "train.tau=" << exact(tau) << '\n'
      << "train.seed=" << seed << '\n'
      << "train.objective=" << objective_name(objective) << '\n'
      << "train.sampling=" << sampling_name(sampling) << '\n'
      << "train.leaveout=";
  bool first = true;
  for (auto c : leaveout) {
    if (!first) out << ',';
    out << fault_name(c);
    first = false;
  }
  out << '\n'
      << "train.checkpoint_every=" << checkpoint_every << '\n'
      << "train.k=" << k << '\n';
  return out.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.rfind("train.", 0) != 0) continue;
    try {
      if (key == "train.total_steps") c.total_steps = std::stoull(value);
      else if (key == "train.batch_size") c.batch_size = std::stoull(value);
      else if (key == "train.lr") c.lr = std::stod(value);
      else if (key == "train.momentum") c.momentum = std::stod(value);
      else if (key == "train.weight_decay") c.weight_decay = std::stod(value);
      else if (key == "train.tau") c.tau = std::stod(value);
      else if (key == "train.seed") c.seed = std::stoull(value);
      else if (key == "train.objective") c.objective = parse_objective(value);
      else if (key == "train.sampling") c.sampling = parse_sampling(value);
      else if (key == "train.checkpoint_every") c.checkpoint_every = std::stoull(value);
      else if (key == "train.k") c.k = std::stoull(value);
      else if (key == "train.leaveout") {
        c.leaveout.clear();
        std::istringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
          if (item.empty()) continue;
          const auto f = parse_fault_class(item);
          if (!f) throw FormatError("unknown fault class '" + item + "'");
          c.leaveout.insert(*f);
        }
      } else {
        throw FormatError("unknown train key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("bad value for '" + key + "'");
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.total_steps = 110000;
  c.batch_size = 128;
  c.checkpoint_every = 5000;
  return c;
}

// --- optimizer -----------------------------------------------------------

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double eta0) {
  if (total_steps == 0) return eta0;
  if (step > total_steps) throw InvalidArgument("step beyond total_steps");
  const double p = static_cast<double>(step) / static_cast<double>(total_steps);
  return eta0 / 2.0 * (1.0 + std::cos(p * std::numbers::pi));
}

OptimizerState init_optimizer(const EncoderParameters& params) {
  return OptimizerState{params.zeros_like(), 0};
}

void sgd_step(EncoderParameters& params, const EncoderParameters& grads, OptimizerState& state,
              double lr, double momentum, double weight_decay) {
  if (!params.same_layout(grads) || !params.same_layout(state.momentum))
    throw InvalidArgument("gradient or momentum layout does not match the parameters");
  for (const auto& t : grads.tensors)
    for (float g : t.values)
      if (!std::isfinite(g)) throw NonFiniteValue("non-finite gradient in " + t.name + "; step aborted");
  const auto eta = static_cast<float>(lr), m = static_cast<float>(momentum),
             wd = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& w = params.tensors[i].values;
    const auto& g = grads.tensors[i].values;
    auto& buf = state.momentum.tensors[i].values;
    for (std::size_t j = 0; j < w.size(); ++j) {
      buf[j] = m * buf[j] + (g[j] + wd * w[j]);
      w[j] -= eta * buf[j];
    }
  }
  ++state.step;
}

// --- batching ------------------------------------------------------------

std::vector<std::vector<std::size_t>> make_batches(std::span<const BinaryLabel> labels,
                                                   std::size_t batch_size, Sampling sampling, Rng& rng) {
  if (labels.empty()) throw InvalidArgument("no training images");
  if (batch_size < 2) throw InvalidArgument("batch_size must be at least 2");
  if (labels.size() < batch_size)
    throw InvalidArgument("training set of " + std::to_string(labels.size()) +
                          " images is smaller than one batch of " + std::to_string(batch_size));
  const std::size_t count = labels.size() / batch_size;
  std::vector<std::vector<std::size_t>> batches;

  if (sampling == Sampling::shuffle) {
    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < count; ++b)
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                           order.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size));
    return batches;
  }

  std::vector<std::size_t> anomalies, normals;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == BinaryLabel::anomalous ? anomalies : normals).push_back(i);
  if (anomalies.empty()) throw DegenerateBatch("stratified sampling needs at least one anomalous image");
  if (normals.empty()) throw DegenerateBatch("stratified sampling needs at least one normal image");
  const double fraction = static_cast<double>(anomalies.size()) / static_cast<double>(labels.size());
  const std::size_t per_batch = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(static_cast<double>(batch_size) * fraction)), 1, batch_size - 1);

  // Cycling pools, reshuffled each time one runs out.
  struct Pool {
    std::vector<std::size_t> items;
    std::size_t pos = 0;
    std::size_t next(Rng& r) {
      if (pos == items.size()) pos = 0;
      if (pos == 0) std::shuffle(items.begin(), items.end(), r);
      return items[pos++];
    }
  };
  Pool a{anomalies}, n{normals};
  for (std::size_t b = 0; b < count; ++b) {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    for (std::size_t i = 0; i < per_batch; ++i) batch.push_back(a.next(rng));
    for (std::size_t i = per_batch; i < batch_size; ++i) batch.push_back(n.next(rng));
    std::shuffle(batch.begin(), batch.end(), rng);
    batches.push_back(std::move(batch));
  }
  return batches;
}

// --- checkpoints ---------------------------------------------------------

namespace {

constexpr std::string_view kCheckpointMagic = "TSCK";
constexpr std::uint32_t kCheckpointVersion = 1;

void put_tensors(detail::ByteWriter& w, const ParameterSet<float>& set) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(set.tensors.size()));
  for (const auto& t : set.tensors) {
    if (t.name.size() > 0xffff) throw InvalidArgument("tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : t.values) w.put_f32(v);
  }
}

ParameterSet<float> get_tensors(detail::ByteReader& r) {
  ParameterSet<float> set;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = std::string(r.get_bytes(r.get<std::uint16_t>()));
    const auto rank = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.get<std::uint32_t>());
      n *= t.shape.back();
    }
    if (n > r.remaining() / 4) throw FormatError("checkpoint: truncated");
    t.values.resize(n);
    for (auto& v : t.values) v = r.get_f32();
    set.tensors.push_back(std::move(t));
  }
  return set;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string config = c.encoder.to_text() + c.train.to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.put_bytes(config);
  put_tensors(w, c.params);
  put_tensors(w, c.optimizer.momentum);
  w.put<std::uint64_t>(c.step);
  w.put<std::uint64_t>(c.seed);
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::string config(r.get_bytes(r.get<std::uint32_t>()));
  Checkpoint c;
  try {
    c.encoder = EncoderConfig::from_text(config);
    c.train = TrainConfig::from_text(config);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  c.params = get_tensors(r);
  c.optimizer.momentum = get_tensors(r);
  c.step = r.get<std::uint64_t>();
  c.seed = r.get<std::uint64_t>();
  c.optimizer.step = c.step;
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  if (!c.params.same_layout(init_parameters(c.encoder, 0)))
    throw FormatError("checkpoint tensors do not match its encoder config");
  if (!c.params.same_layout(c.optimizer.momentum))
    throw FormatError("checkpoint optimizer state does not match its parameters");
  return c;
}

void write_checkpoint(const std::filesystem::path& file, const Checkpoint& c) {
  detail::write_file_atomic(file, encode_checkpoint(c));
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
  return decode_checkpoint(detail::read_file(file));
}

std::string checkpoint_file_name(std::uint64_t step) {
  std::ostringstream out;
  out << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".tsck";
  return out.str();
}

// --- log -----------------------------------------------------------------

json to_json(const LogRecord& r) {
  json j{{"step", r.step}};
  if (r.lr) j["lr"] = *r.lr;
  if (r.loss) j["loss"] = *r.loss;
  if (r.val_auroc) j["val_auroc"] = *r.val_auroc;
  if (r.val_ap) j["val_ap"] = *r.val_ap;
  if (r.batch_classes) j["batch_classes"] = *r.batch_classes;
  return j;
}

LogRecord log_record_from_json(const json& j) {
  LogRecord r;
  try {
    r.step = j.at("step").get<std::uint64_t>();
    if (j.contains("lr")) r.lr = j["lr"].get<double>();
    if (j.contains("loss")) r.loss = j["loss"].get<double>();
    if (j.contains("val_auroc")) r.val_auroc = j["val_auroc"].get<double>();
    if (j.contains("val_ap")) r.val_ap = j["val_ap"].get<double>();
    if (j.contains("batch_classes"))
      r.batch_classes = j["batch_classes"].get<std::array<std::size_t, kLabelSlots>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad log record: ") + e.what());
  }
  return r;
}

void write_log(const std::filesystem::path& file, std::span<const LogRecord> log) {
  std::string out;
  for (const auto& r : log) out += to_json(r).dump() + '\n';
  detail::write_file_atomic(file, out);
}

std::vector<LogRecord> read_log(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open " + file.string());
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(log_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(file.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<ValidationEntry> validation_entries(std::span<const LogRecord> log) {
  std::vector<ValidationEntry> out;
  for (const auto& r : log)
    if (r.val_auroc && r.val_ap) out.push_back({r.step, *r.val_auroc, *r.val_ap});
  return out;
}

// --- training ------------------------------------------------------------

std::vector<PreprocessedPatch> apply_leaveout(std::span<const PreprocessedPatch> patches,
                                              const std::set<FaultClass>& leaveout) {
  std::vector<PreprocessedPatch> out;
  out.reserve(patches.size());
  for (const auto& p : patches)
    if (!(p.fault_class && leaveout.contains(*p.fault_class))) out.push_back(p);
  return out;
}

std::vector<Prediction> score_patches(const Checkpoint& model, std::span<const PreprocessedPatch> reference,
                                      std::span<const PreprocessedPatch> patches, std::size_t k,
                                      double delta) {
  std::vector<Prediction> out;
  if (patches.empty()) return out;
  if (model.train.objective == Objective::cross_entropy) {
    const auto logits = head_outputs(model.params, model.encoder, patches);
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const double l0 = logits(static_cast<Eigen::Index>(i), 0), l1 = logits(static_cast<Eigen::Index>(i), 1);
      Prediction p;
      p.image_id = patches[i].image_id;
      p.plant_id = patches[i].plant_id;
      p.module_id = patches[i].module_id;
      p.score = 1.0 / (1.0 + std::exp(l0 - l1));
      p.verdict = classify(p.score, delta);
      p.k = 0;
      p.delta = delta;
      p.binary_label = patches[i].binary_label;
      p.fault_class = patches[i].fault_class;
      out.push_back(p);
    }
    return out;
  }
  const auto index = AnomalyIndex::build(embed_patches(model.params, model.encoder, reference));
  const auto targets = embed_patches(model.params, model.encoder, patches);
  return predict_batch(index, targets, std::min(k, index.count()), delta);
}

TrainResult train(const TrainConfig& config, const EncoderConfig& encoder,
                  std::span<const PreprocessedPatch> source, const std::optional<ValidationSet>& validation,
                  const TrainHooks& hooks) {
  config.validate();
  encoder.validate();
  if (config.objective == Objective::cross_entropy && encoder.embedding_dim != 2)
    throw InvalidArgument("the cross-entropy objective needs a head with 2 outputs");

  const auto data = apply_leaveout(source, config.leaveout);
  std::vector<BinaryLabel> labels;
  labels.reserve(data.size());
  for (const auto& p : data) {
    if (!p.binary_label)
      throw InvalidArgument("source image " + std::to_string(p.image_id) + " has no label");
    labels.push_back(*p.binary_label);
  }
  const auto anomalies = std::count(labels.begin(), labels.end(), BinaryLabel::anomalous);
  if (config.objective == Objective::contrastive &&
      (anomalies == 0 || anomalies == static_cast<std::ptrdiff_t>(labels.size())))
    throw DegenerateBatch("the source needs normal and anomalous images after leaveout filtering");
  if (hooks.out_dir) std::filesystem::create_directories(*hooks.out_dir);

  Rng rng(config.seed);
  Checkpoint state;
  state.encoder = encoder;
  state.train = config;
  state.seed = config.seed;
  state.params = init_parameters(encoder, encoder.init_seed);
  state.optimizer = init_optimizer(state.params);

  TrainResult result;
  const auto take_checkpoint = [&](std::uint64_t step) {
    state.step = step;
    state.optimizer.step = step;
    if (validation && !validation->patches.empty()) {
      const auto preds = score_patches(state, data, validation->patches, config.k);
      const auto samples = scored_samples(preds);
      LogRecord r;
      r.step = step;
      r.val_auroc = auroc(samples);
      r.val_ap = average_precision(samples);
      result.log.push_back(r);
    }
    if (hooks.out_dir) {
      write_checkpoint(*hooks.out_dir / checkpoint_file_name(step), state);
      write_log(*hooks.out_dir / "train_log.jsonl", result.log);
    }
    result.checkpoints.push_back(state);
    if (hooks.on_checkpoint) hooks.on_checkpoint(state);
  };

  take_checkpoint(0);
  std::vector<std::vector<std::size_t>> epoch;
  std::size_t cursor = 0;
  const auto next_batch = [&]() -> const std::vector<std::size_t>& {
    if (cursor == epoch.size()) {
      epoch = make_batches(labels, config.batch_size, config.sampling, rng);
      cursor = 0;
    }
    return epoch[cursor++];
  };

  constexpr int kMaxDegenerate = 10;
  for (std::uint64_t step = 0; step < config.total_steps; ++step) {
    const double lr = cosine_lr(step, config.total_steps, config.lr);
    BatchLabels batch_labels;
    const std::vector<std::size_t>* indices = nullptr;
    for (int attempt = 0;; ++attempt) {
      indices = &next_batch();
      batch_labels = BatchLabels{};
      for (std::size_t i = 0; i < indices->size(); ++i)
        (labels[(*indices)[i]] == BinaryLabel::anomalous ? batch_labels.anomalous : batch_labels.normal)
            .push_back(i);
      if (config.objective == Objective::cross_entropy ||
          (!batch_labels.normal.empty() && !batch_labels.anomalous.empty()))
        break;
      if (attempt + 1 >= kMaxDegenerate)
        throw DegenerateBatch(std::to_string(kMaxDegenerate) +
                              " consecutive batches lacked normal or anomalous images; "
                              "use --sampling stratified");
    }

    std::vector<PreprocessedPatch> batch;
    batch.reserve(indices->size());
    std::array<std::size_t, kLabelSlots> classes{};
    std::vector<BinaryLabel> batch_binary;
    for (auto i : *indices) {
      batch.push_back(data[i]);
      ++classes[label_slot(data[i].binary_label, data[i].fault_class)];
      batch_binary.push_back(labels[i]);
    }
    augment_batch(batch, rng);

    const auto pass = forward(state.params, encoder, batch_matrix(batch), kPatchSize, kPatchSize);
    const RowMatrix<double> v = pass.pre_norm.cast<double>();
    LossResult loss;
    RowMatrix<double> grad_v;
    if (config.objective == Objective::contrastive) {
      const auto z = l2_normalize_rows(v);
      loss = contrastive_loss(z, batch_labels, config.tau);
      grad_v = l2_normalize_rows_backward(v, loss.grad);
    } else {
      loss = cross_entropy_loss(v, batch_binary);
      grad_v = loss.grad;
    }
    const RowMatrix<float> grad_f = grad_v.cast<float>();
    const auto grads = backward(state.params, encoder, pass, grad_f);
    sgd_step(state.params, grads, state.optimizer, lr, config.momentum, config.weight_decay);

    LogRecord r;
    r.step = step;
    r.lr = lr;
    r.loss = loss.loss;
    r.batch_classes = classes;
    result.log.push_back(r);

    const std::uint64_t done = step + 1;
    if (done % config.checkpoint_every == 0 || done == config.total_steps) take_checkpoint(done);
  }
  return result;
}

}  // namespace ircl
