#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ircl/encoder.hpp"
#include "ircl/evaluation.hpp"
#include "ircl/objective.hpp"

namespace ircl {

enum class Objective { contrastive, cross_entropy };
enum class Sampling { shuffle, stratified };

std::string_view objective_name(Objective o);
Objective parse_objective(std::string_view s);
std::string_view sampling_name(Sampling s);
Sampling parse_sampling(std::string_view s);

/// The fault classes dropped from the source in the leaveout protocol.
std::set<FaultClass> reference_leaveout();

struct TrainConfig {
  std::uint64_t total_steps = 2000;
  std::size_t batch_size = 64;
  double lr = 0.06;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau = kDefaultTemperature;
  std::uint64_t seed = 0;
  Objective objective = Objective::contrastive;
  Sampling sampling = Sampling::shuffle;
  std::set<FaultClass> leaveout;
  std::uint64_t checkpoint_every = 500;
  std::size_t k = kDefaultK;  // neighbours used for validation scores

  void validate() const;
  bool operator==(const TrainConfig&) const = default;

  /// `key=value` lines, prefix `train.`.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);

  static TrainConfig desk();
  /// 110000 steps at batch 128.
  static TrainConfig paper();
};

/// eta0/2 (1 + cos(pi step/total)); eta0 when total is 0.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double eta0);

struct OptimizerState {
  ParameterSet<float> momentum;
  std::uint64_t step = 0;
  bool operator==(const OptimizerState&) const = default;
};

OptimizerState init_optimizer(const EncoderParameters& params);

/// g' = g + wd w; buf = m buf + g'; w -= lr buf. A non-finite gradient throws
/// NonFiniteValue and leaves params and state untouched.
void sgd_step(EncoderParameters& params, const EncoderParameters& grads, OptimizerState& state,
              double lr, double momentum, double weight_decay);

/// One epoch of batches (indices into `labels`). Shuffle: seeded permutation
/// cut into full batches. Stratified: every batch holds round(B * a) anomalies
/// clamped to [1, B - 1], a being the anomaly fraction, drawn from cycling
/// shuffled pools.
std::vector<std::vector<std::size_t>> make_batches(std::span<const BinaryLabel> labels,
                                                   std::size_t batch_size, Sampling sampling, Rng& rng);

struct Checkpoint {
  EncoderConfig encoder;
  TrainConfig train;
  EncoderParameters params;
  OptimizerState optimizer;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& file, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& file);

/// A training step (lr, loss, batch_classes) or a validation entry taken at a
/// checkpoint (val_auroc, val_ap).
struct LogRecord {
  std::uint64_t step = 0;
  std::optional<double> lr;
  std::optional<double> loss;
  std::optional<double> val_auroc;
  std::optional<double> val_ap;
  std::optional<std::array<std::size_t, kLabelSlots>> batch_classes;  // counts per label slot
  bool operator==(const LogRecord&) const = default;
};

nlohmann::json to_json(const LogRecord& record);
LogRecord log_record_from_json(const nlohmann::json& j);
void write_log(const std::filesystem::path& file, std::span<const LogRecord> log);
std::vector<LogRecord> read_log(const std::filesystem::path& file);
/// Validation entries of a log (records carrying val_auroc and val_ap).
std::vector<ValidationEntry> validation_entries(std::span<const LogRecord> log);

/// Labelled patches of a second plant; scored against the current training set.
struct ValidationSet {
  std::vector<PreprocessedPatch> patches;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  // step 0, every checkpoint_every steps, and the last step
  std::vector<LogRecord> log;           // one per step, plus validation-only records
};

struct TrainHooks {
  /// Called after each checkpoint is taken (and written, when out_dir is set).
  std::function<void(const Checkpoint&)> on_checkpoint;
  std::optional<std::filesystem::path> out_dir;
};

/// Image scores of a model: k-NN anomaly fraction against `reference` for the
/// contrastive objective, softmax probability of the anomalous class for cross-entropy.
std::vector<Prediction> score_patches(const Checkpoint& model, std::span<const PreprocessedPatch> reference,
                                      std::span<const PreprocessedPatch> patches, std::size_t k,
                                      double delta = kDefaultDelta);

/// Drops anomalies of the leaveout classes; normals are kept.
std::vector<PreprocessedPatch> apply_leaveout(std::span<const PreprocessedPatch> patches,
                                              const std::set<FaultClass>& leaveout);

TrainResult train(const TrainConfig& config, const EncoderConfig& encoder,
                  std::span<const PreprocessedPatch> source,
                  const std::optional<ValidationSet>& validation = std::nullopt,
                  const TrainHooks& hooks = {});

std::string checkpoint_file_name(std::uint64_t step);

}  // namespace ircl
