#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ircl/types.hpp"

namespace ircl {

inline constexpr std::size_t kPatchSize = 64;
inline constexpr std::size_t kPatchChannels = 3;
inline constexpr std::size_t kPatchElements = kPatchChannels * kPatchSize * kPatchSize;
inline constexpr double kStdFloor = 1e-6;

using Rng = std::mt19937_64;

/// Per-plant standardization statistics in 8-bit intensity units.
struct PlantStats {
  std::uint16_t plant_id = 0;
  double mean = 0.0;
  double std = 1.0;
};

using PlantStatsTable = std::map<std::uint16_t, PlantStats>;

/// Standardized 3x64x64 encoder input (channel-major, three identical channels).
struct PreprocessedPatch {
  std::vector<float> tensor;
  std::uint64_t image_id = 0;
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  std::optional<BinaryLabel> binary_label;
  std::optional<FaultClass> fault_class;
};

struct DatasetSplit {
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> test;
  std::uint64_t seed = 0;
  double ratio = 0.7;
};

// --- preprocessing -------------------------------------------------------

/// T = gain * raw + offset, element-wise.
Grid<double> raw_to_celsius(const Grid<std::uint16_t>& raw, double gain, double offset);

/// round-half-up of 255 (T - min) / (max - min); a constant grid maps to zeros.
Grid<std::uint8_t> normalize_minmax(const Grid<double>& celsius);

/// Rotates counter-clockwise by `turns` quarter turns (any integer, taken mod 4).
template <typename T>
Grid<T> rotate_ccw(const Grid<T>& in, int turns);

/// Corner-aligned bilinear resampling.
Grid<double> resize_bilinear(const Grid<std::uint8_t>& in, std::size_t rows, std::size_t cols);

/// Rotation to upright, Celsius conversion and min-max normalization; the
/// 8-bit image used for statistics and previews.
Grid<std::uint8_t> normalized_view(const IRImage& image);

/// normalized_view followed by the 64x64 resize, before standardization.
Grid<double> resized_view(const IRImage& image);

PreprocessedPatch preprocess(const IRImage& image, const PlantStats& stats);
PreprocessedPatch preprocess(const IRImage& image, const PlantStats& stats, double gain,
                             double offset);
/// Looks up the image's plant in `table`; throws NotFound when absent.
PreprocessedPatch preprocess(const IRImage& image, const PlantStatsTable& table);

/// Population mean/std over the resized 8-bit pixels of every image of `plant_id`
/// in `images`. Callers pass the train split only.
PlantStats compute_plant_stats(std::span<const IRImage> images, std::uint16_t plant_id);

/// Stats for every plant present in `images`.
PlantStatsTable compute_all_plant_stats(std::span<const IRImage> images);

// --- splitting -----------------------------------------------------------

/// Module-disjoint split: modules are shuffled by seed and assigned to train
/// until the train image fraction first reaches `ratio`. At least one module
/// always lands in test.
DatasetSplit split_dataset(std::span<const IRImage> images, double ratio, std::uint64_t seed);

/// Images whose id is listed in `ids`, in the order of `images`.
std::vector<IRImage> select_images(std::span<const IRImage> images,
                                   std::span<const std::uint64_t> ids);

// --- augmentation --------------------------------------------------------

/// Element of the flip/rotation group acting on square patches. Applied as
/// up-down flip, then left-right flip, then counter-clockwise quarter turns.
struct BatchTransform {
  bool flip_ud = false;
  bool flip_lr = false;
  int quarter_turns = 0;

  bool operator==(const BatchTransform&) const = default;
};

BatchTransform sample_transform(Rng& rng);

/// Transforms one channel-major patch tensor of `channels` square planes.
void apply_transform(std::span<float> tensor, std::size_t channels, std::size_t side,
                     const BatchTransform& t);
void apply_inverse_transform(std::span<float> tensor, std::size_t channels, std::size_t side,
                             const BatchTransform& t);

/// Samples ONE transform and applies it to every patch; returns it.
BatchTransform augment_batch(std::span<PreprocessedPatch> batch, Rng& rng);

// --- manifest ------------------------------------------------------------

/// One JSON object per line with image_id, plant_id, module_id, path,
/// orientation, binary_label?, fault_class?, gain, offset. Relative paths are
/// resolved against the manifest's directory.
struct ManifestRecord {
  std::uint64_t image_id = 0;
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  std::filesystem::path path;
  int orientation = 0;
  std::optional<BinaryLabel> binary_label;
  std::optional<FaultClass> fault_class;
  double gain = kDefaultGain;
  double offset = kDefaultOffset;
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, std::span<const ManifestRecord> records);

/// Loads the images referenced by a manifest (16-bit PNGs).
std::vector<IRImage> load_images(const std::filesystem::path& manifest_file);
IRImage load_image(const ManifestRecord& record, const std::filesystem::path& base_dir);

/// Writes `images` as PNG files under `dir/images/` plus `dir/manifest.jsonl`.
void write_dataset(const std::filesystem::path& dir, std::span<const IRImage> images);

// --- small JSON documents -------------------------------------------------

void write_plant_stats(const std::filesystem::path& file, const PlantStatsTable& table);
PlantStatsTable read_plant_stats(const std::filesystem::path& file);
void write_split(const std::filesystem::path& file, const DatasetSplit& split);
DatasetSplit read_split(const std::filesystem::path& file);

}  // namespace ircl
