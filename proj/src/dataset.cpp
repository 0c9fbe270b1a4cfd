#include "ircl/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ircl/png_io.hpp"

namespace ircl {

using nlohmann::json;

Grid<double> raw_to_celsius(const Grid<std::uint16_t>& raw, double gain, double offset) {
  if (!(gain > 0.0)) throw InvalidArgument("radiometric gain must be positive");
  Grid<double> out(raw.rows, raw.cols);
  for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = gain * raw.data[i] + offset;
  return out;
}

Grid<std::uint8_t> normalize_minmax(const Grid<double>& celsius) {
  if (celsius.empty()) throw InvalidArgument("cannot normalize an empty grid");
  const auto [lo_it, hi_it] = std::minmax_element(celsius.data.begin(), celsius.data.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  Grid<std::uint8_t> out(celsius.rows, celsius.cols, 0);
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < celsius.size(); ++i) {
    const double v = std::floor(255.0 * (celsius.data[i] - lo) / range + 0.5);
    out.data[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

template <typename T>
Grid<T> rotate_ccw(const Grid<T>& in, int turns) {
  turns = ((turns % 4) + 4) % 4;
  Grid<T> cur = in;
  for (int t = 0; t < turns; ++t) {
    Grid<T> next(cur.cols, cur.rows);
    for (std::size_t r = 0; r < next.rows; ++r)
      for (std::size_t c = 0; c < next.cols; ++c) next(r, c) = cur(c, cur.cols - 1 - r);
    cur = std::move(next);
  }
  return cur;
}

template Grid<std::uint16_t> rotate_ccw(const Grid<std::uint16_t>&, int);
template Grid<std::uint8_t> rotate_ccw(const Grid<std::uint8_t>&, int);
template Grid<double> rotate_ccw(const Grid<double>&, int);
template Grid<float> rotate_ccw(const Grid<float>&, int);

Grid<double> resize_bilinear(const Grid<std::uint8_t>& in, std::size_t rows, std::size_t cols) {
  if (in.empty() || rows == 0 || cols == 0) throw InvalidArgument("resize of an empty grid");
  Grid<double> out(rows, cols);
  const auto coord = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    if (out_n == 1 || in_n == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = coord(r, rows, in.rows);
    const auto y0 = std::min(static_cast<std::size_t>(y), in.rows - 1);
    const auto y1 = std::min(y0 + 1, in.rows - 1);
    const double wy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = coord(c, cols, in.cols);
      const auto x0 = std::min(static_cast<std::size_t>(x), in.cols - 1);
      const auto x1 = std::min(x0 + 1, in.cols - 1);
      const double wx = x - static_cast<double>(x0);
      const double top = (1.0 - wx) * in(y0, x0) + wx * in(y0, x1);
      const double bottom = (1.0 - wx) * in(y1, x0) + wx * in(y1, x1);
      out(r, c) = (1.0 - wy) * top + wy * bottom;
    }
  }
  return out;
}

Grid<std::uint8_t> normalized_view(const IRImage& image) {
  image.validate();
  const auto upright = rotate_ccw(image.raw, image.orientation);
  return normalize_minmax(raw_to_celsius(upright, image.gain, image.offset));
}

Grid<double> resized_view(const IRImage& image) {
  return resize_bilinear(normalized_view(image), kPatchSize, kPatchSize);
}

namespace {

PreprocessedPatch standardize(const IRImage& image, const Grid<double>& resized,
                              const PlantStats& stats) {
  if (stats.plant_id != image.plant_id)
    throw InvalidArgument("plant stats for plant " + std::to_string(stats.plant_id) +
                          " applied to an image of plant " + std::to_string(image.plant_id));
  if (!(stats.std > 0.0)) throw InvalidArgument("plant std must be positive");
  PreprocessedPatch patch;
  patch.image_id = image.image_id;
  patch.plant_id = image.plant_id;
  patch.module_id = image.module_id;
  patch.binary_label = image.binary_label;
  patch.fault_class = image.fault_class;
  patch.tensor.resize(kPatchElements);
  const std::size_t plane = kPatchSize * kPatchSize;
  for (std::size_t i = 0; i < plane; ++i) {
    const auto v = static_cast<float>((resized.data[i] - stats.mean) / stats.std);
    for (std::size_t ch = 0; ch < kPatchChannels; ++ch) patch.tensor[ch * plane + i] = v;
  }
  return patch;
}

}  // namespace

PreprocessedPatch preprocess(const IRImage& image, const PlantStats& stats) {
  return standardize(image, resized_view(image), stats);
}

PreprocessedPatch preprocess(const IRImage& image, const PlantStats& stats, double gain,
                             double offset) {
  IRImage copy = image;
  copy.gain = gain;
  copy.offset = offset;
  return preprocess(copy, stats);
}

PreprocessedPatch preprocess(const IRImage& image, const PlantStatsTable& table) {
  const auto it = table.find(image.plant_id);
  if (it == table.end())
    throw NotFound("no plant stats for plant " + std::to_string(image.plant_id));
  return preprocess(image, it->second);
}

PlantStats compute_plant_stats(std::span<const IRImage> images, std::uint16_t plant_id) {
  std::vector<Grid<double>> views;
  for (const auto& image : images)
    if (image.plant_id == plant_id) views.push_back(resized_view(image));
  if (views.empty()) throw NotFound("no images for plant " + std::to_string(plant_id));

  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : views)
    for (double x : v.data) sum += x;
  for (const auto& v : views) n += v.size();
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto& v : views)
    for (double x : v.data) sq += (x - mean) * (x - mean);
  const double std = std::sqrt(sq / static_cast<double>(n));
  return {plant_id, mean, std::max(std, kStdFloor)};
}

PlantStatsTable compute_all_plant_stats(std::span<const IRImage> images) {
  std::set<std::uint16_t> plants;
  for (const auto& image : images) plants.insert(image.plant_id);
  PlantStatsTable table;
  for (auto plant : plants) table[plant] = compute_plant_stats(images, plant);
  return table;
}

DatasetSplit split_dataset(std::span<const IRImage> images, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("split ratio must lie in (0, 1)");
  std::map<ModuleKey, std::vector<std::uint64_t>> modules;
  for (const auto& image : images) modules[image.module_key()].push_back(image.image_id);
  if (modules.size() < 2) throw InvalidArgument("a split needs at least two modules");

  std::vector<ModuleKey> order;
  order.reserve(modules.size());
  for (const auto& [key, ids] : modules) order.push_back(key);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit split;
  split.seed = seed;
  split.ratio = ratio;
  const auto total = static_cast<double>(images.size());
  std::size_t i = 0;
  for (; i + 1 < order.size(); ++i) {
    if (static_cast<double>(split.train.size()) / total >= ratio) break;
    const auto& ids = modules[order[i]];
    split.train.insert(split.train.end(), ids.begin(), ids.end());
  }
  for (; i < order.size(); ++i) {
    const auto& ids = modules[order[i]];
    split.test.insert(split.test.end(), ids.begin(), ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::vector<IRImage> select_images(std::span<const IRImage> images,
                                   std::span<const std::uint64_t> ids) {
  const std::set<std::uint64_t> wanted(ids.begin(), ids.end());
  std::vector<IRImage> out;
  for (const auto& image : images)
    if (wanted.contains(image.image_id)) out.push_back(image);
  return out;
}

// --- augmentation --------------------------------------------------------

BatchTransform sample_transform(Rng& rng) {
  std::uniform_int_distribution<int> bit(0, 1);
  std::uniform_int_distribution<int> turns(0, 3);
  BatchTransform t;
  t.flip_ud = bit(rng) == 1;
  t.flip_lr = bit(rng) == 1;
  t.quarter_turns = turns(rng);
  return t;
}

namespace {

enum class PlaneOp { flip_ud, flip_lr, rot_ccw };

void apply_plane_op(std::span<float> tensor, std::size_t channels, std::size_t side, PlaneOp op) {
  const std::size_t plane = side * side;
  if (tensor.size() != channels * plane)
    throw InvalidArgument("patch tensor does not match its declared shape");
  std::vector<float> tmp(plane);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    float* p = tensor.data() + ch * plane;
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        std::size_t src = 0;
        switch (op) {
          case PlaneOp::flip_ud: src = (side - 1 - r) * side + c; break;
          case PlaneOp::flip_lr: src = r * side + (side - 1 - c); break;
          case PlaneOp::rot_ccw: src = c * side + (side - 1 - r); break;
        }
        tmp[r * side + c] = p[src];
      }
    std::copy(tmp.begin(), tmp.end(), p);
  }
}

}  // namespace

void apply_transform(std::span<float> tensor, std::size_t channels, std::size_t side,
                     const BatchTransform& t) {
  if (t.flip_ud) apply_plane_op(tensor, channels, side, PlaneOp::flip_ud);
  if (t.flip_lr) apply_plane_op(tensor, channels, side, PlaneOp::flip_lr);
  const int turns = ((t.quarter_turns % 4) + 4) % 4;
  for (int i = 0; i < turns; ++i) apply_plane_op(tensor, channels, side, PlaneOp::rot_ccw);
}

void apply_inverse_transform(std::span<float> tensor, std::size_t channels, std::size_t side,
                             const BatchTransform& t) {
  const int turns = ((t.quarter_turns % 4) + 4) % 4;
  for (int i = 0; i < (4 - turns) % 4; ++i)
    apply_plane_op(tensor, channels, side, PlaneOp::rot_ccw);
  if (t.flip_lr) apply_plane_op(tensor, channels, side, PlaneOp::flip_lr);
  if (t.flip_ud) apply_plane_op(tensor, channels, side, PlaneOp::flip_ud);
}

BatchTransform augment_batch(std::span<PreprocessedPatch> batch, Rng& rng) {
  if (batch.empty()) throw InvalidArgument("cannot augment an empty batch");
  const BatchTransform t = sample_transform(rng);
  for (auto& patch : batch) apply_transform(patch.tensor, kPatchChannels, kPatchSize, t);
  return t;
}

// --- manifest ------------------------------------------------------------

namespace {

ManifestRecord record_from_json(const json& j) {
  ManifestRecord r;
  r.image_id = j.at("image_id").get<std::uint64_t>();
  r.plant_id = j.at("plant_id").get<std::uint16_t>();
  r.module_id = j.at("module_id").get<std::uint32_t>();
  r.path = j.at("path").get<std::string>();
  r.orientation = j.value("orientation", 0);
  if (j.contains("binary_label") && !j["binary_label"].is_null()) {
    r.binary_label = parse_binary_label(j["binary_label"].get<std::string>());
    if (!r.binary_label) throw FormatError("unknown binary label");
  }
  if (j.contains("fault_class") && !j["fault_class"].is_null()) {
    r.fault_class = parse_fault_class(j["fault_class"].get<std::string>());
    if (!r.fault_class) throw FormatError("unknown fault class");
  }
  r.gain = j.value("gain", kDefaultGain);
  r.offset = j.value("offset", kDefaultOffset);
  return r;
}

json record_to_json(const ManifestRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["plant_id"] = r.plant_id;
  j["module_id"] = r.module_id;
  j["path"] = r.path.generic_string();
  j["orientation"] = r.orientation;
  if (r.binary_label) j["binary_label"] = std::string(label_name(*r.binary_label));
  if (r.fault_class) j["fault_class"] = std::string(fault_name(*r.fault_class));
  j["gain"] = r.gain;
  j["offset"] = r.offset;
  return j;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open manifest " + file.string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_manifest(const std::filesystem::path& file, std::span<const ManifestRecord> records) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

IRImage load_image(const ManifestRecord& record, const std::filesystem::path& base_dir) {
  IRImage image;
  image.image_id = record.image_id;
  image.plant_id = record.plant_id;
  image.module_id = record.module_id;
  image.orientation = record.orientation;
  image.binary_label = record.binary_label;
  image.fault_class = record.fault_class;
  image.gain = record.gain;
  image.offset = record.offset;
  const auto path = record.path.is_absolute() ? record.path : base_dir / record.path;
  image.raw = png::read_gray16(path);
  image.validate();
  return image;
}

std::vector<IRImage> load_images(const std::filesystem::path& manifest_file) {
  const auto records = read_manifest(manifest_file);
  const auto base = manifest_file.parent_path();
  std::vector<IRImage> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(load_image(r, base));
  return images;
}

void write_dataset(const std::filesystem::path& dir, std::span<const IRImage> images) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestRecord> records;
  records.reserve(images.size());
  for (const auto& image : images) {
    ManifestRecord r;
    r.image_id = image.image_id;
    r.plant_id = image.plant_id;
    r.module_id = image.module_id;
    r.path = std::filesystem::path("images") / (std::to_string(image.image_id) + ".png");
    r.orientation = image.orientation;
    r.binary_label = image.binary_label;
    r.fault_class = image.fault_class;
    r.gain = image.gain;
    r.offset = image.offset;
    png::write_gray16(dir / r.path, image.raw);
    records.push_back(std::move(r));
  }
  write_manifest(dir / "manifest.jsonl", records);
}

void write_plant_stats(const std::filesystem::path& file, const PlantStatsTable& table) {
  json j = json::array();
  for (const auto& [plant, s] : table)
    j.push_back({{"plant_id", plant}, {"mean", s.mean}, {"std", s.std}});
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out << json{{"plants", j}}.dump(2) << '\n';
}

PlantStatsTable read_plant_stats(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open plant stats " + file.string());
  PlantStatsTable table;
  try {
    const json j = json::parse(in);
    for (const auto& p : j.at("plants")) {
      PlantStats s{p.at("plant_id").get<std::uint16_t>(), p.at("mean").get<double>(),
                   p.at("std").get<double>()};
      if (!(s.std > 0.0)) throw FormatError("plant std must be positive");
      table[s.plant_id] = s;
    }
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  return table;
}

void write_split(const std::filesystem::path& file, const DatasetSplit& split) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out << json{{"seed", split.seed}, {"ratio", split.ratio}, {"train", split.train},
              {"test", split.test}}
             .dump()
      << '\n';
}

DatasetSplit read_split(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open split " + file.string());
  try {
    const json j = json::parse(in);
    DatasetSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ratio = j.value("ratio", 0.7);
    s.train = j.at("train").get<std::vector<std::uint64_t>>();
    s.test = j.at("test").get<std::vector<std::uint64_t>>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

}  // namespace ircl
