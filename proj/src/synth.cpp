#include "ircl/synth.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ircl/dataset.hpp"

namespace ircl {
namespace {

// Relative share of each class among anomalous modules (Mh..Chs).
constexpr std::array<double, kNumFaultClasses> kClassShares = {0.05, 0.07, 0.10, 0.10, 0.12,
                                                               0.10, 0.12, 0.16, 0.10, 0.08};

struct Rect {
  double u0, u1, v0, v1;
  bool contains(double u, double v) const { return u >= u0 && u < u1 && v >= v0 && v < v1; }
};

// Module-level fault geometry; fixed across the views of one module.
struct FaultLayout {
  std::optional<FaultClass> fault;
  double whole_module = 0.0;
  std::vector<std::pair<Rect, double>> rects;
  double disc_u = 0.0, disc_v = 0.0, disc_r = 0.0, disc_delta = 0.0;

  double delta(double u, double v) const {
    double d = whole_module;
    for (const auto& [rect, dt] : rects)
      if (rect.contains(u, v)) d += dt;
    if (disc_r > 0.0) {
      const double du = u - disc_u, dv = v - disc_v;
      if (du * du + dv * dv <= disc_r * disc_r) d += disc_delta;
    }
    return d;
  }
};

Rect cell_rect(int cx, int cy) {
  return {static_cast<double>(cx), static_cast<double>(cx + 1), static_cast<double>(cy),
          static_cast<double>(cy + 1)};
}

FaultLayout make_fault(const PlantSynthConfig& cfg, std::optional<FaultClass> fault, Rng& rng) {
  FaultLayout f;
  f.fault = fault;
  if (!fault) return f;
  const double s = cfg.fault_scale;
  const int sub_w = cfg.cells_x / 3;
  std::uniform_int_distribution<int> pick_col(0, cfg.cells_x - 1);
  std::uniform_int_distribution<int> pick_row(0, cfg.cells_y - 1);
  std::uniform_int_distribution<int> pick_sub(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const auto substring = [&](int idx) {
    return Rect{static_cast<double>(idx * sub_w), static_cast<double>((idx + 1) * sub_w), 0.0,
                static_cast<double>(cfg.cells_y)};
  };
  const auto distinct_cells = [&](int n) {
    std::vector<std::pair<int, int>> cells;
    while (static_cast<int>(cells.size()) < n) {
      std::pair<int, int> c{pick_col(rng), pick_row(rng)};
      if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
    }
    return cells;
  };

  switch (*fault) {
    case FaultClass::Mh: f.whole_module = 7.0 * s; break;
    case FaultClass::Mp: f.whole_module = 2.5 * s; break;
    case FaultClass::Sh: f.rects.push_back({substring(pick_sub(rng)), 7.0 * s}); break;
    case FaultClass::Sp: f.rects.push_back({substring(pick_sub(rng)), 3.5 * s}); break;
    case FaultClass::Pid: {
      static constexpr std::array<double, 3> kRowProbability = {0.9, 0.6, 0.3};
      for (int b = 0; b < 3; ++b) {
        const int row = cfg.cells_y - 1 - b;
        for (int col = 0; col < cfg.cells_x; ++col) {
          const bool warm = unit(rng) < kRowProbability[b];
          const double dt = (3.5 + 1.5 * unit(rng)) * s;
          if (warm || (b == 0 && col == 0 && f.rects.empty())) f.rects.push_back({cell_rect(col, row), dt});
        }
      }
      break;
    }
    case FaultClass::CmPlus: {
      std::uniform_int_distribution<int> count(3, 6);
      for (auto [c, r] : distinct_cells(count(rng))) f.rects.push_back({cell_rect(c, r), 6.0 * s});
      break;
    }
    case FaultClass::CsPlus: f.rects.push_back({cell_rect(pick_col(rng), pick_row(rng)), 8.0 * s}); break;
    case FaultClass::C: {
      std::uniform_int_distribution<int> count(1, 2);
      for (auto [c, r] : distinct_cells(count(rng))) f.rects.push_back({cell_rect(c, r), 4.0 * s});
      break;
    }
    case FaultClass::D: {
      const double ub = static_cast<double>((1 + pick_sub(rng) % 2) * sub_w);
      const double v0 = unit(rng) * (cfg.cells_y - 1.0);
      f.rects.push_back({Rect{ub - 0.25, ub + 0.25, v0, v0 + 0.8}, 10.0 * s});
      break;
    }
    case FaultClass::Chs: {
      f.disc_u = 0.5 + unit(rng) * (cfg.cells_x - 1.0);
      f.disc_v = 0.5 + unit(rng) * (cfg.cells_y - 1.0);
      f.disc_r = 0.3 + 0.2 * unit(rng);
      f.disc_delta = 10.0 * s;
      break;
    }
  }
  return f;
}

Grid<std::uint16_t> render_view(const PlantSynthConfig& cfg, const std::vector<double>& cell_offsets,
                                const FaultLayout& fault, Rng& rng) {
  std::uniform_real_distribution<double> jitter(-1.5, 1.5);
  std::uniform_real_distribution<double> scale_dist(0.97, 1.03);
  std::uniform_real_distribution<double> drift_dist(-0.3, 0.3);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  const double jx = jitter(rng), jy = jitter(rng);
  const double scale = scale_dist(rng);
  const double drift = drift_dist(rng);
  const double w = cfg.width, h = cfg.height;
  const double mw = (1.0 - 2.0 * cfg.margin) * w * scale;
  const double mh = (1.0 - 2.0 * cfg.margin) * h * scale;
  const double x0 = 0.5 * (w - mw) + jx;
  const double y0 = 0.5 * (h - mh) + jy;
  const double jbox_u = 0.5 * cfg.cells_x;

  Grid<std::uint16_t> raw(static_cast<std::size_t>(cfg.height), static_cast<std::size_t>(cfg.width));
  for (std::size_t r = 0; r < raw.rows; ++r) {
    for (std::size_t c = 0; c < raw.cols; ++c) {
      const double u = (static_cast<double>(c) + 0.5 - x0) / mw * cfg.cells_x;
      const double v = (static_cast<double>(r) + 0.5 - y0) / mh * cfg.cells_y;
      double t = cfg.base_temperature + drift;
      if (u >= 0.0 && u < cfg.cells_x && v >= 0.0 && v < cfg.cells_y) {
        const int cu = static_cast<int>(u), cv = static_cast<int>(v);
        t += cell_offsets[static_cast<std::size_t>(cv * cfg.cells_x + cu)];
        t += cfg.gradient * (v / cfg.cells_y - 0.5);
        const double fu = u - cu, fv = v - cv;
        if (fu < 0.06 || fu > 0.94 || fv < 0.06 || fv > 0.94) t -= 0.5;
        if (std::abs(u - jbox_u) < 0.45 && v < 0.35) t += 1.2;
        t += fault.delta(u, v);
      } else {
        t += cfg.background_delta;
      }
      t += noise(rng);
      const double counts = std::round((t - cfg.offset) / cfg.gain);
      raw(r, c) = static_cast<std::uint16_t>(std::clamp(counts, 0.0, 65535.0));
    }
  }
  return raw;
}

}  // namespace

double PlantSynthConfig::anomaly_probability() const {
  return std::accumulate(fault_mix.begin(), fault_mix.end(), 0.0);
}

double PlantSynthConfig::guaranteed_fault_excess() const {
  // Weakest localized fault (Sp, Pid) against the largest downward shifts from
  // view drift, clipped cell offsets and the thermal gradient.
  return 3.5 * fault_scale - 0.3 - 2.0 * cell_sigma - 0.5 * std::abs(gradient);
}

void PlantSynthConfig::validate() const {
  const auto fail = [this](const std::string& what) {
    throw InvalidArgument("synthetic plant " + std::to_string(plant_id) + ": " + what);
  };
  for (double p : fault_mix)
    if (!(p >= 0.0)) fail("fault probabilities must be non-negative");
  if (anomaly_probability() > 1.0 + 1e-12) fail("fault probabilities sum to more than 1");
  if (images_per_module < 1) fail("images_per_module must be at least 1");
  if (modules < 1) fail("modules must be at least 1");
  if (width < 8 || height < 8) fail("resolution must be at least 8x8");
  if (cells_x < 3 || cells_x % 3 != 0) fail("cells_x must be a positive multiple of 3");
  if (cells_y < 3) fail("cells_y must be at least 3");
  if (!(noise_sigma >= 0.0) || !(cell_sigma >= 0.0)) fail("noise levels must be non-negative");
  if (!(margin >= 0.0 && margin < 0.3)) fail("margin must lie in [0, 0.3)");
  if (!(fault_scale > 0.0)) fail("fault_scale must be positive");
  if (!(gain > 0.0)) fail("gain must be positive");
}

void SynthConfig::validate() const {
  if (plants.empty()) throw InvalidArgument("synthetic config defines no plants");
  for (std::size_t i = 0; i < plants.size(); ++i) {
    plants[i].validate();
    for (std::size_t j = 0; j < i; ++j)
      if (plants[j].plant_id == plants[i].plant_id)
        throw InvalidArgument("duplicate synthetic plant id " + std::to_string(plants[i].plant_id));
  }
  if (!(fault_margin >= 0.0)) throw InvalidArgument("fault_margin must be non-negative");
  for (const auto& p : plants)
    if (p.guaranteed_fault_excess() < fault_margin)
      throw InvalidArgument("synthetic plant " + std::to_string(p.plant_id) +
                            ": faults too faint for fault_margin " + std::to_string(fault_margin));
}

std::vector<IRImage> synth_generate_plant(const PlantSynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> orientation_dist(0, 3);
  std::normal_distribution<double> cell_noise(0.0, cfg.cell_sigma);

  std::vector<IRImage> images;
  images.reserve(static_cast<std::size_t>(cfg.modules * cfg.images_per_module));
  std::uint64_t running = 0;
  const std::uint64_t id_base = static_cast<std::uint64_t>(cfg.plant_id) * 10'000'000ULL;

  for (int m = 0; m < cfg.modules; ++m) {
    std::optional<FaultClass> fault;
    const double draw = unit(rng);
    double cum = 0.0;
    for (std::size_t k = 0; k < kNumFaultClasses; ++k) {
      cum += cfg.fault_mix[k];
      if (draw < cum) {
        fault = kAllFaultClasses[k];
        break;
      }
    }
    std::vector<double> cell_offsets(static_cast<std::size_t>(cfg.cells_x * cfg.cells_y));
    for (auto& o : cell_offsets)
      o = std::clamp(cell_noise(rng), -2.0 * cfg.cell_sigma, 2.0 * cfg.cell_sigma);
    const FaultLayout layout = make_fault(cfg, fault, rng);
    const int orientation = orientation_dist(rng);

    for (int view = 0; view < cfg.images_per_module; ++view) {
      IRImage image;
      image.image_id = id_base + running++;
      image.plant_id = cfg.plant_id;
      image.module_id = static_cast<std::uint32_t>(m + 1);
      image.orientation = orientation;
      image.binary_label = fault ? BinaryLabel::anomalous : BinaryLabel::normal;
      image.fault_class = fault;
      image.gain = cfg.gain;
      image.offset = cfg.offset;
      // Stored clockwise so that `orientation` ccw turns restore the upright view.
      image.raw = rotate_ccw(render_view(cfg, cell_offsets, layout, rng), 4 - orientation);
      images.push_back(std::move(image));
    }
  }
  return images;
}

std::vector<IRImage> synth_generate(const SynthConfig& config) {
  config.validate();
  std::vector<IRImage> all;
  for (const auto& plant : config.plants) {
    auto images = synth_generate_plant(plant);
    all.insert(all.end(), std::make_move_iterator(images.begin()),
               std::make_move_iterator(images.end()));
  }
  return all;
}

std::array<double, kNumFaultClasses> default_fault_mix(double anomaly_fraction) {
  std::array<double, kNumFaultClasses> mix{};
  for (std::size_t i = 0; i < kNumFaultClasses; ++i) mix[i] = kClassShares[i] * anomaly_fraction;
  return mix;
}

PlantSynthConfig reference_source_plant() {
  PlantSynthConfig p;
  p.plant_id = 1;
  p.base_temperature = 35.0;
  p.background_delta = -6.0;
  p.noise_sigma = 0.3;
  p.cell_sigma = 0.3;
  p.gradient = 1.0;
  p.fault_scale = 1.0;
  p.width = 48;
  p.height = 72;
  p.fault_mix = default_fault_mix(0.1);
  p.images_per_module = 4;
  p.modules = 400;
  p.seed = 11;
  return p;
}

PlantSynthConfig reference_target_plant() {
  PlantSynthConfig p;
  p.plant_id = 2;
  p.base_temperature = 27.0;
  p.background_delta = -3.5;
  p.noise_sigma = 0.5;
  p.cell_sigma = 0.45;
  p.gradient = -0.6;
  p.fault_scale = 0.9;
  p.width = 36;
  p.height = 56;
  p.fault_mix = default_fault_mix(0.1);
  p.images_per_module = 4;
  p.modules = 400;
  p.seed = 22;
  return p;
}

// --- config file ---------------------------------------------------------

namespace {

namespace pt = boost::property_tree;

std::array<double, kNumFaultClasses> parse_mix(const std::string& text) {
  std::array<double, kNumFaultClasses> mix{};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) throw FormatError("fault_mix entry without ':' in '" + item + "'");
    const auto cls = parse_fault_class(item.substr(0, colon));
    if (!cls) throw FormatError("unknown fault class '" + item.substr(0, colon) + "'");
    try {
      mix[fault_index(*cls)] = std::stod(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw FormatError("bad probability in fault_mix entry '" + item + "'");
    }
  }
  return mix;
}

void apply_keys(const pt::ptree& tree, PlantSynthConfig& p) {
  for (const auto& [key, node] : tree) {
    if (!node.empty()) continue;  // a section, handled by the caller
    const std::string value = node.get_value<std::string>();
    try {
      if (key == "base_temperature") p.base_temperature = std::stod(value);
      else if (key == "background_delta") p.background_delta = std::stod(value);
      else if (key == "noise_sigma") p.noise_sigma = std::stod(value);
      else if (key == "cell_sigma") p.cell_sigma = std::stod(value);
      else if (key == "gradient") p.gradient = std::stod(value);
      else if (key == "fault_scale") p.fault_scale = std::stod(value);
      else if (key == "cells_x") p.cells_x = std::stoi(value);
      else if (key == "cells_y") p.cells_y = std::stoi(value);
      else if (key == "width") p.width = std::stoi(value);
      else if (key == "height") p.height = std::stoi(value);
      else if (key == "margin") p.margin = std::stod(value);
      else if (key == "fault_mix") p.fault_mix = parse_mix(value);
      else if (key == "anomaly_fraction") p.fault_mix = default_fault_mix(std::stod(value));
      else if (key == "images_per_module") p.images_per_module = std::stoi(value);
      else if (key == "modules") p.modules = std::stoi(value);
      else if (key == "seed") p.seed = std::stoull(value);
      else if (key == "gain") p.gain = std::stod(value);
      else if (key == "offset") p.offset = std::stod(value);
      else if (key == "fault_margin") continue;
      else throw FormatError("unknown synthetic config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw FormatError("bad value for '" + key + "': " + value);
    } catch (const std::out_of_range&) {
      throw FormatError("value out of range for '" + key + "': " + value);
    }
  }
}

}  // namespace

SynthConfig parse_synth_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError(std::string("synthetic config: ") + e.what());
  }
  PlantSynthConfig defaults;
  defaults.fault_mix = default_fault_mix(0.1);
  apply_keys(tree, defaults);
  SynthConfig config;
  if (auto margin = tree.get_optional<double>("fault_margin")) config.fault_margin = *margin;
  const bool has_global_seed = tree.get_child_optional("seed").has_value();

  for (const auto& [section, node] : tree) {
    if (node.empty()) continue;
    std::istringstream name(section);
    std::string word;
    int id = -1;
    if (!(name >> word >> id) || word != "plant" || id < 0 || id > 65535)
      throw FormatError("unknown section [" + section + "]; expected [plant N]");
    PlantSynthConfig p = defaults;
    p.plant_id = static_cast<std::uint16_t>(id);
    if (has_global_seed) p.seed = defaults.seed * 1000003ULL + static_cast<std::uint64_t>(id);
    apply_keys(node, p);
    config.plants.push_back(p);
  }
  if (config.plants.empty()) {
    config.plants.push_back(defaults);
  }
  config.validate();
  return config;
}

SynthConfig read_synth_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw NotFound("cannot open synthetic config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_synth_config(ss.str());
}

}  // namespace ircl
