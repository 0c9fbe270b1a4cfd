#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ircl/types.hpp"

namespace ircl {

/// Rendering parameters for one synthetic plant. Differences between plants
/// (temperatures, noise, resolution, cell texture) create the domain shift.
struct PlantSynthConfig {
  std::uint16_t plant_id = 1;
  double base_temperature = 35.0;   // nominal module temperature, deg C
  double background_delta = -6.0;   // ground/frame relative to the module
  double noise_sigma = 0.35;        // per-pixel thermal noise
  double cell_sigma = 0.3;          // cell-to-cell temperature spread
  double gradient = 1.0;            // top-to-bottom drift across the module
  double fault_scale = 1.0;         // multiplies every fault temperature delta
  int cells_x = 6;                  // cells across; three substrings of cells_x/3 columns
  int cells_y = 10;
  int width = 48;                   // image resolution in pixels
  int height = 72;
  double margin = 0.08;             // background border as a fraction of each side
  std::array<double, kNumFaultClasses> fault_mix{};  // per-class module probability
  int images_per_module = 4;
  int modules = 400;
  std::uint64_t seed = 1;
  double gain = kDefaultGain;
  double offset = kDefaultOffset;

  double anomaly_probability() const;
  /// Lower bound on (hottest pixel - base_temperature) for every fault but Mp.
  double guaranteed_fault_excess() const;
  void validate() const;
};

struct SynthConfig {
  std::vector<PlantSynthConfig> plants;
  /// Hottest-pixel margin over the nominal module temperature that every
  /// rendered fault except Mp must exceed.
  double fault_margin = 1.5;

  void validate() const;
};

/// Deterministic desk-scale dataset. Image ids are plant_id * 10^7 + running
/// index; module ids count from 1 within each plant.
std::vector<IRImage> synth_generate(const SynthConfig& config);
std::vector<IRImage> synth_generate_plant(const PlantSynthConfig& plant);

/// Fault mix with the given total anomaly probability spread over the ten
/// classes in fixed proportions.
std::array<double, kNumFaultClasses> default_fault_mix(double anomaly_fraction);

/// The two reference plants: a source (plant 1) and a shifted target (plant 2).
PlantSynthConfig reference_source_plant();
PlantSynthConfig reference_target_plant();

/// INI-style text: global `key = value` defaults followed by `[plant N]`
/// sections. `fault_mix` is a comma list of `Class:probability` pairs.
SynthConfig parse_synth_config(const std::string& text);
SynthConfig read_synth_config(const std::filesystem::path& file);

}  // namespace ircl
