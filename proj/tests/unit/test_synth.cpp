#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "ircl/dataset.hpp"
#include "ircl/synth.hpp"

using namespace ircl;

namespace {

PlantSynthConfig small_plant(std::uint16_t id, int modules) {
  auto p = id == 1 ? reference_source_plant() : reference_target_plant();
  p.modules = modules;
  p.images_per_module = 2;
  return p;
}

}  // namespace

TEST_CASE("zero fault mix yields only normal images") {
  auto p = small_plant(1, 30);
  p.fault_mix = {};
  for (const auto& img : synth_generate_plant(p)) {
    CHECK(img.binary_label == BinaryLabel::normal);
    CHECK(!img.fault_class);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  SynthConfig cfg;
  cfg.plants = {small_plant(1, 20), small_plant(2, 20)};
  const auto a = synth_generate(cfg);
  const auto b = synth_generate(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image_id == b[i].image_id);
    CHECK(a[i].raw == b[i].raw);
    CHECK(a[i].fault_class == b[i].fault_class);
    CHECK(a[i].orientation == b[i].orientation);
  }
  cfg.plants[0].seed += 1;
  const auto c = synth_generate(cfg);
  bool any_diff = false;
  for (std::size_t i = 0; i < 40; ++i) any_diff |= !(c[i].raw == a[i].raw);
  CHECK(any_diff);
}

TEST_CASE("anomalous module count follows the binomial") {
  auto p = small_plant(1, 1000);
  p.images_per_module = 1;
  p.width = 12;
  p.height = 18;
  p.fault_mix = default_fault_mix(0.1);
  const auto imgs = synth_generate_plant(p);
  const auto anomalous = std::count_if(imgs.begin(), imgs.end(),
                                       [](const IRImage& i) { return i.is_anomalous(); });
  const double sigma = std::sqrt(1000 * 0.1 * 0.9);
  CHECK(std::abs(static_cast<double>(anomalous) - 100.0) <= 3.0 * sigma);
}

TEST_CASE("ids, modules and labels are consistent") {
  const auto imgs = synth_generate_plant(small_plant(2, 50));
  REQUIRE(imgs.size() == 100);
  std::set<std::uint64_t> ids;
  std::map<std::uint32_t, std::optional<FaultClass>> module_fault;
  for (const auto& img : imgs) {
    CHECK_NOTHROW(img.validate());
    CHECK(img.plant_id == 2);
    CHECK(img.image_id / 10'000'000ULL == 2);
    CHECK(img.module_id >= 1);
    CHECK(img.module_id <= 50);
    CHECK(img.raw.cols == (img.orientation % 2 ? 56u : 36u));
    ids.insert(img.image_id);
    auto [it, fresh] = module_fault.emplace(img.module_id, img.fault_class);
    if (!fresh) CHECK(it->second == img.fault_class);
  }
  CHECK(ids.size() == imgs.size());
}

TEST_CASE("rendered faults are hotter than the nominal module") {
  SynthConfig cfg;
  auto p = small_plant(1, 300);
  p.fault_mix = default_fault_mix(0.6);
  cfg.plants = {p, small_plant(2, 300)};
  cfg.plants[1].fault_mix = default_fault_mix(0.6);
  cfg.validate();
  int checked = 0;
  for (const auto& img : synth_generate(cfg)) {
    if (!img.fault_class || *img.fault_class == FaultClass::Mp) continue;
    const auto& plant = img.plant_id == 1 ? cfg.plants[0] : cfg.plants[1];
    const auto celsius = raw_to_celsius(img.raw, img.gain, img.offset);
    const double hottest = *std::max_element(celsius.data.begin(), celsius.data.end());
    CHECK(hottest > plant.base_temperature + cfg.fault_margin);
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("the reference plants differ in temperature, noise and resolution") {
  const auto s = reference_source_plant();
  const auto t = reference_target_plant();
  CHECK(s.base_temperature != t.base_temperature);
  CHECK(s.noise_sigma != t.noise_sigma);
  CHECK(s.width != t.width);
  CHECK(s.modules * s.images_per_module >= 1500);
  CHECK(t.modules * t.images_per_module >= 1500);
  CHECK(s.anomaly_probability() == doctest::Approx(0.1));
  CHECK(t.anomaly_probability() == doctest::Approx(0.1));
}

TEST_CASE("config text") {
  const auto cfg = parse_synth_config(R"(
modules = 12
images_per_module = 3
anomaly_fraction = 0.2

[plant 1]
base_temperature = 40

[plant 5]
fault_mix = Chs:0.5, Mh:0.25
width = 30
)");
  REQUIRE(cfg.plants.size() == 2);
  CHECK(cfg.plants[0].plant_id == 1);
  CHECK(cfg.plants[0].base_temperature == 40.0);
  CHECK(cfg.plants[0].modules == 12);
  CHECK(cfg.plants[0].anomaly_probability() == doctest::Approx(0.2));
  CHECK(cfg.plants[1].plant_id == 5);
  CHECK(cfg.plants[1].width == 30);
  CHECK(cfg.plants[1].fault_mix[fault_index(FaultClass::Chs)] == 0.5);
  CHECK(cfg.plants[1].fault_mix[fault_index(FaultClass::Mh)] == 0.25);
  CHECK(cfg.plants[1].anomaly_probability() == doctest::Approx(0.75));

  CHECK_THROWS_AS(parse_synth_config("bogus = 1\n"), FormatError);
  CHECK_THROWS_AS(parse_synth_config("[plant 1]\nfault_mix = Zz:0.1\n"), FormatError);
  CHECK_THROWS_AS(parse_synth_config("[plant 1]\nfault_mix = Mh:0.7, Sh:0.7\n"), InvalidArgument);
  CHECK_THROWS_AS(parse_synth_config("[plant 1]\nfault_scale = 0.2\n"), InvalidArgument);
}
