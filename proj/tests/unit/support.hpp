#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ircl/encoder.hpp"
#include "ircl/types.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 gen{std::random_device{}()};
    path_ = std::filesystem::temp_directory_path() / ("ircl_test_" + std::to_string(gen()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ircl::IRImage make_image(std::uint64_t id, std::uint16_t plant, std::uint32_t module,
                                std::size_t rows, std::size_t cols, std::uint16_t fill = 8000) {
  ircl::IRImage img;
  img.image_id = id;
  img.plant_id = plant;
  img.module_id = module;
  img.raw = ircl::Grid<std::uint16_t>(rows, cols, fill);
  img.binary_label = ircl::BinaryLabel::normal;
  return img;
}

inline std::vector<float> random_unit(std::mt19937_64& gen, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  for (auto& x : v) x = n(gen);
  const auto z = ircl::l2_normalize(v);
  return {z.begin(), z.end()};
}

inline ircl::Embedding make_embedding(std::uint64_t id, std::vector<float> z, ircl::BinaryLabel label,
                                      std::uint32_t module = 1, std::uint16_t plant = 1) {
  ircl::Embedding e;
  e.image_id = id;
  e.plant_id = plant;
  e.module_id = module;
  e.binary_label = label;
  e.z = std::move(z);
  return e;
}

}  // namespace testing
