#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ircl/errors.hpp"

namespace ircl {

enum class BinaryLabel : std::uint8_t { normal = 0, anomalous = 1 };

/// The ten fault classes, numbered 1..10 in the order Mh..Chs.
enum class FaultClass : std::uint8_t {
  Mh = 1,   // module open-circuit
  Mp = 2,   // module short-circuit
  Sh = 3,   // substring open-circuit
  Sp = 4,   // substring short-circuit
  Pid = 5,  // potential-induced degradation
  CmPlus = 6,
  CsPlus = 7,
  C = 8,
  D = 9,
  Chs = 10,
};

inline constexpr std::size_t kNumFaultClasses = 10;

inline constexpr std::array<FaultClass, kNumFaultClasses> kAllFaultClasses = {
    FaultClass::Mh,     FaultClass::Mp,     FaultClass::Sh, FaultClass::Sp, FaultClass::Pid,
    FaultClass::CmPlus, FaultClass::CsPlus, FaultClass::C,  FaultClass::D,  FaultClass::Chs};

/// Zero-based position of a fault class in kAllFaultClasses.
constexpr std::size_t fault_index(FaultClass c) { return static_cast<std::size_t>(c) - 1; }

std::string_view fault_name(FaultClass c);
std::optional<FaultClass> parse_fault_class(std::string_view name);

std::string_view label_name(BinaryLabel l);
std::optional<BinaryLabel> parse_binary_label(std::string_view name);

/// Dense row-major 2D grid.
template <typename T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  bool operator==(const Grid&) const = default;
};

/// Identifies one physical PV module across plants.
struct ModuleKey {
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  auto operator<=>(const ModuleKey&) const = default;
};

inline constexpr double kDefaultGain = 0.04;
inline constexpr double kDefaultOffset = -273.15;

/// Raw 16-bit radiometric frame of a single module plus identity and labels.
struct IRImage {
  std::uint64_t image_id = 0;
  std::uint16_t plant_id = 0;
  std::uint32_t module_id = 0;
  Grid<std::uint16_t> raw;
  /// Counter-clockwise quarter turns that put the junction box at the top.
  int orientation = 0;
  std::optional<BinaryLabel> binary_label;
  std::optional<FaultClass> fault_class;
  double gain = kDefaultGain;
  double offset = kDefaultOffset;

  ModuleKey module_key() const { return {plant_id, module_id}; }
  bool is_anomalous() const { return binary_label == BinaryLabel::anomalous; }

  /// Throws InvalidArgument when the label or size invariants are broken.
  void validate() const;
};

/// Composite label index used for batch audits: 0 normal, 1..10 fault classes.
/// Anomalous images without a fine-grained class map to 11.
inline constexpr std::size_t kLabelSlots = kNumFaultClasses + 2;
std::size_t label_slot(const IRImage& image);
std::size_t label_slot(std::optional<BinaryLabel> binary, std::optional<FaultClass> fault);

}  // namespace ircl
