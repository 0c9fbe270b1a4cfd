#include "ircl/types.hpp"

namespace ircl {
namespace {

constexpr std::array<std::string_view, kNumFaultClasses> kFaultNames = {
    "Mh", "Mp", "Sh", "Sp", "Pid", "Cm+", "Cs+", "C", "D", "Chs"};

}  // namespace

std::string_view fault_name(FaultClass c) { return kFaultNames.at(fault_index(c)); }

std::optional<FaultClass> parse_fault_class(std::string_view name) {
  for (std::size_t i = 0; i < kNumFaultClasses; ++i)
    if (kFaultNames[i] == name) return kAllFaultClasses[i];
  return std::nullopt;
}

std::string_view label_name(BinaryLabel l) {
  return l == BinaryLabel::anomalous ? "anomalous" : "normal";
}

std::optional<BinaryLabel> parse_binary_label(std::string_view name) {
  if (name == "normal" || name == "0") return BinaryLabel::normal;
  if (name == "anomalous" || name == "1") return BinaryLabel::anomalous;
  return std::nullopt;
}

void IRImage::validate() const {
  if (raw.rows < 8 || raw.cols < 8)
    throw InvalidArgument("image " + std::to_string(image_id) + " is smaller than 8x8");
  if (raw.data.size() != raw.rows * raw.cols)
    throw InvalidArgument("image " + std::to_string(image_id) + " has inconsistent pixel data");
  if (fault_class && binary_label != BinaryLabel::anomalous)
    throw InvalidArgument("image " + std::to_string(image_id) +
                          " has a fault class but is not labelled anomalous");
  if (!(gain > 0.0)) throw InvalidArgument("radiometric gain must be positive");
}

std::size_t label_slot(std::optional<BinaryLabel> binary, std::optional<FaultClass> fault) {
  if (!binary) throw InvalidArgument("sample has no label");
  if (*binary == BinaryLabel::normal) return 0;
  if (fault) return static_cast<std::size_t>(*fault);
  return kNumFaultClasses + 1;
}

std::size_t label_slot(const IRImage& image) {
  if (!image.binary_label) throw InvalidArgument("image " + std::to_string(image.image_id) +
                                                 " has no label");
  return label_slot(image.binary_label, image.fault_class);
}

}  // namespace ircl
