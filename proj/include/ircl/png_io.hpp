#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ircl/types.hpp"

namespace ircl::png {

void write_gray16(const std::filesystem::path& file, const Grid<std::uint16_t>& image);
Grid<std::uint16_t> read_gray16(const std::filesystem::path& file);

std::string encode_gray8(const Grid<std::uint8_t>& image);
Grid<std::uint8_t> decode_gray8(const std::string& bytes);

}  // namespace ircl::png
