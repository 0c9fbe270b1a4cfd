#include "ircl/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

namespace ircl::png {
namespace {

struct ReadBuffer {
  const std::string* bytes;
  std::size_t pos = 0;
};

void read_from_buffer(png_structp png, png_bytep out, png_size_t length) {
  auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + length > buf->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, buf->bytes->data() + buf->pos, length);
  buf->pos += length;
}

void write_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_noop(png_structp) {}

std::string slurp(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw NotFound("cannot open image " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Decodes a single-channel PNG of the given bit depth into big-endian rows.
std::vector<std::uint8_t> decode(const std::string& bytes, int want_depth, std::size_t& rows,
                                 std::size_t& cols) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8))
    throw FormatError("not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("png_create_info_struct failed");
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG");
  }
  ReadBuffer buf{&bytes};
  png_set_read_fn(png, &buf, read_from_buffer);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != want_depth) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected " + std::to_string(want_depth) + "-bit single-channel PNG");
  }
  rows = height;
  cols = width;
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * rows);
  std::vector<png_bytep> row_ptrs(rows);
  for (std::size_t r = 0; r < rows; ++r) row_ptrs[r] = pixels.data() + r * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

std::string encode(const std::uint8_t* rows_data, std::size_t rows, std::size_t cols, int depth) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encoding failed");
  }
  png_set_write_fn(png, &out, write_to_string, flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = cols * static_cast<std::size_t>(depth / 8);
  for (std::size_t r = 0; r < rows; ++r)
    png_write_row(png, const_cast<png_bytep>(rows_data + r * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

void write_gray16(const std::filesystem::path& file, const Grid<std::uint16_t>& image) {
  std::vector<std::uint8_t> be(image.size() * 2);
  for (std::size_t i = 0; i < image.size(); ++i) {
    be[2 * i] = static_cast<std::uint8_t>(image.data[i] >> 8);
    be[2 * i + 1] = static_cast<std::uint8_t>(image.data[i] & 0xFF);
  }
  const std::string bytes = encode(be.data(), image.rows, image.cols, 16);
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Grid<std::uint16_t> read_gray16(const std::filesystem::path& file) {
  std::size_t rows = 0, cols = 0;
  const auto be = decode(slurp(file), 16, rows, cols);
  Grid<std::uint16_t> image(rows, cols);
  for (std::size_t i = 0; i < image.size(); ++i)
    image.data[i] = static_cast<std::uint16_t>((be[2 * i] << 8) | be[2 * i + 1]);
  return image;
}

std::string encode_gray8(const Grid<std::uint8_t>& image) {
  return encode(image.data.data(), image.rows, image.cols, 8);
}

Grid<std::uint8_t> decode_gray8(const std::string& bytes) {
  std::size_t rows = 0, cols = 0;
  auto pixels = decode(bytes, 8, rows, cols);
  Grid<std::uint8_t> image(rows, cols);
  image.data = std::move(pixels);
  return image;
}

}  // namespace ircl::png
