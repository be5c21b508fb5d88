#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cxo {

/// 8-bit grayscale image, row-major.
struct Image {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int r, int c, std::uint8_t fill = 0) : rows(r), cols(c), pixels(static_cast<std::size_t>(r * c), fill) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r * cols + c)]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r * cols + c)]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary PGM ("P5\n<cols> <rows>\n255\n" + raw bytes).
std::string encode_pgm(const Image& img);
Image decode_pgm(const std::string& bytes);
void write_pgm(const std::filesystem::path& path, const Image& img);
Image read_pgm(const std::filesystem::path& path);

}  // namespace cxo
