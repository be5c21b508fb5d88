#include "chexofa/image.hpp"

#include <fstream>
#include <sstream>

#include "chexofa/errors.hpp"

namespace cxo {

std::string encode_pgm(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

Image decode_pgm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
  is >> magic >> cols >> rows >> maxval;
  if (!is || magic != "P5" || maxval != 255 || rows <= 0 || cols <= 0) throw FormatError("pgm: unsupported header");
  is.get();  // single whitespace before the raster
  Image img(rows, cols);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw FormatError("pgm: truncated raster");
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image " + path.string());
  const auto bytes = encode_pgm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read image " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_pgm(ss.str());
}

}  // namespace cxo
