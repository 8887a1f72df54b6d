#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlminv/core.hpp"

namespace vlminv {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::array<unsigned char, 32> sha256(std::string_view bytes);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_file(const fs::path& path);
/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view content);

/// Shortest round-trip decimal form of a double ("%.17g").
std::string format_real(Real value);

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);
json vector_to_json(const Vector& v);
Vector vector_from_json(const json& j);

/// Interleaved 8-bit RGB raster.
struct Raster {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;

  Raster(int w, int h, unsigned char fill = 255);
  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b);
  void fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g, unsigned char b);
  void line(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g, unsigned char b);
};

Raster to_raster(const ImageTensor& image, int scale = 1);
/// Encodes as PNG and writes atomically.
void write_png(const fs::path& path, const Raster& raster);

}  // namespace vlminv
