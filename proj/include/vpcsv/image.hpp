#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace vpcsv {

/// Error tied to a file on disk.
class IoError : public std::runtime_error {
 public:
  IoError(const std::filesystem::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// 8-bit raster, row-major HWC.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h * w * c), 0) {}

  std::uint8_t& at(int y, int x, int c = 0) { return data[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(int y, int x, int c = 0) const {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool operator==(const Image8&) const = default;
};

/// [0, 1] floats in HWC order.
Eigen::VectorXf to_unit_float(const Image8& image);
/// Clamps to [0, 1] and rounds to 8 bits.
Image8 from_unit_float(const float* values, int height, int width, int channels);

/// Writes 1-channel (gray) or 3-channel (RGB) PNG.
void write_png(const std::filesystem::path& path, const Image8& image);
/// Reads a PNG, converting to the requested channel count (1 or 3).
Image8 read_png(const std::filesystem::path& path, int channels);

/// Places images left to right with a `gap`-pixel white separator.
Image8 hconcat(const std::vector<Image8>& images, int gap = 0);
/// Stacks images top to bottom; narrower rows are padded with white.
Image8 vconcat(const std::vector<Image8>& images, int gap = 0);

}  // namespace vpcsv
