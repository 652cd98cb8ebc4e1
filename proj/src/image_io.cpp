#include "vpcsv/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace vpcsv {

Eigen::VectorXf to_unit_float(const Image8& image) {
  Eigen::VectorXf out(static_cast<Eigen::Index>(image.data.size()));
  for (std::size_t i = 0; i < image.data.size(); ++i) out[static_cast<Eigen::Index>(i)] = image.data[i] / 255.0f;
  return out;
}

Image8 from_unit_float(const float* values, int height, int width, int channels) {
  Image8 image(height, width, channels);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const float v = std::clamp(values[i], 0.0f, 1.0f);
    image.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw IoError(path, "PNG writer supports 1 or 3 channels");
  if (image.data.size() != static_cast<std::size_t>(image.height * image.width * image.channels)) {
    throw IoError(path, "image buffer size does not match its dimensions");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.data.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path, "PNG write failed: " + msg);
  }
}

Image8 read_png(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw IoError(path, "PNG reader supports 1 or 3 channels");
  if (!std::filesystem::exists(path)) throw IoError(path, "file not found");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path, "corrupt PNG: " + msg);
  }
  png.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 image(static_cast<int>(png.height), static_cast<int>(png.width), channels);
  if (!png_image_finish_read(&png, nullptr, image.data.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path, "corrupt PNG: " + msg);
  }
  return image;
}

Image8 hconcat(const std::vector<Image8>& images, int gap) {
  if (images.empty()) return {};
  int height = 0, width = 0;
  const int channels = images.front().channels;
  for (const auto& im : images) {
    if (im.channels != channels) throw std::invalid_argument("hconcat: channel mismatch");
    height = std::max(height, im.height);
    width += im.width;
  }
  width += gap * static_cast<int>(images.size() - 1);
  Image8 out(height, width, channels);
  std::fill(out.data.begin(), out.data.end(), 255);
  int x0 = 0;
  for (const auto& im : images) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < channels; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
    x0 += im.width + gap;
  }
  return out;
}

Image8 vconcat(const std::vector<Image8>& images, int gap) {
  if (images.empty()) return {};
  int height = 0, width = 0;
  const int channels = images.front().channels;
  for (const auto& im : images) {
    if (im.channels != channels) throw std::invalid_argument("vconcat: channel mismatch");
    width = std::max(width, im.width);
    height += im.height;
  }
  height += gap * static_cast<int>(images.size() - 1);
  Image8 out(height, width, channels);
  std::fill(out.data.begin(), out.data.end(), 255);
  int y0 = 0;
  for (const auto& im : images) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < channels; ++c) out.at(y0 + y, x, c) = im.at(y, x, c);
    y0 += im.height + gap;
  }
  return out;
}

}  // namespace vpcsv
