#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sinf/tensor.hpp"

namespace sinet::io {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed legend: class k uses entry k, the ignore label uses entry 255.
const std::vector<Rgb>& label_palette();
std::string hex_color(const Rgb& c);

/// RGB float image in [0, 1] -> 8-bit PNG bytes (values are rounded).
std::string encode_rgb_png(const nn::Tensor& image);
nn::Tensor decode_rgb_png(const std::string& bytes);

/// Class-index raster as an 8-bit palette PNG; indices survive unchanged.
std::string encode_label_raster(const nn::LabelMap& labels);
/// Accepts palette or 8-bit grayscale PNGs. Throws ImageError on corrupt input.
nn::LabelMap decode_label_raster(const std::string& bytes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

/// RFC 4648 base64.
std::string base64_encode(const std::string& bytes);
/// Throws ImageError on characters outside the alphabet or bad padding.
std::string base64_decode(const std::string& text);

}  // namespace sinet::io
