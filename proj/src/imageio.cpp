#include "sinf/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace sinet::io {

const std::vector<Rgb>& label_palette() {
  static const std::vector<Rgb> palette = [] {
    const std::vector<Rgb> base = {
        {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},
        {145, 30, 180}, {70, 240, 240},  {240, 50, 230}, {210, 245, 60}, {250, 190, 212},
        {0, 128, 128},  {220, 190, 255}, {170, 110, 40}, {255, 250, 200}, {128, 0, 0},
        {170, 255, 195}, {128, 128, 0},  {255, 215, 180}, {0, 0, 128},   {128, 128, 128}};
    std::vector<Rgb> p(256);
    for (int i = 0; i < 255; ++i) {
      if (i < static_cast<int>(base.size())) {
        p[i] = base[i];
      } else {
        p[i] = {static_cast<std::uint8_t>((i * 67) % 256), static_cast<std::uint8_t>((i * 151) % 256),
                static_cast<std::uint8_t>((i * 29) % 256)};
      }
    }
    p[255] = {0, 0, 0};
    return p;
  }();
  return palette;
}

std::string hex_color(const Rgb& c) { return fmt::format("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]); }

namespace {

struct PngBuffer {
  const std::string* in = nullptr;
  std::size_t pos = 0;
  std::string out;
};

void write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* b = static_cast<PngBuffer*>(png_get_io_ptr(png));
  b->out.append(reinterpret_cast<const char*>(data), len);
}

void flush_cb(png_structp) {}

void read_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* b = static_cast<PngBuffer*>(png_get_io_ptr(png));
  if (b->pos + len > b->in->size()) png_error(png, "unexpected end of PNG data");
  std::memcpy(data, b->in->data() + b->pos, len);
  b->pos += len;
}

void error_cb(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  *text = msg;
  png_longjmp(png, 1);
}

void warning_cb(png_structp, png_const_charp) {}

// Rows are (width * channels) bytes each.
std::string encode_png(int width, int height, int color_type, const std::vector<std::uint8_t>& pixels,
                       int channels, bool with_palette) {
  if (width <= 0 || height <= 0) throw ImageError(fmt::format("cannot encode {}x{} image", width, height));
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
  if (!png) throw ImageError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  PngBuffer buf;
  std::vector<png_bytep> rows(height);
  std::vector<png_color> pal;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &buf, write_cb, flush_cb);
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (with_palette) {
    for (const auto& c : label_palette()) pal.push_back({c[0], c[1], c[2]});
    png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  }
  // Fixed settings keep encodes byte-identical across runs.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.out);
}

struct Decoded {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

Decoded decode_png(const std::string& bytes, bool expand_palette) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw ImageError("not a PNG stream");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, error_cb, warning_cb);
  if (!png) throw ImageError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngBuffer buf;
  buf.in = &bytes;
  Decoded d;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("corrupt PNG: " + err);
  }
  png_set_read_fn(png, &buf, read_cb);
  png_read_info(png, info);
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.color_type = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (d.color_type == PNG_COLOR_TYPE_PALETTE && expand_palette) png_set_palette_to_rgb(png);
  if (depth < 8) {
    if (d.color_type == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(png);
    else png_set_packing(png);
  }
  png_read_update_info(png, info);
  d.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  d.pixels.resize(stride * d.height);
  rows.resize(d.height);
  for (int y = 0; y < d.height; ++y) rows[y] = d.pixels.data() + static_cast<std::size_t>(y) * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

std::string encode_rgb_png(const nn::Tensor& image) {
  if (image.c() != 3) throw ImageError(fmt::format("RGB encode needs 3 channels, got {}", image.c()));
  std::vector<std::uint8_t> px(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return encode_png(image.w(), image.h(), PNG_COLOR_TYPE_RGB, px, 3, false);
}

nn::Tensor decode_rgb_png(const std::string& bytes) {
  Decoded d = decode_png(bytes, true);
  if (d.channels < 3) {
    nn::Tensor gray(d.height, d.width, 3);
    for (int p = 0; p < d.width * d.height; ++p)
      for (int c = 0; c < 3; ++c) gray[p * 3 + c] = d.pixels[p * d.channels] / 255.0F;
    return gray;
  }
  nn::Tensor img(d.height, d.width, 3);
  for (int p = 0; p < d.width * d.height; ++p)
    for (int c = 0; c < 3; ++c) img[p * 3 + c] = d.pixels[static_cast<std::size_t>(p) * d.channels + c] / 255.0F;
  return img;
}

std::string encode_label_raster(const nn::LabelMap& labels) {
  if (labels.data.size() != static_cast<std::size_t>(labels.h) * labels.w) {
    throw ImageError("label map size does not match its dimensions");
  }
  return encode_png(labels.w, labels.h, PNG_COLOR_TYPE_PALETTE, labels.data, 1, true);
}

nn::LabelMap decode_label_raster(const std::string& bytes) {
  Decoded d = decode_png(bytes, false);
  if (d.color_type != PNG_COLOR_TYPE_PALETTE && d.color_type != PNG_COLOR_TYPE_GRAY) {
    throw ImageError("label raster must be a palette or grayscale PNG");
  }
  nn::LabelMap m(d.height, d.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = d.pixels[i * d.channels];
  return m;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(fmt::format("short write to {}", path.string()));
}

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                            (static_cast<std::uint8_t>(bytes[i + 1]) << 8) | static_cast<std::uint8_t>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) | (static_cast<std::uint8_t>(bytes[i + 1]) << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw ImageError("base64 length is not a multiple of 4");
  auto value = [](char ch) -> int {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
    if (ch >= '0' && ch <= '9') return ch - '0' + 52;
    if (ch == '+') return 62;
    if (ch == '/') return 63;
    return -1;
  };
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char ch = text[i + k];
      if (ch == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0) throw ImageError("base64 padding in the middle of a quantum");
      v[k] = value(ch);
      if (v[k] < 0) throw ImageError(fmt::format("invalid base64 character at offset {}", i + k));
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((n >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((n >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(n & 0xFF);
  }
  return out;
}

}  // namespace sinet::io
