#include "liaf/heatmap.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>

namespace liaf {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Piecewise-linear jet map.
void jet(double v, std::uint8_t rgb[3]) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [](double x) { return std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0); };
  rgb[0] = to_byte(ch(v - 0.75));
  rgb[1] = to_byte(ch(v - 0.5));
  rgb[2] = to_byte(ch(v - 0.25));
}

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

Image8 render(const SoftMask<double>& mask, Index n, int upscale, int channels) {
  if (n < 0 || n >= mask.n()) throw std::invalid_argument("heatmap: image index out of range");
  if (upscale < 1) throw std::invalid_argument("heatmap: upscale must be >= 1");
  Image8 img;
  img.width = static_cast<int>(mask.w()) * upscale;
  img.height = static_cast<int>(mask.h()) * upscale;
  img.channels = channels;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * channels));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double v = mask.values(n, 0, y / upscale, x / upscale);
      auto* px = &img.pixels[static_cast<std::size_t>((y * img.width + x) * channels)];
      if (channels == 1)
        px[0] = to_byte(v);
      else
        jet(v, px);
    }
  return img;
}

}  // namespace

Image8 mask_to_gray(const SoftMask<double>& mask, Index n, int upscale) { return render(mask, n, upscale, 1); }
Image8 mask_to_color(const SoftMask<double>& mask, Index n, int upscale) { return render(mask, n, upscale, 3); }

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels expected");
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) throw std::runtime_error("write_png: cannot open '" + tmp + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw std::runtime_error("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw std::runtime_error("write_png: libpng error writing '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
      png_write_row(png, img.pixels.data() + static_cast<std::size_t>(y * img.width * img.channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

Image8 read_png(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng error reading '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  Image8 img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const auto type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (type != PNG_COLOR_TYPE_GRAY && type != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: only 8-bit gray or RGB supported");
  }
  img.channels = type == PNG_COLOR_TYPE_GRAY ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * img.channels));
  for (int y = 0; y < img.height; ++y)
    png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y * img.width * img.channels), nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace liaf
