#pragma once

// PNG/JPEG decoding into [0,1] images and 8-bit grayscale PNG output.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "sal3sd/error.hpp"
#include "sal3sd/tensor.hpp"

namespace sal3sd {

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

/// Interleaved 8-bit pixels with `channels` per pixel.
struct Raster {
  int width = 0, height = 0, channels = 0;
  std::vector<unsigned char> px;
};

inline Raster read_png(const std::filesystem::path& path, bool gray) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r{static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3, {}};
  r.px.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return r;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline Raster read_jpeg(const std::filesystem::path& path, bool gray) {
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!f) throw IoError("cannot open " + path.string());
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = [](j_common_ptr c) { std::longjmp(reinterpret_cast<JpegError*>(c->err)->jump, 1); };
  Raster r;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = gray ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  r.width = static_cast<int>(cinfo.output_width);
  r.height = static_cast<int>(cinfo.output_height);
  r.channels = cinfo.output_components;
  r.px.resize(static_cast<std::size_t>(r.width) * r.height * r.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = r.px.data() + static_cast<std::size_t>(cinfo.output_scanline) * r.width * r.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return r;
}

inline Raster read_raster(const std::filesystem::path& path, bool gray) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("no such file: " + path.string());
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path, gray);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path, gray);
  throw IoError("unsupported image type: " + path.string());
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string e = detail::lower_ext(p);
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

/// Decodes to RGB and scales by 1/255.
inline Image read_image(const std::filesystem::path& path) {
  const auto r = detail::read_raster(path, false);
  Image img(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = r.px[(static_cast<std::size_t>(y) * r.width + x) * 3 + c] / 255.0;
  return img;
}

/// Decodes to 8-bit gray and scales by 1/255.
inline SaliencyMap read_gray(const std::filesystem::path& path) {
  const auto r = detail::read_raster(path, true);
  SaliencyMap m(r.height, r.width);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.px[i] / 255.0;
  return m;
}

/// v in [0,1] -> floor(255 v + 0.5), clamped.
inline unsigned char to_byte(double v) {
  const double s = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<unsigned char>(s);
}

inline void write_gray_png(const std::filesystem::path& path, const SaliencyMap& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<unsigned char> px(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) px[i] = to_byte(m[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(m.width());
  img.height = static_cast<png_uint_32>(m.height());
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, px.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

inline void write_rgb_png(const std::filesystem::path& path, const Image& im) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<unsigned char> px(static_cast<std::size_t>(im.height()) * im.width() * 3);
  for (int y = 0; y < im.height(); ++y)
    for (int x = 0; x < im.width(); ++x)
      for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * im.width() + x) * 3 + c] = to_byte(im.at(c, y, x));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width());
  img.height = static_cast<png_uint_32>(im.height());
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, px.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

}  // namespace sal3sd
