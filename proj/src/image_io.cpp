#include "tstereo/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace tstereo {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, &info);
  }
};

void setText(png_structp png, png_infop info, const std::map<std::string, std::string>& text) {
  if (text.empty()) return;
  std::vector<png_text> entries;
  entries.reserve(text.size());
  for (auto& [k, v] : text) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = const_cast<char*>(k.c_str());
    t.text = const_cast<char*>(v.c_str());
    t.text_length = v.size();
    entries.push_back(t);
  }
  png_set_text(png, info, entries.data(), static_cast<int>(entries.size()));
}

}  // namespace

GrayImage readGrayPng(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw CodecError("cannot open PNG for reading: " + path);
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  r.info = png_create_info_struct(r.png);
  if (setjmp(png_jmpbuf(r.png))) throw CodecError("malformed PNG: " + path);
  png_init_io(r.png, f.get());
  png_read_info(r.png, r.info);

  const int color = png_get_color_type(r.png, r.info);
  const int depth = png_get_bit_depth(r.png, r.info);
  if (color != PNG_COLOR_TYPE_GRAY)
    throw CodecError("expected single-channel grayscale PNG, got color type " +
                     std::to_string(color) + ": " + path);
  if (depth != 8 && depth != 16)
    throw CodecError("expected 8- or 16-bit PNG, got " + std::to_string(depth) + "-bit: " + path);
  if (depth == 16) png_set_swap(r.png);  // libpng delivers big-endian rows

  GrayImage img;
  img.height = png_get_image_height(r.png, r.info);
  img.width = png_get_image_width(r.png, r.info);
  img.bit_depth = depth;
  img.pixels.resize(static_cast<size_t>(img.height * img.width));

  std::vector<uint8_t> row(static_cast<size_t>(img.width) * (depth / 8));
  for (Index y = 0; y < img.height; ++y) {
    png_read_row(r.png, row.data(), nullptr);
    if (depth == 16) {
      auto* p = reinterpret_cast<const uint16_t*>(row.data());
      for (Index x = 0; x < img.width; ++x) img.pixels[y * img.width + x] = p[x];
    } else {
      for (Index x = 0; x < img.width; ++x) img.pixels[y * img.width + x] = row[x];
    }
  }
  return img;
}

void writeGrayPng(const std::string& path, const GrayImage& img,
                  const std::map<std::string, std::string>& text) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw CodecError("cannot open PNG for writing: " + path);
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  w.info = png_create_info_struct(w.png);
  if (setjmp(png_jmpbuf(w.png))) throw CodecError("PNG write failed: " + path);
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), img.bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  setText(w.png, w.info, text);
  png_write_info(w.png, w.info);
  if (img.bit_depth == 16) png_set_swap(w.png);

  if (img.bit_depth == 16) {
    for (Index y = 0; y < img.height; ++y)
      png_write_row(w.png, reinterpret_cast<png_const_bytep>(img.pixels.data() + y * img.width));
  } else {
    std::vector<uint8_t> row(static_cast<size_t>(img.width));
    for (Index y = 0; y < img.height; ++y) {
      for (Index x = 0; x < img.width; ++x)
        row[static_cast<size_t>(x)] = static_cast<uint8_t>(img.pixels[y * img.width + x] & 0xff);
      png_write_row(w.png, row.data());
    }
  }
  png_write_end(w.png, w.info);
}

void writeRgbPng(const std::string& path, Index height, Index width,
                 const std::vector<uint8_t>& rgb, const std::map<std::string, std::string>& text) {
  if (rgb.size() != static_cast<size_t>(height * width * 3))
    throw CodecError("writeRgbPng: buffer size mismatch");
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw CodecError("cannot open PNG for writing: " + path);
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  w.info = png_create_info_struct(w.png);
  if (setjmp(png_jmpbuf(w.png))) throw CodecError("PNG write failed: " + path);
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  setText(w.png, w.info, text);
  png_write_info(w.png, w.info);
  for (Index y = 0; y < height; ++y)
    png_write_row(w.png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  png_write_end(w.png, w.info);
}

std::vector<uint8_t> readRgbPng(const std::string& path, Index& height, Index& width) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw CodecError("cannot open PNG for reading: " + path);
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  r.info = png_create_info_struct(r.png);
  if (setjmp(png_jmpbuf(r.png))) throw CodecError("malformed PNG: " + path);
  png_init_io(r.png, f.get());
  png_read_info(r.png, r.info);
  png_set_expand(r.png);
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  if (png_get_color_type(r.png, r.info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(r.png, r.info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);

  height = png_get_image_height(r.png, r.info);
  width = png_get_image_width(r.png, r.info);
  std::vector<uint8_t> out(static_cast<size_t>(height * width * 3));
  for (Index y = 0; y < height; ++y) png_read_row(r.png, out.data() + y * width * 3, nullptr);
  return out;
}

}  // namespace tstereo
