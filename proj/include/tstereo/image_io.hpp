#pragma once

#include "tstereo/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace tstereo {

struct CodecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  Index height = 0, width = 0;
  int bit_depth = 8;  // 8 or 16
  std::vector<uint16_t> pixels;  // row-major, native range of bit_depth
};

GrayImage readGrayPng(const std::string& path);
void writeGrayPng(const std::string& path, const GrayImage& img,
                  const std::map<std::string, std::string>& text = {});

/// 8-bit RGB, interleaved row-major.
void writeRgbPng(const std::string& path, Index height, Index width,
                 const std::vector<uint8_t>& rgb,
                 const std::map<std::string, std::string>& text = {});

/// Reads an RGB PNG as interleaved 8-bit; grayscale files are expanded.
std::vector<uint8_t> readRgbPng(const std::string& path, Index& height, Index& width);

}  // namespace tstereo
