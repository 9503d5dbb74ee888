#pragma once

#include <png.h>

#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "tmvod/datagen.hpp"

namespace tmvod {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image info;
  std::memset(&info, 0, sizeof(info));
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(img.width);
  info.height = static_cast<png_uint_32>(img.height);
  info.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&info, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG '" + path.string() + "': " + info.message);
  }
}

inline Image read_png(const std::filesystem::path& path) {
  png_image info;
  std::memset(&info, 0, sizeof(info));
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&info, path.string().c_str())) {
    throw ImageIoError("cannot read PNG '" + path.string() + "': " + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  Image img(static_cast<int>(info.width), static_cast<int>(info.height));
  if (!png_image_finish_read(&info, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = info.message;
    png_image_free(&info);
    throw ImageIoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return img;
}

}  // namespace tmvod
