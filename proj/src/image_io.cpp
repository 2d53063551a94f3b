#include "metaseg/image_io.hpp"

#include <png.h>

#include <cstring>
#include <string>

namespace metaseg {

Image8 read_png(const std::filesystem::path& path, std::size_t expect_channels) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  const bool is_colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  if ((expect_channels == 3) != is_colour) {
    png_image_free(&img);
    throw ImageIoError(path.string() + ": expected " +
                       (expect_channels == 3 ? "an RGB" : "a single-channel") +
                       " PNG");
  }
  img.format = expect_channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = expect_channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageIoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ImageIoError("write_png: unsupported channel count " +
                       std::to_string(image.channels));
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw ImageIoError("write_png: pixel buffer size mismatch");
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0,
                               nullptr)) {
    throw ImageIoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

}  // namespace metaseg
