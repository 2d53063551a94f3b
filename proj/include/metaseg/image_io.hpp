#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace metaseg {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

// Reads a PNG. With `expect_channels` = 3 the file must be a colour image, with
// 1 it must be greyscale; anything else is rejected.
Image8 read_png(const std::filesystem::path& path, std::size_t expect_channels);
void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace metaseg
