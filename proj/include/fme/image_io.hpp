#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fme::img {

// Decoded 8-bit image, interleaved channels (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

// Decodes a PNG or JPEG file (sniffed by magic bytes). Throws
// fme::DatasetError on anything unreadable.
Image decode_image(const std::string& path);

// 8-bit grayscale writers used by the synthetic dataset exporter and tests.
void encode_png_gray(const std::string& path, int width, int height,
                     const std::uint8_t* pixels);
void encode_jpeg_gray(const std::string& path, int width, int height,
                      const std::uint8_t* pixels, int quality = 92);

}  // namespace fme::img
