#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "matir/tensor.hpp"

namespace matir {

/// 8-bit image, interleaved channels, row-major. channels is 1 or 3.
struct ImagePlane {
    int64_t width = 0;
    int64_t height = 0;
    int64_t channels = 1;
    std::vector<uint8_t> pixels;

    static ImagePlane create(int64_t w, int64_t h, int64_t c, uint8_t fill = 0);

    uint8_t at(int64_t y, int64_t x, int64_t c) const {
        return pixels[static_cast<size_t>((y * width + x) * channels + c)];
    }
    uint8_t& at(int64_t y, int64_t x, int64_t c) {
        return pixels[static_cast<size_t>((y * width + x) * channels + c)];
    }
    bool valid() const {
        return width > 0 && height > 0 && (channels == 1 || channels == 3) &&
               pixels.size() == static_cast<size_t>(width * height * channels);
    }
};

/// Reads PNG (8-bit gray/RGB/RGBA/gray+alpha, alpha dropped) or binary
/// PPM/PGM, selected by file extension (.png, .ppm, .pgm).
ImagePlane read_image(const std::string& path);

/// Writes PNG or binary PPM/PGM by extension.
void write_image(const std::string& path, const ImagePlane& img);

/// [C x H x W] tensor in [0, 1].
Tensor image_to_tensor(const ImagePlane& img);

/// Replicates grayscale to three channels; [3 x H x W] in [0, 1].
Tensor image_to_tensor3(const ImagePlane& img);

/// Clamps to [0, 1], scales to 8 bits, rounds half away from zero.
ImagePlane tensor_to_image(const Tensor& t);

}  // namespace matir
