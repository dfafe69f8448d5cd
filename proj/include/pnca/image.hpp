#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace pnca {

/// Channels-first float RGB image. Photometric ops keep values in [0,1];
/// channel_normalize produces unbounded values as the last pipeline stage.
struct Image {
    static constexpr int channels = 3;
    int height = 0;
    int width = 0;
    std::vector<float> data;  // 3 * height * width, channel-major

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, fill) {}

    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
};

/// Decodes an 8-bit PNG (gray/palette/alpha accepted, converted to RGB) into
/// [0,1] floats. Throws IngestError naming the path on any decode problem.
Image read_png(const std::string& path);

/// Writes an image as 8-bit RGB PNG; values are clamped to [0,1] and rounded.
void write_png(const std::string& path, const Image& img);

}  // namespace pnca
