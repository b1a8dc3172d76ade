#pragma once

#include <string>
#include <vector>

namespace derain {

// Planar image, channel-major, values in [-1,1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    static Image zeros(int channels, int height, int width) {
        Image im;
        im.channels = channels;
        im.height = height;
        im.width = width;
        im.data.assign(static_cast<std::size_t>(channels) * height * width, 0.0);
        return im;
    }
    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::size_t size() const { return data.size(); }
};

// 8-bit PNG; [-1,1] maps linearly to [0,255]. write accepts 1 or 3 channels.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);  // always returns 3 channels

}  // namespace derain
