#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "image_io.hpp"

namespace derain {

struct RainParams {
    double density = 0.004;    // streak count fraction of the pixel count
    double length_px = 14.0;
    double width_px = 1.2;
    double angle_deg = 8.0;    // from vertical, in [-45,45]
    double intensity = 0.7;    // in (0,1]
    double jitter = 0.3;       // per-frame parameter noise, >= 0

    void validate() const;
};

// One static background composed with T independent rain layers:
// frame_t = clamp(background + rain_t).
struct TimeLapseScene {
    int scene_id = 0;
    std::uint64_t seed = 0;
    Image background;                 // [3,S,S] in [-1,1]
    std::vector<Image> rain_layers;   // [3,S,S], values in [0,1]
    std::vector<Image> frames;        // [3,S,S] in [-1,1]
};

// Procedural texture: multi-octave value noise plus random rectangles and a
// gradient; per-channel standard deviation is at least 0.1.
Image gen_background(std::uint64_t seed, int size);

// Anti-aliased additive streaks (2x supersampled, box-downsampled).
Image gen_rain_layer(const RainParams& params, int size, std::uint64_t seed);

TimeLapseScene gen_timelapse(std::uint64_t seed, const RainParams& params, int frames,
                             int size);

// On-disk layout: root/scene_<id>/frame_<t>.png, background.png, meta.json.
void write_scene(const std::string& root, const TimeLapseScene& scene);

struct DatasetScene {
    int scene_id = 0;
    std::vector<Image> frames;
    Image background;  // empty (channels == 0) when missing
};

std::vector<DatasetScene> load_dataset(const std::string& root, bool need_background);

}  // namespace derain
