#pragma once

#include <string>
#include <vector>

#include "image_io.hpp"
#include "model.hpp"

namespace derain {

// 10*log10(peak^2/MSE); identical images report the 100 dB cap.
double psnr(const Image& a, const Image& b, double peak = 2.0);

// Single-scale SSIM, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
// averaged over channels and valid window positions.
double ssim(const Image& a, const Image& b, double peak = 2.0);

struct MetricRow {
    int scene_id = 0;
    int frame_id = 0;
    double psnr_db = 0.0;
    double ssim_val = 0.0;
};

// One grayscale PNG per memory item: the spatial map of that item's read
// weight, bilinearly upsampled to the image size, min-max scaled per map.
// Returns the written paths.
std::vector<std::string> export_attention_maps(const DerainModel& model,
                                               const MemoryBank& memory,
                                               const Image& image,
                                               const std::string& out_dir);

}  // namespace derain
