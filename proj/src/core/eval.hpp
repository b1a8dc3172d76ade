#pragma once

#include <string>
#include <vector>

#include "metrics.hpp"
#include "model.hpp"
#include "rain_synth.hpp"

namespace derain {

struct EvalSummary {
    int rows = 0;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_input_psnr = 0.0;
    double mean_input_ssim = 0.0;
};

// De-rain every frame (identity when model is null) and score it against the
// scene's held-out background. CSV columns:
// scene_id,frame_id,psnr_db,ssim,input_psnr_db,input_ssim plus a mean row.
EvalSummary evaluate_dataset(const DerainModel* model, const MemoryBank* memory,
                             bool use_memory, const std::vector<DatasetScene>& scenes,
                             const std::string& out_csv);

// input minus the estimated rain, clamped to [-1,1].
Image derain_image(const DerainModel& model, const MemoryBank* memory, bool use_memory,
                   const Image& input, Image* rain_out = nullptr);

}  // namespace derain
