#include "eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "errors.hpp"

namespace derain {

Image derain_image(const DerainModel& model, const MemoryBank* memory, bool use_memory,
                   const Image& input, Image* rain_out) {
    const int s = model.config().input_size;
    if (input.channels != 3 || input.height != s || input.width != s)
        throw DimensionError("derain_image: expected a 3x" + std::to_string(s) + "x" +
                             std::to_string(s) + " input");
    Tensor x = Tensor::from_data({1, 3, s, s}, input.data);
    DerainOutput out = model.forward(x, memory, use_memory);

    Image bg = Image::zeros(3, s, s);
    Image rain = Image::zeros(3, s, s);
    for (std::size_t i = 0; i < bg.data.size(); ++i) {
        const double r = std::clamp(out.rain.data()[i], 0.0, 2.0);
        rain.data[i] = r;
        bg.data[i] = std::clamp(input.data[i] - r, -1.0, 1.0);
    }
    if (rain_out) *rain_out = std::move(rain);
    return bg;
}

EvalSummary evaluate_dataset(const DerainModel* model, const MemoryBank* memory,
                             bool use_memory, const std::vector<DatasetScene>& scenes,
                             const std::string& out_csv) {
    std::ofstream csv(out_csv);
    if (!csv) throw IoError("evaluate_dataset: cannot write " + out_csv);
    csv << "scene_id,frame_id,psnr_db,ssim,input_psnr_db,input_ssim\n";

    EvalSummary sum;
    for (const auto& scene : scenes) {
        if (scene.background.channels == 0)
            throw IoError("evaluate_dataset: scene " + std::to_string(scene.scene_id) +
                          " has no background.png");
        for (std::size_t t = 0; t < scene.frames.size(); ++t) {
            const Image& frame = scene.frames[t];
            const Image derained =
                model ? derain_image(*model, memory, use_memory, frame) : frame;
            const double p = psnr(derained, scene.background);
            const double s = ssim(derained, scene.background);
            const double pin = psnr(frame, scene.background);
            const double sin_ = ssim(frame, scene.background);
            char buf[192];
            std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f,%.6f\n", scene.scene_id,
                          static_cast<int>(t), p, s, pin, sin_);
            csv << buf;
            sum.mean_psnr += p;
            sum.mean_ssim += s;
            sum.mean_input_psnr += pin;
            sum.mean_input_ssim += sin_;
            ++sum.rows;
        }
    }
    if (sum.rows > 0) {
        sum.mean_psnr /= sum.rows;
        sum.mean_ssim /= sum.rows;
        sum.mean_input_psnr /= sum.rows;
        sum.mean_input_ssim /= sum.rows;
    }
    char buf[192];
    std::snprintf(buf, sizeof(buf), "mean,,%.6f,%.6f,%.6f,%.6f\n", sum.mean_psnr,
                  sum.mean_ssim, sum.mean_input_psnr, sum.mean_input_ssim);
    csv << buf;
    if (!csv) throw IoError("evaluate_dataset: write failed for " + out_csv);
    return sum;
}

}  // namespace derain
