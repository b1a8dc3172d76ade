#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace derain {

double psnr(const Image& a, const Image& b, double peak) {
    if (a.channels != b.channels || a.height != b.height || a.width != b.width)
        throw DimensionError("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return 100.0;  // cap for identical images
    return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

namespace {

std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(n) * n);
    const int h = n / 2;
    double sum = 0.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double dy = y - h, dx = x - h;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            w[static_cast<std::size_t>(y) * n + x] = v;
            sum += v;
        }
    for (double& v : w) v /= sum;
    return w;
}

}  // namespace

double ssim(const Image& a, const Image& b, double peak) {
    if (a.channels != b.channels || a.height != b.height || a.width != b.width)
        throw DimensionError("ssim: shape mismatch");
    constexpr int kWin = 11;
    if (a.height < kWin || a.width < kWin)
        throw ContractError("ssim: image smaller than the 11x11 window");
    static const std::vector<double> win = gaussian_window(kWin, 1.5);
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);

    double acc = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y + kWin <= a.height; ++y)
            for (int x = 0; x + kWin <= a.width; ++x) {
                double ma = 0.0, mb = 0.0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double w = win[static_cast<std::size_t>(wy) * kWin + wx];
                        ma += w * a.at(c, y + wy, x + wx);
                        mb += w * b.at(c, y + wy, x + wx);
                    }
                double va = 0.0, vb = 0.0, cov = 0.0;
                for (int wy = 0; wy < kWin; ++wy)
                    for (int wx = 0; wx < kWin; ++wx) {
                        const double w = win[static_cast<std::size_t>(wy) * kWin + wx];
                        const double da = a.at(c, y + wy, x + wx) - ma;
                        const double db = b.at(c, y + wy, x + wx) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return acc / static_cast<double>(count);
}

std::vector<std::string> export_attention_maps(const DerainModel& model,
                                               const MemoryBank& memory,
                                               const Image& image,
                                               const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw IoError("export_attention_maps: cannot create " + out_dir);

    const int s = model.config().input_size;
    Tensor input = Tensor::from_data({1, 3, s, s}, image.data);
    DerainOutput out = model.forward(input, &memory);
    const int q = model.config().query_spatial();
    const int m = memory.item_count();

    std::vector<std::string> paths;
    for (int im = 0; im < m; ++im) {
        // alpha column for this item, laid out on the query grid
        std::vector<double> grid(static_cast<std::size_t>(q) * q);
        for (int k = 0; k < q * q; ++k)
            grid[static_cast<std::size_t>(k)] = out.alpha.data()[static_cast<std::size_t>(k) * m + im];

        // bilinear upsample to the image size
        Image up = Image::zeros(1, s, s);
        const double scale = static_cast<double>(q) / s;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double fy = (y + 0.5) * scale - 0.5, fx = (x + 0.5) * scale - 0.5;
                const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, q - 1);
                const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, q - 1);
                const int y1 = std::min(y0 + 1, q - 1), x1 = std::min(x0 + 1, q - 1);
                const double ty = std::clamp(fy - y0, 0.0, 1.0);
                const double tx = std::clamp(fx - x0, 0.0, 1.0);
                up.at(0, y, x) = (grid[static_cast<std::size_t>(y0) * q + x0] * (1 - tx) +
                                  grid[static_cast<std::size_t>(y0) * q + x1] * tx) * (1 - ty) +
                                 (grid[static_cast<std::size_t>(y1) * q + x0] * (1 - tx) +
                                  grid[static_cast<std::size_t>(y1) * q + x1] * tx) * ty;
            }

        // per-map min-max scale into the PNG range; flat maps render mid-gray
        double lo = up.data[0], hi = up.data[0];
        for (double v : up.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double& v : up.data)
            v = (hi - lo > 1e-12) ? (v - lo) / (hi - lo) * 2.0 - 1.0 : 0.0;

        char name[32];
        std::snprintf(name, sizeof(name), "item_%03d.png", im);
        const std::string path = (fs::path(out_dir) / name).string();
        write_png(path, up);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace derain
