#include "rain_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace derain {

namespace {

double next_uniform(std::mt19937_64& rng) {  // [0,1)
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double next_uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * next_uniform(rng);
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// bilinear value noise from a random lattice with the given cell size
void add_value_noise(Image& im, int channel, std::mt19937_64& rng, int cell,
                     double amplitude) {
    const int gw = im.width / cell + 2, gh = im.height / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gw) * gh);
    for (double& v : lattice) v = next_uniform(rng, -1.0, 1.0);
    for (int y = 0; y < im.height; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(fy);
        const double ty = fy - y0;
        for (int x = 0; x < im.width; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(fx);
            const double tx = fx - x0;
            const double v00 = lattice[static_cast<std::size_t>(y0) * gw + x0];
            const double v01 = lattice[static_cast<std::size_t>(y0) * gw + x0 + 1];
            const double v10 = lattice[static_cast<std::size_t>(y0 + 1) * gw + x0];
            const double v11 = lattice[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
            const double v = (v00 * (1 - tx) + v01 * tx) * (1 - ty) +
                             (v10 * (1 - tx) + v11 * tx) * ty;
            im.at(channel, y, x) += amplitude * v;
        }
    }
}

std::string scene_dir_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%03d", id);
    return buf;
}

std::string frame_file_name(int t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.png", t);
    return buf;
}

}  // namespace

void RainParams::validate() const {
    if (density < 0.0 || density > 1.0) throw ContractError("RainParams: density out of [0,1]");
    if (length_px <= 0.0 || width_px <= 0.0)
        throw ContractError("RainParams: length/width must be positive");
    if (angle_deg < -45.0 || angle_deg > 45.0)
        throw ContractError("RainParams: angle out of [-45,45]");
    if (intensity <= 0.0 || intensity > 1.0)
        throw ContractError("RainParams: intensity out of (0,1]");
    if (jitter < 0.0) throw ContractError("RainParams: jitter must be >= 0");
}

Image gen_background(std::uint64_t seed, int size) {
    if (size < 16) throw ContractError("gen_background: size must be >= 16");
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    Image im = Image::zeros(3, size, size);

    // shared luminance octaves plus a small per-channel tint octave
    Image lum = Image::zeros(1, size, size);
    for (int cell : {size / 2, size / 4, size / 8, size / 16})
        if (cell >= 1) add_value_noise(lum, 0, rng, cell, 0.45 * cell * 2.0 / size + 0.12);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) im.at(c, y, x) = lum.at(0, y, x);
        add_value_noise(im, c, rng, std::max(1, size / 8), 0.15);
    }

    // a few solid rectangles, structure the losses can latch onto
    const int nrect = 3 + static_cast<int>(next_uniform(rng) * 3.0);
    for (int r = 0; r < nrect; ++r) {
        const int rw = 4 + static_cast<int>(next_uniform(rng) * size * 0.5);
        const int rh = 4 + static_cast<int>(next_uniform(rng) * size * 0.5);
        const int rx = static_cast<int>(next_uniform(rng) * (size - 1));
        const int ry = static_cast<int>(next_uniform(rng) * (size - 1));
        double col[3];
        for (double& cc : col) cc = next_uniform(rng, -0.6, 0.6);
        for (int y = ry; y < std::min(size, ry + rh); ++y)
            for (int x = rx; x < std::min(size, rx + rw); ++x)
                for (int c = 0; c < 3; ++c) im.at(c, y, x) += col[c] * 0.5;
    }

    // linear gradient with a random direction
    const double ga = next_uniform(rng, 0.0, 2.0 * 3.14159265358979323846);
    const double gs = next_uniform(rng, 0.1, 0.35);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double t =
                (std::cos(ga) * x + std::sin(ga) * y) / size - 0.5;
            for (int c = 0; c < 3; ++c) im.at(c, y, x) += gs * t;
        }

    // keep every channel comfortably textured and inside [-1,1]
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int c = 0; c < 3; ++c) {
        double m = 0.0;
        for (std::size_t i = 0; i < plane; ++i) m += im.data[c * plane + i];
        m /= static_cast<double>(plane);
        double var = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double d = im.data[c * plane + i] - m;
            var += d * d;
        }
        const double sd = std::sqrt(var / static_cast<double>(plane));
        const double gain = sd < 1e-9 ? 1.0 : clampd(0.2 / sd, 0.25, 50.0);
        for (std::size_t i = 0; i < plane; ++i)
            im.data[c * plane + i] =
                clampd(-0.15 + (im.data[c * plane + i] - m) * gain, -1.0, 1.0);
    }
    return im;
}

Image gen_rain_layer(const RainParams& params, int size, std::uint64_t seed) {
    params.validate();
    std::mt19937_64 rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
    const int ss = 2 * size;  // 2x supersampling
    std::vector<double> canvas(static_cast<std::size_t>(ss) * ss, 0.0);

    const int n_streaks =
        static_cast<int>(std::lround(params.density * static_cast<double>(size) * size));
    const double rad = params.angle_deg * 3.14159265358979323846 / 180.0;
    const double dx = std::sin(rad), dy = std::cos(rad);  // angle measured from vertical
    const double half_len = params.length_px;             // in supersampled pixels (2*len/2)
    const double half_w = params.width_px;                // likewise

    for (int s = 0; s < n_streaks; ++s) {
        const double cx = next_uniform(rng) * ss;
        const double cy = next_uniform(rng) * ss;
        const double x0 = cx - dx * half_len, y0 = cy - dy * half_len;
        const double x1 = cx + dx * half_len, y1 = cy + dy * half_len;
        const int bx0 = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - half_w - 1)));
        const int bx1 = std::min(ss - 1, static_cast<int>(std::ceil(std::max(x0, x1) + half_w + 1)));
        const int by0 = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - half_w - 1)));
        const int by1 = std::min(ss - 1, static_cast<int>(std::ceil(std::max(y0, y1) + half_w + 1)));
        const double vx = x1 - x0, vy = y1 - y0;
        const double len2 = vx * vx + vy * vy;
        for (int y = by0; y <= by1; ++y)
            for (int x = bx0; x <= bx1; ++x) {
                const double px = x + 0.5 - x0, py = y + 0.5 - y0;
                const double t = len2 > 0.0 ? clampd((px * vx + py * vy) / len2, 0.0, 1.0) : 0.0;
                const double ex = px - t * vx, ey = py - t * vy;
                const double dist = std::sqrt(ex * ex + ey * ey);
                const double cov = clampd(half_w + 0.5 - dist, 0.0, 1.0);
                if (cov > 0.0)
                    canvas[static_cast<std::size_t>(y) * ss + x] += cov * params.intensity;
            }
    }

    Image layer = Image::zeros(3, size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double v = clampd(
                0.25 * (canvas[static_cast<std::size_t>(2 * y) * ss + 2 * x] +
                        canvas[static_cast<std::size_t>(2 * y) * ss + 2 * x + 1] +
                        canvas[static_cast<std::size_t>(2 * y + 1) * ss + 2 * x] +
                        canvas[static_cast<std::size_t>(2 * y + 1) * ss + 2 * x + 1]),
                0.0, 1.0);
            for (int c = 0; c < 3; ++c) layer.at(c, y, x) = v;
        }
    return layer;
}

TimeLapseScene gen_timelapse(std::uint64_t seed, const RainParams& params, int frames,
                             int size) {
    params.validate();
    if (frames < 2) throw ContractError("gen_timelapse: need at least 2 frames");
    TimeLapseScene scene;
    scene.seed = seed;
    scene.background = gen_background(seed, size);

    std::mt19937_64 rng(seed ^ 0xa0761d6478bd642fULL);
    for (int t = 0; t < frames; ++t) {
        // per-frame parameter jitter around the scene params
        RainParams p = params;
        const double j = params.jitter;
        p.density = clampd(params.density * (1.0 + 0.5 * j * next_uniform(rng, -1.0, 1.0)), 0.0, 1.0);
        p.length_px = std::max(1.0, params.length_px * (1.0 + 0.5 * j * next_uniform(rng, -1.0, 1.0)));
        p.angle_deg = clampd(params.angle_deg + 10.0 * j * next_uniform(rng, -1.0, 1.0), -45.0, 45.0);
        p.intensity = clampd(params.intensity * (1.0 + 0.5 * j * next_uniform(rng, -1.0, 1.0)), 1e-6, 1.0);
        const std::uint64_t frame_seed = rng();

        Image layer = gen_rain_layer(p, size, frame_seed);
        Image frame = scene.background;
        for (std::size_t i = 0; i < frame.data.size(); ++i)
            frame.data[i] = clampd(frame.data[i] + layer.data[i], -1.0, 1.0);
        scene.rain_layers.push_back(std::move(layer));
        scene.frames.push_back(std::move(frame));
    }
    return scene;
}

void write_scene(const std::string& root, const TimeLapseScene& scene) {
    const fs::path dir = fs::path(root) / scene_dir_name(scene.scene_id);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("write_scene: cannot create " + dir.string());

    write_png((dir / "background.png").string(), scene.background);
    for (std::size_t t = 0; t < scene.frames.size(); ++t)
        write_png((dir / frame_file_name(static_cast<int>(t))).string(), scene.frames[t]);

    nlohmann::json meta;
    meta["scene_id"] = scene.scene_id;
    meta["seed"] = scene.seed;
    meta["frames"] = scene.frames.size();
    meta["size"] = scene.background.width;
    std::ofstream out(dir / "meta.json");
    if (!out) throw IoError("write_scene: cannot write meta.json");
    out << meta.dump(2) << "\n";
}

std::vector<DatasetScene> load_dataset(const std::string& root, bool need_background) {
    if (!fs::is_directory(root)) throw IoError("load_dataset: no such directory: " + root);
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0)
            dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw IoError("load_dataset: no scene_* directories in " + root);

    std::vector<DatasetScene> scenes;
    for (const auto& dir : dirs) {
        DatasetScene s;
        s.scene_id = std::stoi(dir.filename().string().substr(6));
        for (int t = 0;; ++t) {
            const fs::path f = dir / frame_file_name(t);
            if (!fs::exists(f)) break;
            s.frames.push_back(read_png(f.string()));
        }
        if (s.frames.size() < 2)
            throw ContractError("load_dataset: scene " + dir.string() +
                                " has fewer than 2 frames");
        const fs::path bg = dir / "background.png";
        if (fs::exists(bg))
            s.background = read_png(bg.string());
        else if (need_background)
            throw IoError("load_dataset: missing background.png in " + dir.string());
        scenes.push_back(std::move(s));
    }
    return scenes;
}

}  // namespace derain
