#include "derain/derain.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "../core/eval.hpp"
#include "../core/errors.hpp"
#include "../core/metrics.hpp"
#include "../core/rain_synth.hpp"
#include "../core/train.hpp"

namespace fs = std::filesystem;

namespace {

thread_local std::string g_last_error;

template <typename Fn>
derain_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return DERAIN_OK;
    } catch (const derain::IoError& e) {
        g_last_error = e.what();
        return DERAIN_ERR_IO;
    } catch (const derain::NumericError& e) {
        g_last_error = e.what();
        return DERAIN_ERR_NUMERIC;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return DERAIN_ERR_USAGE;
    }
}

bool is_set(double v) { return !std::isnan(v); }

}  // namespace

extern "C" {

const char* derain_last_error(void) { return g_last_error.c_str(); }

void derain_rain_params_default(derain_rain_params* params) {
    derain::RainParams d;
    params->density = d.density;
    params->length_px = d.length_px;
    params->width_px = d.width_px;
    params->angle_deg = d.angle_deg;
    params->intensity = d.intensity;
    params->jitter = d.jitter;
}

derain_status derain_generate_dataset(const char* out_dir, int scenes, int frames,
                                      int size, unsigned long long seed,
                                      const derain_rain_params* rain, int force) {
    return guarded([&] {
        if (!out_dir) throw derain::ContractError("gen-data: output directory required");
        if (scenes < 1) throw derain::ContractError("gen-data: need at least one scene");
        if (frames < 2)
            throw derain::ContractError("gen-data: need at least 2 frames per scene");
        if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
            throw derain::ContractError(std::string("gen-data: ") + out_dir +
                                        " is not empty (use --force to overwrite)");
        derain::RainParams params;
        if (rain) {
            params.density = rain->density;
            params.length_px = rain->length_px;
            params.width_px = rain->width_px;
            params.angle_deg = rain->angle_deg;
            params.intensity = rain->intensity;
            params.jitter = rain->jitter;
        }
        params.validate();
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw derain::IoError(std::string("gen-data: cannot create ") + out_dir);
        for (int i = 0; i < scenes; ++i) {
            derain::TimeLapseScene scene = derain::gen_timelapse(
                static_cast<std::uint64_t>(seed) + static_cast<std::uint64_t>(i), params,
                frames, size);
            scene.scene_id = i;
            derain::write_scene(out_dir, scene);
        }
    });
}

void derain_train_options_init(derain_train_options* options) {
    std::memset(options, 0, sizeof(*options));
    options->steps = -1;
    options->save_every = -1;
    options->batch_size = -1;
    options->memory_items = -1;
    options->base_channels = -1;
    options->query_channels = -1;
    options->input_size = -1;
    options->use_memory = -1;
    options->bsw_l = -1;
    options->bsw_h = -1;
    options->lr0 = NAN;
    options->lambda_b = NAN;
    options->lambda_s = NAN;
    options->lambda_c = NAN;
    options->lambda_w = NAN;
}

derain_status derain_train_run(const derain_train_options* o) {
    return guarded([&] {
        if (!o || !o->data_dir || !o->ckpt_out)
            throw derain::ContractError("train: data_dir and ckpt_out are required");

        std::vector<derain::DatasetScene> data =
            derain::load_dataset(o->data_dir, /*need_background=*/false);

        std::unique_ptr<derain::Trainer> trainer;
        if (o->resume_ckpt) {
            trainer = std::make_unique<derain::Trainer>(
                derain::Trainer::resume(o->resume_ckpt, std::move(data)));
            // --steps may extend or re-pin the schedule on resume
            if (o->steps > 0) {
                derain::TrainConfig cfg = trainer->config();
                if (cfg.total_steps != o->steps)
                    throw derain::ContractError(
                        "train: --steps on resume must match the checkpoint schedule");
            }
        } else {
            derain::TrainConfig cfg;
            if (o->config_file)
                for (const auto& [k, v] : derain::parse_config_file(o->config_file))
                    derain::apply_config_kv(cfg, k, v);
            if (o->steps > 0) cfg.total_steps = o->steps;
            if (o->batch_size > 0) cfg.batch_size = o->batch_size;
            if (o->memory_items > 0) cfg.memory_items = o->memory_items;
            if (o->base_channels > 0) cfg.model.base_channels = o->base_channels;
            if (o->query_channels > 0) cfg.model.query_channels = o->query_channels;
            if (o->input_size > 0) cfg.model.input_size = o->input_size;
            if (o->use_memory >= 0) cfg.use_memory = o->use_memory != 0;
            if (o->bsw_l > 0) cfg.bsw.low_groups = o->bsw_l;
            if (o->bsw_h > 0) cfg.bsw.num_groups = o->bsw_h;
            if (o->bsw_grouping) {
                const std::string g = o->bsw_grouping;
                if (g == "cluster") cfg.bsw.grouping = derain::BswGrouping::kCluster;
                else if (g == "quantile") cfg.bsw.grouping = derain::BswGrouping::kQuantile;
                else throw derain::ContractError("train: bsw_grouping must be cluster or quantile");
            }
            if (o->seed_set) cfg.seed = o->seed;
            if (is_set(o->lr0)) cfg.lr0 = o->lr0;
            if (is_set(o->lambda_b)) cfg.weights.lambda_b = o->lambda_b;
            if (is_set(o->lambda_s)) cfg.weights.lambda_s = o->lambda_s;
            if (is_set(o->lambda_c)) cfg.weights.lambda_c = o->lambda_c;
            if (is_set(o->lambda_w)) cfg.weights.lambda_w = o->lambda_w;
            // infer the model size from the data when not pinned
            if (o->input_size <= 0 && !data.empty() && !data[0].frames.empty())
                cfg.model.input_size = data[0].frames[0].height;
            trainer = std::make_unique<derain::Trainer>(cfg, std::move(data));
        }

        std::ofstream csv;
        if (o->metrics_csv) {
            const bool fresh = !o->resume_ckpt;
            csv.open(o->metrics_csv, fresh ? std::ios::trunc : std::ios::app);
            if (!csv)
                throw derain::IoError(std::string("train: cannot write ") + o->metrics_csv);
            if (fresh) derain::write_metrics_header(csv);
        }

        const int total = trainer->config().total_steps;
        const int save_every = o->save_every;
        while (trainer->current_step() < total) {
            const double lr = trainer->current_lr();
            const derain::LossReport report = trainer->step();
            if (csv.is_open()) {
                derain::write_metrics_row(csv, trainer->current_step(), lr, report);
                csv.flush();
            }
            if (save_every > 0 && trainer->current_step() % save_every == 0)
                trainer->save(o->ckpt_out);
        }
        trainer->save(o->ckpt_out);
    });
}

struct derain_model {
    std::unique_ptr<derain::InferenceBundle> bundle;
};

derain_status derain_model_load(const char* checkpoint_path, derain_model** out) {
    return guarded([&] {
        if (!checkpoint_path || !out)
            throw derain::ContractError("model_load: null argument");
        auto bundle = std::make_unique<derain::InferenceBundle>(
            derain::load_inference_bundle(checkpoint_path));
        *out = new derain_model{std::move(bundle)};
    });
}

void derain_model_free(derain_model* model) { delete model; }

int derain_model_input_size(const derain_model* model) {
    return model->bundle->config.model.input_size;
}

int derain_model_memory_items(const derain_model* model) {
    return model->bundle->memory.item_count();
}

derain_status derain_model_derain_file(derain_model* model, const char* in_png,
                                       const char* out_bg_png, const char* out_rain_png) {
    return guarded([&] {
        if (!in_png) throw derain::ContractError("derain: input path required");
        const derain::Image input = derain::read_png(in_png);
        const int s = model->bundle->config.model.input_size;
        if (input.height != s || input.width != s)
            throw derain::ContractError("derain: expected a " + std::to_string(s) + "x" +
                                        std::to_string(s) + " input, got " +
                                        std::to_string(input.width) + "x" +
                                        std::to_string(input.height));
        derain::Image rain;
        const derain::Image bg =
            derain::derain_image(model->bundle->model, &model->bundle->memory,
                                 model->bundle->config.use_memory, input, &rain);
        if (out_bg_png) derain::write_png(out_bg_png, bg);
        if (out_rain_png) {
            // rain lives in [0,2]; shift into the PNG's [-1,1] domain
            for (double& v : rain.data) v -= 1.0;
            derain::write_png(out_rain_png, rain);
        }
    });
}

derain_status derain_model_export_attention(derain_model* model, const char* in_png,
                                            const char* out_dir) {
    return guarded([&] {
        if (!in_png || !out_dir)
            throw derain::ContractError("inspect-memory: input and output required");
        if (!model->bundle->config.use_memory)
            throw derain::ContractError(
                "inspect-memory: checkpoint was trained without the memory bank");
        const derain::Image input = derain::read_png(in_png);
        const int s = model->bundle->config.model.input_size;
        if (input.height != s || input.width != s)
            throw derain::ContractError("inspect-memory: expected a " + std::to_string(s) +
                                        "x" + std::to_string(s) + " input");
        derain::export_attention_maps(model->bundle->model, model->bundle->memory, input,
                                      out_dir);
    });
}

derain_status derain_model_item_norms(const derain_model* model, double* out, int cap,
                                      int* out_count) {
    return guarded([&] {
        const derain::MemoryBank& bank = model->bundle->memory;
        const int m = bank.item_count(), c = bank.channels();
        if (out_count) *out_count = m;
        for (int i = 0; i < std::min(m, cap); ++i) {
            double s = 0.0;
            for (int j = 0; j < c; ++j) {
                const double v = bank.items().data()[static_cast<std::size_t>(i) * c + j];
                s += v * v;
            }
            out[i] = std::sqrt(s);
        }
    });
}

derain_status derain_evaluate(const char* checkpoint_path, const char* data_dir,
                              const char* out_csv) {
    return guarded([&] {
        if (!data_dir || !out_csv)
            throw derain::ContractError("eval: data_dir and out_csv are required");
        std::vector<derain::DatasetScene> scenes =
            derain::load_dataset(data_dir, /*need_background=*/true);
        if (checkpoint_path) {
            derain::InferenceBundle bundle = derain::load_inference_bundle(checkpoint_path);
            derain::evaluate_dataset(&bundle.model, &bundle.memory,
                                     bundle.config.use_memory, scenes, out_csv);
        } else {
            derain::evaluate_dataset(nullptr, nullptr, false, scenes, out_csv);
        }
    });
}

}  // extern "C"
