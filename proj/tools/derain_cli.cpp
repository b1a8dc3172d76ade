// Command-line front end; all heavy lifting lives behind the C API.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <derain/derain.h>

namespace {

int report(derain_status status) {
    if (status != DERAIN_OK)
        std::fprintf(stderr, "error: %s\n", derain_last_error());
    return static_cast<int>(status);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-guided single-image de-raining toolkit"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand(
        "gen-data", "Generate a synthetic rainy time-lapse dataset");
    std::string gen_out;
    int gen_scenes = 8, gen_frames = 8, gen_size = 64;
    unsigned long long gen_seed = 0;
    bool gen_force = false;
    derain_rain_params rain;
    derain_rain_params_default(&rain);
    gen->add_option("-o,--out", gen_out, "Output dataset directory")->required();
    gen->add_option("--scenes", gen_scenes, "Number of scenes");
    gen->add_option("--frames", gen_frames, "Frames per scene (>= 2)");
    gen->add_option("--size", gen_size, "Square frame size in pixels");
    gen->add_option("--seed", gen_seed, "Base RNG seed (scene i uses seed + i)");
    gen->add_option("--density", rain.density, "Streak count as a fraction of pixels");
    gen->add_option("--length", rain.length_px, "Streak length in pixels");
    gen->add_option("--width", rain.width_px, "Streak width in pixels");
    gen->add_option("--angle", rain.angle_deg, "Streak angle from vertical, degrees");
    gen->add_option("--intensity", rain.intensity, "Streak brightness in (0,1]");
    gen->add_option("--jitter", rain.jitter, "Relative per-frame parameter noise");
    gen->add_flag("--force", gen_force, "Allow writing into a non-empty directory");

    // ---- train ----
    auto* train = app.add_subcommand("train", "Train a de-raining model");
    derain_train_options opt;
    derain_train_options_init(&opt);
    std::string tr_data, tr_ckpt, tr_csv, tr_cfg, tr_resume, tr_grouping;
    unsigned long long tr_seed = 0;
    train->add_option("--data", tr_data, "Dataset directory from gen-data")->required();
    train->add_option("--ckpt-out", tr_ckpt, "Checkpoint output path")->required();
    train->add_option("--metrics-csv", tr_csv, "Per-step loss CSV (appended on resume)");
    train->add_option("--config", tr_cfg,
                      "key=value config file (flags override file values, "
                      "file values override built-in defaults)");
    train->add_option("--resume", tr_resume, "Checkpoint to continue from");
    train->add_option("--steps", opt.steps, "Total training steps");
    train->add_option("--save-every", opt.save_every,
                      "Checkpoint every N steps (default: final only)");
    train->add_option("--batch-size", opt.batch_size, "Frame pairs per step");
    train->add_option("--memory-items", opt.memory_items, "Memory bank size");
    train->add_option("--base-channels", opt.base_channels, "Encoder base channels");
    train->add_option("--query-channels", opt.query_channels, "Query channels");
    train->add_option("--input-size", opt.input_size, "Square input size");
    train->add_option("--use-memory", opt.use_memory, "1: memory read/update, 0: off");
    train->add_option("--bsw-l", opt.bsw_l, "Whitening loss: low-variance groups kept");
    train->add_option("--bsw-h", opt.bsw_h, "Whitening loss: total variance groups");
    train->add_option("--bsw-grouping", tr_grouping,
                      "Variance grouping rule: cluster or quantile");
    auto* seed_opt = train->add_option("--seed", tr_seed, "RNG seed");
    train->add_option("--lr0", opt.lr0, "Peak learning rate (cosine-annealed to 0)");
    train->add_option("--lambda-b", opt.lambda_b, "Background consistency weight");
    train->add_option("--lambda-s", opt.lambda_s, "Self-consistency weight");
    train->add_option("--lambda-c", opt.lambda_c, "Cross consistency weight");
    train->add_option("--lambda-w", opt.lambda_w, "Whitening loss weight");

    // ---- derain ----
    auto* run = app.add_subcommand("derain", "De-rain one PNG image");
    std::string d_ckpt, d_in, d_bg, d_rain;
    run->add_option("--ckpt", d_ckpt, "Trained checkpoint")->required();
    run->add_option("-i,--in", d_in, "Input PNG (square, the trained size)")->required();
    run->add_option("--out-bg", d_bg, "De-rained background PNG");
    run->add_option("--out-rain", d_rain, "Estimated rain layer PNG");

    // ---- eval ----
    auto* eval = app.add_subcommand(
        "eval", "Score de-rained frames against held-out backgrounds");
    std::string e_ckpt, e_data, e_out;
    eval->add_option("--ckpt", e_ckpt, "Checkpoint (omit for the identity baseline)");
    eval->add_option("--data", e_data, "Dataset directory with background.png")->required();
    eval->add_option("-o,--out", e_out, "Per-frame metrics CSV")->required();

    // ---- inspect-memory ----
    auto* inspect = app.add_subcommand(
        "inspect-memory", "Dump memory item norms and attention maps");
    std::string m_ckpt, m_in, m_out;
    inspect->add_option("--ckpt", m_ckpt, "Trained checkpoint")->required();
    inspect->add_option("-i,--in", m_in, "Input PNG for the attention maps");
    inspect->add_option("--out-dir", m_out, "Directory for per-item attention PNGs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        const derain_status st = derain_generate_dataset(
            gen_out.c_str(), gen_scenes, gen_frames, gen_size, gen_seed, &rain,
            gen_force ? 1 : 0);
        if (st == DERAIN_OK)
            for (int i = 0; i < gen_scenes; ++i)
                std::printf("scene_%03d: %d frames of %dx%d (seed %llu)\n", i, gen_frames,
                            gen_size, gen_size, gen_seed + static_cast<unsigned long long>(i));
        return report(st);
    }

    if (train->parsed()) {
        opt.data_dir = tr_data.c_str();
        opt.ckpt_out = tr_ckpt.c_str();
        if (!tr_csv.empty()) opt.metrics_csv = tr_csv.c_str();
        if (!tr_cfg.empty()) opt.config_file = tr_cfg.c_str();
        if (!tr_resume.empty()) opt.resume_ckpt = tr_resume.c_str();
        if (!tr_grouping.empty()) opt.bsw_grouping = tr_grouping.c_str();
        if (*seed_opt) {
            opt.seed = tr_seed;
            opt.seed_set = 1;
        }
        std::printf("training: data=%s ckpt=%s%s\n", tr_data.c_str(), tr_ckpt.c_str(),
                    tr_resume.empty() ? "" : " (resumed)");
        return report(derain_train_run(&opt));
    }

    if (run->parsed()) {
        derain_model* model = nullptr;
        derain_status st = derain_model_load(d_ckpt.c_str(), &model);
        if (st == DERAIN_OK) {
            st = derain_model_derain_file(model, d_in.c_str(),
                                          d_bg.empty() ? nullptr : d_bg.c_str(),
                                          d_rain.empty() ? nullptr : d_rain.c_str());
            derain_model_free(model);
        }
        return report(st);
    }

    if (eval->parsed()) {
        return report(derain_evaluate(e_ckpt.empty() ? nullptr : e_ckpt.c_str(),
                                      e_data.c_str(), e_out.c_str()));
    }

    if (inspect->parsed()) {
        derain_model* model = nullptr;
        derain_status st = derain_model_load(m_ckpt.c_str(), &model);
        if (st != DERAIN_OK) return report(st);
        int count = 0;
        std::vector<double> norms(
            static_cast<std::size_t>(derain_model_memory_items(model)));
        st = derain_model_item_norms(model, norms.data(),
                                     static_cast<int>(norms.size()), &count);
        if (st == DERAIN_OK) {
            for (int i = 0; i < count; ++i)
                std::printf("item_%03d |p| = %.12f\n", i, norms[static_cast<std::size_t>(i)]);
            if (!m_in.empty() && !m_out.empty())
                st = derain_model_export_attention(model, m_in.c_str(), m_out.c_str());
            else if (!m_in.empty() || !m_out.empty())
                std::fprintf(stderr,
                             "note: attention maps need both --in and --out-dir\n");
        }
        derain_model_free(model);
        return report(st);
    }

    return 1;
}
