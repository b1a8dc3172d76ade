#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "core/train.hpp"

using namespace derain;
namespace fs = std::filesystem;

namespace {

std::vector<DatasetScene> tiny_dataset(int scenes, int frames, int size) {
    RainParams p;
    std::vector<DatasetScene> out;
    for (int i = 0; i < scenes; ++i) {
        TimeLapseScene scene = gen_timelapse(static_cast<std::uint64_t>(100 + i), p, frames, size);
        DatasetScene d;
        d.scene_id = i;
        d.frames = scene.frames;
        d.background = scene.background;
        out.push_back(std::move(d));
    }
    return out;
}

TrainConfig tiny_config(int steps) {
    TrainConfig cfg;
    cfg.total_steps = steps;
    cfg.batch_size = 2;
    cfg.seed = 5;
    cfg.memory_items = 4;
    cfg.model.input_size = 16;
    cfg.model.base_channels = 4;
    cfg.model.query_channels = 2;
    return cfg;
}

}  // namespace

TEST_CASE("cosine annealing hits the pinned points exactly") {
    CHECK(cosine_anneal_lr(0, 100, 2e-4) == 2e-4);
    CHECK(cosine_anneal_lr(50, 100, 2e-4) == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(std::abs(cosine_anneal_lr(100, 100, 2e-4)) < 1e-19);
}

TEST_CASE("adam matches the hand recurrence") {
    // scalar, constant gradient 1, lr=0.1, default betas
    std::vector<double> x = {0.0}, m = {0.0}, v = {0.0};
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    adam_step(x, {1.0}, m, v, 1, lr, b1, b2, eps);
    // t=1: m=0.1, v=0.001; mhat=1, vhat=1 -> x = -lr*1/(1+eps)
    const double x1 = -lr * 1.0 / (1.0 + eps);
    CHECK(std::abs(x[0] - x1) < 1e-12);
    adam_step(x, {1.0}, m, v, 2, lr, b1, b2, eps);
    const double m2 = 0.9 * 0.1 + 0.1;             // 0.19
    const double v2 = 0.999 * 0.001 + 0.001;       // 0.001999
    const double mhat = m2 / (1.0 - 0.9 * 0.9);    // /0.19
    const double vhat = v2 / (1.0 - 0.999 * 0.999);
    const double x2 = x1 - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::abs(x[0] - x2) < 1e-12);
}

TEST_CASE("adam leaves parameters in place under zero gradient") {
    // fresh state: zero gradient keeps both the parameter and the moments at 0
    std::vector<double> x = {1.5}, m = {0.0}, v = {0.0};
    adam_step(x, {0.0}, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
    CHECK(x[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(m[0] == 0.0);
    CHECK(v[0] == 0.0);

    // accumulated moments decay by their betas under a zero gradient
    std::vector<double> m2 = {0.2}, v2 = {0.3}, x2 = {1.5};
    adam_step(x2, {0.0}, m2, v2, 2, 0.1, 0.9, 0.999, 1e-8);
    CHECK(m2[0] == doctest::Approx(0.18));
    CHECK(v2[0] == doctest::Approx(0.2997));
}

TEST_CASE("pair sampling contract") {
    auto data = tiny_dataset(4, 2, 16);
    std::mt19937_64 rng(1);
    std::vector<int> scene_counts(4, 0);
    for (int i = 0; i < 10000; ++i) {
        PairSample s = sample_pair(data, rng);
        CHECK(s.frame_w != s.frame_v);
        CHECK(((s.frame_w == 0 || s.frame_w == 1) && (s.frame_v == 0 || s.frame_v == 1)));
        ++scene_counts[static_cast<std::size_t>(s.scene)];
    }
    // binomial 3-sigma band around 2500
    for (int c : scene_counts) {
        CHECK(c > 2500 - 3 * 44);
        CHECK(c < 2500 + 3 * 44);
    }
}

TEST_CASE("config file parsing and precedence keys") {
    const fs::path p = fs::temp_directory_path() / "derain_cfg_test.txt";
    {
        std::ofstream os(p);
        os << "# comment\n";
        os << "total_steps=42\n";
        os << "lr0 = 3e-4\n";
        os << "use_memory=0\n";
        os << "bsw_grouping=quantile\n";
    }
    TrainConfig cfg;
    for (const auto& [k, v] : parse_config_file(p.string())) apply_config_kv(cfg, k, v);
    CHECK(cfg.total_steps == 42);
    CHECK(cfg.lr0 == doctest::Approx(3e-4));
    CHECK_FALSE(cfg.use_memory);
    CHECK(cfg.bsw.grouping == BswGrouping::kQuantile);
    CHECK_THROWS(apply_config_kv(cfg, "not_a_key", "1"));
    fs::remove(p);
}

TEST_CASE("a training step reduces to a no-op when every weight is zero") {
    TrainConfig cfg = tiny_config(3);
    cfg.weights = LossWeights{0, 0, 0, 0};
    Trainer trainer(cfg, tiny_dataset(2, 2, 16));
    std::vector<double> before;
    for (const auto& [name, t] : trainer.model().params().params)
        before.insert(before.end(), t.data().begin(), t.data().end());
    trainer.step();
    std::vector<double> after;
    for (const auto& [name, t] : trainer.model().params().params)
        after.insert(after.end(), t.data().begin(), t.data().end());
    CHECK(before == after);
}

TEST_CASE("training is deterministic under a fixed seed") {
    TrainConfig cfg = tiny_config(4);
    Trainer a(cfg, tiny_dataset(2, 3, 16));
    Trainer b(cfg, tiny_dataset(2, 3, 16));
    for (int i = 0; i < 4; ++i) {
        LossReport ra = a.step();
        LossReport rb = b.step();
        CHECK(ra.total == rb.total);
        CHECK(ra.background == rb.background);
        CHECK(ra.whitening == rb.whitening);
        CHECK(std::isfinite(ra.total));
    }
    CHECK(a.memory().items().data() == b.memory().items().data());
}

TEST_CASE("memory items stay unit norm through training") {
    TrainConfig cfg = tiny_config(3);
    Trainer trainer(cfg, tiny_dataset(2, 2, 16));
    for (int i = 0; i < 3; ++i) {
        trainer.step();
        const auto& items = trainer.memory().items();
        for (int j = 0; j < items.dim(0); ++j) {
            double n = 0;
            for (int t = 0; t < items.dim(1); ++t) {
                const double v = items.data()[static_cast<std::size_t>(j * items.dim(1) + t)];
                n += v * v;
            }
            CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("checkpoint round trip is bitwise") {
    const fs::path dir = fs::temp_directory_path() / "derain_ckpt_test";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();

    TrainConfig cfg = tiny_config(4);
    Trainer trainer(cfg, tiny_dataset(2, 2, 16));
    trainer.step();
    trainer.step();
    trainer.save(p1);

    Trainer resumed = Trainer::resume(p1, tiny_dataset(2, 2, 16));
    CHECK(resumed.current_step() == 2);
    resumed.save(p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK(!s1.str().empty());
    fs::remove_all(dir);
}

TEST_CASE("resumed training replays the uninterrupted run") {
    const fs::path dir = fs::temp_directory_path() / "derain_resume_test";
    fs::create_directories(dir);
    const std::string mid = (dir / "mid.ckpt").string();

    TrainConfig cfg = tiny_config(6);
    Trainer full(cfg, tiny_dataset(2, 2, 16));
    std::vector<LossReport> expect;
    for (int i = 0; i < 6; ++i) expect.push_back(full.step());

    Trainer first(cfg, tiny_dataset(2, 2, 16));
    for (int i = 0; i < 3; ++i) {
        LossReport r = first.step();
        CHECK(r.total == expect[static_cast<std::size_t>(i)].total);
    }
    first.save(mid);
    Trainer second = Trainer::resume(mid, tiny_dataset(2, 2, 16));
    for (int i = 3; i < 6; ++i) {
        LossReport r = second.step();
        CHECK(r.total == expect[static_cast<std::size_t>(i)].total);
    }
    for (std::size_t i = 0; i < full.memory().items().data().size(); ++i)
        CHECK(full.memory().items().data()[i] == second.memory().items().data()[i]);
    fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
    const fs::path dir = fs::temp_directory_path() / "derain_corrupt_test";
    fs::create_directories(dir);
    const std::string good = (dir / "good.ckpt").string();
    const std::string bad = (dir / "bad.ckpt").string();

    TrainConfig cfg = tiny_config(2);
    Trainer trainer(cfg, tiny_dataset(2, 2, 16));
    trainer.step();
    trainer.save(good);

    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        std::string bytes = buf.str();
        bytes[0] = 'X';  // clobber the magic
        std::ofstream out(bad, std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_AS(Checkpoint::load(bad), IoError);

    {
        std::ifstream in(good, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        std::string bytes = buf.str().substr(0, buf.str().size() / 2);
        std::ofstream out(bad, std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_AS(Checkpoint::load(bad), IoError);
    CHECK_THROWS_AS(Checkpoint::load((dir / "missing.ckpt").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("metrics csv layout") {
    std::ostringstream os;
    write_metrics_header(os);
    LossReport r;
    r.total = 0.5;
    r.background = 0.25;
    write_metrics_row(os, 1, 2e-4, r);
    const std::string text = os.str();
    CHECK(text.rfind("step,lr,loss_total,loss_b,loss_s,loss_c,loss_w\n", 0) == 0);
    CHECK(text.find("\n1,") != std::string::npos);
}
