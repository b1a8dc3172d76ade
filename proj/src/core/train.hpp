#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "losses.hpp"
#include "model.hpp"
#include "rain_synth.hpp"

namespace derain {

struct TrainConfig {
    int batch_size = 4;
    double lr0 = 2e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int total_steps = 500;
    std::uint64_t seed = 0;
    LossWeights weights;
    BswConfig bsw;
    ModelConfig model;
    int memory_items = 20;
    bool use_memory = true;

    void validate() const;
};

// lr = 0.5 * lr0 * (1 + cos(pi * step / total_steps)).
double cosine_anneal_lr(int step, int total_steps, double lr0);

// Bias-corrected Adam on one parameter vector; t is the 1-based step count.
void adam_step(std::vector<double>& data, const std::vector<double>& grad,
               std::vector<double>& m, std::vector<double>& v, int t, double lr,
               double beta1, double beta2, double eps);

// Uniform scene, then two distinct frame indices. Draw order per batch
// element: scene, w, v (the replay contract depends on it).
struct PairSample {
    int scene = 0;
    int frame_w = 0;
    int frame_v = 0;
};
PairSample sample_pair(const std::vector<DatasetScene>& dataset, std::mt19937_64& rng);

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, int step, double lr, const LossReport& report);

// Flat key=value config file; keys match TrainConfig field names.
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path);
void apply_config_kv(TrainConfig& config, const std::string& key, const std::string& value);

// Siamese training loop over time-lapse scenes: shared-weight forward passes
// on a frame pair, the four consistency losses, Adam with cosine annealing,
// then the memory item update on the step's pooled queries.
class Trainer {
public:
    Trainer(TrainConfig config, std::vector<DatasetScene> dataset);

    static Trainer resume(const std::string& checkpoint_path,
                          std::vector<DatasetScene> dataset);

    LossReport step();

    int current_step() const { return step_; }
    double current_lr() const;
    const TrainConfig& config() const { return config_; }
    DerainModel& model() { return model_; }
    MemoryBank& memory() { return memory_; }

    void save(const std::string& path) const;

private:
    Trainer(TrainConfig config, std::vector<DatasetScene> dataset, DerainModel model,
            MemoryBank memory);

    TrainConfig config_;
    std::vector<DatasetScene> dataset_;
    DerainModel model_;
    MemoryBank memory_;
    std::mt19937_64 rng_;
    int step_ = 0;
    int adam_t_ = 0;
    // moments keyed by parameter order: model params, then memory items
    std::vector<std::vector<double>> adam_m_, adam_v_;

    void init_moments();
    Tensor frame_tensor(int scene, int frame) const;
};

// Checkpoint persistence: magic + version header, then length-prefixed named
// records (f64 tensors or raw byte blobs). Saves are write-temp-then-rename.
struct CheckpointRecord {
    std::vector<int> shape;
    std::vector<double> f64;
    std::vector<std::uint8_t> bytes;
    bool is_bytes = false;
};

struct Checkpoint {
    std::vector<std::pair<std::string, CheckpointRecord>> records;

    const CheckpointRecord* find(const std::string& name) const;
    const CheckpointRecord& require(const std::string& name) const;
    void add_f64(const std::string& name, std::vector<int> shape, std::vector<double> v);
    void add_scalar(const std::string& name, double v);
    void add_bytes(const std::string& name, std::vector<std::uint8_t> v);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

TrainConfig config_from_checkpoint(const Checkpoint& ck);
DerainModel model_from_checkpoint(const Checkpoint& ck, const ModelConfig& config);
MemoryBank memory_from_checkpoint(const Checkpoint& ck);

// Model + memory + config restored for inference only (no dataset needed).
struct InferenceBundle {
    TrainConfig config;
    DerainModel model;
    MemoryBank memory;
};
InferenceBundle load_inference_bundle(const std::string& checkpoint_path);

}  // namespace derain
