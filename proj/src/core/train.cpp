#include "train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace derain {

namespace {

constexpr char kMagic[8] = {'D', 'R', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

int uniform_index(std::mt19937_64& rng, int n) {
    return static_cast<int>((static_cast<double>(rng() >> 11) * 0x1.0p-53) * n);
}

}  // namespace

void TrainConfig::validate() const {
    if (lr0 <= 0.0) throw ContractError("TrainConfig: lr0 must be positive");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ContractError("TrainConfig: betas must lie in [0,1)");
    if (total_steps < 1) throw ContractError("TrainConfig: total_steps must be >= 1");
    if (batch_size < 1) throw ContractError("TrainConfig: batch_size must be >= 1");
    if (memory_items < 1) throw ContractError("TrainConfig: memory_items must be >= 1");
    weights.validate();
    bsw.validate();
    model.validate();
}

double cosine_anneal_lr(int step, int total_steps, double lr0) {
    if (step < 0 || step > total_steps)
        throw ContractError("cosine_anneal_lr: step out of [0,total_steps]");
    return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

void adam_step(std::vector<double>& data, const std::vector<double>& grad,
               std::vector<double>& m, std::vector<double>& v, int t, double lr,
               double beta1, double beta2, double eps) {
    if (data.size() != grad.size() || data.size() != m.size() || data.size() != v.size())
        throw DimensionError("adam_step: size mismatch");
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

PairSample sample_pair(const std::vector<DatasetScene>& dataset, std::mt19937_64& rng) {
    if (dataset.empty()) throw ContractError("sample_pair: empty dataset");
    PairSample s;
    s.scene = uniform_index(rng, static_cast<int>(dataset.size()));
    const int t = static_cast<int>(dataset[static_cast<std::size_t>(s.scene)].frames.size());
    if (t < 2) throw ContractError("sample_pair: scene has fewer than 2 frames");
    s.frame_w = uniform_index(rng, t);
    s.frame_v = uniform_index(rng, t - 1);
    if (s.frame_v >= s.frame_w) ++s.frame_v;
    return s;
}

void write_metrics_header(std::ostream& os) {
    os << "step,lr,loss_total,loss_b,loss_s,loss_c,loss_w\n";
}

void write_metrics_row(std::ostream& os, int step, double lr, const LossReport& report) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", step, lr,
                  report.total, report.background, report.self_consistency, report.cross,
                  report.whitening);
    os << buf;
}

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config file not readable: " + path);
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config file: expected key=value, got: " + line);
        kv.emplace_back(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return kv;
}

void apply_config_kv(TrainConfig& config, const std::string& key, const std::string& value) {
    const auto as_int = [&] { return std::stoi(value); };
    const auto as_double = [&] { return std::stod(value); };
    const auto as_bool = [&] {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw ContractError("config: bad boolean for " + key + ": " + value);
    };
    if (key == "batch_size") config.batch_size = as_int();
    else if (key == "lr0") config.lr0 = as_double();
    else if (key == "adam_beta1") config.adam_beta1 = as_double();
    else if (key == "adam_beta2") config.adam_beta2 = as_double();
    else if (key == "total_steps") config.total_steps = as_int();
    else if (key == "seed") config.seed = std::stoull(value);
    else if (key == "lambda_b") config.weights.lambda_b = as_double();
    else if (key == "lambda_s") config.weights.lambda_s = as_double();
    else if (key == "lambda_c") config.weights.lambda_c = as_double();
    else if (key == "lambda_w") config.weights.lambda_w = as_double();
    else if (key == "bsw_l") config.bsw.low_groups = as_int();
    else if (key == "bsw_h") config.bsw.num_groups = as_int();
    else if (key == "bsw_grouping") {
        if (value == "cluster") config.bsw.grouping = BswGrouping::kCluster;
        else if (value == "quantile") config.bsw.grouping = BswGrouping::kQuantile;
        else throw ContractError("config: bsw_grouping must be cluster or quantile");
    } else if (key == "memory_items") config.memory_items = as_int();
    else if (key == "use_memory") config.use_memory = as_bool();
    else if (key == "base_channels") config.model.base_channels = as_int();
    else if (key == "query_channels") config.model.query_channels = as_int();
    else if (key == "input_size") config.model.input_size = as_int();
    else if (key == "dual_head") config.model.dual_head = as_bool();
    else throw ContractError("config: unknown key: " + key);
}

Trainer::Trainer(TrainConfig config, std::vector<DatasetScene> dataset)
    : Trainer(config, std::move(dataset), DerainModel(config.model, config.seed),
              MemoryBank(config.memory_items, config.model.query_channels,
                         config.seed + 1)) {}

Trainer::Trainer(TrainConfig config, std::vector<DatasetScene> dataset, DerainModel model,
                 MemoryBank memory)
    : config_(config),
      dataset_(std::move(dataset)),
      model_(std::move(model)),
      memory_(std::move(memory)),
      rng_(config.seed + 2) {
    config_.validate();
    if (dataset_.empty()) throw ContractError("Trainer: empty dataset");
    for (const auto& s : dataset_) {
        if (s.frames.size() < 2) throw ContractError("Trainer: scene with < 2 frames");
        for (const auto& f : s.frames)
            if (f.height != config_.model.input_size || f.width != config_.model.input_size)
                throw ContractError("Trainer: frame size does not match input_size");
    }
    init_moments();
}

void Trainer::init_moments() {
    adam_m_.clear();
    adam_v_.clear();
    for (const auto& [name, t] : model_.params().params) {
        adam_m_.emplace_back(t.size(), 0.0);
        adam_v_.emplace_back(t.size(), 0.0);
    }
    adam_m_.emplace_back(memory_.items().size(), 0.0);
    adam_v_.emplace_back(memory_.items().size(), 0.0);
}

double Trainer::current_lr() const {
    return cosine_anneal_lr(step_, config_.total_steps, config_.lr0);
}

Tensor Trainer::frame_tensor(int scene, int frame) const {
    const Image& im =
        dataset_[static_cast<std::size_t>(scene)].frames[static_cast<std::size_t>(frame)];
    return Tensor::from_data({1, 3, im.height, im.width}, im.data);
}

LossReport Trainer::step() {
    if (step_ >= config_.total_steps)
        throw ContractError("Trainer::step: already at total_steps");
    const double lr = current_lr();
    const int qs = config_.model.query_spatial();
    const int qc = config_.model.query_channels;

    model_.zero_grad();
    memory_.items().zero_grad();

    Tensor sum_b, sum_s, sum_c, sum_w;
    std::vector<Tensor> step_queries;
    for (int i = 0; i < config_.batch_size; ++i) {
        const PairSample pair = sample_pair(dataset_, rng_);
        Tensor iw = frame_tensor(pair.scene, pair.frame_w);
        Tensor iv = frame_tensor(pair.scene, pair.frame_v);
        DerainOutput ow = model_.forward(iw, &memory_, config_.use_memory);
        DerainOutput ov = model_.forward(iv, &memory_, config_.use_memory);

        Tensor lb = background_prediction_loss(ow.background, ov.background);
        Tensor lc = scale(add(cross_information_loss(iw, ov.background),
                              cross_information_loss(iv, ow.background)),
                          0.5);
        Tensor ls = scale(add(self_consistency_loss(iw, ow.background, ow.rain),
                              self_consistency_loss(iv, ov.background, ov.rain)),
                          0.5);
        Tensor lw = bsw_loss(reshape(ow.query, {qc, qs, qs}),
                             reshape(ov.query, {qc, qs, qs}), config_.bsw);

        sum_b = sum_b.defined() ? add(sum_b, lb) : lb;
        sum_c = sum_c.defined() ? add(sum_c, lc) : lc;
        sum_s = sum_s.defined() ? add(sum_s, ls) : ls;
        sum_w = sum_w.defined() ? add(sum_w, lw) : lw;

        if (config_.use_memory) {
            step_queries.push_back(nchw_to_rows(ow.query).detach());
            step_queries.push_back(nchw_to_rows(ov.query).detach());
        }
    }
    const double inv_b = 1.0 / config_.batch_size;
    LossReport report;
    Tensor total = total_loss(scale(sum_b, inv_b), scale(sum_s, inv_b),
                              scale(sum_c, inv_b), scale(sum_w, inv_b),
                              config_.weights, &report);
    if (!std::isfinite(report.total) || !std::isfinite(report.background) ||
        !std::isfinite(report.self_consistency) || !std::isfinite(report.cross) ||
        !std::isfinite(report.whitening)) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "non-finite loss at step %d (b=%g s=%g c=%g w=%g)", step_,
                      report.background, report.self_consistency, report.cross,
                      report.whitening);
        throw NumericError(buf);
    }

    backward(total);

    ++adam_t_;
    std::size_t pi = 0;
    for (auto& [name, t] : model_.params().params) {
        adam_step(t.data(), t.grad(), adam_m_[pi], adam_v_[pi], adam_t_, lr,
                  config_.adam_beta1, config_.adam_beta2, config_.adam_eps);
        ++pi;
    }
    if (config_.use_memory) {
        Tensor& items = memory_.items();
        adam_step(items.data(), items.grad(), adam_m_[pi], adam_v_[pi], adam_t_, lr,
                  config_.adam_beta1, config_.adam_beta2, config_.adam_eps);
        // pooled, gradient-detached queries of the whole step
        const int k_per = qs * qs;
        std::vector<double> pooled;
        pooled.reserve(step_queries.size() * static_cast<std::size_t>(k_per) * qc);
        for (const Tensor& q : step_queries)
            pooled.insert(pooled.end(), q.data().begin(), q.data().end());
        const int k_total = static_cast<int>(step_queries.size()) * k_per;
        memory_.update(Tensor::from_data({k_total, qc}, std::move(pooled)));
    }

    ++step_;
    return report;
}

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, r] : records)
        if (n == name) return &r;
    return nullptr;
}

const CheckpointRecord& Checkpoint::require(const std::string& name) const {
    const CheckpointRecord* r = find(name);
    if (!r) throw IoError("checkpoint: missing record " + name);
    return *r;
}

void Checkpoint::add_f64(const std::string& name, std::vector<int> shape,
                         std::vector<double> v) {
    CheckpointRecord r;
    r.shape = std::move(shape);
    r.f64 = std::move(v);
    records.emplace_back(name, std::move(r));
}

void Checkpoint::add_scalar(const std::string& name, double v) {
    add_f64(name, {}, {v});
}

void Checkpoint::add_bytes(const std::string& name, std::vector<std::uint8_t> v) {
    CheckpointRecord r;
    r.is_bytes = true;
    r.shape = {static_cast<int>(v.size())};
    r.bytes = std::move(v);
    records.emplace_back(name, std::move(r));
}

void Checkpoint::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("checkpoint: cannot write " + tmp);
        out.write(kMagic, sizeof(kMagic));
        std::uint32_t ver = kVersion;
        out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
        for (const auto& [name, r] : records) {
            const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
            out.write(reinterpret_cast<const char*>(&nlen), sizeof(nlen));
            out.write(name.data(), nlen);
            const std::uint8_t dtype = r.is_bytes ? 1 : 0;
            out.write(reinterpret_cast<const char*>(&dtype), sizeof(dtype));
            const std::uint32_t ndim = static_cast<std::uint32_t>(r.shape.size());
            out.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
            for (int d : r.shape) {
                const std::int64_t v = d;
                out.write(reinterpret_cast<const char*>(&v), sizeof(v));
            }
            if (r.is_bytes)
                out.write(reinterpret_cast<const char*>(r.bytes.data()),
                          static_cast<std::streamsize>(r.bytes.size()));
            else
                out.write(reinterpret_cast<const char*>(r.f64.data()),
                          static_cast<std::streamsize>(r.f64.size() * sizeof(double)));
        }
        if (!out) throw IoError("checkpoint: write failed for " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("checkpoint: rename failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    std::uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (!in || ver != kVersion)
        throw IoError("checkpoint: unsupported version in " + path);

    Checkpoint ck;
    while (true) {
        std::uint32_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), sizeof(nlen));
        if (in.eof()) break;
        if (!in || nlen > 4096) throw IoError("checkpoint: truncated or corrupt: " + path);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        std::uint8_t dtype = 0;
        in.read(reinterpret_cast<char*>(&dtype), sizeof(dtype));
        std::uint32_t ndim = 0;
        in.read(reinterpret_cast<char*>(&ndim), sizeof(ndim));
        if (!in || ndim > 8) throw IoError("checkpoint: truncated or corrupt: " + path);
        CheckpointRecord r;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < ndim; ++i) {
            std::int64_t v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof(v));
            if (!in || v < 0) throw IoError("checkpoint: truncated or corrupt: " + path);
            r.shape.push_back(static_cast<int>(v));
            numel *= static_cast<std::size_t>(v);
        }
        if (dtype == 1) {
            r.is_bytes = true;
            r.bytes.resize(numel);
            in.read(reinterpret_cast<char*>(r.bytes.data()),
                    static_cast<std::streamsize>(numel));
        } else {
            r.f64.resize(numel);
            in.read(reinterpret_cast<char*>(r.f64.data()),
                    static_cast<std::streamsize>(numel * sizeof(double)));
        }
        if (!in) throw IoError("checkpoint: truncated or corrupt: " + path);
        ck.records.emplace_back(std::move(name), std::move(r));
    }
    return ck;
}

namespace {

std::vector<std::uint8_t> rng_to_bytes(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    const std::string s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

void rng_from_bytes(std::mt19937_64& rng, const std::vector<std::uint8_t>& bytes) {
    std::istringstream is(std::string(bytes.begin(), bytes.end()));
    is >> rng;
    if (!is) throw IoError("checkpoint: bad RNG state");
}

}  // namespace

void Trainer::save(const std::string& path) const {
    Checkpoint ck;
    ck.add_scalar("config/batch_size", config_.batch_size);
    ck.add_scalar("config/lr0", config_.lr0);
    ck.add_scalar("config/adam_beta1", config_.adam_beta1);
    ck.add_scalar("config/adam_beta2", config_.adam_beta2);
    ck.add_scalar("config/adam_eps", config_.adam_eps);
    ck.add_scalar("config/total_steps", config_.total_steps);
    {
        std::vector<std::uint8_t> seed(8);
        std::uint64_t s = config_.seed;
        for (int i = 0; i < 8; ++i) seed[static_cast<std::size_t>(i)] = (s >> (8 * i)) & 0xff;
        ck.add_bytes("config/seed", std::move(seed));
    }
    ck.add_scalar("config/lambda_b", config_.weights.lambda_b);
    ck.add_scalar("config/lambda_s", config_.weights.lambda_s);
    ck.add_scalar("config/lambda_c", config_.weights.lambda_c);
    ck.add_scalar("config/lambda_w", config_.weights.lambda_w);
    ck.add_scalar("config/bsw_l", config_.bsw.low_groups);
    ck.add_scalar("config/bsw_h", config_.bsw.num_groups);
    ck.add_scalar("config/bsw_grouping",
                  config_.bsw.grouping == BswGrouping::kCluster ? 0.0 : 1.0);
    ck.add_scalar("config/memory_items", config_.memory_items);
    ck.add_scalar("config/use_memory", config_.use_memory ? 1.0 : 0.0);
    ck.add_scalar("config/base_channels", config_.model.base_channels);
    ck.add_scalar("config/query_channels", config_.model.query_channels);
    ck.add_scalar("config/input_size", config_.model.input_size);
    ck.add_scalar("config/dual_head", config_.model.dual_head ? 1.0 : 0.0);

    for (const auto& [name, t] : model_.params().params)
        ck.add_f64("model/" + name, t.shape(), t.data());
    ck.add_f64("memory/items", memory_.items().shape(), memory_.items().data());

    std::size_t pi = 0;
    for (const auto& [name, t] : model_.params().params) {
        ck.add_f64("adam/m/" + name, t.shape(), adam_m_[pi]);
        ck.add_f64("adam/v/" + name, t.shape(), adam_v_[pi]);
        ++pi;
    }
    ck.add_f64("adam/m/memory.items", memory_.items().shape(), adam_m_[pi]);
    ck.add_f64("adam/v/memory.items", memory_.items().shape(), adam_v_[pi]);

    ck.add_scalar("state/step", step_);
    ck.add_scalar("state/adam_t", adam_t_);
    ck.add_bytes("state/rng", rng_to_bytes(rng_));
    ck.save(path);
}

TrainConfig config_from_checkpoint(const Checkpoint& ck) {
    TrainConfig cfg;
    cfg.batch_size = static_cast<int>(ck.require("config/batch_size").f64[0]);
    cfg.lr0 = ck.require("config/lr0").f64[0];
    cfg.adam_beta1 = ck.require("config/adam_beta1").f64[0];
    cfg.adam_beta2 = ck.require("config/adam_beta2").f64[0];
    cfg.adam_eps = ck.require("config/adam_eps").f64[0];
    cfg.total_steps = static_cast<int>(ck.require("config/total_steps").f64[0]);
    {
        const auto& seed = ck.require("config/seed").bytes;
        if (seed.size() != 8) throw IoError("checkpoint: bad seed record");
        std::uint64_t s = 0;
        for (int i = 0; i < 8; ++i)
            s |= static_cast<std::uint64_t>(seed[static_cast<std::size_t>(i)]) << (8 * i);
        cfg.seed = s;
    }
    cfg.weights.lambda_b = ck.require("config/lambda_b").f64[0];
    cfg.weights.lambda_s = ck.require("config/lambda_s").f64[0];
    cfg.weights.lambda_c = ck.require("config/lambda_c").f64[0];
    cfg.weights.lambda_w = ck.require("config/lambda_w").f64[0];
    cfg.bsw.low_groups = static_cast<int>(ck.require("config/bsw_l").f64[0]);
    cfg.bsw.num_groups = static_cast<int>(ck.require("config/bsw_h").f64[0]);
    cfg.bsw.grouping = ck.require("config/bsw_grouping").f64[0] == 0.0
                           ? BswGrouping::kCluster
                           : BswGrouping::kQuantile;
    cfg.memory_items = static_cast<int>(ck.require("config/memory_items").f64[0]);
    cfg.use_memory = ck.require("config/use_memory").f64[0] != 0.0;
    cfg.model.base_channels = static_cast<int>(ck.require("config/base_channels").f64[0]);
    cfg.model.query_channels = static_cast<int>(ck.require("config/query_channels").f64[0]);
    cfg.model.input_size = static_cast<int>(ck.require("config/input_size").f64[0]);
    cfg.model.dual_head = ck.require("config/dual_head").f64[0] != 0.0;
    return cfg;
}

DerainModel model_from_checkpoint(const Checkpoint& ck, const ModelConfig& config) {
    ParamSet params;
    // rebuild the parameter registry in the canonical order
    DerainModel fresh(config, 0);
    for (const auto& [name, t] : fresh.params().params) {
        const CheckpointRecord& r = ck.require("model/" + name);
        if (r.shape != t.shape())
            throw IoError("checkpoint: shape mismatch for model/" + name);
        params.add(name, Tensor::from_data(r.shape, r.f64, true));
    }
    return DerainModel(config, std::move(params));
}

MemoryBank memory_from_checkpoint(const Checkpoint& ck) {
    const CheckpointRecord& items = ck.require("memory/items");
    return MemoryBank(Tensor::from_data(items.shape, items.f64, true));
}

InferenceBundle load_inference_bundle(const std::string& checkpoint_path) {
    Checkpoint ck = Checkpoint::load(checkpoint_path);
    TrainConfig cfg = config_from_checkpoint(ck);
    return InferenceBundle{cfg, model_from_checkpoint(ck, cfg.model),
                           memory_from_checkpoint(ck)};
}

Trainer Trainer::resume(const std::string& checkpoint_path,
                        std::vector<DatasetScene> dataset) {
    Checkpoint ck = Checkpoint::load(checkpoint_path);
    TrainConfig cfg = config_from_checkpoint(ck);
    DerainModel model = model_from_checkpoint(ck, cfg.model);
    MemoryBank memory = memory_from_checkpoint(ck);

    Trainer tr(cfg, std::move(dataset), std::move(model), std::move(memory));
    std::size_t pi = 0;
    for (const auto& [name, t] : tr.model_.params().params) {
        tr.adam_m_[pi] = ck.require("adam/m/" + name).f64;
        tr.adam_v_[pi] = ck.require("adam/v/" + name).f64;
        ++pi;
    }
    tr.adam_m_[pi] = ck.require("adam/m/memory.items").f64;
    tr.adam_v_[pi] = ck.require("adam/v/memory.items").f64;
    tr.step_ = static_cast<int>(ck.require("state/step").f64[0]);
    tr.adam_t_ = static_cast<int>(ck.require("state/adam_t").f64[0]);
    rng_from_bytes(tr.rng_, ck.require("state/rng").bytes);
    return tr;
}

}  // namespace derain
