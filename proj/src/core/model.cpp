#include "model.hpp"

#include <cmath>
#include <random>

namespace derain {

namespace {

struct ConvSpec {
    const char* name;
    int c_in, c_out, kh, kw;
    bool transposed;
};

std::vector<ConvSpec> layer_table(const ModelConfig& cfg) {
    const int b = cfg.base_channels, q = cfg.query_channels;
    const int out_c = cfg.dual_head ? 6 : 3;
    return {
        {"enc.E1a", 3, b, 3, 3, false},  {"enc.E1b", b, b, 3, 3, false},
        {"enc.E2a", b, b, 3, 3, false},  {"enc.E2b", b, b, 3, 3, false},
        {"enc.E3a", b, b, 3, 3, false},  {"enc.E3b", b, b, 3, 3, false},
        {"enc.E4a", b, b, 3, 3, false},  {"enc.E4b", b, b, 3, 3, false},
        {"enc.proj", b, q, 1, 1, false},
        {"dec.D4a", 2 * q, b, 3, 3, false}, {"dec.D4b", b, b, 3, 3, false},
        {"dec.up3", b, b, 2, 2, true},
        {"dec.D3a", 2 * b, b, 3, 3, false}, {"dec.D3b", b, b, 3, 3, false},
        {"dec.up2", b, b, 2, 2, true},
        {"dec.D2a", 2 * b, b, 3, 3, false}, {"dec.D2b", b, b, 3, 3, false},
        {"dec.up1", b, b, 2, 2, true},
        {"dec.D1a", 2 * b, b, 3, 3, false}, {"dec.D1b", b, b, 3, 3, false},
        {"out", b, out_c, 3, 3, false},
    };
}

}  // namespace

void ModelConfig::validate() const {
    if (base_channels < 1 || query_channels < 1)
        throw ContractError("ModelConfig: channel counts must be positive");
    if (query_channels > base_channels)
        throw ContractError("ModelConfig: query_channels must not exceed base_channels");
    if (input_size < 8 || input_size % 8 != 0)
        throw ContractError("ModelConfig: input_size must be a positive multiple of 8");
}

Tensor& ParamSet::get(const std::string& name) {
    for (auto& [n, t] : params)
        if (n == name) return t;
    throw ContractError("ParamSet: unknown parameter " + name);
}

const Tensor& ParamSet::get(const std::string& name) const {
    return const_cast<ParamSet*>(this)->get(name);
}

DerainModel::DerainModel(ModelConfig config, std::uint64_t seed)
    : config_(config) {
    config_.validate();
    build_params(seed);
}

DerainModel::DerainModel(ModelConfig config, ParamSet params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
}

void DerainModel::build_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](double k) {
        return ((static_cast<double>(rng() >> 11) * 0x1.0p-53) * 2.0 - 1.0) * k;
    };
    for (const ConvSpec& spec : layer_table(config_)) {
        const double k = 1.0 / std::sqrt(static_cast<double>(spec.c_in * spec.kh * spec.kw));
        const std::vector<int> wshape =
            spec.transposed ? std::vector<int>{spec.c_in, spec.c_out, spec.kh, spec.kw}
                            : std::vector<int>{spec.c_out, spec.c_in, spec.kh, spec.kw};
        std::vector<double> w(shape_numel(wshape));
        for (double& v : w) v = uniform(k);
        std::vector<double> b(static_cast<std::size_t>(spec.c_out));
        for (double& v : b) v = uniform(k);
        params_.add(std::string(spec.name) + ".w",
                    Tensor::from_data(wshape, std::move(w), true));
        params_.add(std::string(spec.name) + ".b",
                    Tensor::from_data({spec.c_out}, std::move(b), true));
    }
}

std::size_t DerainModel::expected_param_count(const ModelConfig& config) {
    std::size_t n = 0;
    for (const ConvSpec& spec : layer_table(config))
        n += static_cast<std::size_t>(spec.c_in) * spec.c_out * spec.kh * spec.kw +
             static_cast<std::size_t>(spec.c_out);
    return n;
}

std::size_t DerainModel::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_.params) n += t.size();
    return n;
}

EncodeResult DerainModel::encode(const Tensor& image) const {
    if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != config_.input_size ||
        image.dim(3) != config_.input_size)
        throw DimensionError("encode: expected [N,3,S,S] input of the configured size");
    auto conv = [this](const Tensor& x, const char* name) {
        return relu(conv2d(x, params_.get(std::string(name) + ".w"),
                           params_.get(std::string(name) + ".b"), 1, 1));
    };
    EncodeResult r;
    Tensor x = conv(image, "enc.E1a");
    x = conv(x, "enc.E1b");
    r.skips.push_back(x);
    x = maxpool2d(x);
    x = conv(x, "enc.E2a");
    x = conv(x, "enc.E2b");
    r.skips.push_back(x);
    x = maxpool2d(x);
    x = conv(x, "enc.E3a");
    x = conv(x, "enc.E3b");
    r.skips.push_back(x);
    x = maxpool2d(x);
    x = conv(x, "enc.E4a");
    x = conv(x, "enc.E4b");
    // linear 1x1 projection to the query width; queries must be signed for
    // cosine addressing, so no ReLU here
    r.query = conv2d(x, params_.get("enc.proj.w"), params_.get("enc.proj.b"), 1, 0);
    return r;
}

Tensor DerainModel::decode(const Tensor& query, const Tensor& retrieved,
                           const std::vector<Tensor>& skips) const {
    if (skips.size() != 3) throw ContractError("decode: expected 3 skip activations");
    if (retrieved.shape() != query.shape())
        throw DimensionError("decode: retrieved/query shape mismatch");
    auto conv = [this](const Tensor& x, const char* name) {
        return relu(conv2d(x, params_.get(std::string(name) + ".w"),
                           params_.get(std::string(name) + ".b"), 1, 1));
    };
    auto up = [this](const Tensor& x, const char* name) {
        return relu(transposed_conv2d(x, params_.get(std::string(name) + ".w"),
                                      params_.get(std::string(name) + ".b"), 2, 0));
    };
    Tensor x = concat_channels(query, retrieved);
    x = conv(x, "dec.D4a");
    x = conv(x, "dec.D4b");
    x = up(x, "dec.up3");
    x = conv(concat_channels(x, skips[2]), "dec.D3a");
    x = conv(x, "dec.D3b");
    x = up(x, "dec.up2");
    x = conv(concat_channels(x, skips[1]), "dec.D2a");
    x = conv(x, "dec.D2b");
    x = up(x, "dec.up1");
    x = conv(concat_channels(x, skips[0]), "dec.D1a");
    x = conv(x, "dec.D1b");
    return conv2d(x, params_.get("out.w"), params_.get("out.b"), 1, 1);
}

std::pair<Tensor, Tensor> DerainModel::split_heads(const Tensor& head,
                                                   const Tensor& image) const {
    Tensor rain = slice_channels(head, 0, 3);
    Tensor background =
        config_.dual_head ? slice_channels(head, 3, 6) : sub(image, rain);
    return {rain, background};
}

DerainOutput DerainModel::forward(const Tensor& image, const MemoryBank* memory,
                                  bool use_memory) const {
    EncodeResult enc = encode(image);
    const int n = image.dim(0), qc = config_.query_channels, s = config_.query_spatial();
    Tensor retrieved;
    DerainOutput out;
    if (use_memory) {
        if (!memory) throw ContractError("forward: memory bank required");
        Tensor queries = nchw_to_rows(enc.query);
        ReadResult r = memory->read(queries);
        out.alpha = r.alpha;
        retrieved = rows_to_nchw(r.retrieved, n, qc, s, s);
    } else {
        retrieved = Tensor::zeros({n, qc, s, s});
    }
    Tensor head = decode(enc.query, retrieved, enc.skips);
    auto [rain, background] = split_heads(head, image);
    out.rain = rain;
    out.background = background;
    out.query = enc.query;
    return out;
}

void DerainModel::zero_grad() {
    for (auto& [name, t] : params_.params) t.zero_grad();
}

}  // namespace derain
