#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "memory_bank.hpp"
#include "tensor.hpp"

namespace derain {

struct ModelConfig {
    int base_channels = 16;
    int query_channels = 8;
    int input_size = 64;   // square, divisible by 8
    bool dual_head = true; // separate 3-channel background head

    void validate() const;
    int query_spatial() const { return input_size / 8; }
};

// Named parameter registry; the order is the checkpoint/optimizer order.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    void add(const std::string& name, Tensor t) { params.emplace_back(name, std::move(t)); }
};

struct EncodeResult {
    Tensor query;               // [N, query_channels, S/8, S/8]
    std::vector<Tensor> skips;  // conv_E1b, conv_E2b, conv_E3b activations
};

struct DerainOutput {
    Tensor rain;        // [N,3,S,S]
    Tensor background;  // [N,3,S,S]; equals input - rain when dual_head is off
    Tensor query;       // encoder query map
    Tensor alpha;       // [K,M] read weights; undefined when memory disabled
};

class DerainModel {
public:
    DerainModel(ModelConfig config, std::uint64_t seed);
    DerainModel(ModelConfig config, ParamSet params);

    const ModelConfig& config() const { return config_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // Expected parameter scalar count for a config; each conv contributes
    // Cout*Cin*kh*kw + Cout (weights plus bias).
    static std::size_t expected_param_count(const ModelConfig& config);
    std::size_t param_count() const;

    EncodeResult encode(const Tensor& image) const;
    Tensor decode(const Tensor& query, const Tensor& retrieved,
                  const std::vector<Tensor>& skips) const;  // head output [N,3 or 6,S,S]

    // encode -> memory read -> decode. use_memory=false feeds a zero tensor
    // in place of the retrieved features and skips the read entirely.
    DerainOutput forward(const Tensor& image, const MemoryBank* memory,
                         bool use_memory = true) const;

    void zero_grad();

private:
    ModelConfig config_;
    ParamSet params_;

    void build_params(std::uint64_t seed);
    std::pair<Tensor, Tensor> split_heads(const Tensor& head, const Tensor& image) const;
};

}  // namespace derain
