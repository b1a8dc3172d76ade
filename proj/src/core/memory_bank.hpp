#pragma once

#include <cstdint>

#include "tensor.hpp"

namespace derain {

double cosine_similarity(const std::vector<double>& p, const std::vector<double>& q,
                         double eps = 1e-12);

struct ReadResult {
    Tensor alpha;      // [K,M], rows sum to 1
    Tensor retrieved;  // [K,C], convex combinations of the items
};

// M learned prototype vectors of dimension C, kept at unit L2 norm.
// read() is differentiable and leaves the bank untouched; update() is a
// plain state transition with no gradient flow.
class MemoryBank {
public:
    MemoryBank(int items, int channels, std::uint64_t seed);
    explicit MemoryBank(Tensor items);  // [M,C], takes ownership

    int item_count() const { return items_.dim(0); }
    int channels() const { return items_.dim(1); }
    Tensor& items() { return items_; }
    const Tensor& items() const { return items_; }

    // Softmax over items of the cosine similarities, then the alpha-weighted
    // average of the items.
    ReadResult read(const Tensor& queries) const;

    // Softmax over queries per item, add the weighted query sum to each item,
    // renormalize to unit length. Operates on raw values only.
    void update(const Tensor& queries);

    void renormalize();

private:
    Tensor items_;  // [M,C], requires_grad
};

}  // namespace derain
