#include "memory_bank.hpp"

#include <cmath>
#include <random>

namespace derain {

double cosine_similarity(const std::vector<double>& p, const std::vector<double>& q,
                         double eps) {
    if (p.size() != q.size())
        throw DimensionError("cosine_similarity: dimension mismatch");
    double dot = 0.0, np = 0.0, nq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        dot += p[i] * q[i];
        np += p[i] * p[i];
        nq += q[i] * q[i];
    }
    return dot / (std::sqrt(np) * std::sqrt(nq) + eps);
}

MemoryBank::MemoryBank(int items, int channels, std::uint64_t seed) {
    if (items < 1 || channels < 1)
        throw ContractError("MemoryBank: need at least one item and one channel");
    std::mt19937_64 rng(seed);
    std::vector<double> data(static_cast<std::size_t>(items) * channels);
    for (double& v : data)
        v = (static_cast<double>(rng() >> 11) * 0x1.0p-53) * 2.0 - 1.0;
    items_ = Tensor::from_data({items, channels}, std::move(data), true);
    renormalize();
}

MemoryBank::MemoryBank(Tensor items) : items_(std::move(items)) {
    if (items_.ndim() != 2 || items_.dim(0) < 1 || items_.dim(1) < 1)
        throw ContractError("MemoryBank: items must be a non-empty [M,C] tensor");
    items_.set_requires_grad(true);
}

ReadResult MemoryBank::read(const Tensor& queries) const {
    if (queries.ndim() != 2 || queries.dim(1) != channels())
        throw DimensionError("MemoryBank::read: query dimension mismatch");
    if (queries.dim(0) < 1) throw ContractError("MemoryBank::read: no queries");
    ReadResult r;
    r.alpha = softmax_rows(cosine_rows(items_, queries));
    r.retrieved = matmul(r.alpha, items_);
    return r;
}

void MemoryBank::update(const Tensor& queries) {
    if (queries.ndim() != 2 || queries.dim(1) != channels())
        throw DimensionError("MemoryBank::update: query dimension mismatch");
    const int k = queries.dim(0), m = item_count(), c = channels();
    if (k < 1) throw ContractError("MemoryBank::update: no queries");

    // beta[k][m]: softmax over the query axis of the cosine similarities.
    std::vector<double> sim(static_cast<std::size_t>(k) * m);
    std::vector<double> pv(static_cast<std::size_t>(c)), qv(static_cast<std::size_t>(c));
    for (int ik = 0; ik < k; ++ik) {
        std::copy_n(queries.data().begin() + static_cast<std::size_t>(ik) * c, c, qv.begin());
        for (int im = 0; im < m; ++im) {
            std::copy_n(items_.data().begin() + static_cast<std::size_t>(im) * c, c, pv.begin());
            sim[static_cast<std::size_t>(ik) * m + im] = cosine_similarity(pv, qv);
        }
    }
    std::vector<double> delta(static_cast<std::size_t>(m) * c, 0.0);
    for (int im = 0; im < m; ++im) {
        double mx = sim[static_cast<std::size_t>(im)];
        for (int ik = 1; ik < k; ++ik)
            mx = std::max(mx, sim[static_cast<std::size_t>(ik) * m + im]);
        double z = 0.0;
        for (int ik = 0; ik < k; ++ik)
            z += std::exp(sim[static_cast<std::size_t>(ik) * m + im] - mx);
        for (int ik = 0; ik < k; ++ik) {
            const double beta =
                std::exp(sim[static_cast<std::size_t>(ik) * m + im] - mx) / z;
            const double* q = queries.data().data() + static_cast<std::size_t>(ik) * c;
            double* d = delta.data() + static_cast<std::size_t>(im) * c;
            for (int j = 0; j < c; ++j) d[j] += beta * q[j];
        }
    }
    for (std::size_t i = 0; i < items_.data().size(); ++i) items_.data()[i] += delta[i];
    renormalize();
}

void MemoryBank::renormalize() {
    const int m = item_count(), c = channels();
    for (int im = 0; im < m; ++im) {
        double* p = items_.data().data() + static_cast<std::size_t>(im) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += p[j] * p[j];
        const double n = std::sqrt(s);
        if (n > 0.0)
            for (int j = 0; j < c; ++j) p[j] /= n;
    }
}

}  // namespace derain
