#include "losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace derain {

void LossWeights::validate() const {
    if (lambda_b < 0 || lambda_s < 0 || lambda_c < 0 || lambda_w < 0)
        throw ContractError("LossWeights: weights must be non-negative");
}

void BswConfig::validate() const {
    if (low_groups < 1 || num_groups <= low_groups)
        throw ContractError("BswConfig: requires 1 <= l < h");
}

Tensor background_prediction_loss(const Tensor& bg_a, const Tensor& bg_b) {
    return mean(abs(sub(bg_a, bg_b)));
}

Tensor cross_information_loss(const Tensor& input_w, const Tensor& bg_v) {
    return mean(abs(sub(input_w, bg_v)));
}

Tensor self_consistency_loss(const Tensor& input, const Tensor& bg, const Tensor& rain) {
    return mean(abs(sub(input, add(bg, rain))));
}

Tensor channel_covariance(const Tensor& query) {
    if (query.ndim() != 3) throw DimensionError("channel_covariance: expects [C,H,W]");
    const int c = query.dim(0), hw = query.dim(1) * query.dim(2);
    if (hw < 2) throw ContractError("channel_covariance: needs at least two pixels");
    Tensor x = center_rows(reshape(query, {c, hw}));
    return scale(matmul(x, transpose(x)), 1.0 / static_cast<double>(hw));
}

std::vector<double> variance_matrix(const Tensor& cov_a, const Tensor& cov_b) {
    if (cov_a.shape() != cov_b.shape() || cov_a.ndim() != 2 ||
        cov_a.dim(0) != cov_a.dim(1))
        throw DimensionError("variance_matrix: expects matching square matrices");
    std::vector<double> v(cov_a.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = (cov_a.data()[i] - cov_b.data()[i]) * 0.5;
        v[i] = d * d;
    }
    return v;
}

namespace {

// Exact 1-D k-means over sorted values: clusters are contiguous, solved by
// dynamic programming on prefix sums. Returns cluster boundaries (end index,
// exclusive, per cluster).
std::vector<int> kmeans_1d(const std::vector<double>& sorted_vals, int groups) {
    const int n = static_cast<int>(sorted_vals.size());
    std::vector<double> pre(n + 1, 0.0), pre2(n + 1, 0.0);
    for (int i = 0; i < n; ++i) {
        pre[i + 1] = pre[i] + sorted_vals[i];
        pre2[i + 1] = pre2[i] + sorted_vals[i] * sorted_vals[i];
    }
    auto cost = [&](int a, int b) {  // [a,b)
        const double s = pre[b] - pre[a], s2 = pre2[b] - pre2[a];
        const int m = b - a;
        return s2 - s * s / m;
    };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> dp(groups + 1, std::vector<double>(n + 1, inf));
    std::vector<std::vector<int>> cut(groups + 1, std::vector<int>(n + 1, 0));
    dp[0][0] = 0.0;
    for (int g = 1; g <= groups; ++g)
        for (int i = g; i <= n; ++i)
            for (int j = g - 1; j < i; ++j) {
                const double c = dp[g - 1][j] + cost(j, i);
                if (c < dp[g][i]) {
                    dp[g][i] = c;
                    cut[g][i] = j;
                }
            }
    std::vector<int> ends(groups);
    int i = n;
    for (int g = groups; g >= 1; --g) {
        ends[g - 1] = i;
        i = cut[g][i];
    }
    return ends;
}

}  // namespace

std::vector<double> bsw_mask(const std::vector<double>& variance, int channels,
                             const BswConfig& config) {
    config.validate();
    const int c = channels;
    if (static_cast<int>(variance.size()) != c * c)
        throw DimensionError("bsw_mask: variance size mismatch");

    // work on the upper triangle + diagonal; the matrix is symmetric
    std::vector<double> entries;
    for (int i = 0; i < c; ++i)
        for (int j = i; j < c; ++j)
            entries.push_back(variance[static_cast<std::size_t>(i) * c + j]);

    double threshold;
    if (config.grouping == BswGrouping::kQuantile) {
        std::vector<double> sorted = entries;
        std::sort(sorted.begin(), sorted.end());
        const int n = static_cast<int>(sorted.size());
        int idx = (n * config.low_groups) / config.num_groups;
        if (idx < 1) idx = 1;
        threshold = sorted[static_cast<std::size_t>(idx - 1)];
    } else {
        std::set<double> dset(entries.begin(), entries.end());
        std::vector<double> distinct(dset.begin(), dset.end());
        const int nd = static_cast<int>(distinct.size());
        // fewer distinct levels than groups: shrink proportionally so a single
        // level always lands in the low side
        int groups = std::min(config.num_groups, nd);
        int low = (groups == config.num_groups)
                      ? config.low_groups
                      : (config.low_groups * groups + config.num_groups - 1) /
                            config.num_groups;
        if (low > groups) low = groups;
        std::vector<int> ends = kmeans_1d(distinct, groups);
        threshold = distinct[static_cast<std::size_t>(ends[low - 1] - 1)];
    }

    std::vector<double> mask(static_cast<std::size_t>(c) * c, 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (variance[i] <= threshold) mask[i] = 1.0;
    return mask;
}

Tensor bsw_loss(const Tensor& query_a, const Tensor& query_b, const BswConfig& config) {
    Tensor cov_a = channel_covariance(query_a);
    Tensor cov_b = channel_covariance(query_b);
    const int c = cov_a.dim(0);
    std::vector<double> v = variance_matrix(cov_a.detach(), cov_b.detach());
    std::vector<double> mask = bsw_mask(v, c, config);
    double nnz = 0.0;
    for (double m : mask) nnz += m;
    if (nnz == 0.0) return Tensor::scalar(0.0);
    Tensor m = Tensor::from_data({c, c}, std::move(mask));  // constant, no grad
    Tensor l = add(sum(abs(mul(cov_a, m))), sum(abs(mul(cov_b, m))));
    return scale(l, 1.0 / (2.0 * nnz));
}

Tensor total_loss(const Tensor& l_b, const Tensor& l_s, const Tensor& l_c,
                  const Tensor& l_w, const LossWeights& weights, LossReport* report) {
    weights.validate();
    Tensor total = add(add(scale(l_b, weights.lambda_b), scale(l_s, weights.lambda_s)),
                       add(scale(l_c, weights.lambda_c), scale(l_w, weights.lambda_w)));
    if (report) {
        report->background = l_b.item();
        report->self_consistency = l_s.item();
        report->cross = l_c.item();
        report->whitening = l_w.item();
        report->total = total.item();
    }
    return total;
}

}  // namespace derain
