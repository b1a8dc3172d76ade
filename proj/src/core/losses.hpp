#pragma once

#include <string>
#include <vector>

#include "tensor.hpp"

namespace derain {

struct LossWeights {
    double lambda_b = 1.0;
    double lambda_s = 0.1;
    double lambda_c = 0.001;
    double lambda_w = 0.01;  // artifact default; not stated in the source material

    void validate() const;
};

enum class BswGrouping { kCluster, kQuantile };

struct BswConfig {
    int low_groups = 2;   // l
    int num_groups = 4;   // h
    BswGrouping grouping = BswGrouping::kCluster;

    void validate() const;
};

struct LossReport {
    double background = 0.0;   // L_b
    double self_consistency = 0.0;  // L_s
    double cross = 0.0;        // L_c
    double whitening = 0.0;    // L_w
    double total = 0.0;
};

// L_b: mean absolute difference between two background estimates of one scene.
Tensor background_prediction_loss(const Tensor& bg_a, const Tensor& bg_b);

// L_c: mean absolute difference between an input frame and the background
// estimated from the other frame.
Tensor cross_information_loss(const Tensor& input_w, const Tensor& bg_v);

// L_s: mean |I - (B + R)|.
Tensor self_consistency_loss(const Tensor& input, const Tensor& bg, const Tensor& rain);

// Channel covariance of a [C,H,W] query map: rows mean-centered,
// Sigma = X*X^T / (H*W). Differentiable.
Tensor channel_covariance(const Tensor& query);

// Elementwise two-point variance of two covariance matrices:
// V = ((a-b)/2)^2. Plain values, no graph.
std::vector<double> variance_matrix(const Tensor& cov_a, const Tensor& cov_b);

// Binary symmetric mask selecting the low-variance (background) entries.
// The upper-triangle-plus-diagonal variance levels are grouped into
// config.num_groups clusters (exact 1-D k-means over distinct values, or a
// quantile split); entries in the low_groups lowest-mean groups get mask 1.
std::vector<double> bsw_mask(const std::vector<double>& variance, int channels,
                             const BswConfig& config);

// L_w over one query pair [C,H,W] x 2: mean over both images of
// |Sigma (.) M|_1 / nnz(M). The mask is a constant; gradients flow through
// the covariances only.
Tensor bsw_loss(const Tensor& query_a, const Tensor& query_b, const BswConfig& config);

// lambda-weighted total; the report carries the unweighted terms.
Tensor total_loss(const Tensor& l_b, const Tensor& l_s, const Tensor& l_c,
                  const Tensor& l_w, const LossWeights& weights, LossReport* report);

}  // namespace derain
