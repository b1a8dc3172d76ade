#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "errors.hpp"

namespace derain {

// Reverse-mode tape node. Graphs are built define-by-run: every op records
// its parents and a backward closure, and backward() replays the closures in
// reverse topological order. One graph is confined to one thread.
struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& grad() { impl_->ensure_grad(); return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }
    double item() const;

    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }

    // Copy of the values with no graph attached.
    Tensor detach() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

std::size_t shape_numel(const std::vector<int>& shape);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);

// Reductions to scalar shape {}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// 2-D linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Shape plumbing. reshape keeps row-major order; numel must match.
Tensor reshape(const Tensor& a, std::vector<int> shape);
// [N,C,H,W] -> [N*H*W, C] (one row per spatial location) and its inverse.
Tensor nchw_to_rows(const Tensor& a);
Tensor rows_to_nchw(const Tensor& a, int n, int c, int h, int w);

// Per-row helpers on 2-D tensors.
Tensor center_rows(const Tensor& a);                      // subtract row mean
Tensor row_l2_normalize(const Tensor& a, double eps = 1e-12);
Tensor softmax_rows(const Tensor& a);
// Pairwise cosine similarity: items [M,C] x queries [K,C] -> [K,M],
// entry (k,m) = p_m.q_k / (|p_m||q_k| + eps). A zero vector scores 0.
Tensor cosine_rows(const Tensor& items, const Tensor& queries, double eps = 1e-12);

// Convolutional ops, NCHW layout.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);
// kernel layout [Cin,Cout,kh,kw]; exact adjoint of conv2d with the same
// stride/padding, so output spatial size is stride*(H-1)+kh-2*padding.
Tensor transposed_conv2d(const Tensor& input, const Tensor& kernel,
                         const Tensor& bias, int stride, int padding);
// 2x2 window, stride 2; gradient goes to the first max in row-major order.
Tensor maxpool2d(const Tensor& input);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& a, int c0, int c1);

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
// into every requires_grad tensor reachable from the loss.
void backward(const Tensor& loss);

}  // namespace derain
