#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace derain {

namespace {

// C[M,N] += A[M,K] * B[K,N], row-major. The j-inner loop vectorizes.
void matmul_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T where B is [N,K].
void matmul_bt_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C[M,N] += A^T * B where A is [K,M], B is [K,N].
void matmul_at_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const double* arow = a + static_cast<std::size_t>(kk) * m;
        const double* brow = b + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::shared_ptr<TensorImpl> make_impl(std::vector<int> shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(shape_numel(impl->shape), 0.0);
    return impl;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch");
}

void im2col(const double* x, int c_in, int h, int w, int kh, int kw, int stride,
            int padding, int oh, int ow, double* col) {
    const int ohw = oh * ow;
    for (int ci = 0; ci < c_in; ++ci) {
        const double* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int a = 0; a < kh; ++a) {
            for (int b = 0; b < kw; ++b) {
                double* crow = col + (static_cast<std::size_t>(ci) * kh * kw + a * kw + b) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + a - padding;
                    if (iy < 0 || iy >= h) {
                        std::fill(crow + oy * ow, crow + (oy + 1) * ow, 0.0);
                        continue;
                    }
                    const double* xr = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + b - padding;
                        crow[oy * ow + ox] = (ix >= 0 && ix < w) ? xr[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* col, int c_in, int h, int w, int kh, int kw,
                  int stride, int padding, int oh, int ow, double* gx) {
    const int ohw = oh * ow;
    for (int ci = 0; ci < c_in; ++ci) {
        double* plane = gx + static_cast<std::size_t>(ci) * h * w;
        for (int a = 0; a < kh; ++a) {
            for (int b = 0; b < kw; ++b) {
                const double* crow =
                    col + (static_cast<std::size_t>(ci) * kh * kw + a * kw + b) * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + a - padding;
                    if (iy < 0 || iy >= h) continue;
                    double* xr = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + b - padding;
                        if (ix >= 0 && ix < w) xr[ix] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(shape_numel(impl->shape), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("from_data: shape does not match data length");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({}, {v}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor is not a scalar");
    return impl_->data[0];
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

namespace {

Tensor finish(std::shared_ptr<TensorImpl> impl, bool rg,
              std::vector<std::shared_ptr<TensorImpl>> parents,
              std::function<void(TensorImpl&)> fn) {
    if (rg) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(fn);
    }
    return Tensor(std::move(impl));
}

void accum(const std::shared_ptr<TensorImpl>& t, std::size_t i, double v) {
    t->grad[i] += v;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return finish(std::move(out), any_requires_grad({&a, &b}), {ai, bi},
                  [ai, bi](TensorImpl& self) {
                      if (ai->requires_grad) {
                          ai->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(ai, i, self.grad[i]);
                      }
                      if (bi->requires_grad) {
                          bi->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(bi, i, self.grad[i]);
                      }
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return finish(std::move(out), any_requires_grad({&a, &b}), {ai, bi},
                  [ai, bi](TensorImpl& self) {
                      if (ai->requires_grad) {
                          ai->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(ai, i, self.grad[i]);
                      }
                      if (bi->requires_grad) {
                          bi->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(bi, i, -self.grad[i]);
                      }
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return finish(std::move(out), any_requires_grad({&a, &b}), {ai, bi},
                  [ai, bi](TensorImpl& self) {
                      if (ai->requires_grad) {
                          ai->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(ai, i, self.grad[i] * bi->data[i]);
                      }
                      if (bi->requires_grad) {
                          bi->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              accum(bi, i, self.grad[i] * ai->data[i]);
                      }
                  });
}

Tensor scale(const Tensor& a, double c) {
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * c;
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai, c](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(ai, i, self.grad[i] * c);
    });
}

Tensor abs(const Tensor& a) {
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = std::fabs(a.data()[i]);
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = ai->data[i];
            const double s = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            accum(ai, i, self.grad[i] * s);
        }
    });
}

Tensor relu(const Tensor& a) {
    auto out = make_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (ai->data[i] > 0.0) accum(ai, i, self.grad[i]);
    });
}

Tensor sum(const Tensor& a) {
    auto out = make_impl({});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out->data[0] = acc;
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai](TensorImpl& self) {
        ai->ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < ai->grad.size(); ++i) accum(ai, i, g);
    });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_impl({m, n});
    matmul_accum(a.data().data(), b.data().data(), out->data.data(), m, k, n);
    auto ai = a.impl(), bi = b.impl();
    return finish(std::move(out), any_requires_grad({&a, &b}), {ai, bi},
                  [ai, bi, m, k, n](TensorImpl& self) {
                      if (ai->requires_grad) {
                          ai->ensure_grad();
                          matmul_bt_accum(self.grad.data(), bi->data.data(),
                                          ai->grad.data(), m, n, k);
                      }
                      if (bi->requires_grad) {
                          bi->ensure_grad();
                          matmul_at_accum(ai->data.data(), self.grad.data(),
                                          bi->grad.data(), k, m, n);
                      }
                  });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: expects 2-D");
    const int r = a.dim(0), c = a.dim(1);
    auto out = make_impl({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out->data[static_cast<std::size_t>(j) * r + i] =
                a.data()[static_cast<std::size_t>(i) * c + j];
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai, r, c](TensorImpl& self) {
        ai->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                ai->grad[static_cast<std::size_t>(i) * c + j] +=
                    self.grad[static_cast<std::size_t>(j) * r + i];
    });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.size())
        throw DimensionError("reshape: element count mismatch");
    auto out = std::make_shared<TensorImpl>();
    out->shape = std::move(shape);
    out->data = a.data();
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai](TensorImpl& self) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(ai, i, self.grad[i]);
    });
}

Tensor nchw_to_rows(const Tensor& a) {
    if (a.ndim() != 4) throw DimensionError("nchw_to_rows: expects 4-D");
    const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    const int hw = h * w;
    auto out = make_impl({n * hw, c});
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            const double* src = a.data().data() + (static_cast<std::size_t>(in) * c + ic) * hw;
            for (int s = 0; s < hw; ++s)
                out->data[(static_cast<std::size_t>(in) * hw + s) * c + ic] = src[s];
        }
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai},
                  [ai, n, c, hw](TensorImpl& self) {
                      ai->ensure_grad();
                      for (int in = 0; in < n; ++in)
                          for (int ic = 0; ic < c; ++ic) {
                              double* dst =
                                  ai->grad.data() + (static_cast<std::size_t>(in) * c + ic) * hw;
                              for (int s = 0; s < hw; ++s)
                                  dst[s] +=
                                      self.grad[(static_cast<std::size_t>(in) * hw + s) * c + ic];
                          }
                  });
}

Tensor rows_to_nchw(const Tensor& a, int n, int c, int h, int w) {
    if (a.ndim() != 2 || a.dim(0) != n * h * w || a.dim(1) != c)
        throw DimensionError("rows_to_nchw: incompatible shapes");
    const int hw = h * w;
    auto out = make_impl({n, c, h, w});
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            double* dst = out->data.data() + (static_cast<std::size_t>(in) * c + ic) * hw;
            for (int s = 0; s < hw; ++s)
                dst[s] = a.data()[(static_cast<std::size_t>(in) * hw + s) * c + ic];
        }
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai},
                  [ai, n, c, hw](TensorImpl& self) {
                      ai->ensure_grad();
                      for (int in = 0; in < n; ++in)
                          for (int ic = 0; ic < c; ++ic) {
                              const double* src =
                                  self.grad.data() + (static_cast<std::size_t>(in) * c + ic) * hw;
                              for (int s = 0; s < hw; ++s)
                                  ai->grad[(static_cast<std::size_t>(in) * hw + s) * c + ic] +=
                                      src[s];
                          }
                  });
}

Tensor center_rows(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("center_rows: expects 2-D");
    const int r = a.dim(0), c = a.dim(1);
    if (c == 0) throw ContractError("center_rows: empty rows");
    auto out = make_impl({r, c});
    for (int i = 0; i < r; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * c;
        double m = 0.0;
        for (int j = 0; j < c; ++j) m += row[j];
        m /= c;
        for (int j = 0; j < c; ++j)
            out->data[static_cast<std::size_t>(i) * c + j] = row[j] - m;
    }
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai, r, c](TensorImpl& self) {
        ai->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const double* grow = self.grad.data() + static_cast<std::size_t>(i) * c;
            double m = 0.0;
            for (int j = 0; j < c; ++j) m += grow[j];
            m /= c;
            for (int j = 0; j < c; ++j)
                ai->grad[static_cast<std::size_t>(i) * c + j] += grow[j] - m;
        }
    });
}

Tensor row_l2_normalize(const Tensor& a, double eps) {
    if (a.ndim() != 2) throw DimensionError("row_l2_normalize: expects 2-D");
    const int r = a.dim(0), c = a.dim(1);
    auto out = make_impl({r, c});
    std::vector<double> norms(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += row[j] * row[j];
        const double n = std::sqrt(s);
        norms[static_cast<std::size_t>(i)] = n;
        const double inv = 1.0 / (n + eps);
        for (int j = 0; j < c; ++j)
            out->data[static_cast<std::size_t>(i) * c + j] = row[j] * inv;
    }
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai},
                  [ai, r, c, eps, norms = std::move(norms)](TensorImpl& self) {
                      ai->ensure_grad();
                      for (int i = 0; i < r; ++i) {
                          const double* row = ai->data.data() + static_cast<std::size_t>(i) * c;
                          const double* grow = self.grad.data() + static_cast<std::size_t>(i) * c;
                          double* gx = ai->grad.data() + static_cast<std::size_t>(i) * c;
                          const double n = norms[static_cast<std::size_t>(i)];
                          const double d = n + eps;
                          double xg = 0.0;
                          for (int j = 0; j < c; ++j) xg += row[j] * grow[j];
                          const double coef = (n > 0.0) ? xg / (n * d * d) : 0.0;
                          for (int j = 0; j < c; ++j)
                              gx[j] += grow[j] / d - row[j] * coef;
                      }
                  });
}

Tensor softmax_rows(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("softmax_rows: expects 2-D");
    const int r = a.dim(0), c = a.dim(1);
    if (c == 0) throw ContractError("softmax_rows: empty rows");
    auto out = make_impl({r, c});
    for (int i = 0; i < r; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * c;
        double* orow = out->data.data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai}, [ai, r, c](TensorImpl& self) {
        ai->ensure_grad();
        for (int i = 0; i < r; ++i) {
            const double* s = self.data.data() + static_cast<std::size_t>(i) * c;
            const double* g = self.grad.data() + static_cast<std::size_t>(i) * c;
            double* gx = ai->grad.data() + static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += s[j] * g[j];
            for (int j = 0; j < c; ++j) gx[j] += s[j] * (g[j] - dot);
        }
    });
}

Tensor cosine_rows(const Tensor& items, const Tensor& queries, double eps) {
    if (items.ndim() != 2 || queries.ndim() != 2 || items.dim(1) != queries.dim(1))
        throw DimensionError("cosine_rows: dimension mismatch");
    const int m = items.dim(0), c = items.dim(1), k = queries.dim(0);
    auto out = make_impl({k, m});
    std::vector<double> np(static_cast<std::size_t>(m)), nq(static_cast<std::size_t>(k));
    for (int i = 0; i < m; ++i) {
        const double* p = items.data().data() + static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += p[j] * p[j];
        np[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    for (int i = 0; i < k; ++i) {
        const double* q = queries.data().data() + static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += q[j] * q[j];
        nq[static_cast<std::size_t>(i)] = std::sqrt(s);
    }
    for (int ik = 0; ik < k; ++ik) {
        const double* q = queries.data().data() + static_cast<std::size_t>(ik) * c;
        for (int im = 0; im < m; ++im) {
            const double* p = items.data().data() + static_cast<std::size_t>(im) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += p[j] * q[j];
            out->data[static_cast<std::size_t>(ik) * m + im] =
                dot / (np[static_cast<std::size_t>(im)] * nq[static_cast<std::size_t>(ik)] + eps);
        }
    }
    auto pi = items.impl(), qi = queries.impl();
    return finish(std::move(out), any_requires_grad({&items, &queries}), {pi, qi},
                  [pi, qi, m, c, k, eps, np = std::move(np), nq = std::move(nq)](TensorImpl& self) {
                      if (pi->requires_grad) pi->ensure_grad();
                      if (qi->requires_grad) qi->ensure_grad();
                      for (int ik = 0; ik < k; ++ik) {
                          const double* q = qi->data.data() + static_cast<std::size_t>(ik) * c;
                          const double nqv = nq[static_cast<std::size_t>(ik)];
                          for (int im = 0; im < m; ++im) {
                              const double g = self.grad[static_cast<std::size_t>(ik) * m + im];
                              if (g == 0.0) continue;
                              const double* p = pi->data.data() + static_cast<std::size_t>(im) * c;
                              const double npv = np[static_cast<std::size_t>(im)];
                              const double d = npv * nqv + eps;
                              const double s = self.data[static_cast<std::size_t>(ik) * m + im];
                              if (qi->requires_grad) {
                                  double* gq = qi->grad.data() + static_cast<std::size_t>(ik) * c;
                                  const double coef = (nqv > 0.0) ? s * npv / (nqv * d) : 0.0;
                                  for (int j = 0; j < c; ++j)
                                      gq[j] += g * (p[j] / d - coef * q[j]);
                              }
                              if (pi->requires_grad) {
                                  double* gp = pi->grad.data() + static_cast<std::size_t>(im) * c;
                                  const double coef = (npv > 0.0) ? s * nqv / (npv * d) : 0.0;
                                  for (int j = 0; j < c; ++j)
                                      gp[j] += g * (q[j] / d - coef * p[j]);
                              }
                          }
                      }
                  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4)
        throw DimensionError("conv2d: expects 4-D input and kernel");
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kci != ci) throw DimensionError("conv2d: channel mismatch");
    if (bias.ndim() != 1 || bias.dim(0) != co)
        throw DimensionError("conv2d: bias shape mismatch");
    if (stride < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding");
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw DimensionError("conv2d: output would be empty");
    const int ckk = ci * kh * kw, ohw = oh * ow;

    auto out = make_impl({n, co, oh, ow});
    std::vector<double> col(static_cast<std::size_t>(ckk) * ohw);
    for (int in = 0; in < n; ++in) {
        im2col(input.data().data() + static_cast<std::size_t>(in) * ci * h * w, ci, h, w,
               kh, kw, stride, padding, oh, ow, col.data());
        double* y = out->data.data() + static_cast<std::size_t>(in) * co * ohw;
        for (int oc = 0; oc < co; ++oc)
            std::fill(y + static_cast<std::size_t>(oc) * ohw,
                      y + static_cast<std::size_t>(oc + 1) * ohw, bias.data()[oc]);
        matmul_accum(kernel.data().data(), col.data(), y, co, ckk, ohw);
    }

    auto xi = input.impl(), ki = kernel.impl(), bi = bias.impl();
    return finish(std::move(out), any_requires_grad({&input, &kernel, &bias}),
                  {xi, ki, bi},
                  [xi, ki, bi, n, ci, h, w, co, kh, kw, stride, padding, oh, ow, ckk,
                   ohw](TensorImpl& self) {
                      // The im2col buffer is recomputed here instead of saved;
                      // keeping one per conv node would dominate memory.
                      std::vector<double> col(static_cast<std::size_t>(ckk) * ohw);
                      std::vector<double> gcol;
                      if (xi->requires_grad) {
                          xi->ensure_grad();
                          gcol.assign(static_cast<std::size_t>(ckk) * ohw, 0.0);
                      }
                      if (ki->requires_grad) ki->ensure_grad();
                      if (bi->requires_grad) bi->ensure_grad();
                      for (int in = 0; in < n; ++in) {
                          const double* gy =
                              self.grad.data() + static_cast<std::size_t>(in) * co * ohw;
                          if (ki->requires_grad || xi->requires_grad)
                              im2col(xi->data.data() + static_cast<std::size_t>(in) * ci * h * w,
                                     ci, h, w, kh, kw, stride, padding, oh, ow, col.data());
                          if (ki->requires_grad)
                              matmul_bt_accum(gy, col.data(), ki->grad.data(), co, ohw, ckk);
                          if (bi->requires_grad)
                              for (int oc = 0; oc < co; ++oc) {
                                  double acc = 0.0;
                                  const double* row = gy + static_cast<std::size_t>(oc) * ohw;
                                  for (int s = 0; s < ohw; ++s) acc += row[s];
                                  bi->grad[static_cast<std::size_t>(oc)] += acc;
                              }
                          if (xi->requires_grad) {
                              std::fill(gcol.begin(), gcol.end(), 0.0);
                              matmul_at_accum(ki->data.data(), gy, gcol.data(), ckk, co, ohw);
                              col2im_accum(gcol.data(), ci, h, w, kh, kw, stride, padding, oh,
                                           ow,
                                           xi->grad.data() +
                                               static_cast<std::size_t>(in) * ci * h * w);
                          }
                      }
                  });
}

Tensor transposed_conv2d(const Tensor& input, const Tensor& kernel,
                         const Tensor& bias, int stride, int padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4)
        throw DimensionError("transposed_conv2d: expects 4-D input and kernel");
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (kernel.dim(0) != ci) throw DimensionError("transposed_conv2d: channel mismatch");
    const int co = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (bias.ndim() != 1 || bias.dim(0) != co)
        throw DimensionError("transposed_conv2d: bias shape mismatch");
    const int oh = stride * (h - 1) + kh - 2 * padding;
    const int ow = stride * (w - 1) + kw - 2 * padding;
    if (oh < 1 || ow < 1) throw DimensionError("transposed_conv2d: output would be empty");

    auto out = make_impl({n, co, oh, ow});
    for (int in = 0; in < n; ++in) {
        double* y = out->data.data() + static_cast<std::size_t>(in) * co * oh * ow;
        for (int oc = 0; oc < co; ++oc)
            std::fill(y + static_cast<std::size_t>(oc) * oh * ow,
                      y + static_cast<std::size_t>(oc + 1) * oh * ow, bias.data()[oc]);
        for (int ic = 0; ic < ci; ++ic) {
            const double* x =
                input.data().data() + (static_cast<std::size_t>(in) * ci + ic) * h * w;
            for (int oc = 0; oc < co; ++oc) {
                const double* kk =
                    kernel.data().data() + (static_cast<std::size_t>(ic) * co + oc) * kh * kw;
                double* yp = y + static_cast<std::size_t>(oc) * oh * ow;
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < w; ++ix) {
                        const double v = x[iy * w + ix];
                        if (v == 0.0) continue;
                        for (int a = 0; a < kh; ++a) {
                            const int oy = stride * iy + a - padding;
                            if (oy < 0 || oy >= oh) continue;
                            for (int b = 0; b < kw; ++b) {
                                const int ox = stride * ix + b - padding;
                                if (ox >= 0 && ox < ow)
                                    yp[oy * ow + ox] += v * kk[a * kw + b];
                            }
                        }
                    }
            }
        }
    }

    auto xi = input.impl(), ki = kernel.impl(), bi = bias.impl();
    return finish(std::move(out), any_requires_grad({&input, &kernel, &bias}),
                  {xi, ki, bi},
                  [xi, ki, bi, n, ci, h, w, co, kh, kw, stride, padding, oh,
                   ow](TensorImpl& self) {
                      if (xi->requires_grad) xi->ensure_grad();
                      if (ki->requires_grad) ki->ensure_grad();
                      if (bi->requires_grad) bi->ensure_grad();
                      for (int in = 0; in < n; ++in) {
                          const double* gy =
                              self.grad.data() + static_cast<std::size_t>(in) * co * oh * ow;
                          if (bi->requires_grad)
                              for (int oc = 0; oc < co; ++oc) {
                                  double acc = 0.0;
                                  const double* row = gy + static_cast<std::size_t>(oc) * oh * ow;
                                  for (int s = 0; s < oh * ow; ++s) acc += row[s];
                                  bi->grad[static_cast<std::size_t>(oc)] += acc;
                              }
                          for (int ic = 0; ic < ci; ++ic) {
                              const double* x =
                                  xi->data.data() + (static_cast<std::size_t>(in) * ci + ic) * h * w;
                              double* gx =
                                  xi->requires_grad
                                      ? xi->grad.data() +
                                            (static_cast<std::size_t>(in) * ci + ic) * h * w
                                      : nullptr;
                              for (int oc = 0; oc < co; ++oc) {
                                  const double* kk = ki->data.data() +
                                                     (static_cast<std::size_t>(ic) * co + oc) * kh * kw;
                                  double* gk =
                                      ki->requires_grad
                                          ? ki->grad.data() +
                                                (static_cast<std::size_t>(ic) * co + oc) * kh * kw
                                          : nullptr;
                                  const double* gyp = gy + static_cast<std::size_t>(oc) * oh * ow;
                                  for (int iy = 0; iy < h; ++iy)
                                      for (int ix = 0; ix < w; ++ix) {
                                          double gacc = 0.0;
                                          const double xv = x[iy * w + ix];
                                          for (int a = 0; a < kh; ++a) {
                                              const int oy = stride * iy + a - padding;
                                              if (oy < 0 || oy >= oh) continue;
                                              for (int b = 0; b < kw; ++b) {
                                                  const int ox = stride * ix + b - padding;
                                                  if (ox < 0 || ox >= ow) continue;
                                                  const double g = gyp[oy * ow + ox];
                                                  gacc += g * kk[a * kw + b];
                                                  if (gk) gk[a * kw + b] += g * xv;
                                              }
                                          }
                                          if (gx) gx[iy * w + ix] += gacc;
                                      }
                              }
                          }
                      }
                  });
}

Tensor maxpool2d(const Tensor& input) {
    if (input.ndim() != 4) throw DimensionError("maxpool2d: expects 4-D");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("maxpool2d: spatial dims must be even");
    const int oh = h / 2, ow = w / 2;
    auto out = make_impl({n, c, oh, ow});
    std::vector<std::int32_t> argmax(out->data.size());
    for (int nc = 0; nc < n * c; ++nc) {
        const double* plane = input.data().data() + static_cast<std::size_t>(nc) * h * w;
        double* op = out->data.data() + static_cast<std::size_t>(nc) * oh * ow;
        std::int32_t* ap = argmax.data() + static_cast<std::size_t>(nc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const int base = (2 * oy) * w + 2 * ox;
                // first occurrence wins on ties (row-major window order)
                int best = base;
                double bv = plane[base];
                const int cand[3] = {base + 1, base + w, base + w + 1};
                for (int ci2 = 0; ci2 < 3; ++ci2)
                    if (plane[cand[ci2]] > bv) {
                        bv = plane[cand[ci2]];
                        best = cand[ci2];
                    }
                op[oy * ow + ox] = bv;
                ap[oy * ow + ox] = best;
            }
    }
    auto xi = input.impl();
    return finish(std::move(out), input.requires_grad(), {xi},
                  [xi, n, c, h, w, oh, ow, argmax = std::move(argmax)](TensorImpl& self) {
                      xi->ensure_grad();
                      for (int nc = 0; nc < n * c; ++nc) {
                          double* gx = xi->grad.data() + static_cast<std::size_t>(nc) * h * w;
                          const double* g = self.grad.data() + static_cast<std::size_t>(nc) * oh * ow;
                          const std::int32_t* ap =
                              argmax.data() + static_cast<std::size_t>(nc) * oh * ow;
                          for (int s = 0; s < oh * ow; ++s) gx[ap[s]] += g[s];
                      }
                  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4)
        throw DimensionError("concat_channels: expects 4-D");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw DimensionError("concat_channels: batch/spatial mismatch");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const int hw = h * w;
    auto out = make_impl({n, ca + cb, h, w});
    for (int in = 0; in < n; ++in) {
        std::memcpy(out->data.data() + static_cast<std::size_t>(in) * (ca + cb) * hw,
                    a.data().data() + static_cast<std::size_t>(in) * ca * hw,
                    static_cast<std::size_t>(ca) * hw * sizeof(double));
        std::memcpy(out->data.data() +
                        (static_cast<std::size_t>(in) * (ca + cb) + ca) * hw,
                    b.data().data() + static_cast<std::size_t>(in) * cb * hw,
                    static_cast<std::size_t>(cb) * hw * sizeof(double));
    }
    auto ai = a.impl(), bi = b.impl();
    return finish(std::move(out), any_requires_grad({&a, &b}), {ai, bi},
                  [ai, bi, n, ca, cb, hw](TensorImpl& self) {
                      for (int in = 0; in < n; ++in) {
                          if (ai->requires_grad) {
                              ai->ensure_grad();
                              const double* g =
                                  self.grad.data() + static_cast<std::size_t>(in) * (ca + cb) * hw;
                              double* ga = ai->grad.data() + static_cast<std::size_t>(in) * ca * hw;
                              for (int s = 0; s < ca * hw; ++s) ga[s] += g[s];
                          }
                          if (bi->requires_grad) {
                              bi->ensure_grad();
                              const double* g =
                                  self.grad.data() +
                                  (static_cast<std::size_t>(in) * (ca + cb) + ca) * hw;
                              double* gb = bi->grad.data() + static_cast<std::size_t>(in) * cb * hw;
                              for (int s = 0; s < cb * hw; ++s) gb[s] += g[s];
                          }
                      }
                  });
}

Tensor slice_channels(const Tensor& a, int c0, int c1) {
    if (a.ndim() != 4) throw DimensionError("slice_channels: expects 4-D");
    const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    if (c0 < 0 || c1 < c0 || c1 > c) throw DimensionError("slice_channels: bad range");
    const int cs = c1 - c0, hw = h * w;
    auto out = make_impl({n, cs, h, w});
    for (int in = 0; in < n; ++in)
        std::memcpy(out->data.data() + static_cast<std::size_t>(in) * cs * hw,
                    a.data().data() + (static_cast<std::size_t>(in) * c + c0) * hw,
                    static_cast<std::size_t>(cs) * hw * sizeof(double));
    auto ai = a.impl();
    return finish(std::move(out), a.requires_grad(), {ai},
                  [ai, n, c, c0, cs, hw](TensorImpl& self) {
                      ai->ensure_grad();
                      for (int in = 0; in < n; ++in) {
                          const double* g =
                              self.grad.data() + static_cast<std::size_t>(in) * cs * hw;
                          double* ga =
                              ai->grad.data() + (static_cast<std::size_t>(in) * c + c0) * hw;
                          for (int s = 0; s < cs * hw; ++s) ga[s] += g[s];
                      }
                  });
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    // Post-order DFS; reversed it yields a valid reverse-topological order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl().get(), 0});
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second)
                stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace derain
