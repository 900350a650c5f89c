// Copyright (c) 2026, the saelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major f64 tensors.
// Define-by-run: each op eagerly computes its value and, when any operand
// requires gradients, records parents and a backward rule. backward() walks
// the graph once in reverse topological order with sequential accumulation,
// so gradients are reproducible byte-for-byte.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <unordered_map>
#include <vector>

#include "saelab/common.hpp"

namespace saelab {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily; same length as data when present

    // Computation-graph bookkeeping. Leaves have no parents and no rule.
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        impl->data.assign(shape_numel(shape), 0.0);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("Tensor::from: shape " + shape_str(shape) + " does not hold " +
                                 std::to_string(data.size()) + " values");
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.impl_->data) v = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    size_t numel() const { return impl_->data.size(); }
    size_t ndim() const { return impl_->shape.size(); }

    // 2-D helpers; a 1-D tensor behaves as a single row.
    size_t rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }
    size_t cols() const {
        return impl_->shape.size() == 2 ? impl_->shape[1] : impl_->shape.empty() ? 1 : impl_->shape[0];
    }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double at(size_t i) const { return impl_->data[i]; }
    double at(size_t r, size_t c) const { return impl_->data[r * cols() + c]; }
    double& mut(size_t i) { return impl_->data[i]; }

    double value() const {
        if (numel() != 1) throw ContractError("Tensor::value: tensor is not scalar, shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

    const char* op() const { return impl_->op; }
    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

    uint64_t checksum() const { return fnv1a64(impl_->data); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_result(Shape shape, const char* op, std::vector<Tensor> parents) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    impl->requires_grad = rg;
    if (rg) {
        impl->op = op;
        impl->parents.reserve(parents.size());
        for (const Tensor& p : parents) impl->parents.push_back(p.impl_ptr());
    } else {
        impl->op = op;
    }
    return Tensor(impl);
}

// Attach the rule only when gradients can flow; value-only paths stay light.
inline void set_backward(Tensor& t, std::function<void(TensorImpl&)> fn) {
    if (t.requires_grad()) t.impl()->backward_fn = std::move(fn);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void accumulate(TensorImpl& dst, const std::vector<double>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), "add", {a, b});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) + b.at(i);
    detail::set_backward(out, [ai = a.impl_ptr(), bi = b.impl_ptr()](TensorImpl& self) {
        if (ai->requires_grad) detail::accumulate(*ai, self.grad);
        if (bi->requires_grad) detail::accumulate(*bi, self.grad);
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), "sub", {a, b});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) - b.at(i);
    detail::set_backward(out, [ai = a.impl_ptr(), bi = b.impl_ptr()](TensorImpl& self) {
        if (ai->requires_grad) detail::accumulate(*ai, self.grad);
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), "mul", {a, b});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) * b.at(i);
    detail::set_backward(out, [ai = a.impl_ptr(), bi = b.impl_ptr()](TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
        }
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = detail::make_result(a.shape(), "add_scalar", {a});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) + s;
    detail::set_backward(out, [ai = a.impl_ptr()](TensorImpl& self) {
        if (ai->requires_grad) detail::accumulate(*ai, self.grad);
    });
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = detail::make_result(a.shape(), "mul_scalar", {a});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) * s;
    detail::set_backward(out, [ai = a.impl_ptr(), s](TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * s;
        }
    });
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = detail::make_result(a.shape(), "relu", {a});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    detail::set_backward(out, [ai = a.impl_ptr()](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (ai->data[i] > 0.0) ai->grad[i] += self.grad[i];
    });
    return out;
}

/// JumpReLU with fixed threshold: x * 1[x > theta]. Gradient passes only
/// where the pre-activation clears the threshold. theta = 0 coincides with
/// relu, including its gradient.
inline Tensor jump_relu(const Tensor& a, double theta) {
    Tensor out = detail::make_result(a.shape(), "jump_relu", {a});
    for (size_t i = 0; i < out.numel(); ++i) {
        double v = a.at(i);
        out.mut(i) = (v > theta && v > 0.0) ? v : 0.0;
    }
    detail::set_backward(out, [ai = a.impl_ptr(), theta](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (ai->data[i] > theta && ai->data[i] > 0.0) ai->grad[i] += self.grad[i];
    });
    return out;
}

inline Tensor square(const Tensor& a) {
    Tensor out = detail::make_result(a.shape(), "square", {a});
    for (size_t i = 0; i < out.numel(); ++i) out.mut(i) = a.at(i) * a.at(i);
    detail::set_backward(out, [ai = a.impl_ptr()](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += 2.0 * ai->data[i] * self.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: operands must be 2-D, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor out = detail::make_result({m, n}, "matmul", {a, b});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    // i-k-j order keeps the inner loop contiguous over b and c rows.
    for (size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    detail::set_backward(out, [ai = a.impl_ptr(), bi = b.impl_ptr(), m, k, n](TensorImpl& self) {
        const double* g = self.grad.data();
        if (ai->requires_grad) {
            // dA = G * B^T
            ai->ensure_grad();
            double* da = ai->grad.data();
            const double* pb = bi->data.data();
            for (size_t i = 0; i < m; ++i)
                for (size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* grow = g + i * n;
                    const double* brow = pb + kk * n;
                    for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    da[i * k + kk] += acc;
                }
        }
        if (bi->requires_grad) {
            // dB = A^T * G
            bi->ensure_grad();
            double* db = bi->grad.data();
            const double* pa = ai->data.data();
            for (size_t kk = 0; kk < k; ++kk)
                for (size_t i = 0; i < m; ++i) {
                    double av = pa[i * k + kk];
                    if (av == 0.0) continue;
                    const double* grow = g + i * n;
                    double* dbrow = db + kk * n;
                    for (size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: operand must be 2-D, got " + shape_str(a.shape()));
    size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = detail::make_result({n, m}, "transpose", {a});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out.mut(j * m + i) = a.at(i * n + j);
    detail::set_backward(out, [ai = a.impl_ptr(), m, n](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) ai->grad[i * n + j] += self.grad[j * m + i];
    });
    return out;
}

/// x: [n×d], b: 1-D [d]; adds b to every row.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.shape()[0])
        throw DimensionError("add_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(b.shape()));
    size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out = detail::make_result({n, d}, "add_rowvec", {x, b});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out.mut(i * d + j) = x.at(i * d + j) + b.at(j);
    detail::set_backward(out, [xi = x.impl_ptr(), bi = b.impl_ptr(), n, d](TensorImpl& self) {
        if (xi->requires_grad) detail::accumulate(*xi, self.grad);
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) bi->grad[j] += self.grad[i * d + j];
        }
    });
    return out;
}

/// x: [n×d], b: 1-D [d]; subtracts b from every row.
inline Tensor sub_rowvec(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.shape()[0])
        throw DimensionError("sub_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                             shape_str(b.shape()));
    size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out = detail::make_result({n, d}, "sub_rowvec", {x, b});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) out.mut(i * d + j) = x.at(i * d + j) - b.at(j);
    detail::set_backward(out, [xi = x.impl_ptr(), bi = b.impl_ptr(), n, d](TensorImpl& self) {
        if (xi->requires_grad) detail::accumulate(*xi, self.grad);
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) bi->grad[j] -= self.grad[i * d + j];
        }
    });
    return out;
}

/// Row lookup into an embedding table: out[i] = table[ids[i]].
inline Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw DimensionError("embed_rows: table must be 2-D");
    size_t v = table.shape()[0], d = table.shape()[1];
    for (int id : ids)
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw ContractError("embed_rows: id " + std::to_string(id) + " outside table of " +
                                std::to_string(v) + " rows");
    Tensor out = detail::make_result({ids.size(), d}, "embed_rows", {table});
    for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = 0; j < d; ++j) out.mut(i * d + j) = table.at(static_cast<size_t>(ids[i]) * d + j);
    detail::set_backward(out, [ti = table.impl_ptr(), ids, d](TensorImpl& self) {
        if (!ti->requires_grad) return;
        ti->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
            for (size_t j = 0; j < d; ++j)
                ti->grad[static_cast<size_t>(ids[i]) * d + j] += self.grad[i * d + j];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_rows: no operands");
    size_t d = xs[0].shape().back();
    size_t total = 0;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.shape()[1] != d)
            throw DimensionError("concat_rows: operand " + shape_str(x.shape()) + " does not have width " +
                                 std::to_string(d));
        total += x.shape()[0];
    }
    Tensor out = detail::make_result({total, d}, "concat_rows", xs);
    size_t row = 0;
    for (const Tensor& x : xs) {
        std::copy(x.data(), x.data() + x.numel(), out.data() + row * d);
        row += x.shape()[0];
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& x : xs) impls.push_back(x.impl_ptr());
    detail::set_backward(out, [impls, d](TensorImpl& self) {
        size_t row = 0;
        for (const auto& xi : impls) {
            size_t n = xi->shape[0];
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < n * d; ++i) xi->grad[i] += self.grad[row * d + i];
            }
            row += n;
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_cols: no operands");
    size_t n = xs[0].shape()[0];
    size_t total = 0;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.shape()[0] != n)
            throw DimensionError("concat_cols: operand " + shape_str(x.shape()) + " does not have " +
                                 std::to_string(n) + " rows");
        total += x.shape()[1];
    }
    Tensor out = detail::make_result({n, total}, "concat_cols", xs);
    size_t col = 0;
    for (const Tensor& x : xs) {
        size_t w = x.shape()[1];
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < w; ++j) out.mut(i * total + col + j) = x.at(i * w + j);
        col += w;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& x : xs) impls.push_back(x.impl_ptr());
    detail::set_backward(out, [impls, n, total](TensorImpl& self) {
        size_t col = 0;
        for (const auto& xi : impls) {
            size_t w = xi->shape[1];
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < w; ++j) xi->grad[i * w + j] += self.grad[i * total + col + j];
            }
            col += w;
        }
    });
    return out;
}

inline Tensor slice_rows(const Tensor& x, size_t start, size_t count) {
    if (x.ndim() != 2) throw DimensionError("slice_rows: operand must be 2-D");
    size_t n = x.shape()[0], d = x.shape()[1];
    if (start + count > n)
        throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") exceeds " + std::to_string(n) + " rows");
    Tensor out = detail::make_result({count, d}, "slice_rows", {x});
    std::copy(x.data() + start * d, x.data() + (start + count) * d, out.data());
    detail::set_backward(out, [xi = x.impl_ptr(), start, count, d](TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < count * d; ++i) xi->grad[start * d + i] += self.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_result({1}, "sum", {a});
    double acc = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) acc += a.at(i);
    out.mut(0) = acc;
    detail::set_backward(out, [ai = a.impl_ptr()](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (double& g : ai->grad) g += self.grad[0];
    });
    return out;
}

/// Per-row softmax over a [n×m] matrix. With causal=true, entries at column
/// j > row i are masked out (probability exactly zero, no gradient).
inline Tensor row_softmax(const Tensor& a, bool causal = false) {
    if (a.ndim() != 2) throw DimensionError("row_softmax: operand must be 2-D");
    size_t n = a.shape()[0], m = a.shape()[1];
    Tensor out = detail::make_result({n, m}, "row_softmax", {a});
    for (size_t i = 0; i < n; ++i) {
        size_t lim = causal ? std::min(i + 1, m) : m;
        double mx = -1e300;
        for (size_t j = 0; j < lim; ++j) mx = std::max(mx, a.at(i * m + j));
        double denom = 0.0;
        for (size_t j = 0; j < lim; ++j) denom += std::exp(a.at(i * m + j) - mx);
        for (size_t j = 0; j < lim; ++j) out.mut(i * m + j) = std::exp(a.at(i * m + j) - mx) / denom;
        for (size_t j = lim; j < m; ++j) out.mut(i * m + j) = 0.0;
    }
    auto probs = std::make_shared<std::vector<double>>(out.vec());
    detail::set_backward(out, [ai = a.impl_ptr(), probs, n, m, causal](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const std::vector<double>& p = *probs;
        for (size_t i = 0; i < n; ++i) {
            size_t lim = causal ? std::min(i + 1, m) : m;
            double dot = 0.0;
            for (size_t j = 0; j < lim; ++j) dot += self.grad[i * m + j] * p[i * m + j];
            for (size_t j = 0; j < lim; ++j)
                ai->grad[i * m + j] += p[i * m + j] * (self.grad[i * m + j] - dot);
        }
    });
    return out;
}

/// Per-row layer normalization with learned gain/bias (both 1-D [d]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.ndim() != 2 || gain.ndim() != 1 || bias.ndim() != 1 || x.shape()[1] != gain.shape()[0] ||
        x.shape()[1] != bias.shape()[0])
        throw DimensionError("layer_norm: incompatible shapes " + shape_str(x.shape()) + ", " +
                             shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
    size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out = detail::make_result({n, d}, "layer_norm", {x, gain, bias});
    auto xhat = std::make_shared<std::vector<double>>(n * d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += x.at(i * d + j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = x.at(i * d + j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (size_t j = 0; j < d; ++j) {
            double h = (x.at(i * d + j) - mean) * is;
            (*xhat)[i * d + j] = h;
            out.mut(i * d + j) = gain.at(j) * h + bias.at(j);
        }
    }
    detail::set_backward(out, [xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), xhat,
                               inv_std, n, d](TensorImpl& self) {
        const std::vector<double>& h = *xhat;
        if (gi->requires_grad) {
            gi->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) gi->grad[j] += self.grad[i * d + j] * h[i * d + j];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < d; ++j) bi->grad[j] += self.grad[i * d + j];
        }
        if (xi->requires_grad) {
            xi->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                double mean_gy = 0.0, mean_gyh = 0.0;
                for (size_t j = 0; j < d; ++j) {
                    double gy = self.grad[i * d + j] * gi->data[j];
                    mean_gy += gy;
                    mean_gyh += gy * h[i * d + j];
                }
                mean_gy /= static_cast<double>(d);
                mean_gyh /= static_cast<double>(d);
                for (size_t j = 0; j < d; ++j) {
                    double gy = self.grad[i * d + j] * gi->data[j];
                    xi->grad[i * d + j] += (gy - mean_gy - h[i * d + j] * mean_gyh) * (*inv_std)[i];
                }
            }
        }
    });
    return out;
}

/// Mean negative log-softmax over masked positions. logits: [n×V].
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                    const std::vector<bool>& mask) {
    if (logits.ndim() != 2) throw DimensionError("softmax_cross_entropy: logits must be 2-D");
    size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n || mask.size() != n)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(n) + " rows vs " +
                             std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                             " mask entries");
    size_t active = 0;
    for (bool b : mask) active += b ? 1 : 0;
    if (active == 0) throw ContractError("softmax_cross_entropy: mask selects no positions");
    for (size_t i = 0; i < n; ++i)
        if (mask[i] && (targets[i] < 0 || static_cast<size_t>(targets[i]) >= v))
            throw ContractError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                                " outside vocab of " + std::to_string(v));

    Tensor out = detail::make_result({1}, "softmax_cross_entropy", {logits});
    auto probs = std::make_shared<std::vector<double>>(n * v, 0.0);
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        double mx = -1e300;
        for (size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(i * v + j));
        double denom = 0.0;
        for (size_t j = 0; j < v; ++j) denom += std::exp(logits.at(i * v + j) - mx);
        double log_denom = std::log(denom);
        for (size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(logits.at(i * v + j) - mx) / denom;
        loss += -(logits.at(i * v + static_cast<size_t>(targets[i])) - mx - log_denom);
    }
    out.mut(0) = loss / static_cast<double>(active);
    detail::set_backward(out, [li = logits.impl_ptr(), probs, targets, mask, n, v, active](TensorImpl& self) {
        if (!li->requires_grad) return;
        li->ensure_grad();
        double scale = self.grad[0] / static_cast<double>(active);
        for (size_t i = 0; i < n; ++i) {
            if (!mask[i]) continue;
            for (size_t j = 0; j < v; ++j) {
                double delta = (static_cast<size_t>(targets[i]) == j) ? 1.0 : 0.0;
                li->grad[i * v + j] += ((*probs)[i * v + j] - delta) * scale;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Backward traversal
// ---------------------------------------------------------------------------

/// Populates grads of every reachable requires_grad tensor. Interior-node
/// gradients are rebuilt each call; leaf gradients accumulate across calls
/// until explicitly zeroed.
inline void backward(const Tensor& root) {
    if (root.numel() != 1)
        throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS over requires_grad nodes.
    std::vector<TensorImpl*> topo;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    std::unordered_map<const TensorImpl*, bool> visited;
    stack.push_back({root.impl(), 0});
    visited[root.impl()] = true;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        bool descended = false;
        while (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx].get();
            ++idx;
            if (!p->requires_grad || visited.count(p)) continue;
            visited[p] = true;
            stack.push_back({p, 0});
            descended = true;
            break;
        }
        if (descended) continue;
        topo.push_back(node);
        stack.pop_back();
    }

    // Interior nodes get fresh gradient buffers; leaves keep accumulating.
    for (TensorImpl* node : topo)
        if (node->backward_fn) node->grad.assign(node->data.size(), 0.0);
    TensorImpl* r = root.impl();
    r->ensure_grad();
    r->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace saelab
