#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "sda/error.hpp"
#include "sda/rng.hpp"

// Reverse-mode autodiff on dense row-major tensors.
//
// The op set is closed and small: everything the models need is composed
// from the primitives below, and every primitive has a gradient that is
// checked against central finite differences in the test suite. Graphs are
// built by recording parent links and a backward closure per node; calling
// backward(loss) runs the closures in reverse topological order.
//
// Precision: the same code is instantiated for double (gradient tests,
// oracles) and float (training loops). Every op verifies its output is
// finite and throws NumericError otherwise.

namespace sda {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backprop;  // pushes this->grad into parents

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        else std::fill(grad.begin(), grad.end(), T(0));
    }
};

template <class T>
inline void check_finite(const std::vector<T>& v, const char* op) {
    using Arr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
    if (!Arr(v.data(), static_cast<Eigen::Index>(v.size())).allFinite())
        throw NumericError(std::string("non-finite value produced by ") + op);
}

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("data length does not match shape " + shape_str(shape));
        check_finite(data, "tensor construction");
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.resize(static_cast<size_t>(shape_numel(shape)));
        n->shape = std::move(shape);
        for (auto& x : n->value) x = static_cast<T>(rng.gaussian()) * stddev;
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return node().shape; }
    int64_t numel() const { return node().numel(); }
    bool requires_grad() const { return node().requires_grad; }

    std::span<const T> data() const { return {node().value.data(), node().value.size()}; }

    // leaf mutation between graphs (parameter updates); never mutate mid-graph
    std::span<T> mutable_data() { return {node().value.data(), node().value.size()}; }

    std::span<const T> grad() const {
        const auto& n = node();
        if (n.grad.size() != n.value.size())
            throw ValueError("gradient not computed for this tensor");
        return {n.grad.data(), n.grad.size()};
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
        return node().value[0];
    }

    std::shared_ptr<TensorNode<T>> handle() const { return n_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

private:
    TensorNode<T>& node() const {
        if (!n_) throw ValueError("use of undefined tensor");
        return *n_;
    }

    std::shared_ptr<TensorNode<T>> n_;
};

// Graph recording can be suspended for inference-only forward passes
// (sampling loops, benchmark evaluation); RAII guard, thread-local.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <class T>
inline std::shared_ptr<TensorNode<T>> make_node(Shape shape, std::vector<T> value,
                                                std::vector<std::shared_ptr<TensorNode<T>>> parents,
                                                const char* op) {
    check_finite(value, op);
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_mode_flag()) {
        for (auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
    }
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using CMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle(), b.handle()}, "add");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            for (int k = 0; k < 2; ++k) {
                auto& p = *self.parents[k];
                if (!p.requires_grad) continue;
                for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle(), b.handle()}, "sub");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle(), b.handle()}, "mul");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "add_scalar");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "mul_scalar");
    if (n->requires_grad) {
        n->backprop = [s](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "relu");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i)
                if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

// subtract each sample's mean over all non-batch dims (a: [B, ...]);
// centers inputs so zero-padding sits near the typical background level
template <class T>
Tensor<T> center_per_sample(const Tensor<T>& a) {
    const auto& sh = a.shape();
    if (sh.empty() || sh[0] <= 0) throw ShapeError("center_per_sample: need [B, ...] input");
    const size_t B = static_cast<size_t>(sh[0]);
    const size_t per = a.data().size() / B;
    std::vector<T> out(a.data().size());
    for (size_t b = 0; b < B; ++b) {
        const T* src = a.data().data() + b * per;
        T m = T(0);
        for (size_t i = 0; i < per; ++i) m += src[i];
        m /= static_cast<T>(per);
        for (size_t i = 0; i < per; ++i) out[b * per + i] = src[i] - m;
    }
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "center_per_sample");
    if (n->requires_grad) {
        n->backprop = [B, per](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t b = 0; b < B; ++b) {
                const T* g = self.grad.data() + b * per;
                T m = T(0);
                for (size_t i = 0; i < per; ++i) m += g[i];
                m /= static_cast<T>(per);
                for (size_t i = 0; i < per; ++i) p.grad[b * per + i] += g[i] - m;
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        T x = a.data()[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "silu");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i) {
                T x = p.value[i];
                T sig = T(1) / (T(1) + std::exp(-x));
                p.grad[i] += self.grad[i] * sig * (T(1) + x * (T(1) - sig));
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> log_elem(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    auto n = detail::make_node(a.shape(), std::move(out), {a.handle()}, "log");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i] / p.value[i];
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    // accumulate in double: float-precision sums over big buffers drift
    double acc = 0;
    for (T v : a.data()) acc += static_cast<double>(v);
    auto n = detail::make_node(Shape{1}, std::vector<T>{static_cast<T>(acc)}, {a.handle()}, "sum");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            T g = self.grad[0];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    double acc = 0;
    for (T v : a.data()) acc += static_cast<double>(v);
    const T inv = static_cast<T>(1.0 / static_cast<double>(a.numel()));
    auto n = detail::make_node(Shape{1}, std::vector<T>{static_cast<T>(acc) * inv}, {a.handle()}, "mean");
    if (n->requires_grad) {
        n->backprop = [inv](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            T g = self.grad[0] * inv;
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<T> out(a.data().begin(), a.data().end());
    auto n = detail::make_node(std::move(shape), std::move(out), {a.handle()}, "reshape");
    if (n->requires_grad) {
        n->backprop = [](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

// contiguous row range along axis 0
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len) {
    const auto& sh = a.shape();
    if (sh.empty()) throw ShapeError("slice_rows: rank-0 tensor");
    if (start < 0 || len <= 0 || start + len > sh[0])
        throw ShapeError("slice_rows: range out of bounds");
    int64_t row = a.numel() / sh[0];
    Shape osh = sh;
    osh[0] = len;
    std::vector<T> out(a.data().begin() + start * row, a.data().begin() + (start + len) * row);
    auto n = detail::make_node(std::move(osh), std::move(out), {a.handle()}, "slice_rows");
    if (n->requires_grad) {
        n->backprop = [start, row](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < self.grad.size(); ++i)
                p.grad[static_cast<size_t>(start * row) + i] += self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<T> out(static_cast<size_t>(M) * N);
    {
        detail::CMatMap<T> am(a.data().data(), M, K), bm(b.data().data(), K, N);
        detail::MatMap<T> om(out.data(), M, N);
        om.noalias() = am * bm;
    }
    auto n = detail::make_node(Shape{M, N}, std::move(out), {a.handle(), b.handle()}, "matmul");
    if (n->requires_grad) {
        n->backprop = [M, K, N](TensorNode<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            detail::CMatMap<T> gm(self.grad.data(), M, N);
            if (pa.requires_grad) {
                detail::CMatMap<T> bm(pb.value.data(), K, N);
                detail::MatMap<T> ga(pa.grad.data(), M, K);
                ga.noalias() += gm * bm.transpose();
            }
            if (pb.requires_grad) {
                detail::CMatMap<T> am(pa.value.data(), M, K);
                detail::MatMap<T> gb(pb.grad.data(), K, N);
                gb.noalias() += am.transpose() * gm;
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.shape().size() != 2 || b.shape().size() != 1 || b.shape()[0] != x.shape()[1])
        throw ShapeError("add_row_bias: expected [M,N] + [N]");
    const int M = x.shape()[0], N = x.shape()[1];
    std::vector<T> out(x.data().begin(), x.data().end());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) out[static_cast<size_t>(i) * N + j] += b.data()[j];
    auto n = detail::make_node(x.shape(), std::move(out), {x.handle(), b.handle()}, "add_row_bias");
    if (n->requires_grad) {
        n->backprop = [M, N](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pb = *self.parents[1];
            if (px.requires_grad)
                for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) pb.grad[j] += self.grad[static_cast<size_t>(i) * N + j];
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- softmax family

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.shape().size() != 2) throw ShapeError("softmax_rows: expected rank-2 input");
    const int M = x.shape()[0], N = x.shape()[1];
    std::vector<T> out(x.data().size());
    for (int i = 0; i < M; ++i) {
        const T* row = x.data().data() + static_cast<size_t>(i) * N;
        T* orow = out.data() + static_cast<size_t>(i) * N;
        T mx = *std::max_element(row, row + N);
        double z = 0;
        for (int j = 0; j < N; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += static_cast<double>(orow[j]);
        }
        const T inv = static_cast<T>(1.0 / z);
        for (int j = 0; j < N; ++j) orow[j] *= inv;
    }
    auto n = detail::make_node(x.shape(), std::move(out), {x.handle()}, "softmax_rows");
    if (n->requires_grad) {
        n->backprop = [M, N](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (int i = 0; i < M; ++i) {
                const T* s = self.value.data() + static_cast<size_t>(i) * N;
                const T* g = self.grad.data() + static_cast<size_t>(i) * N;
                T* pg = p.grad.data() + static_cast<size_t>(i) * N;
                T dot = 0;
                for (int j = 0; j < N; ++j) dot += s[j] * g[j];
                for (int j = 0; j < N; ++j) pg[j] += s[j] * (g[j] - dot);
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
    if (x.shape().size() != 2) throw ShapeError("log_softmax_rows: expected rank-2 input");
    const int M = x.shape()[0], N = x.shape()[1];
    std::vector<T> out(x.data().size());
    for (int i = 0; i < M; ++i) {
        const T* row = x.data().data() + static_cast<size_t>(i) * N;
        T* orow = out.data() + static_cast<size_t>(i) * N;
        T mx = *std::max_element(row, row + N);
        double z = 0;
        for (int j = 0; j < N; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        const T lz = static_cast<T>(std::log(z)) + mx;
        for (int j = 0; j < N; ++j) orow[j] = row[j] - lz;
    }
    auto n = detail::make_node(x.shape(), std::move(out), {x.handle()}, "log_softmax_rows");
    if (n->requires_grad) {
        n->backprop = [M, N](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (int i = 0; i < M; ++i) {
                const T* lsm = self.value.data() + static_cast<size_t>(i) * N;
                const T* g = self.grad.data() + static_cast<size_t>(i) * N;
                T* pg = p.grad.data() + static_cast<size_t>(i) * N;
                T gsum = 0;
                for (int j = 0; j < N; ++j) gsum += g[j];
                for (int j = 0; j < N; ++j) pg[j] += g[j] - std::exp(lsm[j]) * gsum;
            }
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- lookups

// out[i,:] = table[idx[i],:]
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& idx) {
    if (table.shape().size() != 2) throw ShapeError("embedding: table must be [V,D]");
    const int V = table.shape()[0], D = table.shape()[1];
    std::vector<T> out(idx.size() * static_cast<size_t>(D));
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= V) throw ValueError("embedding: index out of range");
        std::copy_n(table.data().data() + static_cast<size_t>(idx[i]) * D, D,
                    out.data() + i * static_cast<size_t>(D));
    }
    auto n = detail::make_node(Shape{static_cast<int>(idx.size()), D}, std::move(out),
                               {table.handle()}, "embedding");
    if (n->requires_grad) {
        n->backprop = [idx, D](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < idx.size(); ++i) {
                const T* g = self.grad.data() + i * static_cast<size_t>(D);
                T* pg = p.grad.data() + static_cast<size_t>(idx[i]) * D;
                for (int j = 0; j < D; ++j) pg[j] += g[j];
            }
        };
    }
    return Tensor<T>(std::move(n));
}

// out[i] = x[i, idx[i]]
template <class T>
Tensor<T> take_per_row(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2) throw ShapeError("take_per_row: expected rank-2 input");
    const int M = x.shape()[0], N = x.shape()[1];
    if (static_cast<int>(idx.size()) != M) throw ShapeError("take_per_row: index count mismatch");
    std::vector<T> out(static_cast<size_t>(M));
    for (int i = 0; i < M; ++i) {
        if (idx[i] < 0 || idx[i] >= N) throw ValueError("take_per_row: index out of range");
        out[static_cast<size_t>(i)] = x.data()[static_cast<size_t>(i) * N + idx[i]];
    }
    auto n = detail::make_node(Shape{M}, std::move(out), {x.handle()}, "take_per_row");
    if (n->requires_grad) {
        n->backprop = [idx, N](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (size_t i = 0; i < idx.size(); ++i)
                p.grad[i * static_cast<size_t>(N) + idx[i]] += self.grad[i];
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- conv / spatial

namespace detail {

// kernel-major patch matrix for ONE image: [C*KH*KW, OH*OW].
// Per-image GEMMs keep conv results independent of batch composition.
template <class T>
void im2col_k(const T* xb, int C, int H, int W, int KH, int KW, int stride, int pad,
              int OH, int OW, T* cols, bool replicate = false) {
    const int HWo = OH * OW;
    T* dst = cols;
    for (int c = 0; c < C; ++c) {
        const T* xc = xb + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx, dst += HWo)
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    T* drow = dst + static_cast<size_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        if (!replicate) {
                            std::fill_n(drow, OW, T(0));
                            continue;
                        }
                        iy = std::clamp(iy, 0, H - 1);
                    }
                    const T* srow = xc + static_cast<size_t>(iy) * W;
                    if (stride == 1) {
                        const int d = kx - pad;  // ix = ox + d
                        const int lo = std::max(0, -d);
                        const int hi = std::min(OW, W - d);
                        for (int ox = 0; ox < lo; ++ox) drow[ox] = replicate ? srow[0] : T(0);
                        if (hi > lo)
                            std::memcpy(drow + lo, srow + lo + d,
                                        static_cast<size_t>(hi - lo) * sizeof(T));
                        for (int ox = std::max(hi, lo); ox < OW; ++ox)
                            drow[ox] = replicate ? srow[W - 1] : T(0);
                    } else {
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) drow[ox] = srow[ix];
                            else drow[ox] = replicate ? srow[std::clamp(ix, 0, W - 1)] : T(0);
                        }
                    }
                }
    }
}

// scatter-add of kernel-major patch gradients back onto one image gradient
template <class T>
void col2im_k_add(const T* cols, int C, int H, int W, int KH, int KW, int stride, int pad,
                  int OH, int OW, T* gx, bool replicate = false) {
    const int HWo = OH * OW;
    const T* src = cols;
    for (int c = 0; c < C; ++c) {
        T* xc = gx + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx, src += HWo)
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        if (!replicate) continue;
                        iy = std::clamp(iy, 0, H - 1);
                    }
                    const T* srow = src + static_cast<size_t>(oy) * OW;
                    T* drow = xc + static_cast<size_t>(iy) * W;
                    if (stride == 1 && !replicate) {
                        const int d = kx - pad;
                        const int lo = std::max(0, -d);
                        const int hi = std::min(OW, W - d);
                        for (int ox = lo; ox < hi; ++ox) drow[ox + d] += srow[ox];
                    } else {
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                            else if (replicate) drow[std::clamp(ix, 0, W - 1)] += srow[ox];
                        }
                    }
                }
    }
}

}  // namespace detail

// x: [B,Cin,H,W], w: [Cout,Cin,KH,KW]
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 1, int pad = 1,
                 bool replicate = false) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw ShapeError("conv2d: expected x[B,C,H,W], w[O,C,KH,KW] with matching C");
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int O = ws[0], KH = ws[2], KW = ws[3];
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: kernel larger than padded input");
    const int CKK = C * KH * KW;
    const int HWo = OH * OW;
    const int CHW = C * H * W;

    std::vector<T> out(static_cast<size_t>(B) * O * HWo);
    {
        std::vector<T> cols(static_cast<size_t>(CKK) * HWo);
        detail::CMatMap<T> wm(w.data().data(), O, CKK);
        for (int b = 0; b < B; ++b) {
            detail::im2col_k(x.data().data() + static_cast<size_t>(b) * CHW, C, H, W, KH, KW,
                             stride, pad, OH, OW, cols.data(), replicate);
            detail::CMatMap<T> cm(cols.data(), CKK, HWo);
            detail::MatMap<T> om(out.data() + static_cast<size_t>(b) * O * HWo, O, HWo);
            om.noalias() = wm * cm;
        }
    }

    auto n = detail::make_node(Shape{B, O, OH, OW}, std::move(out), {x.handle(), w.handle()}, "conv2d");
    if (n->requires_grad) {
        n->backprop = [=](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            std::vector<T> cols(static_cast<size_t>(CKK) * HWo);
            std::vector<T> gcols;
            if (px.requires_grad) gcols.resize(static_cast<size_t>(CKK) * HWo);
            detail::CMatMap<T> wm(pw.value.data(), O, CKK);
            for (int b = 0; b < B; ++b) {
                detail::CMatMap<T> gm(self.grad.data() + static_cast<size_t>(b) * O * HWo, O, HWo);
                if (pw.requires_grad) {
                    detail::im2col_k(px.value.data() + static_cast<size_t>(b) * CHW, C, H, W, KH,
                                     KW, stride, pad, OH, OW, cols.data(), replicate);
                    detail::CMatMap<T> cm(cols.data(), CKK, HWo);
                    detail::MatMap<T> gw(pw.grad.data(), O, CKK);
                    gw.noalias() += gm * cm.transpose();
                }
                if (px.requires_grad) {
                    detail::MatMap<T> gc(gcols.data(), CKK, HWo);
                    gc.noalias() = wm.transpose() * gm;
                    detail::col2im_k_add(gcols.data(), C, H, W, KH, KW, stride, pad, OH, OW,
                                         px.grad.data() + static_cast<size_t>(b) * CHW, replicate);
                }
            }
        };
    }
    return Tensor<T>(std::move(n));
}

// x: [B,C,H,W] + b: [C]
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
    const auto& xs = x.shape();
    if (xs.size() != 4 || b.shape().size() != 1 || b.shape()[0] != xs[1])
        throw ShapeError("add_channel_bias: expected x[B,C,H,W] + b[C]");
    const int B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    std::vector<T> out(x.data().begin(), x.data().end());
    for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
            T bv = b.data()[c];
            T* p = out.data() + (static_cast<size_t>(i) * C + c) * HW;
            for (int k = 0; k < HW; ++k) p[k] += bv;
        }
    auto n = detail::make_node(x.shape(), std::move(out), {x.handle(), b.handle()}, "add_channel_bias");
    if (n->requires_grad) {
        n->backprop = [B, C, HW](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pb = *self.parents[1];
            if (px.requires_grad)
                for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (int i = 0; i < B; ++i)
                    for (int c = 0; c < C; ++c) {
                        const T* g = self.grad.data() + (static_cast<size_t>(i) * C + c) * HW;
                        T acc = 0;
                        for (int k = 0; k < HW; ++k) acc += g[k];
                        pb.grad[c] += acc;
                    }
        };
    }
    return Tensor<T>(std::move(n));
}

// x: [B,C,H,W] + e: [B,C]  (per-sample channel shift, used for embeddings)
template <class T>
Tensor<T> add_sample_channel_bias(const Tensor<T>& x, const Tensor<T>& e) {
    const auto& xs = x.shape();
    if (xs.size() != 4 || e.shape().size() != 2 || e.shape()[0] != xs[0] || e.shape()[1] != xs[1])
        throw ShapeError("add_sample_channel_bias: expected x[B,C,H,W] + e[B,C]");
    const int B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    std::vector<T> out(x.data().begin(), x.data().end());
    for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
            T bv = e.data()[static_cast<size_t>(i) * C + c];
            T* p = out.data() + (static_cast<size_t>(i) * C + c) * HW;
            for (int k = 0; k < HW; ++k) p[k] += bv;
        }
    auto n = detail::make_node(x.shape(), std::move(out), {x.handle(), e.handle()}, "add_sample_channel_bias");
    if (n->requires_grad) {
        n->backprop = [B, C, HW](TensorNode<T>& self) {
            auto& px = *self.parents[0];
            auto& pe = *self.parents[1];
            if (px.requires_grad)
                for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
            if (pe.requires_grad)
                for (int i = 0; i < B; ++i)
                    for (int c = 0; c < C; ++c) {
                        const T* g = self.grad.data() + (static_cast<size_t>(i) * C + c) * HW;
                        T acc = 0;
                        for (int k = 0; k < HW; ++k) acc += g[k];
                        pe.grad[static_cast<size_t>(i) * C + c] += acc;
                    }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2)
        throw ShapeError("avg_pool2x2: expected [B,C,H,W] with even H,W");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int OH = H / 2, OW = W / 2;
    std::vector<T> out(static_cast<size_t>(B) * C * OH * OW);
    for (int bc = 0; bc < B * C; ++bc) {
        const T* src = x.data().data() + static_cast<size_t>(bc) * H * W;
        T* dst = out.data() + static_cast<size_t>(bc) * OH * OW;
        for (int y = 0; y < OH; ++y)
            for (int xx = 0; xx < OW; ++xx)
                dst[y * OW + xx] = (src[(2 * y) * W + 2 * xx] + src[(2 * y) * W + 2 * xx + 1] +
                                    src[(2 * y + 1) * W + 2 * xx] + src[(2 * y + 1) * W + 2 * xx + 1]) *
                                   T(0.25);
    }
    auto n = detail::make_node(Shape{B, C, OH, OW}, std::move(out), {x.handle()}, "avg_pool2x2");
    if (n->requires_grad) {
        n->backprop = [B, C, H, W, OH, OW](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (int bc = 0; bc < B * C; ++bc) {
                const T* g = self.grad.data() + static_cast<size_t>(bc) * OH * OW;
                T* pg = p.grad.data() + static_cast<size_t>(bc) * H * W;
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx) {
                        T q = g[y * OW + xx] * T(0.25);
                        pg[(2 * y) * W + 2 * xx] += q;
                        pg[(2 * y) * W + 2 * xx + 1] += q;
                        pg[(2 * y + 1) * W + 2 * xx] += q;
                        pg[(2 * y + 1) * W + 2 * xx + 1] += q;
                    }
            }
        };
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    const auto& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("upsample_nearest2x: expected [B,C,H,W]");
    const int B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int OH = H * 2, OW = W * 2;
    std::vector<T> out(static_cast<size_t>(B) * C * OH * OW);
    for (int bc = 0; bc < B * C; ++bc) {
        const T* src = x.data().data() + static_cast<size_t>(bc) * H * W;
        T* dst = out.data() + static_cast<size_t>(bc) * OH * OW;
        for (int y = 0; y < OH; ++y)
            for (int xx = 0; xx < OW; ++xx) dst[y * OW + xx] = src[(y / 2) * W + (xx / 2)];
    }
    auto n = detail::make_node(Shape{B, C, OH, OW}, std::move(out), {x.handle()}, "upsample_nearest2x");
    if (n->requires_grad) {
        n->backprop = [B, C, H, W, OH, OW](TensorNode<T>& self) {
            auto& p = *self.parents[0];
            for (int bc = 0; bc < B * C; ++bc) {
                const T* g = self.grad.data() + static_cast<size_t>(bc) * OH * OW;
                T* pg = p.grad.data() + static_cast<size_t>(bc) * H * W;
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx) pg[(y / 2) * W + (xx / 2)] += g[y * OW + xx];
            }
        };
    }
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------- backward

// Computes d(loss)/d(node) for every node reachable from loss. Gradients from
// any previous backward pass over the same leaves are cleared first.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss.requires_grad())
        throw ValueError("backward: loss does not depend on any trainable tensor");

    // iterative post-order topo sort (graphs can be deep: T-step samplers)
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(loss.handle().get(), 0);
    seen.insert(loss.handle().get());
    while (!stack.empty()) {
        auto& [node, i] = stack.back();
        if (i < node->parents.size()) {
            TensorNode<T>* p = node->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : order) n->ensure_grad();
    loss.handle()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);

    for (auto* n : order) check_finite(n->grad, "backward");
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace sda
