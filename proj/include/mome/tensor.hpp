#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mome/common.hpp"
#include "mome/rng.hpp"

namespace mome {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty = absent
    bool requires_grad = false;
};

// Order-invariant sum: sorting makes the fold canonical for any input order,
// Neumaier compensation keeps it accurate. Used where permutation
// equivariance must hold bit-for-bit (softmax denominators, token-axis
// contractions in attention and soft-MoE dispatch).
inline double canonical_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0, c = 0.0;
    for (double x : terms) {
        double t = s + x;
        if (std::abs(s) >= std::abs(x))
            c += (s - t) + x;
        else
            c += (x - t) + s;
        s = t;
    }
    return s + c;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) {
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        impl->data.assign(shape_numel(impl->shape), fill);
        impl_ = std::move(impl);
    }
    Tensor(Shape shape, std::vector<double> values) {
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(shape);
        if (shape_numel(impl->shape) != values.size())
            throw ConfigError("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(impl->shape));
        impl->data = std::move(values);
        impl_ = std::move(impl);
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t(std::move(shape));
        for (double& v : t.impl_->data) v = rng.normal(mean, stddev);
        return t;
    }
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& v : t.impl_->data) v = rng.uniform(lo, hi);
        return t;
    }

    bool valid() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    const std::vector<double>& values() const { return impl_->data; }
    std::vector<double>& mutable_values() const { return impl_->data; }
    const double* ptr() const { return impl_->data.data(); }
    double* mutable_ptr() const { return impl_->data.data(); }

    double item() const {
        if (numel() != 1) throw ConfigError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<double>& grad_ref() const {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>& grad() const { return impl_->grad; }
    void ensure_grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }
    void drop_grad() const { impl_->grad.clear(); }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }
    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

inline void debug_check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
    for (double v : t.values())
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
#else
    (void)t;
    (void)op;
#endif
}

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

// Records primitive applications in execution order; execution order is a
// topological order by construction, so backward is a single reverse sweep.
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape*& active_slot() {
        thread_local GradTape* active = nullptr;
        return active;
    }
    static GradTape* active() { return active_slot(); }

    void record(const Tensor& out, std::function<void()> pull, const std::vector<Tensor>& inputs) {
        entries_.push_back({out, std::move(pull)});
        outputs_.insert(out.impl());
        touched_.push_back(out);
        for (const Tensor& t : inputs)
            if (t.valid()) touched_.push_back(t);
    }

    std::size_t size() const { return entries_.size(); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ConfigError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (!outputs_.count(loss.impl())) throw ConfigError("backward: loss tensor is not on this tape");
        loss.grad_ref()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            if (it->out.has_grad()) it->pull();
    }

    // Resets all grads touched by this tape to absent and forgets the entries.
    void clear() {
        for (Tensor& t : touched_) t.drop_grad();
        entries_.clear();
        outputs_.clear();
        touched_.clear();
    }

private:
    struct Entry {
        Tensor out;
        std::function<void()> pull;
    };
    std::vector<Entry> entries_;
    std::unordered_set<detail::TensorImpl*> outputs_;
    std::vector<Tensor> touched_;
};

class TapeScope {
public:
    explicit TapeScope(GradTape& tape) : prev_(GradTape::active_slot()) { GradTape::active_slot() = &tape; }
    ~TapeScope() { GradTape::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;

private:
    GradTape* prev_;
};

class NoGradScope {
public:
    NoGradScope() : prev_(GradTape::active_slot()) { GradTape::active_slot() = nullptr; }
    ~NoGradScope() { GradTape::active_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;

private:
    GradTape* prev_;
};

namespace detail {

inline bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!GradTape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->valid() && t->requires_grad()) return true;
    return false;
}

inline void mark_recorded(Tensor& out, std::function<void()> pull, const std::vector<Tensor>& inputs) {
    out.set_requires_grad(true);
    GradTape::active()->record(out, std::move(pull), inputs);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape primitives
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::wants_grad({&a, &b})) {
        detail::mark_recorded(
            out,
            [a, b, out] {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad_ref();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_ref();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            },
            {a, b});
    }
    debug_check_finite(out, "add");
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::wants_grad({&a, &b})) {
        detail::mark_recorded(
            out,
            [a, b, out] {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad_ref();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_ref();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                }
            },
            {a, b});
    }
    debug_check_finite(out, "sub");
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::wants_grad({&a, &b})) {
        detail::mark_recorded(
            out,
            [a, b, out] {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad_ref();
                    const double* pb2 = b.ptr();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_ref();
                    const double* pa2 = a.ptr();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
                }
            },
            {a, b});
    }
    debug_check_finite(out, "mul");
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] * c;
    if (detail::wants_grad({&a})) {
        detail::mark_recorded(
            out,
            [a, out, c] {
                const auto& g = out.grad();
                auto& ga = a.grad_ref();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            },
            {a});
    }
    debug_check_finite(out, "scale");
    return out;
}

// x[..., d] + v[d], broadcasting v over all leading axes.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.rank() < 1 || v.rank() != 1 || x.dim(x.rank() - 1) != v.dim(0))
        throw ConfigError("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const std::size_t d = v.dim(0);
    const std::size_t rows = x.numel() / d;
    Tensor out(x.shape());
    const double* px = x.ptr();
    const double* pv = v.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pv[j];
    if (detail::wants_grad({&x, &v})) {
        detail::mark_recorded(
            out,
            [x, v, out, rows, d] {
                const auto& g = out.grad();
                if (x.requires_grad()) {
                    auto& gx = x.grad_ref();
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (v.requires_grad()) {
                    auto& gv = v.grad_ref();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
                }
            },
            {x, v});
    }
    debug_check_finite(out, "add_rowvec");
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ConfigError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor out(std::move(shape), x.values());
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out] {
                const auto& g = out.grad();
                auto& gx = x.grad_ref();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            },
            {x});
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out] {
                const double g = out.grad()[0];
                auto& gx = x.grad_ref();
                for (double& v : gx) v += g;
            },
            {x});
    }
    debug_check_finite(out, "sum");
    return out;
}

// ---------------------------------------------------------------------------
// Matrix primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void matmul_accumulate(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                              std::size_t n) {
    // out[m x n] += a[m x k] * b[k x n]; i-k-j order keeps b rows contiguous.
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x n] += a[k x m]^T * b[k x n]
inline void matmul_at_b_accumulate(const double* a, const double* b, double* out, std::size_t k, std::size_t m,
                                   std::size_t n) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x k] += a[m x n] * b[k x n]^T
inline void matmul_a_bt_accumulate(const double* a, const double* b, double* out, std::size_t m, std::size_t n,
                                   std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* orow = out + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            orow[kk] += acc;
        }
    }
}

inline void check_matmul_shapes(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ConfigError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

inline void record_matmul_backward(const Tensor& a, const Tensor& b, Tensor& out, std::size_t m, std::size_t k,
                                   std::size_t n) {
    detail::mark_recorded(
        out,
        [a, b, out, m, k, n] {
            const double* g = out.grad().data();
            if (a.requires_grad()) matmul_a_bt_accumulate(g, b.ptr(), a.grad_ref().data(), m, n, k);
            if (b.requires_grad()) matmul_at_b_accumulate(a.ptr(), g, b.grad_ref().data(), m, k, n);
        },
        {a, b});
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_matmul_shapes(a, b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    detail::matmul_accumulate(a.ptr(), b.ptr(), out.mutable_ptr(), m, k, n);
    if (detail::wants_grad({&a, &b})) detail::record_matmul_backward(a, b, out, m, k, n);
    debug_check_finite(out, "matmul");
    return out;
}

// Matmul whose contraction is order-invariant: the result is unchanged (bit
// for bit) under any permutation of the summed axis. Used for contractions
// over the token axis.
inline Tensor matmul_canonical(const Tensor& a, const Tensor& b) {
    detail::check_matmul_shapes(a, b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.mutable_ptr();
    std::vector<double> terms(k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t kk = 0; kk < k; ++kk) terms[kk] = pa[i * k + kk] * pb[kk * n + j];
            po[i * n + j] = detail::canonical_sum(terms);
        }
    if (detail::wants_grad({&a, &b})) detail::record_matmul_backward(a, b, out, m, k, n);
    debug_check_finite(out, "matmul_canonical");
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ConfigError("transpose expects a matrix, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out(Shape{n, m});
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, m, n] {
                const auto& g = out.grad();
                auto& gx = x.grad_ref();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
            },
            {x});
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t offset, std::size_t len) {
    if (x.rank() != 2 || offset + len > x.dim(0))
        throw ConfigError("slice_rows: rows [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                          ") out of range for " + shape_str(x.shape()));
    const std::size_t d = x.dim(1);
    Tensor out(Shape{len, d});
    std::memcpy(out.mutable_ptr(), x.ptr() + offset * d, len * d * sizeof(double));
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, offset, len, d] {
                const auto& g = out.grad();
                auto& gx = x.grad_ref();
                for (std::size_t i = 0; i < len * d; ++i) gx[offset * d + i] += g[i];
            },
            {x});
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: empty input");
    const std::size_t d = parts[0].dim(1);
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d) throw ConfigError("concat_rows: column mismatch " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    Tensor out(Shape{rows, d});
    double* po = out.mutable_ptr();
    std::size_t at = 0;
    for (const Tensor& p : parts) {
        std::memcpy(po + at * d, p.ptr(), p.numel() * sizeof(double));
        at += p.dim(0);
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (GradTape::active() && any) {
        out.set_requires_grad(true);
        auto held = parts;
        GradTape::active()->record(
            out,
            [held, out, d] {
                const auto& g = out.grad();
                std::size_t at2 = 0;
                for (const Tensor& p : held) {
                    if (p.requires_grad()) {
                        auto& gp = p.grad_ref();
                        for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[at2 * d + i];
                    }
                    at2 += p.dim(0);
                }
            },
            parts);
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t offset, std::size_t len) {
    if (x.rank() != 2 || offset + len > x.dim(1))
        throw ConfigError("slice_cols: cols out of range for " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), d = x.dim(1);
    Tensor out(Shape{m, len});
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0; i < m; ++i)
        std::memcpy(po + i * len, px + i * d + offset, len * sizeof(double));
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, offset, len, m, d] {
                const auto& g = out.grad();
                auto& gx = x.grad_ref();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < len; ++j) gx[i * d + offset + j] += g[i * len + j];
            },
            {x});
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: empty input");
    const std::size_t m = parts[0].dim(0);
    std::size_t d = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) throw ConfigError("concat_cols: row mismatch " + shape_str(p.shape()));
        d += p.dim(1);
    }
    Tensor out(Shape{m, d});
    double* po = out.mutable_ptr();
    std::size_t at = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(po + i * d + at, p.ptr() + i * w, w * sizeof(double));
        at += w;
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (GradTape::active() && any) {
        out.set_requires_grad(true);
        auto held = parts;
        GradTape::active()->record(
            out,
            [held, out, m, d] {
                const auto& g = out.grad();
                std::size_t at2 = 0;
                for (const Tensor& p : held) {
                    const std::size_t w = p.dim(1);
                    if (p.requires_grad()) {
                        auto& gp = p.grad_ref();
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * d + at2 + j];
                    }
                    at2 += w;
                }
            },
            parts);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ConfigError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const std::size_t len = x.dim(axis);
    if (len == 0) throw ConfigError("softmax: empty axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor out(x.shape());
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    std::vector<double> terms(len);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = px[base];
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, px[base + i * inner]);
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(px[base + i * inner] - mx);
                po[base + i * inner] = e;
                terms[i] = e;
            }
            const double denom = detail::canonical_sum(terms);
            for (std::size_t i = 0; i < len; ++i) po[base + i * inner] /= denom;
        }
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, outer, len, inner] {
                const auto& g = out.grad();
                const double* y = out.ptr();
                auto& gx = x.grad_ref();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t base = o * len * inner + in;
                        double dot = 0.0;
                        for (std::size_t i = 0; i < len; ++i) dot += y[base + i * inner] * g[base + i * inner];
                        for (std::size_t i = 0; i < len; ++i)
                            gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                    }
            },
            {x});
    }
    debug_check_finite(out, "softmax");
    return out;
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// gamma/beta affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ConfigError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                          " do not match feature width " + std::to_string(d));
    const std::size_t rows = x.numel() / d;
    Tensor out(x.shape());
    std::vector<double> inv_std(rows), mean(rows);
    const double* px = x.ptr();
    const double* pg = gamma.ptr();
    const double* pb = beta.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        double* orow = po + r * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] = (row[j] - mu) * is * pg[j] + pb[j];
    }
    if (detail::wants_grad({&x, &gamma, &beta})) {
        detail::mark_recorded(
            out,
            [x, gamma, beta, out, rows, d, mean, inv_std] {
                const auto& g = out.grad();
                const double* px2 = x.ptr();
                const double* pg2 = gamma.ptr();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* grow = g.data() + r * d;
                    const double* row = px2 + r * d;
                    const double is = inv_std[r];
                    const double mu = mean[r];
                    if (gamma.requires_grad()) {
                        auto& gg = gamma.grad_ref();
                        for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * (row[j] - mu) * is;
                    }
                    if (beta.requires_grad()) {
                        auto& gb = beta.grad_ref();
                        for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
                    }
                    if (x.requires_grad()) {
                        auto& gx = x.grad_ref();
                        double sum_h = 0.0, sum_hx = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double h = grow[j] * pg2[j];
                            sum_h += h;
                            sum_hx += h * (row[j] - mu) * is;
                        }
                        const double mh = sum_h / static_cast<double>(d);
                        const double mhx = sum_hx / static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double h = grow[j] * pg2[j];
                            const double xhat = (row[j] - mu) * is;
                            gx[r * d + j] += (h - mh - xhat * mhx) * is;
                        }
                    }
                }
            },
            {x, gamma, beta});
    }
    debug_check_finite(out, "layer_norm");
    return out;
}

// Per-channel zero mean / unit variance over all leading (spatial) axes;
// channels are the last axis. No affine.
inline Tensor instance_norm(const Tensor& x, double eps = 1e-5) {
    if (x.rank() < 2) throw ConfigError("instance_norm expects rank >= 2, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(x.rank() - 1);
    const std::size_t n = x.numel() / c;
    if (n == 0) throw ConfigError("instance_norm: no spatial elements");
    Tensor out(x.shape());
    std::vector<double> mean(c, 0.0), inv_std(c);
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += px[i * c + ch];
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(n);
    std::vector<double> var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = px[i * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] / static_cast<double>(n) + eps);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) po[i * c + ch] = (px[i * c + ch] - mean[ch]) * inv_std[ch];
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, n, c, mean, inv_std] {
                const auto& g = out.grad();
                const double* px2 = x.ptr();
                auto& gx = x.grad_ref();
                std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double xhat = (px2[i * c + ch] - mean[ch]) * inv_std[ch];
                        sum_g[ch] += g[i * c + ch];
                        sum_gx[ch] += g[i * c + ch] * xhat;
                    }
                for (std::size_t ch = 0; ch < c; ++ch) {
                    sum_g[ch] /= static_cast<double>(n);
                    sum_gx[ch] /= static_cast<double>(n);
                }
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double xhat = (px2[i * c + ch] - mean[ch]) * inv_std[ch];
                        gx[i * c + ch] += (g[i * c + ch] - sum_g[ch] - xhat * sum_gx[ch]) * inv_std[ch];
                    }
            },
            {x});
    }
    debug_check_finite(out, "instance_norm");
    return out;
}

enum class Activation { Relu, Gelu };

namespace detail {
inline double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }
inline double gelu_bwd(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return cdf + x * pdf;
}
}  // namespace detail

inline Tensor activation(const Tensor& x, Activation kind) {
    Tensor out(x.shape());
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    const std::size_t n = x.numel();
    if (kind == Activation::Relu)
        for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    else
        for (std::size_t i = 0; i < n; ++i) po[i] = detail::gelu_fwd(px[i]);
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, kind, n] {
                const auto& g = out.grad();
                const double* px2 = x.ptr();
                auto& gx = x.grad_ref();
                if (kind == Activation::Relu)
                    for (std::size_t i = 0; i < n; ++i) gx[i] += px2[i] > 0.0 ? g[i] : 0.0;
                else
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * detail::gelu_bwd(px2[i]);
            },
            {x});
    }
    debug_check_finite(out, "activation");
    return out;
}

inline Tensor relu(const Tensor& x) { return activation(x, Activation::Relu); }
inline Tensor gelu(const Tensor& x) { return activation(x, Activation::Gelu); }

// ---------------------------------------------------------------------------
// Volumetric primitives
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
    std::size_t in[3], out[3], k[3];
    std::ptrdiff_t pad[3];
    std::size_t stride;
};

// "same-ceil" zero padding: output dims = ceil(input / stride).
inline ConvGeom conv_geometry(const Shape& xs, std::size_t kd, std::size_t kh, std::size_t kw, std::size_t stride) {
    ConvGeom g{};
    g.stride = stride;
    g.k[0] = kd;
    g.k[1] = kh;
    g.k[2] = kw;
    for (int a = 0; a < 3; ++a) {
        g.in[a] = xs[a];
        g.out[a] = (g.in[a] + stride - 1) / stride;
        const std::ptrdiff_t total =
            std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>((g.out[a] - 1) * stride + g.k[a]) -
                                            static_cast<std::ptrdiff_t>(g.in[a]));
        g.pad[a] = total / 2;
    }
    return g;
}

}  // namespace detail

// x: [D,H,W,Cin], kernel: [kD,kH,kW,Cin,Cout], bias: [Cout] or invalid for none.
inline Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
    if (x.rank() != 4 || kernel.rank() != 5)
        throw ConfigError("conv3d: expected volume [DxHxWxC] and kernel [kDxkHxkWxCixCo], got " +
                          shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    if (x.dim(3) != kernel.dim(3))
        throw ConfigError("conv3d: input channels " + std::to_string(x.dim(3)) + " do not match kernel channels " +
                          std::to_string(kernel.dim(3)));
    const std::size_t ci = x.dim(3), co = kernel.dim(4);
    if (bias.valid() && bias.numel() != co)
        throw ConfigError("conv3d: bias " + shape_str(bias.shape()) + " does not match output channels " +
                          std::to_string(co));
    if (stride < 1) throw ConfigError("conv3d: stride must be positive");
    const auto g = detail::conv_geometry(x.shape(), kernel.dim(0), kernel.dim(1), kernel.dim(2), stride);

    Tensor out(Shape{g.out[0], g.out[1], g.out[2], co});
    const double* px = x.ptr();
    const double* pk = kernel.ptr();
    const double* pb = bias.valid() ? bias.ptr() : nullptr;
    double* po = out.mutable_ptr();
    const std::size_t xsh = x.dim(1) * x.dim(2) * ci, xsw = x.dim(2) * ci;

    for (std::size_t oz = 0; oz < g.out[0]; ++oz)
        for (std::size_t oy = 0; oy < g.out[1]; ++oy)
            for (std::size_t ox = 0; ox < g.out[2]; ++ox) {
                double* acc = po + ((oz * g.out[1] + oy) * g.out[2] + ox) * co;
                if (pb)
                    for (std::size_t c = 0; c < co; ++c) acc[c] = pb[c];
                for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
                    const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride + kz) - g.pad[0];
                    if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                    for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad[1];
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
                        for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad[2];
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in[2])) continue;
                            const double* xv = px + iz * xsh + iy * xsw + ix * ci;
                            const double* kv = pk + (((kz * g.k[1] + ky) * g.k[2] + kx) * ci) * co;
                            for (std::size_t c = 0; c < ci; ++c) {
                                const double v = xv[c];
                                if (v == 0.0) continue;
                                const double* krow = kv + c * co;
                                for (std::size_t c2 = 0; c2 < co; ++c2) acc[c2] += v * krow[c2];
                            }
                        }
                    }
                }
            }

    if (detail::wants_grad({&x, &kernel, &bias})) {
        detail::mark_recorded(
            out,
            [x, kernel, bias, out, g, ci, co, xsh, xsw, stride] {
                const double* gout = out.grad().data();
                const double* px2 = x.ptr();
                const double* pk2 = kernel.ptr();
                double* gx = x.requires_grad() ? x.grad_ref().data() : nullptr;
                double* gk = kernel.requires_grad() ? kernel.grad_ref().data() : nullptr;
                double* gb = (bias.valid() && bias.requires_grad()) ? bias.grad_ref().data() : nullptr;
                for (std::size_t oz = 0; oz < g.out[0]; ++oz)
                    for (std::size_t oy = 0; oy < g.out[1]; ++oy)
                        for (std::size_t ox = 0; ox < g.out[2]; ++ox) {
                            const double* gacc = gout + ((oz * g.out[1] + oy) * g.out[2] + ox) * co;
                            if (gb)
                                for (std::size_t c = 0; c < co; ++c) gb[c] += gacc[c];
                            for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
                                const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride + kz) - g.pad[0];
                                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                                for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
                                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad[1];
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
                                    for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad[2];
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in[2])) continue;
                                        const std::size_t xoff = iz * xsh + iy * xsw + ix * ci;
                                        const std::size_t koff = ((kz * g.k[1] + ky) * g.k[2] + kx) * ci * co;
                                        for (std::size_t c = 0; c < ci; ++c) {
                                            const double xv = px2[xoff + c];
                                            const double* krow = pk2 + koff + c * co;
                                            double gxa = 0.0;
                                            for (std::size_t c2 = 0; c2 < co; ++c2) {
                                                const double go = gacc[c2];
                                                if (gk) gk[koff + c * co + c2] += xv * go;
                                                gxa += krow[c2] * go;
                                            }
                                            if (gx) gx[xoff + c] += gxa;
                                        }
                                    }
                                }
                            }
                        }
            },
            {x, kernel, bias.valid() ? bias : x});
    }
    debug_check_finite(out, "conv3d");
    return out;
}

// x: [D,H,W,C]. Ties route the gradient to the first covered element in scan
// order; padded cells never win.
inline Tensor maxpool3d(const Tensor& x, std::size_t window, std::size_t stride) {
    if (x.rank() != 4) throw ConfigError("maxpool3d expects [DxHxWxC], got " + shape_str(x.shape()));
    if (window < 1 || stride < 1) throw ConfigError("maxpool3d: window and stride must be positive");
    const std::size_t c = x.dim(3);
    const auto g = detail::conv_geometry(x.shape(), window, window, window, stride);
    Tensor out(Shape{g.out[0], g.out[1], g.out[2], c});
    std::vector<std::size_t> argmax(out.numel());
    const double* px = x.ptr();
    double* po = out.mutable_ptr();
    const std::size_t xsh = x.dim(1) * x.dim(2) * c, xsw = x.dim(2) * c;
    for (std::size_t oz = 0; oz < g.out[0]; ++oz)
        for (std::size_t oy = 0; oy < g.out[1]; ++oy)
            for (std::size_t ox = 0; ox < g.out[2]; ++ox)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double best = 0.0;
                    std::size_t best_idx = 0;
                    bool found = false;
                    for (std::size_t kz = 0; kz < window; ++kz) {
                        const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz * stride + kz) - g.pad[0];
                        if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
                        for (std::size_t ky = 0; ky < window; ++ky) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - g.pad[1];
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
                            for (std::size_t kx = 0; kx < window; ++kx) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - g.pad[2];
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in[2])) continue;
                                const std::size_t idx = iz * xsh + iy * xsw + ix * c + ch;
                                if (!found || px[idx] > best) {
                                    best = px[idx];
                                    best_idx = idx;
                                    found = true;
                                }
                            }
                        }
                    }
                    const std::size_t oidx = ((oz * g.out[1] + oy) * g.out[2] + ox) * c + ch;
                    po[oidx] = found ? best : 0.0;
                    argmax[oidx] = found ? best_idx : static_cast<std::size_t>(-1);
                }
    if (detail::wants_grad({&x})) {
        detail::mark_recorded(
            out,
            [x, out, argmax] {
                const auto& g2 = out.grad();
                auto& gx = x.grad_ref();
                for (std::size_t i = 0; i < g2.size(); ++i)
                    if (argmax[i] != static_cast<std::size_t>(-1)) gx[argmax[i]] += g2[i];
            },
            {x});
    }
    debug_check_finite(out, "maxpool3d");
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Pre-norm blocks call this on already-normalized input. Scaling is
// 1/sqrt(d/heads) per head; rows of each head's attention matrix sum to 1.
inline Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& p, std::size_t heads) {
    if (x.rank() != 2) throw ConfigError("attention expects [m x d], got " + shape_str(x.shape()));
    const std::size_t d = x.dim(1);
    if (heads == 0 || d % heads != 0)
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                          " heads");
    const std::size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = add_rowvec(matmul(x, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(x, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(x, p.wv), p.bv);
    std::vector<Tensor> heads_out;
    heads_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor attn = softmax(scores, 1);
        heads_out.push_back(matmul_canonical(attn, vh));
    }
    Tensor merged = heads == 1 ? heads_out[0] : concat_cols(heads_out);
    return add_rowvec(matmul(merged, p.wo), p.bo);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / (|analytic| +
// |central| + 1e-12). f must map a tensor to a scalar tensor using taped ops.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h >= 1e-6 && h <= 1e-3)) throw ConfigError("grad_check: step must lie in [1e-6, 1e-3]");
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    std::vector<double> analytic(probe.numel(), 0.0);
    {
        GradTape tape;
        TapeScope scope(tape);
        Tensor loss = f(probe);
        tape.backward(loss);
        if (probe.has_grad()) analytic = probe.grad();
        tape.clear();  // leave no residual grads on tensors f closed over
    }
    double worst = 0.0;
    NoGradScope off;
    auto& data = probe.mutable_values();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double fp = f(probe).item();
        data[i] = saved - h;
        const double fm = f(probe).item();
        data[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace mome
