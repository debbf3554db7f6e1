#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <utility>

#include "lvit/common.hpp"

namespace lvit {

namespace detail {

// C(M,N) (+)= A(M,K) * B(K,N), all row-major.
template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        Real* ci = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::fill(ci, ci + n, Real(0));
        const Real* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const Real aip = ai[p];
            const Real* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C(M,N) (+)= A(M,K) * B(N,K)^T
template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        const Real* ai = a + static_cast<size_t>(i) * k;
        Real* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const Real* bj = b + static_cast<size_t>(j) * k;
            Real acc = 0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// C(M,N) (+)= A(K,M)^T * B(K,N)
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        Real* ci = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::fill(ci, ci + n, Real(0));
        for (int p = 0; p < k; ++p) {
            const Real api = a[static_cast<size_t>(p) * m + i];
            const Real* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

}  // namespace detail

template <typename Real>
struct TensorData {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // empty until backward touches it
    bool requires_grad = false;
};

template <typename Real>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false)
        : d_(std::make_shared<TensorData<Real>>()) {
        d_->shape = std::move(shape);
        d_->values.assign(static_cast<size_t>(lvit::numel(d_->shape)), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (lvit::numel(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                        " values do not fill shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<TensorData<Real>>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(Real v) { return from({}, {v}); }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(d_->values.size()); }

    Real* data() { return d_->values.data(); }
    const Real* data() const { return d_->values.data(); }
    std::vector<Real>& values() { return d_->values; }
    const std::vector<Real>& values() const { return d_->values; }

    Real item() const {
        if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }

    // Gradient buffer sized like the values, zero-filled on first access.
    std::vector<Real>& grad_buffer() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), Real(0));
        return d_->grad;
    }

    // Gradient as a tensor (zeros when backward never reached this tensor).
    Tensor grad() const {
        Tensor g(d_->shape);
        if (!d_->grad.empty()) g.d_->values = d_->grad;
        return g;
    }

    void zero_grad() { d_->grad.clear(); }

    std::shared_ptr<TensorData<Real>> node() const { return d_; }

private:
    std::shared_ptr<TensorData<Real>> d_;
};

// Define-by-run tape. Constructing a Tape makes it the active recorder; ops
// executed while it is alive append nodes in execution order, which is a
// topological order of the data flow. backward() replays the list once, in
// reverse.
template <typename Real>
class Tape {
public:
    Tape() { stack().push_back(this); }
    ~Tape() {
        auto& s = stack();
        s.erase(std::find(s.begin(), s.end(), this));
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return stack().empty() ? nullptr : stack().back(); }

    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
        ++next_id_;
    }

    size_t size() const { return nodes_.size(); }

    void backward(Tensor<Real> loss) {
        if (loss.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (consumed_) throw std::runtime_error("backward: tape already consumed");
        consumed_ = true;
        loss.grad_buffer()[0] = Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    static std::vector<Tape*>& stack() {
        thread_local std::vector<Tape*> s;
        return s;
    }

    std::vector<std::function<void()>> nodes_;
    size_t next_id_ = 0;
    bool consumed_ = false;
};

// Tracks how close a forward pass comes to a non-smooth decision boundary
// (ReLU sign, pooling argmax, clamp edge), as a distance relative to the
// tensor's magnitude. Gradient checks are only meaningful at points that are
// differentiable with margin; the check harness uses this to reject
// degenerate draws. Exact ties (bit-equal values) resolve deterministically
// in every precision and do not count.
struct KinkMargin {
    double value = std::numeric_limits<double>::infinity();

    void feed(double distance, double scale) {
        if (distance > 0.0 && scale > 0.0) value = std::min(value, distance / scale);
    }

    static KinkMargin*& active() {
        thread_local KinkMargin* p = nullptr;
        return p;
    }
};

namespace detail {

template <typename Real>
bool recording(std::initializer_list<const Tensor<Real>*> inputs) {
    if (!Tape<Real>::active()) return false;
    for (const auto* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Strides of a shape as if row-major contiguous.
inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> s(shape.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return s;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const int da = i < ra ? a[ra - 1 - i] : 1;
        const int db = i < rb ? b[rb - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                                        shape_str(b));
        out[r - 1 - i] = std::max(da, db);
    }
    return out;
}

// Strides for reading `shape` as broadcast to `out` (0 on broadcast dims),
// aligned at the trailing end.
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    auto natural = row_major_strides(shape);
    std::vector<std::int64_t> s(out.size(), 0);
    const size_t off = out.size() - shape.size();
    for (size_t i = 0; i < shape.size(); ++i)
        s[off + i] = shape[i] == 1 ? 0 : natural[i];
    return s;
}

// Odometer walk over `out_shape`; f(flat_out, offset_a, offset_b).
template <class F>
void broadcast_walk(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
    const std::int64_t n = lvit::numel(out_shape);
    const int r = static_cast<int>(out_shape.size());
    if (r == 0) {
        if (n > 0) f(0, 0, 0);
        return;
    }
    std::vector<int> coord(static_cast<size_t>(r), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (int d = r - 1; d >= 0; --d) {
            ++coord[static_cast<size_t>(d)];
            ia += sa[static_cast<size_t>(d)];
            ib += sb[static_cast<size_t>(d)];
            if (coord[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
            coord[static_cast<size_t>(d)] = 0;
            ia -= sa[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
            ib -= sb[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
        }
    }
}

// Sum `full` (shaped like out_shape) into `reduced` (the pre-broadcast shape).
template <typename Real>
void reduce_to_shape(const std::vector<Real>& full, const Shape& out_shape, std::vector<Real>& reduced,
                     const Shape& shape) {
    if (shape == out_shape) {
        for (size_t i = 0; i < full.size(); ++i) reduced[i] += full[i];
        return;
    }
    const auto st = broadcast_strides(shape, out_shape);
    broadcast_walk(out_shape, st, st,
                   [&](std::int64_t i, std::int64_t it, std::int64_t) { reduced[static_cast<size_t>(it)] += full[static_cast<size_t>(i)]; });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-dimension broadcasting
// ---------------------------------------------------------------------------

enum class BinOp { Add, Sub, Mul, Div };

template <typename Real>
Tensor<Real> ew_binary(const Tensor<Real>& a, const Tensor<Real>& b, BinOp op) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<Real> out(out_shape);

    if (op == BinOp::Div) {
        for (const Real v : b.values())
            if (v == Real(0)) throw std::runtime_error("division by exact zero denominator");
    }

    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.data();
    auto apply = [op](Real x, Real y) -> Real {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            default: return x / y;
        }
    };

    if (a.shape() == b.shape()) {
        const std::int64_t n = out.size();
        switch (op) {
            case BinOp::Add:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
                break;
            case BinOp::Sub:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                break;
            case BinOp::Mul:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
                break;
            case BinOp::Div:
                for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
                break;
        }
    } else {
        const auto sa = detail::broadcast_strides(a.shape(), out_shape);
        const auto sb = detail::broadcast_strides(b.shape(), out_shape);
        detail::broadcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
            po[i] = apply(pa[ia], pb[ib]);
        });
    }

    if (detail::recording<Real>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<Real> ac = a, bc = b, oc = out;
        Tape<Real>::active()->record([ac, bc, oc, op]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            const Shape& osh = oc.shape();
            auto backprop = [&](Tensor<Real>& t, bool is_lhs) {
                if (!t.requires_grad()) return;
                std::vector<Real> full(g.size());
                const auto sa2 = detail::broadcast_strides(ac.shape(), osh);
                const auto sb2 = detail::broadcast_strides(bc.shape(), osh);
                const Real* va = ac.data();
                const Real* vb = bc.data();
                detail::broadcast_walk(osh, sa2, sb2, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                    const Real gi = g[static_cast<size_t>(i)];
                    switch (op) {
                        case BinOp::Add: full[static_cast<size_t>(i)] = gi; break;
                        case BinOp::Sub: full[static_cast<size_t>(i)] = is_lhs ? gi : -gi; break;
                        case BinOp::Mul: full[static_cast<size_t>(i)] = gi * (is_lhs ? vb[ib] : va[ia]); break;
                        case BinOp::Div:
                            full[static_cast<size_t>(i)] =
                                is_lhs ? gi / vb[ib] : -gi * va[ia] / (vb[ib] * vb[ib]);
                            break;
                    }
                });
                detail::reduce_to_shape(full, osh, t.grad_buffer(), t.shape());
            };
            backprop(ac, true);
            backprop(bc, false);
        });
    }
    return out;
}

template <typename Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) { return ew_binary(a, b, BinOp::Add); }
template <typename Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) { return ew_binary(a, b, BinOp::Sub); }
template <typename Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) { return ew_binary(a, b, BinOp::Mul); }
template <typename Real> Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) { return ew_binary(a, b, BinOp::Div); }

// out = alpha * x + beta, recorded as one node.
template <typename Real>
Tensor<Real> affine(const Tensor<Real>& x, Real alpha, Real beta) {
    Tensor<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = alpha * px[i] + beta;
    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, alpha]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
        });
    }
    return out;
}

template <typename Real> Tensor<Real> add_scalar(const Tensor<Real>& x, Real s) { return affine(x, Real(1), s); }
template <typename Real> Tensor<Real> mul_scalar(const Tensor<Real>& x, Real s) { return affine(x, s, Real(0)); }
template <typename Real> Tensor<Real> neg(const Tensor<Real>& x) { return affine(x, Real(-1), Real(0)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

enum class UnaryOp { Relu, Sigmoid, Exp, Log, Sqrt, Gelu };

template <typename Real>
Tensor<Real> ew_unary(const Tensor<Real>& x, UnaryOp op) {
    // exp saturates rather than overflowing to inf.
    const Real exp_cap = std::is_same_v<Real, float> ? Real(80) : Real(700);
    Tensor<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const Real v = px[i];
        switch (op) {
            case UnaryOp::Relu: po[i] = v > Real(0) ? v : Real(0); break;
            case UnaryOp::Sigmoid:
                if (v >= Real(0)) {
                    po[i] = Real(1) / (Real(1) + std::exp(-v));
                } else {
                    const Real e = std::exp(v);
                    po[i] = e / (Real(1) + e);
                }
                break;
            case UnaryOp::Exp: po[i] = std::exp(std::min(v, exp_cap)); break;
            case UnaryOp::Log:
                if (v <= Real(0)) throw std::invalid_argument("log of non-positive value");
                po[i] = std::log(v);
                break;
            case UnaryOp::Sqrt:
                if (v < Real(0)) throw std::invalid_argument("sqrt of negative value");
                po[i] = std::sqrt(v);
                break;
            case UnaryOp::Gelu: {
                const Real inv_sqrt2 = Real(0.70710678118654752440);
                po[i] = Real(0.5) * v * (Real(1) + std::erf(v * inv_sqrt2));
                break;
            }
        }
    }
    if (op == UnaryOp::Relu && KinkMargin::active()) {
        double scale = 0.0;
        for (std::int64_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(static_cast<double>(px[i])));
        for (std::int64_t i = 0; i < n; ++i)
            KinkMargin::active()->feed(std::abs(static_cast<double>(px[i])), scale);
    }
    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, op, exp_cap]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            const Real* vx = xc.data();
            const Real* vy = oc.data();
            for (size_t i = 0; i < g.size(); ++i) {
                Real d = 0;
                switch (op) {
                    case UnaryOp::Relu: d = vx[i] > Real(0) ? Real(1) : Real(0); break;
                    case UnaryOp::Sigmoid: d = vy[i] * (Real(1) - vy[i]); break;
                    case UnaryOp::Exp: d = vx[i] < exp_cap ? vy[i] : Real(0); break;
                    case UnaryOp::Log: d = Real(1) / vx[i]; break;
                    case UnaryOp::Sqrt: d = Real(0.5) / vy[i]; break;
                    case UnaryOp::Gelu: {
                        const Real inv_sqrt2 = Real(0.70710678118654752440);
                        const Real inv_sqrt2pi = Real(0.39894228040143267794);
                        d = Real(0.5) * (Real(1) + std::erf(vx[i] * inv_sqrt2)) +
                            vx[i] * inv_sqrt2pi * std::exp(Real(-0.5) * vx[i] * vx[i]);
                        break;
                    }
                }
                gx[i] += g[i] * d;
            }
        });
    }
    return out;
}

template <typename Real> Tensor<Real> relu(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Relu); }
template <typename Real> Tensor<Real> sigmoid(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Sigmoid); }
template <typename Real> Tensor<Real> exp(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Exp); }
template <typename Real> Tensor<Real> log(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Log); }
template <typename Real> Tensor<Real> sqrt(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Sqrt); }
template <typename Real> Tensor<Real> gelu(const Tensor<Real>& x) { return ew_unary(x, UnaryOp::Gelu); }

// Clamp with pass-through gradient inside the range, zero outside.
template <typename Real>
Tensor<Real> clamp(const Tensor<Real>& x, Real lo, Real hi) {
    Tensor<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = std::min(hi, std::max(lo, px[i]));
    if (KinkMargin::active()) {
        const double span = static_cast<double>(hi) - static_cast<double>(lo);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const double v = static_cast<double>(px[i]);
            KinkMargin::active()->feed(std::min(std::abs(v - lo), std::abs(hi - v)), span);
        }
    }
    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, lo, hi]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            const Real* vx = xc.data();
            for (size_t i = 0; i < g.size(); ++i)
                if (vx[i] > lo && vx[i] < hi) gx[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    if (lvit::numel(new_shape) != x.size())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                                    " changes element count");
    Tensor<Real> out = Tensor<Real>::from(std::move(new_shape), x.values());
    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> permute(const Tensor<Real>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    const auto in_strides = detail::row_major_strides(x.shape());
    std::vector<std::int64_t> strides(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    Tensor<Real> out(out_shape);
    const Real* px = x.data();
    Real* po = out.data();
    detail::broadcast_walk(out_shape, strides, strides,
                           [&](std::int64_t i, std::int64_t ix, std::int64_t) { po[i] = px[ix]; });

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, out_shape, strides]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            detail::broadcast_walk(out_shape, strides, strides,
                                   [&](std::int64_t i, std::int64_t ix, std::int64_t) { gx[static_cast<size_t>(ix)] += g[static_cast<size_t>(i)]; });
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const int r = xs[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: invalid axis");
    Shape out_shape = xs[0].shape();
    out_shape[static_cast<size_t>(axis)] = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && x.dim(d) != xs[0].dim(d))
                throw std::invalid_argument("concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                                            shape_str(xs[0].shape()));
        out_shape[static_cast<size_t>(axis)] += x.dim(axis);
    }
    Tensor<Real> out(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];
    const std::int64_t out_axis = out_shape[static_cast<size_t>(axis)];

    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t ax = x.dim(axis);
        const Real* px = x.data();
        Real* po = out.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * out_axis + off) * inner, px + o * ax * inner,
                        static_cast<size_t>(ax * inner) * sizeof(Real));
        off += ax;
    }

    bool rec = false;
    for (const auto& x : xs) rec = rec || detail::recording<Real>({&x});
    if (rec) {
        out.set_requires_grad(true);
        std::vector<Tensor<Real>> xc = xs;
        Tensor<Real> oc = out;
        Tape<Real>::active()->record([xc, oc, outer, inner, out_axis, axis]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            std::int64_t off2 = 0;
            for (auto& x : xc) {
                const std::int64_t ax = x.dim(axis);
                if (x.requires_grad()) {
                    auto& gx = x.grad_buffer();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const Real* gsrc = g.data() + (o * out_axis + off2) * inner;
                        Real* gdst = gx.data() + o * ax * inner;
                        for (std::int64_t i = 0; i < ax * inner; ++i) gdst[i] += gsrc[i];
                    }
                }
                off2 += ax;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdim) {
    std::vector<bool> red(in.size(), false);
    for (int a : axes) {
        int ax = a < 0 ? a + static_cast<int>(in.size()) : a;
        if (ax < 0 || ax >= static_cast<int>(in.size())) throw std::invalid_argument("reduce: invalid axis");
        red[static_cast<size_t>(ax)] = true;
    }
    Shape out;
    for (size_t i = 0; i < in.size(); ++i) {
        if (red[i]) {
            if (keepdim) out.push_back(1);
        } else {
            out.push_back(in[i]);
        }
    }
    return out;
}

// Map: flat input index -> flat output index, as broadcast strides of the
// keepdim-shaped output walked over the input shape.
inline std::vector<std::int64_t> reduce_strides(const Shape& in, const std::vector<int>& axes) {
    Shape keep = in;
    for (int a : axes) {
        int ax = a < 0 ? a + static_cast<int>(in.size()) : a;
        keep[static_cast<size_t>(ax)] = 1;
    }
    return broadcast_strides(keep, in);
}

}  // namespace detail

template <typename Real>
Tensor<Real> sum_axes(const Tensor<Real>& x, const std::vector<int>& axes, bool keepdim = false) {
    const Shape out_shape = detail::reduced_shape(x.shape(), axes, keepdim);
    const auto st = detail::reduce_strides(x.shape(), axes);
    Tensor<Real> out(out_shape);
    // Accumulate in double so f32 losses keep their precision.
    std::vector<double> acc(static_cast<size_t>(lvit::numel(out_shape)), 0.0);
    const Real* px = x.data();
    detail::broadcast_walk(x.shape(), st, st,
                           [&](std::int64_t i, std::int64_t io, std::int64_t) { acc[static_cast<size_t>(io)] += static_cast<double>(px[i]); });
    Real* po = out.data();
    for (size_t i = 0; i < acc.size(); ++i) po[i] = static_cast<Real>(acc[i]);

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, st]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            detail::broadcast_walk(xc.shape(), st, st,
                                   [&](std::int64_t i, std::int64_t io, std::int64_t) { gx[static_cast<size_t>(i)] += g[static_cast<size_t>(io)]; });
        });
    }
    return out;
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    for (int i = 0; i < x.rank(); ++i) axes[static_cast<size_t>(i)] = i;
    return sum_axes(x, axes, false);
}

template <typename Real>
Tensor<Real> mean_axes(const Tensor<Real>& x, const std::vector<int>& axes, bool keepdim = false) {
    Tensor<Real> s = sum_axes(x, axes, keepdim);
    const Real scale = static_cast<Real>(static_cast<double>(s.size()) / static_cast<double>(x.size()));
    return mul_scalar(s, scale);
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return mul_scalar(sum_all(x), static_cast<Real>(1.0 / static_cast<double>(x.size())));
}

// Max reduction; gradient routes to the first maximum in row-major order.
template <typename Real>
Tensor<Real> max_axes(const Tensor<Real>& x, const std::vector<int>& axes, bool keepdim = false) {
    const Shape out_shape = detail::reduced_shape(x.shape(), axes, keepdim);
    const auto st = detail::reduce_strides(x.shape(), axes);
    const auto n_out = static_cast<size_t>(lvit::numel(out_shape));
    Tensor<Real> out(out_shape);
    std::vector<std::int64_t> argmax(n_out, -1);
    const Real* px = x.data();
    Real* po = out.data();
    detail::broadcast_walk(x.shape(), st, st, [&](std::int64_t i, std::int64_t io, std::int64_t) {
        if (argmax[static_cast<size_t>(io)] < 0 || px[i] > po[io]) {
            po[io] = px[i];
            argmax[static_cast<size_t>(io)] = i;
        }
    });
    if (KinkMargin::active()) {
        // distance between the winner and the runner-up decides argmax
        // stability; bit-equal ties resolve deterministically and are skipped
        std::vector<Real> second(n_out, -std::numeric_limits<Real>::infinity());
        detail::broadcast_walk(x.shape(), st, st, [&](std::int64_t i, std::int64_t io, std::int64_t) {
            if (i != argmax[static_cast<size_t>(io)] && px[i] > second[static_cast<size_t>(io)])
                second[static_cast<size_t>(io)] = px[i];
        });
        for (size_t io = 0; io < n_out; ++io) {
            if (!std::isfinite(static_cast<double>(second[io]))) continue;
            const double scale = std::max(std::abs(static_cast<double>(po[io])), std::abs(static_cast<double>(second[io])));
            KinkMargin::active()->feed(static_cast<double>(po[io]) - static_cast<double>(second[io]), scale);
        }
    }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, argmax]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (size_t io = 0; io < argmax.size(); ++io) gx[static_cast<size_t>(argmax[io])] += g[io];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: invalid axis for shape " + shape_str(x.shape()));

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const std::int64_t len = x.dim(axis);

    Tensor<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            Real mx = px[base];
            for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
            double denom = 0.0;
            for (std::int64_t k = 0; k < len; ++k) {
                const Real e = std::exp(px[base + k * inner] - mx);
                po[base + k * inner] = e;
                denom += static_cast<double>(e);
            }
            const Real inv = static_cast<Real>(1.0 / denom);
            for (std::int64_t k = 0; k < len; ++k) po[base + k * inner] *= inv;
        }
    }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, outer, inner, len]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            const Real* y = oc.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < len; ++k)
                        dot += static_cast<double>(g[static_cast<size_t>(base + k * inner)]) * static_cast<double>(y[base + k * inner]);
                    for (std::int64_t k = 0; k < len; ++k) {
                        const std::int64_t idx = base + k * inner;
                        gx[static_cast<size_t>(idx)] += y[idx] * (g[static_cast<size_t>(idx)] - static_cast<Real>(dot));
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor<Real> out(Shape{m, n});
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);

    if (detail::recording<Real>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<Real> ac = a, bc = b, oc = out;
        Tape<Real>::active()->record([ac, bc, oc, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            const Real* g = oc.grad_buffer().data();
            if (ac.requires_grad())
                detail::gemm_nt(g, bc.data(), ac.grad_buffer().data(), m, n, k, true);  // dA = G * B^T
            if (bc.requires_grad())
                detail::gemm_tn(ac.data(), g, bc.grad_buffer().data(), k, m, n, true);  // dB = A^T * G
        });
    }
    return out;
}

// Batched matmul over the leading dimension: (B,m,k) x (B,k,n) -> (B,m,n).
template <typename Real>
Tensor<Real> bmm(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<Real> out(Shape{bs, m, n});
    for (int i = 0; i < bs; ++i)
        detail::gemm_nn(a.data() + static_cast<size_t>(i) * m * k, b.data() + static_cast<size_t>(i) * k * n,
                        out.data() + static_cast<size_t>(i) * m * n, m, k, n, false);

    if (detail::recording<Real>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<Real> ac = a, bc = b, oc = out;
        Tape<Real>::active()->record([ac, bc, oc, bs, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            const Real* g = oc.grad_buffer().data();
            for (int i = 0; i < bs; ++i) {
                const Real* gi = g + static_cast<size_t>(i) * m * n;
                if (ac.requires_grad())
                    detail::gemm_nt(gi, bc.data() + static_cast<size_t>(i) * k * n,
                                    ac.grad_buffer().data() + static_cast<size_t>(i) * m * k, m, n, k, true);
                if (bc.requires_grad())
                    detail::gemm_tn(ac.data() + static_cast<size_t>(i) * m * k, gi,
                                    bc.grad_buffer().data() + static_cast<size_t>(i) * k * n, k, m, n, true);
            }
        });
    }
    return out;
}

// Swap the last two axes.
template <typename Real>
Tensor<Real> transpose_last2(const Tensor<Real>& x) {
    std::vector<int> perm(static_cast<size_t>(x.rank()));
    for (int i = 0; i < x.rank(); ++i) perm[static_cast<size_t>(i)] = i;
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

// ---------------------------------------------------------------------------
// Embedding lookup and token resampling
// ---------------------------------------------------------------------------

// Rows of `table` (V,D) gathered per id; rows at pad_id come out zero and
// receive no gradient. ids is row-major (N,M).
template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<std::vector<int>>& ids, int pad_id) {
    if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
    const int v = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    const int m = n > 0 ? static_cast<int>(ids[0].size()) : 0;
    Tensor<Real> out(Shape{n, m, d});
    Real* po = out.data();
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(ids[static_cast<size_t>(i)].size()) != m)
            throw std::invalid_argument("embedding: ragged id batch");
        for (int j = 0; j < m; ++j) {
            const int id = ids[static_cast<size_t>(i)][static_cast<size_t>(j)];
            if (id < 0 || id >= v)
                throw std::invalid_argument("embedding: token id " + std::to_string(id) + " out of range [0, " +
                                            std::to_string(v) + ")");
            if (id == pad_id) continue;  // stays zero
            std::memcpy(po + (static_cast<size_t>(i) * m + j) * d, table.data() + static_cast<size_t>(id) * d,
                        static_cast<size_t>(d) * sizeof(Real));
        }
    }
    if (detail::recording<Real>({&table})) {
        out.set_requires_grad(true);
        Tensor<Real> tc = table, oc = out;
        Tape<Real>::active()->record([tc, oc, ids, pad_id, m, d]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gt = tc.grad_buffer();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < m; ++j) {
                    const int id = ids[i][static_cast<size_t>(j)];
                    if (id == pad_id) continue;
                    const Real* gs = g.data() + (i * static_cast<size_t>(m) + static_cast<size_t>(j)) * d;
                    Real* gd = gt.data() + static_cast<size_t>(id) * d;
                    for (int c = 0; c < d; ++c) gd[c] += gs[c];
                }
        });
    }
    return out;
}

// Linear interpolation along the token axis: (N,M,D) -> (N,T,D).
// A constant sequence stays constant for any T.
template <typename Real>
Tensor<Real> resample_linear_tokens(const Tensor<Real>& x, int target) {
    if (x.rank() != 3) throw std::invalid_argument("resample: expected (N,M,D) tokens");
    if (target < 1) throw std::invalid_argument("resample: target token count must be >= 1");
    const int n = x.dim(0), m = x.dim(1), d = x.dim(2);
    if (m < 1) throw std::invalid_argument("resample: empty token sequence");

    std::vector<int> i0(static_cast<size_t>(target)), i1(static_cast<size_t>(target));
    std::vector<Real> w(static_cast<size_t>(target));
    for (int t = 0; t < target; ++t) {
        double s = (t + 0.5) * static_cast<double>(m) / target - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(m - 1));
        i0[static_cast<size_t>(t)] = static_cast<int>(std::floor(s));
        i1[static_cast<size_t>(t)] = std::min(i0[static_cast<size_t>(t)] + 1, m - 1);
        w[static_cast<size_t>(t)] = static_cast<Real>(s - i0[static_cast<size_t>(t)]);
    }

    Tensor<Real> out(Shape{n, target, d});
    const Real* px = x.data();
    Real* po = out.data();
    for (int b = 0; b < n; ++b)
        for (int t = 0; t < target; ++t) {
            const Real* r0 = px + (static_cast<size_t>(b) * m + i0[static_cast<size_t>(t)]) * d;
            const Real* r1 = px + (static_cast<size_t>(b) * m + i1[static_cast<size_t>(t)]) * d;
            Real* ro = po + (static_cast<size_t>(b) * target + t) * d;
            const Real wt = w[static_cast<size_t>(t)];
            for (int c = 0; c < d; ++c) ro[c] = (Real(1) - wt) * r0[c] + wt * r1[c];
        }

    if (detail::recording<Real>({&x})) {
        out.set_requires_grad(true);
        Tensor<Real> xc = x, oc = out;
        Tape<Real>::active()->record([xc, oc, i0, i1, w, n, m, d, target]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad_buffer();
            auto& gx = xc.grad_buffer();
            for (int b = 0; b < n; ++b)
                for (int t = 0; t < target; ++t) {
                    const Real* gs = g.data() + (static_cast<size_t>(b) * target + t) * d;
                    Real* g0 = gx.data() + (static_cast<size_t>(b) * m + i0[static_cast<size_t>(t)]) * d;
                    Real* g1 = gx.data() + (static_cast<size_t>(b) * m + i1[static_cast<size_t>(t)]) * d;
                    const Real wt = w[static_cast<size_t>(t)];
                    for (int c = 0; c < d; ++c) {
                        g0[c] += (Real(1) - wt) * gs[c];
                        g1[c] += wt * gs[c];
                    }
                }
        });
    }
    return out;
}

}  // namespace lvit
