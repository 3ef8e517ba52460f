#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dfa {

// Dense n-dimensional array, row-major and contiguous. Carries activations,
// errors and weights. Two scalar widths are used project-wide: double for
// oracles and gradient checks, float for training runs.
template <class S>
class TensorT {
public:
    using scalar = S;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(checked_numel(shape_), S(0));
    }

    TensorT(std::vector<std::size_t> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size())
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static TensorT filled(std::vector<std::size_t> shape, S value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static TensorT identity(std::size_t n) {
        TensorT t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = S(1);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& raw() { return data_; }
    const std::vector<S>& raw() const { return data_; }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const S& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    S& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const S& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    // Same data, new shape (element count must match).
    TensorT reshaped(std::vector<std::size_t> shape) const {
        if (checked_numel(shape) != data_.size())
            throw std::invalid_argument("reshape: element count mismatch");
        return TensorT(std::move(shape), data_);
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    template <class T>
    TensorT<T> cast() const {
        TensorT<T> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
        return out;
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw std::invalid_argument("tensor: rank must be >= 1");
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("tensor: dims must be >= 1");
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<S> data_;

    template <class T> friend class TensorT;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

// ---- matrix product -------------------------------------------------------

// c (m x n) = a (m x k) * b (k x n); plain row-major triple loop, k-middle so
// the inner j loop vectorizes and every c_ij accumulates over k in order.
template <class S>
inline void matmul_into(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = ai[p];
            if (av == S(0)) continue;
            const S* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class S>
inline TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: expects rank-2 tensors");
    if (a.dim(1) != b.dim(0)) throw std::invalid_argument("matmul: inner dims disagree");
    TensorT<S> c({a.dim(0), b.dim(1)});
    matmul_into(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

template <class S>
inline TensorT<S> transpose(const TensorT<S>& m) {
    if (m.rank() != 2) throw std::invalid_argument("transpose: expects rank-2 tensor");
    TensorT<S> t({m.dim(1), m.dim(0)});
    for (std::size_t r = 0; r < m.dim(0); ++r)
        for (std::size_t c = 0; c < m.dim(1); ++c) t(c, r) = m(r, c);
    return t;
}

// a (m x k) * b^T with b (n x k)
template <class S>
inline TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    return matmul(a, transpose(b).reshaped({b.dim(1), b.dim(0)}));
}

// a^T (k x m) * b (k x n)
template <class S>
inline TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b) {
    return matmul(transpose(a), b);
}

// ---- elementwise helpers ---------------------------------------------------

template <class S>
inline void axpy(S alpha, const TensorT<S>& x, TensorT<S>& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("axpy: shape mismatch");
    const S* xd = x.data();
    S* yd = y.data();
    for (std::size_t i = 0; i < y.numel(); ++i) yd[i] += alpha * xd[i];
}

template <class S>
inline TensorT<S> hadamard(const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class S>
inline void scale_inplace(TensorT<S>& t, S alpha) {
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= alpha;
}

template <class S>
inline S dot_flat(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
    S acc = S(0);
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

template <class S>
inline S norm2(const TensorT<S>& a) {
    S acc = S(0);
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * a[i];
    return std::sqrt(acc);
}

// ---- activations ------------------------------------------------------------

enum class Act { identity, relu, tanh, sigmoid };

// Non-linearity with its exact analytic derivative.
struct Activation {
    Act kind = Act::identity;

    template <class S>
    S f(S x) const {
        switch (kind) {
            case Act::identity: return x;
            case Act::relu: return x > S(0) ? x : S(0);
            case Act::tanh: return std::tanh(x);
            case Act::sigmoid: return S(1) / (S(1) + std::exp(-x));
        }
        return x;
    }

    // Derivative written in terms of x (pre-activation). relu'(0) := 0.
    template <class S>
    S df(S x) const {
        switch (kind) {
            case Act::identity: return S(1);
            case Act::relu: return x > S(0) ? S(1) : S(0);
            case Act::tanh: {
                const S t = std::tanh(x);
                return S(1) - t * t;
            }
            case Act::sigmoid: {
                const S s = S(1) / (S(1) + std::exp(-x));
                return s * (S(1) - s);
            }
        }
        return S(1);
    }
};

inline const char* act_name(Act a) {
    switch (a) {
        case Act::identity: return "identity";
        case Act::relu: return "relu";
        case Act::tanh: return "tanh";
        case Act::sigmoid: return "sigmoid";
    }
    return "?";
}

template <class S>
inline TensorT<S> apply_activation(const TensorT<S>& x, const Activation& a, bool derivative = false) {
    TensorT<S> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = derivative ? a.df(x[i]) : a.f(x[i]);
    return out;
}

} // namespace dfa
