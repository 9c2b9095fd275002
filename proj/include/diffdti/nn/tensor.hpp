#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffdti/common.hpp"
#include "diffdti/rng.hpp"

namespace diffdti::nn {

// 64-byte aligned storage. Keeps the alignment of every buffer a pure
// function of tensor shape, so vectorized kernels sum in the same order on
// every run and training stays bitwise reproducible.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(Align));
    }
    template <typename U>
    bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
    template <typename U>
    bool operator!=(const AlignedAllocator<U, Align>&) const { return false; }
};

using AlignedVec = std::vector<double, AlignedAllocator<double>>;

// Dense 4D tensor, NCHW row-major, double precision. Token sequences use the
// convention [B, T, E, 1].
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    AlignedVec v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.n, o.c, o.h, o.w); }

    static Tensor randn(int n_, int c_, int h_, int w_, Rng& rng, double scale = 1.0) {
        Tensor t(n_, c_, h_, w_);
        for (auto& x : t.v) x = scale * rng.gauss();
        return t;
    }

    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + "]";
    }

    size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<size_t>(in) * c + ic) * h + ih) * w + iw;
    }
    double& at(int in, int ic, int ih, int iw) { return v[index(in, ic, ih, iw)]; }
    double at(int in, int ic, int ih, int iw) const { return v[index(in, ic, ih, iw)]; }

    double* sample(int in) { return v.data() + static_cast<size_t>(in) * c * h * w; }
    const double* sample(int in) const { return v.data() + static_cast<size_t>(in) * c * h * w; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    Tensor& operator+=(const Tensor& o) {
        require_shape(o, "operator+=");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_shape(o, "operator-=");
        for (size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (auto& x : v) x *= s;
        return *this;
    }

    void require_shape(const Tensor& o, const char* what) const {
        if (!same_shape(o))
            fail(ErrorKind::Shape, std::string(what) + ": shape mismatch " + shape_str() + " vs " +
                                       o.shape_str());
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline Tensor operator+(Tensor a, const Tensor& b) { a += b; return a; }
inline Tensor operator-(Tensor a, const Tensor& b) { a -= b; return a; }
inline Tensor operator*(Tensor a, double s) { a *= s; return a; }

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    a.require_shape(b, "hadamard");
    Tensor out = a;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    a.require_shape(b, "dot");
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

// Named view of a parameter and its gradient, used by the optimizer, EMA,
// checkpointing and finite-difference probes.
struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
};

using ParamList = std::vector<ParamRef>;

inline size_t param_count(const ParamList& params) {
    size_t total = 0;
    for (const auto& p : params) total += p.value->size();
    return total;
}

inline void zero_grads(const ParamList& params) {
    for (const auto& p : params) p.grad->fill(0.0);
}

} // namespace diffdti::nn
