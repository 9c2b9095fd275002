#include "diffdti/nn/layers.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace diffdti::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// ---- activations -------------------------------------------------------------

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) v = v / (1.0 + std::exp(-v));
    return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& gy) {
    x.require_shape(gy, "silu_backward");
    Tensor gx = gy;
    for (size_t i = 0; i < gx.v.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x.v[i]));
        gx.v[i] *= s * (1.0 + x.v[i] * (1.0 - s));
    }
    return gx;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& gy) {
    x.require_shape(gy, "relu_backward");
    Tensor gx = gy;
    for (size_t i = 0; i < gx.v.size(); ++i)
        if (x.v[i] <= 0.0) gx.v[i] = 0.0;
    return gx;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
} // namespace

Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return y;
}

Tensor gelu_backward(const Tensor& x, const Tensor& gy) {
    x.require_shape(gy, "gelu_backward");
    Tensor gx = gy;
    for (size_t i = 0; i < gx.v.size(); ++i) {
        const double v = x.v[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx.v[i] *= cdf + v * pdf;
    }
    return gx;
}

// ---- shape helpers -----------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        fail(ErrorKind::Shape, "concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out(a.n, a.c + b.c, a.h, a.w);
    const size_t plane = static_cast<size_t>(a.h) * a.w;
    for (int s = 0; s < a.n; ++s) {
        std::copy(a.sample(s), a.sample(s) + a.c * plane, out.sample(s));
        std::copy(b.sample(s), b.sample(s) + b.c * plane, out.sample(s) + a.c * plane);
    }
    return out;
}

void split_channels(const Tensor& g, int c_a, Tensor& ga, Tensor& gb) {
    ga = Tensor(g.n, c_a, g.h, g.w);
    gb = Tensor(g.n, g.c - c_a, g.h, g.w);
    const size_t plane = static_cast<size_t>(g.h) * g.w;
    for (int s = 0; s < g.n; ++s) {
        std::copy(g.sample(s), g.sample(s) + c_a * plane, ga.sample(s));
        std::copy(g.sample(s) + c_a * plane, g.sample(s) + g.c * plane, gb.sample(s));
    }
}

Tensor avg_pool(const Tensor& x, int factor) {
    if (factor == 1) return x;
    if (x.h % factor || x.w % factor)
        fail(ErrorKind::Shape, "avg_pool: size not divisible by factor");
    const int oh = x.h / factor, ow = x.w / factor;
    Tensor y(x.n, x.c, oh, ow);
    const double inv = 1.0 / (factor * factor);
    for (int s = 0; s < x.n; ++s)
        for (int c = 0; c < x.c; ++c)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            acc += x.at(s, c, oy * factor + dy, ox * factor + dx);
                    y.at(s, c, oy, ox) = acc * inv;
                }
    return y;
}

Tensor avg_pool_backward(const Tensor& gy, int factor, int in_h, int in_w) {
    if (factor == 1) return gy;
    Tensor gx(gy.n, gy.c, in_h, in_w);
    const double inv = 1.0 / (factor * factor);
    for (int s = 0; s < gy.n; ++s)
        for (int c = 0; c < gy.c; ++c)
            for (int oy = 0; oy < gy.h; ++oy)
                for (int ox = 0; ox < gy.w; ++ox) {
                    const double g = gy.at(s, c, oy, ox) * inv;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            gx.at(s, c, oy * factor + dy, ox * factor + dx) = g;
                }
    return gx;
}

Tensor upsample_nearest2x(const Tensor& x) {
    Tensor y(x.n, x.c, x.h * 2, x.w * 2);
    for (int s = 0; s < x.n; ++s)
        for (int c = 0; c < x.c; ++c)
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix) {
                    const double v = x.at(s, c, iy, ix);
                    y.at(s, c, 2 * iy, 2 * ix) = v;
                    y.at(s, c, 2 * iy, 2 * ix + 1) = v;
                    y.at(s, c, 2 * iy + 1, 2 * ix) = v;
                    y.at(s, c, 2 * iy + 1, 2 * ix + 1) = v;
                }
    return y;
}

Tensor upsample_nearest2x_backward(const Tensor& gy) {
    Tensor gx(gy.n, gy.c, gy.h / 2, gy.w / 2);
    for (int s = 0; s < gy.n; ++s)
        for (int c = 0; c < gy.c; ++c)
            for (int iy = 0; iy < gx.h; ++iy)
                for (int ix = 0; ix < gx.w; ++ix)
                    gx.at(s, c, iy, ix) = gy.at(s, c, 2 * iy, 2 * ix) +
                                          gy.at(s, c, 2 * iy, 2 * ix + 1) +
                                          gy.at(s, c, 2 * iy + 1, 2 * ix) +
                                          gy.at(s, c, 2 * iy + 1, 2 * ix + 1);
    return gx;
}

namespace {

struct BilinearTap {
    int i0, i1;
    double w0, w1;
};

// align_corners=false sampling taps for one axis.
std::vector<BilinearTap> bilinear_taps(int in, int out) {
    std::vector<BilinearTap> taps(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, in - 1);
        const double f = src - i0;
        taps[o] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

} // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.h == out_h && x.w == out_w) return x;
    const auto ty = bilinear_taps(x.h, out_h);
    const auto tx = bilinear_taps(x.w, out_w);
    Tensor y(x.n, x.c, out_h, out_w);
    for (int s = 0; s < x.n; ++s)
        for (int c = 0; c < x.c; ++c)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& ay = ty[oy];
                    const auto& ax = tx[ox];
                    y.at(s, c, oy, ox) = ay.w0 * (ax.w0 * x.at(s, c, ay.i0, ax.i0) +
                                                  ax.w1 * x.at(s, c, ay.i0, ax.i1)) +
                                         ay.w1 * (ax.w0 * x.at(s, c, ay.i1, ax.i0) +
                                                  ax.w1 * x.at(s, c, ay.i1, ax.i1));
                }
    return y;
}

Tensor bilinear_resize_backward(const Tensor& gy, int in_h, int in_w) {
    if (gy.h == in_h && gy.w == in_w) return gy;
    const auto ty = bilinear_taps(in_h, gy.h);
    const auto tx = bilinear_taps(in_w, gy.w);
    Tensor gx(gy.n, gy.c, in_h, in_w);
    for (int s = 0; s < gy.n; ++s)
        for (int c = 0; c < gy.c; ++c)
            for (int oy = 0; oy < gy.h; ++oy)
                for (int ox = 0; ox < gy.w; ++ox) {
                    const auto& ay = ty[oy];
                    const auto& ax = tx[ox];
                    const double g = gy.at(s, c, oy, ox);
                    gx.at(s, c, ay.i0, ax.i0) += ay.w0 * ax.w0 * g;
                    gx.at(s, c, ay.i0, ax.i1) += ay.w0 * ax.w1 * g;
                    gx.at(s, c, ay.i1, ax.i0) += ay.w1 * ax.w0 * g;
                    gx.at(s, c, ay.i1, ax.i1) += ay.w1 * ax.w1 * g;
                }
    return gx;
}

void softmax_rows(double* data, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* row = data + static_cast<size_t>(r) * cols;
        double mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        const double inv = 1.0 / sum;
        for (int c = 0; c < cols; ++c) row[c] *= inv;
    }
}

// ---- Linear ------------------------------------------------------------------

Linear::Linear(int in_dim, int out_dim, Rng& rng, double scale)
    : in(in_dim), out(out_dim) {
    if (scale < 0.0) scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    w = Tensor::randn(out, in, 1, 1, rng, scale);
    b = Tensor(out, 1, 1, 1);
    gw = Tensor::zeros_like(w);
    gb = Tensor::zeros_like(b);
}

Tensor Linear::forward(const Tensor& x) {
    if (x.h != in || x.w != 1)
        fail(ErrorKind::Shape, "linear: expected [*,*," + std::to_string(in) + ",1], got " +
                                   x.shape_str());
    x_cache = x;
    const int rows = x.n * x.c;
    Tensor y(x.n, x.c, out, 1);
    CMapMat X(x.v.data(), rows, in);
    CMapMat W(w.v.data(), out, in);
    MapMat Y(y.v.data(), rows, out);
    Y.noalias() = X * W.transpose();
    for (int r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) Y(r, o) += b.v[o];
    return y;
}

Tensor Linear::backward(const Tensor& gy) {
    const int rows = x_cache.n * x_cache.c;
    CMapMat GY(gy.v.data(), rows, out);
    CMapMat X(x_cache.v.data(), rows, in);
    CMapMat W(w.v.data(), out, in);

    MapMat GW(gw.v.data(), out, in);
    GW.noalias() += GY.transpose() * X;
    for (int r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) gb.v[o] += GY(r, o);

    Tensor gx = Tensor::zeros_like(x_cache);
    MapMat GX(gx.v.data(), rows, in);
    GX.noalias() = GY * W;
    return gx;
}

void Linear::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".w", &w, &gw});
    ps.push_back({prefix + ".b", &b, &gb});
}

// ---- Conv2d ------------------------------------------------------------------

Conv2d::Conv2d(int in_c, int out_c, int kernel, int stride_, int pad_, Rng& rng, double scale)
    : in_ch(in_c), out_ch(out_c), k(kernel), stride(stride_), pad(pad_) {
    if (scale < 0.0) scale = std::sqrt(2.0 / (static_cast<double>(in_c) * kernel * kernel));
    w = Tensor::randn(out_c, in_c, kernel, kernel, rng, scale);
    b = Tensor(out_c, 1, 1, 1);
    gw = Tensor::zeros_like(w);
    gb = Tensor::zeros_like(b);
}

Conv2d Conv2d::zero_init(int in_c, int out_c, int kernel, int stride_, int pad_) {
    Conv2d conv;
    conv.in_ch = in_c;
    conv.out_ch = out_c;
    conv.k = kernel;
    conv.stride = stride_;
    conv.pad = pad_;
    conv.w = Tensor(out_c, in_c, kernel, kernel);
    conv.b = Tensor(out_c, 1, 1, 1);
    conv.gw = Tensor::zeros_like(conv.w);
    conv.gb = Tensor::zeros_like(conv.b);
    return conv;
}

namespace {

void im2col(const double* x, int ic, int ih, int iw, int k, int stride, int pad, int oh, int ow,
            double* col) {
    const int patch = k * k;
    for (int c = 0; c < ic; ++c) {
        const double* plane = x + static_cast<size_t>(c) * ih * iw;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col + (static_cast<size_t>(c) * patch + ky * k + kx) *
                                        (static_cast<size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= ih) {
                        std::fill(dst, dst + ow, 0.0);
                        dst += ow;
                        continue;
                    }
                    const double* src = plane + static_cast<size_t>(iy) * iw;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        *dst++ = (ix >= 0 && ix < iw) ? src[ix] : 0.0;
                    }
                }
            }
    }
}

void col2im(const double* col, int ic, int ih, int iw, int k, int stride, int pad, int oh, int ow,
            double* x) {
    const int patch = k * k;
    for (int c = 0; c < ic; ++c) {
        double* plane = x + static_cast<size_t>(c) * ih * iw;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col + (static_cast<size_t>(c) * patch + ky * k + kx) *
                                              (static_cast<size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= ih) {
                        src += ow;
                        continue;
                    }
                    double* dstrow = plane + static_cast<size_t>(iy) * iw;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < iw) dstrow[ix] += src[ox];
                    }
                    src += ow;
                }
            }
    }
}

} // namespace

Tensor Conv2d::forward(const Tensor& x) {
    if (x.c != in_ch)
        fail(ErrorKind::Shape, "conv: expected " + std::to_string(in_ch) + " channels, got " +
                                   x.shape_str());
    x_cache = x;
    const int oh = out_size(x.h), ow = out_size(x.w);
    Tensor y(x.n, out_ch, oh, ow);
    const int patch = in_ch * k * k;
    const size_t ospatial = static_cast<size_t>(oh) * ow;

#pragma omp parallel
    {
        AlignedVec col(static_cast<size_t>(patch) * ospatial);
#pragma omp for schedule(static)
        for (int s = 0; s < x.n; ++s) {
            im2col(x.sample(s), in_ch, x.h, x.w, k, stride, pad, oh, ow, col.data());
            CMapMat W(w.v.data(), out_ch, patch);
            CMapMat C(col.data(), patch, static_cast<int>(ospatial));
            MapMat Y(y.sample(s), out_ch, static_cast<int>(ospatial));
            Y.noalias() = W * C;
            for (int oc = 0; oc < out_ch; ++oc) Y.row(oc).array() += b.v[oc];
        }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& gy) {
    const Tensor& x = x_cache;
    const int oh = gy.h, ow = gy.w;
    const int patch = in_ch * k * k;
    const size_t ospatial = static_cast<size_t>(oh) * ow;

    Tensor gx = Tensor::zeros_like(x);
    // Per-sample weight/bias partials, reduced serially afterwards so the
    // accumulation order is independent of the thread count.
    std::vector<Tensor> gw_s(x.n), gb_s(x.n);

#pragma omp parallel
    {
        AlignedVec col(static_cast<size_t>(patch) * ospatial);
        AlignedVec gcol(static_cast<size_t>(patch) * ospatial);
#pragma omp for schedule(static)
        for (int s = 0; s < x.n; ++s) {
            im2col(x.sample(s), in_ch, x.h, x.w, k, stride, pad, oh, ow, col.data());
            CMapMat GY(gy.sample(s), out_ch, static_cast<int>(ospatial));
            CMapMat C(col.data(), patch, static_cast<int>(ospatial));
            CMapMat W(w.v.data(), out_ch, patch);

            gw_s[s] = Tensor(out_ch, in_ch, k, k);
            MapMat GW(gw_s[s].v.data(), out_ch, patch);
            GW.noalias() = GY * C.transpose();

            gb_s[s] = Tensor(out_ch, 1, 1, 1);
            for (int oc = 0; oc < out_ch; ++oc) gb_s[s].v[oc] = GY.row(oc).sum();

            MapMat GC(gcol.data(), patch, static_cast<int>(ospatial));
            GC.noalias() = W.transpose() * GY;
            col2im(gcol.data(), in_ch, x.h, x.w, k, stride, pad, oh, ow, gx.sample(s));
        }
    }
    for (int s = 0; s < x.n; ++s) {
        gw += gw_s[s];
        gb += gb_s[s];
    }
    return gx;
}

void Conv2d::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".w", &w, &gw});
    ps.push_back({prefix + ".b", &b, &gb});
}

// ---- ConvTranspose2d (kernel == stride) ---------------------------------------

ConvTranspose2d::ConvTranspose2d(int in_c, int out_c, int kernel, Rng& rng)
    : in_ch(in_c), out_ch(out_c), k(kernel) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in_c));
    w = Tensor::randn(in_c, out_c, kernel, kernel, rng, scale);
    b = Tensor(out_c, 1, 1, 1);
    gw = Tensor::zeros_like(w);
    gb = Tensor::zeros_like(b);
}

Tensor ConvTranspose2d::forward(const Tensor& x) {
    if (x.c != in_ch)
        fail(ErrorKind::Shape, "conv_transpose: expected " + std::to_string(in_ch) +
                                   " channels, got " + x.shape_str());
    x_cache = x;
    const int oh = x.h * k, ow = x.w * k;
    Tensor y(x.n, out_ch, oh, ow);
    const int block = out_ch * k * k;
    const size_t spatial = static_cast<size_t>(x.h) * x.w;

    // w viewed as [in_ch, block]: tmp = w^T x, then scatter k x k blocks.
#pragma omp parallel
    {
        AlignedVec tmp(static_cast<size_t>(block) * spatial);
#pragma omp for schedule(static)
        for (int s = 0; s < x.n; ++s) {
            CMapMat W(w.v.data(), in_ch, block);
            CMapMat X(x.sample(s), in_ch, static_cast<int>(spatial));
            MapMat T(tmp.data(), block, static_cast<int>(spatial));
            T.noalias() = W.transpose() * X;
            double* ys = y.sample(s);
            for (int oc = 0; oc < out_ch; ++oc)
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        const double* src =
                            tmp.data() + (static_cast<size_t>(oc) * k * k + dy * k + dx) * spatial;
                        for (int iy = 0; iy < x.h; ++iy)
                            for (int ix = 0; ix < x.w; ++ix)
                                ys[(static_cast<size_t>(oc) * oh + iy * k + dy) * ow + ix * k + dx] =
                                    src[static_cast<size_t>(iy) * x.w + ix] + b.v[oc];
                    }
        }
    }
    return y;
}

Tensor ConvTranspose2d::backward(const Tensor& gy) {
    const Tensor& x = x_cache;
    const int block = out_ch * k * k;
    const size_t spatial = static_cast<size_t>(x.h) * x.w;
    const int oh = x.h * k, ow = x.w * k;

    Tensor gx = Tensor::zeros_like(x);
    std::vector<Tensor> gw_s(x.n), gb_s(x.n);

#pragma omp parallel
    {
        AlignedVec gtmp(static_cast<size_t>(block) * spatial);
#pragma omp for schedule(static)
        for (int s = 0; s < x.n; ++s) {
            const double* gys = gy.sample(s);
            gb_s[s] = Tensor(out_ch, 1, 1, 1);
            for (int oc = 0; oc < out_ch; ++oc) {
                double acc = 0.0;
                const double* plane = gys + static_cast<size_t>(oc) * oh * ow;
                for (size_t i = 0; i < static_cast<size_t>(oh) * ow; ++i) acc += plane[i];
                gb_s[s].v[oc] = acc;
            }
            for (int oc = 0; oc < out_ch; ++oc)
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) {
                        double* dst =
                            gtmp.data() + (static_cast<size_t>(oc) * k * k + dy * k + dx) * spatial;
                        for (int iy = 0; iy < x.h; ++iy)
                            for (int ix = 0; ix < x.w; ++ix)
                                dst[static_cast<size_t>(iy) * x.w + ix] =
                                    gys[(static_cast<size_t>(oc) * oh + iy * k + dy) * ow + ix * k +
                                        dx];
                    }
            CMapMat GT(gtmp.data(), block, static_cast<int>(spatial));
            CMapMat X(x.sample(s), in_ch, static_cast<int>(spatial));
            CMapMat W(w.v.data(), in_ch, block);

            gw_s[s] = Tensor(in_ch, out_ch, k, k);
            MapMat GW(gw_s[s].v.data(), in_ch, block);
            GW.noalias() = X * GT.transpose();

            MapMat GX(gx.sample(s), in_ch, static_cast<int>(spatial));
            GX.noalias() = W * GT;
        }
    }
    for (int s = 0; s < x.n; ++s) {
        gw += gw_s[s];
        gb += gb_s[s];
    }
    return gx;
}

void ConvTranspose2d::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".w", &w, &gw});
    ps.push_back({prefix + ".b", &b, &gb});
}

// ---- GroupNorm ----------------------------------------------------------------

GroupNorm::GroupNorm(int channels_, int groups_) : channels(channels_), groups(groups_) {
    if (channels % groups)
        fail(ErrorKind::Config, "group_norm: channels not divisible by groups");
    gamma = Tensor(channels, 1, 1, 1);
    gamma.fill(1.0);
    beta = Tensor(channels, 1, 1, 1);
    ggamma = Tensor::zeros_like(gamma);
    gbeta = Tensor::zeros_like(beta);
}

Tensor GroupNorm::forward(const Tensor& x) {
    x_cache = x;
    const int cpg = channels / groups;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    const size_t m = cpg * plane;
    mean_cache.assign(static_cast<size_t>(x.n) * groups, 0.0);
    istd_cache.assign(static_cast<size_t>(x.n) * groups, 0.0);
    Tensor y = Tensor::zeros_like(x);

#pragma omp parallel for schedule(static)
    for (int s = 0; s < x.n; ++s) {
        for (int g = 0; g < groups; ++g) {
            const double* base = x.sample(s) + static_cast<size_t>(g) * cpg * plane;
            double mean = 0.0;
            for (size_t i = 0; i < m; ++i) mean += base[i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (size_t i = 0; i < m; ++i) {
                const double d = base[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double istd = 1.0 / std::sqrt(var + eps);
            mean_cache[static_cast<size_t>(s) * groups + g] = mean;
            istd_cache[static_cast<size_t>(s) * groups + g] = istd;
            double* out = y.sample(s) + static_cast<size_t>(g) * cpg * plane;
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma.v[g * cpg + c];
                const double bt = beta.v[g * cpg + c];
                for (size_t i = 0; i < plane; ++i)
                    out[c * plane + i] = (base[c * plane + i] - mean) * istd * gm + bt;
            }
        }
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& gy) {
    const Tensor& x = x_cache;
    const int cpg = channels / groups;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    const size_t m = cpg * plane;
    Tensor gx = Tensor::zeros_like(x);
    std::vector<Tensor> ggamma_s(x.n), gbeta_s(x.n);

#pragma omp parallel for schedule(static)
    for (int s = 0; s < x.n; ++s) {
        ggamma_s[s] = Tensor(channels, 1, 1, 1);
        gbeta_s[s] = Tensor(channels, 1, 1, 1);
        for (int g = 0; g < groups; ++g) {
            const double mean = mean_cache[static_cast<size_t>(s) * groups + g];
            const double istd = istd_cache[static_cast<size_t>(s) * groups + g];
            const double* xb = x.sample(s) + static_cast<size_t>(g) * cpg * plane;
            const double* gyb = gy.sample(s) + static_cast<size_t>(g) * cpg * plane;
            double* gxb = gx.sample(s) + static_cast<size_t>(g) * cpg * plane;

            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma.v[g * cpg + c];
                double dg = 0.0, db = 0.0;
                for (size_t i = 0; i < plane; ++i) {
                    const double xhat = (xb[c * plane + i] - mean) * istd;
                    const double dxhat = gyb[c * plane + i] * gm;
                    dg += gyb[c * plane + i] * xhat;
                    db += gyb[c * plane + i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                ggamma_s[s].v[g * cpg + c] = dg;
                gbeta_s[s].v[g * cpg + c] = db;
            }
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma.v[g * cpg + c];
                for (size_t i = 0; i < plane; ++i) {
                    const double xhat = (xb[c * plane + i] - mean) * istd;
                    const double dxhat = gyb[c * plane + i] * gm;
                    gxb[c * plane + i] =
                        istd * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                }
            }
        }
    }
    for (int s = 0; s < x.n; ++s) {
        ggamma += ggamma_s[s];
        gbeta += gbeta_s[s];
    }
    return gx;
}

void GroupNorm::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".gamma", &gamma, &ggamma});
    ps.push_back({prefix + ".beta", &beta, &gbeta});
}

// ---- LayerNorm (tokens) --------------------------------------------------------

LayerNorm::LayerNorm(int dim_) : dim(dim_) {
    gamma = Tensor(dim, 1, 1, 1);
    gamma.fill(1.0);
    beta = Tensor(dim, 1, 1, 1);
    ggamma = Tensor::zeros_like(gamma);
    gbeta = Tensor::zeros_like(beta);
}

Tensor LayerNorm::forward(const Tensor& x) {
    if (x.h != dim || x.w != 1)
        fail(ErrorKind::Shape, "layer_norm: expected embed dim " + std::to_string(dim) + ", got " +
                                   x.shape_str());
    x_cache = x;
    const int rows = x.n * x.c;
    mean_cache.assign(rows, 0.0);
    istd_cache.assign(rows, 0.0);
    Tensor y = Tensor::zeros_like(x);
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.v.data() + static_cast<size_t>(r) * dim;
        double mean = 0.0;
        for (int i = 0; i < dim; ++i) mean += xr[i];
        mean /= dim;
        double var = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double d = xr[i] - mean;
            var += d * d;
        }
        var /= dim;
        const double istd = 1.0 / std::sqrt(var + eps);
        mean_cache[r] = mean;
        istd_cache[r] = istd;
        double* yr = y.v.data() + static_cast<size_t>(r) * dim;
        for (int i = 0; i < dim; ++i) yr[i] = (xr[i] - mean) * istd * gamma.v[i] + beta.v[i];
    }
    return y;
}

Tensor LayerNorm::backward(const Tensor& gy) {
    const Tensor& x = x_cache;
    const int rows = x.n * x.c;
    Tensor gx = Tensor::zeros_like(x);
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.v.data() + static_cast<size_t>(r) * dim;
        const double* gyr = gy.v.data() + static_cast<size_t>(r) * dim;
        double* gxr = gx.v.data() + static_cast<size_t>(r) * dim;
        const double mean = mean_cache[r], istd = istd_cache[r];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double xhat = (xr[i] - mean) * istd;
            const double dxhat = gyr[i] * gamma.v[i];
            ggamma.v[i] += gyr[i] * xhat;
            gbeta.v[i] += gyr[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_d = 1.0 / dim;
        for (int i = 0; i < dim; ++i) {
            const double xhat = (xr[i] - mean) * istd;
            const double dxhat = gyr[i] * gamma.v[i];
            gxr[i] = istd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    return gx;
}

void LayerNorm::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".gamma", &gamma, &ggamma});
    ps.push_back({prefix + ".beta", &beta, &gbeta});
}

// ---- LayerNorm2d ----------------------------------------------------------------

LayerNorm2d::LayerNorm2d(int channels_) : channels(channels_) {
    gamma = Tensor(channels, 1, 1, 1);
    gamma.fill(1.0);
    beta = Tensor(channels, 1, 1, 1);
    ggamma = Tensor::zeros_like(gamma);
    gbeta = Tensor::zeros_like(beta);
}

Tensor LayerNorm2d::forward(const Tensor& x) {
    if (x.c != channels)
        fail(ErrorKind::Shape, "layer_norm2d: expected " + std::to_string(channels) +
                                   " channels, got " + x.shape_str());
    x_cache = x;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    mean_cache.assign(static_cast<size_t>(x.n) * plane, 0.0);
    istd_cache.assign(static_cast<size_t>(x.n) * plane, 0.0);
    Tensor y = Tensor::zeros_like(x);
#pragma omp parallel for schedule(static)
    for (int s = 0; s < x.n; ++s) {
        const double* xs = x.sample(s);
        double* ys = y.sample(s);
        for (size_t p = 0; p < plane; ++p) {
            double mean = 0.0;
            for (int c = 0; c < channels; ++c) mean += xs[c * plane + p];
            mean /= channels;
            double var = 0.0;
            for (int c = 0; c < channels; ++c) {
                const double d = xs[c * plane + p] - mean;
                var += d * d;
            }
            var /= channels;
            const double istd = 1.0 / std::sqrt(var + eps);
            mean_cache[static_cast<size_t>(s) * plane + p] = mean;
            istd_cache[static_cast<size_t>(s) * plane + p] = istd;
            for (int c = 0; c < channels; ++c)
                ys[c * plane + p] =
                    (xs[c * plane + p] - mean) * istd * gamma.v[c] + beta.v[c];
        }
    }
    return y;
}

Tensor LayerNorm2d::backward(const Tensor& gy) {
    const Tensor& x = x_cache;
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    Tensor gx = Tensor::zeros_like(x);
    std::vector<Tensor> ggamma_s(x.n), gbeta_s(x.n);
#pragma omp parallel for schedule(static)
    for (int s = 0; s < x.n; ++s) {
        ggamma_s[s] = Tensor(channels, 1, 1, 1);
        gbeta_s[s] = Tensor(channels, 1, 1, 1);
        const double* xs = x.sample(s);
        const double* gys = gy.sample(s);
        double* gxs = gx.sample(s);
        for (size_t p = 0; p < plane; ++p) {
            const double mean = mean_cache[static_cast<size_t>(s) * plane + p];
            const double istd = istd_cache[static_cast<size_t>(s) * plane + p];
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < channels; ++c) {
                const double xhat = (xs[c * plane + p] - mean) * istd;
                const double dxhat = gys[c * plane + p] * gamma.v[c];
                ggamma_s[s].v[c] += gys[c * plane + p] * xhat;
                gbeta_s[s].v[c] += gys[c * plane + p];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            const double inv_c = 1.0 / channels;
            for (int c = 0; c < channels; ++c) {
                const double xhat = (xs[c * plane + p] - mean) * istd;
                const double dxhat = gys[c * plane + p] * gamma.v[c];
                gxs[c * plane + p] =
                    istd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
            }
        }
    }
    for (int s = 0; s < x.n; ++s) {
        ggamma += ggamma_s[s];
        gbeta += gbeta_s[s];
    }
    return gx;
}

void LayerNorm2d::collect(ParamList& ps, const std::string& prefix) {
    ps.push_back({prefix + ".gamma", &gamma, &ggamma});
    ps.push_back({prefix + ".beta", &beta, &gbeta});
}

// ---- MultiHeadAttention ----------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(int embed_dim, int num_heads, Rng& rng)
    : embed(embed_dim), heads(num_heads), dk(embed_dim / num_heads),
      wq(embed_dim, embed_dim, rng), wk(embed_dim, embed_dim, rng),
      wv(embed_dim, embed_dim, rng), wo(embed_dim, embed_dim, rng) {
    if (embed_dim % num_heads)
        fail(ErrorKind::Config, "attention: embed dim not divisible by heads");
}

Tensor MultiHeadAttention::forward(const Tensor& tokens) {
    const int B = tokens.n, T = tokens.c;
    q_cache = wq.forward(tokens);
    k_cache = wk.forward(tokens);
    v_cache = wv.forward(tokens);
    attn_cache = Tensor(B, heads, T, T);
    Tensor z(B, T, embed, 1);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> scores(static_cast<size_t>(T) * T);
    for (int s = 0; s < B; ++s)
        for (int m = 0; m < heads; ++m) {
            // Head m occupies columns [m*dk, (m+1)*dk) of the packed embeddings.
            for (int i = 0; i < T; ++i) {
                const double* qi = q_cache.v.data() +
                                   (static_cast<size_t>(s) * T + i) * embed + m * dk;
                for (int j = 0; j < T; ++j) {
                    const double* kj = k_cache.v.data() +
                                       (static_cast<size_t>(s) * T + j) * embed + m * dk;
                    double acc = 0.0;
                    for (int d = 0; d < dk; ++d) acc += qi[d] * kj[d];
                    scores[static_cast<size_t>(i) * T + j] = acc * scale;
                }
            }
            softmax_rows(scores.data(), T, T);
            double* attn = attn_cache.v.data() +
                           (static_cast<size_t>(s) * heads + m) * T * T;
            std::copy(scores.begin(), scores.end(), attn);
            for (int i = 0; i < T; ++i) {
                double* zi = z.v.data() + (static_cast<size_t>(s) * T + i) * embed + m * dk;
                for (int j = 0; j < T; ++j) {
                    const double a = attn[static_cast<size_t>(i) * T + j];
                    const double* vj = v_cache.v.data() +
                                       (static_cast<size_t>(s) * T + j) * embed + m * dk;
                    for (int d = 0; d < dk; ++d) zi[d] += a * vj[d];
                }
            }
        }
    return wo.forward(z);
}

Tensor MultiHeadAttention::backward(const Tensor& gy) {
    const int B = q_cache.n, T = q_cache.c;
    Tensor gz = wo.backward(gy);
    Tensor gq = Tensor::zeros_like(q_cache);
    Tensor gk = Tensor::zeros_like(k_cache);
    Tensor gv = Tensor::zeros_like(v_cache);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    std::vector<double> gattn(static_cast<size_t>(T) * T);
    for (int s = 0; s < B; ++s)
        for (int m = 0; m < heads; ++m) {
            const double* attn = attn_cache.v.data() +
                                 (static_cast<size_t>(s) * heads + m) * T * T;
            auto tok = [&](const Tensor& t, int i) {
                return t.v.data() + (static_cast<size_t>(s) * T + i) * embed + m * dk;
            };
            auto tok_mut = [&](Tensor& t, int i) {
                return t.v.data() + (static_cast<size_t>(s) * T + i) * embed + m * dk;
            };
            // d attn and d V
            for (int i = 0; i < T; ++i) {
                const double* gzi = tok(gz, i);
                for (int j = 0; j < T; ++j) {
                    const double* vj = tok(v_cache, j);
                    double acc = 0.0;
                    for (int d = 0; d < dk; ++d) acc += gzi[d] * vj[d];
                    gattn[static_cast<size_t>(i) * T + j] = acc;
                    double* gvj = tok_mut(gv, j);
                    const double a = attn[static_cast<size_t>(i) * T + j];
                    for (int d = 0; d < dk; ++d) gvj[d] += a * gzi[d];
                }
            }
            // softmax backward, then Q/K
            for (int i = 0; i < T; ++i) {
                const double* arow = attn + static_cast<size_t>(i) * T;
                double* grow = gattn.data() + static_cast<size_t>(i) * T;
                double dot_ga = 0.0;
                for (int j = 0; j < T; ++j) dot_ga += grow[j] * arow[j];
                for (int j = 0; j < T; ++j) grow[j] = arow[j] * (grow[j] - dot_ga) * scale;
                double* gqi = tok_mut(gq, i);
                const double* qi = tok(q_cache, i);
                for (int j = 0; j < T; ++j) {
                    const double g = grow[j];
                    const double* kj = tok(k_cache, j);
                    double* gkj = tok_mut(gk, j);
                    for (int d = 0; d < dk; ++d) {
                        gqi[d] += g * kj[d];
                        gkj[d] += g * qi[d];
                    }
                }
            }
        }
    Tensor gx = wq.backward(gq);
    gx += wk.backward(gk);
    gx += wv.backward(gv);
    return gx;
}

void MultiHeadAttention::collect(ParamList& ps, const std::string& prefix) {
    wq.collect(ps, prefix + ".wq");
    wk.collect(ps, prefix + ".wk");
    wv.collect(ps, prefix + ".wv");
    wo.collect(ps, prefix + ".wo");
}

// ---- FeedForward ------------------------------------------------------------------

FeedForward::FeedForward(int embed_dim, int hidden_dim, Rng& rng)
    : fc1(embed_dim, hidden_dim, rng), fc2(hidden_dim, embed_dim, rng) {}

Tensor FeedForward::forward(const Tensor& tokens) {
    pre_cache = fc1.forward(tokens);
    return fc2.forward(relu(pre_cache));
}

Tensor FeedForward::backward(const Tensor& gy) {
    Tensor gh = fc2.backward(gy);
    return fc1.backward(relu_backward(pre_cache, gh));
}

void FeedForward::collect(ParamList& ps, const std::string& prefix) {
    fc1.collect(ps, prefix + ".fc1");
    fc2.collect(ps, prefix + ".fc2");
}

// ---- TransformerLayer ----------------------------------------------------------------

TransformerLayer::TransformerLayer(int embed_dim, int num_heads, int hidden_dim, Rng& rng)
    : norm1(embed_dim), norm2(embed_dim), msa(embed_dim, num_heads, rng),
      ffn(embed_dim, hidden_dim, rng) {}

Tensor TransformerLayer::forward(const Tensor& tokens) {
    Tensor x = tokens + msa.forward(norm1.forward(tokens));
    return x + ffn.forward(norm2.forward(x));
}

Tensor TransformerLayer::backward(const Tensor& gy) {
    Tensor gx = gy + norm2.backward(ffn.backward(gy));
    return gx + norm1.backward(msa.backward(gx));
}

void TransformerLayer::collect(ParamList& ps, const std::string& prefix) {
    norm1.collect(ps, prefix + ".norm1");
    msa.collect(ps, prefix + ".msa");
    norm2.collect(ps, prefix + ".norm2");
    ffn.collect(ps, prefix + ".ffn");
}

// ---- SpatialSelfAttention ---------------------------------------------------------------

SpatialSelfAttention::SpatialSelfAttention(int channels_, int max_kv_tokens_, Rng& rng)
    : channels(channels_), max_kv_tokens(max_kv_tokens_),
      to_q(channels_, channels_, 1, 1, 0, rng),
      to_k(channels_, channels_, 1, 1, 0, rng),
      to_v(channels_, channels_, 1, 1, 0, rng),
      to_out(Conv2d::zero_init(channels_, channels_, 1, 1, 0)) {}

Tensor SpatialSelfAttention::forward(const Tensor& x) {
    h_cache = x.h;
    w_cache = x.w;
    int pool = 1;
    while ((x.h / pool) * (x.w / pool) > max_kv_tokens && x.h % (pool * 2) == 0 &&
           x.w % (pool * 2) == 0)
        pool *= 2;
    pool_cache = pool;

    q_cache = to_q.forward(x);
    Tensor pooled = avg_pool(x, pool);
    k_cache = to_k.forward(pooled);
    v_cache = to_v.forward(pooled);

    const int B = x.n, T = x.h * x.w, P = k_cache.h * k_cache.w;
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
    attn_cache = Tensor(B, 1, T, P);
    Tensor z(B, channels, x.h, x.w);

#pragma omp parallel for schedule(static)
    for (int s = 0; s < B; ++s) {
        // q/k/v planes are [C, tokens]; attention works token-major.
        CMapMat Q(q_cache.sample(s), channels, T);
        CMapMat K(k_cache.sample(s), channels, P);
        CMapMat V(v_cache.sample(s), channels, P);
        MapMat A(attn_cache.sample(s), T, P);
        A.noalias() = (Q.transpose() * K) * scale;
        softmax_rows(attn_cache.sample(s), T, P);
        MapMat Z(z.sample(s), channels, T);
        Z.noalias() = V * A.transpose();
    }
    Tensor out = to_out.forward(z);
    out += x; // residual
    return out;
}

Tensor SpatialSelfAttention::backward(const Tensor& gy) {
    Tensor gz = to_out.backward(gy);
    const int B = gz.n, T = h_cache * w_cache, P = k_cache.h * k_cache.w;
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels));

    Tensor gq = Tensor::zeros_like(q_cache);
    Tensor gk = Tensor::zeros_like(k_cache);
    Tensor gv = Tensor::zeros_like(v_cache);

#pragma omp parallel for schedule(static)
    for (int s = 0; s < B; ++s) {
        CMapMat GZ(gz.sample(s), channels, T);
        CMapMat A(attn_cache.sample(s), T, P);
        CMapMat Q(q_cache.sample(s), channels, T);
        CMapMat K(k_cache.sample(s), channels, P);
        CMapMat V(v_cache.sample(s), channels, P);

        MapMat GV(gv.sample(s), channels, P);
        GV.noalias() = GZ * A;

        RowMat GA = GZ.transpose() * V; // [T, P]
        // softmax rows backward
        for (int t = 0; t < T; ++t) {
            const double d = GA.row(t).dot(A.row(t));
            GA.row(t) = (A.row(t).array() * (GA.row(t).array() - d)).matrix() * scale;
        }
        MapMat GQ(gq.sample(s), channels, T);
        GQ.noalias() = K * GA.transpose();
        MapMat GK(gk.sample(s), channels, P);
        GK.noalias() = Q * GA;
    }

    Tensor gx = to_q.backward(gq);
    Tensor gpooled = to_k.backward(gk);
    gpooled += to_v.backward(gv);
    gx += avg_pool_backward(gpooled, pool_cache, h_cache, w_cache);
    gx += gy; // residual
    return gx;
}

void SpatialSelfAttention::collect(ParamList& ps, const std::string& prefix) {
    to_q.collect(ps, prefix + ".q");
    to_k.collect(ps, prefix + ".k");
    to_v.collect(ps, prefix + ".v");
    to_out.collect(ps, prefix + ".out");
}

} // namespace diffdti::nn
