#pragma once

#include "diffdti/nn/tensor.hpp"

namespace diffdti::nn {

// ---- functional pieces -----------------------------------------------------

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& gy);
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& gy);
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& gy);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int c_a, Tensor& ga, Tensor& gb);

Tensor avg_pool(const Tensor& x, int factor);
Tensor avg_pool_backward(const Tensor& gy, int factor, int in_h, int in_w);

Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& gy);

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
Tensor bilinear_resize_backward(const Tensor& gy, int in_h, int in_w);

// Row-wise softmax over the last dimension of [rows, cols] flattened data.
void softmax_rows(double* data, int rows, int cols);

// ---- parameterized layers ---------------------------------------------------
// Every layer caches what its backward needs; backward accumulates parameter
// gradients and returns the input gradient. collect() exposes parameters under
// a dotted prefix.

struct Linear {
    int in = 0, out = 0;
    Tensor w, b, gw, gb;
    Tensor x_cache;

    Linear() = default;
    Linear(int in_dim, int out_dim, Rng& rng, double scale = -1.0);
    // x: [N, C, in, 1] -> [N, C, out, 1]; rows are N*C.
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
    Tensor w, b, gw, gb; // w: [out_ch, in_ch, k, k]
    Tensor x_cache;

    Conv2d() = default;
    Conv2d(int in_c, int out_c, int kernel, int stride_, int pad_, Rng& rng,
           double scale = -1.0);
    static Conv2d zero_init(int in_c, int out_c, int kernel, int stride_, int pad_);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
    int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }
};

// Transposed convolution with kernel = stride (used by the FEN upsampling
// module to double resolution).
struct ConvTranspose2d {
    int in_ch = 0, out_ch = 0, k = 2;
    Tensor w, b, gw, gb; // w: [in_ch, out_ch, k, k]
    Tensor x_cache;

    ConvTranspose2d() = default;
    ConvTranspose2d(int in_c, int out_c, int kernel, Rng& rng);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-6;
    Tensor gamma, beta, ggamma, gbeta;
    Tensor x_cache;
    std::vector<double> mean_cache, istd_cache; // per (n, group)

    GroupNorm() = default;
    GroupNorm(int channels_, int groups_);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

// Normalizes over the embedding axis of token tensors [B, T, E, 1].
struct LayerNorm {
    int dim = 0;
    double eps = 1e-6;
    Tensor gamma, beta, ggamma, gbeta;
    Tensor x_cache;
    std::vector<double> mean_cache, istd_cache; // per row

    LayerNorm() = default;
    explicit LayerNorm(int dim_);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

// Channel-wise layer normalization of a feature map: statistics over C at each
// spatial location, per-channel affine.
struct LayerNorm2d {
    int channels = 0;
    double eps = 1e-6;
    Tensor gamma, beta, ggamma, gbeta;
    Tensor x_cache;
    std::vector<double> mean_cache, istd_cache; // per (n, h, w)

    LayerNorm2d() = default;
    explicit LayerNorm2d(int channels_);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

// Scaled dot-product multi-head self-attention over [B, T, E, 1]:
// Z_m = softmax(Q_m K_m^T / sqrt(d_k)) V_m, heads concatenated and projected.
struct MultiHeadAttention {
    int embed = 0, heads = 1, dk = 0;
    Linear wq, wk, wv, wo;
    Tensor q_cache, k_cache, v_cache, attn_cache; // attn: [B, heads, T, T]

    MultiHeadAttention() = default;
    MultiHeadAttention(int embed_dim, int num_heads, Rng& rng);
    Tensor forward(const Tensor& tokens);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);

    // Last attention probabilities, exposed for inspection.
    const Tensor& attention() const { return attn_cache; }
};

// Token-wise feed-forward: max(0, Z W1 + b1) W2 + b2.
struct FeedForward {
    Linear fc1, fc2;
    Tensor pre_cache;

    FeedForward() = default;
    FeedForward(int embed_dim, int hidden_dim, Rng& rng);
    Tensor forward(const Tensor& tokens);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

// Pre-norm encoder layer: x + MSA(Norm(x)), then x + FFN(Norm(x)).
struct TransformerLayer {
    LayerNorm norm1, norm2;
    MultiHeadAttention msa;
    FeedForward ffn;

    TransformerLayer() = default;
    TransformerLayer(int embed_dim, int num_heads, int hidden_dim, Rng& rng);
    Tensor forward(const Tensor& tokens);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

// Single-head spatial self-attention over a feature map with a residual
// output projection. Keys/values come from an average-pooled grid so the
// attention matrix stays bounded at high resolutions; queries keep full
// resolution.
struct SpatialSelfAttention {
    int channels = 0;
    int max_kv_tokens = 256;
    Conv2d to_q, to_k, to_v, to_out; // all 1x1
    Tensor q_cache, k_cache, v_cache, attn_cache;
    int pool_cache = 1, h_cache = 0, w_cache = 0;

    SpatialSelfAttention() = default;
    SpatialSelfAttention(int channels_, int max_kv_tokens_, Rng& rng);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

} // namespace diffdti::nn
