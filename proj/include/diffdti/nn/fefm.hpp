#pragma once

#include <memory>
#include <vector>

#include "diffdti/nn/layers.hpp"

namespace diffdti::nn {

// Conditional score network: U-Net main path over concat(x_t, y), a
// Transformer feature-enhancement path over y, and per-scale fusion blocks
// u(i) = f(i) * s1(i) + s2(i) on the skip features at scales 1..S-2.
struct NetworkConfig {
    int depth = 4;          // S
    int base_channels = 64;
    std::vector<int> channel_mult; // per level; defaults to {1,2,2,...}
    int res_blocks = 1;     // residual blocks per level
    int x_channels = 1;     // 1 for FA/MD, 3 for Color FA
    int cond_channels = 7;  // b0 + n DWIs
    int height = 192, width = 192;
    int gn_groups = 8;
    int time_embed_dim = 0; // 0 -> 4 * base_channels

    int fen_patch_size = 16;
    int fen_layers = 4;
    int fen_heads = 4;
    int fen_embed_dim = 256;
    int fen_ffn_dim = 0;    // 0 -> 4 * fen_embed_dim
    int dfb_max_kv_tokens = 256;

    // Noise parameterization used for time conditioning and output scaling.
    double sigma_min = 0.01;
    double sigma_max = 348.0;

    void validate() const;
    int channels_at(int level) const; // level is 1-based
    int resolved_time_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
    int resolved_ffn_dim() const { return fen_ffn_dim > 0 ? fen_ffn_dim : 4 * fen_embed_dim; }
    int fused_scales() const { return depth > 2 ? depth - 2 : 0; }
    double sigma_at(double t) const;
};

// Smooth deterministic embedding of diffusion time, built from Fourier
// features of log sigma(t).
struct TimeEmbed {
    int fourier_dim = 0, out_dim = 0;
    std::vector<double> freqs;
    Linear lin1, lin2;
    Tensor fourier_cache, mid_cache;

    TimeEmbed() = default;
    TimeEmbed(int fourier_dim_, int out_dim_, Rng& rng);
    Tensor fourier(const std::vector<double>& log_sigma) const;
    Tensor forward(const std::vector<double>& log_sigma); // -> [B, 1, out_dim, 1]
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

struct ResBlock {
    GroupNorm gn1, gn2;
    Conv2d c1, c2;
    Linear temb_proj;
    bool has_skip = false;
    Conv2d skip;
    Tensor a1_cache, a2_cache, x_cache;

    ResBlock() = default;
    ResBlock(int in_ch, int out_ch, int time_dim, int gn_groups, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& temb_act);
    // Returns gx; accumulates the gradient w.r.t. the activated time embedding.
    Tensor backward(const Tensor& gy, Tensor& gtemb_act);
    void collect(ParamList& ps, const std::string& prefix);
};

// Fusion block: s1 = ReLU(Conv_a(A(h))), s2 = ReLU(Conv_b(A(h))),
// u = f * s1 + s2. Starts as the identity (s1=1, s2=0).
struct Dfb {
    SpatialSelfAttention attn;
    Conv2d conv_s1, conv_s2;
    Tensor f_cache, a_cache, s1_cache, s2_cache, s1_pre_cache, s2_pre_cache;

    Dfb() = default;
    Dfb(int channels, int max_kv_tokens, Rng& rng);
    Tensor forward(const Tensor& f, const Tensor& h);
    // Returns gf and writes gh.
    Tensor backward(const Tensor& gu, Tensor& gh);
    void collect(ParamList& ps, const std::string& prefix);
};

// FEN upsampling head for one fused scale: LayerNorm2d -> transposed conv ->
// GELU -> bilinear resize to the target feature size.
struct FenUpsample {
    LayerNorm2d norm;
    ConvTranspose2d convt;
    int target_h = 0, target_w = 0;
    Tensor pre_gelu_cache;
    int gelu_h = 0, gelu_w = 0;

    FenUpsample() = default;
    FenUpsample(int in_ch, int out_ch, int target_h_, int target_w_, Rng& rng);
    Tensor forward(const Tensor& h);
    Tensor backward(const Tensor& gy);
    void collect(ParamList& ps, const std::string& prefix);
};

enum class FusionMode {
    Learned,  // normal operation
    Identity, // force s1 = 1, s2 = 0 (u = f*1 + 0)
    Disabled, // plain U-Net; FEN is not evaluated at all
};

class FefmNetwork {
public:
    FefmNetwork(const NetworkConfig& config, uint64_t seed);

    // Score estimate s_theta(x_t, y, t); t has one entry per batch element.
    Tensor forward(const Tensor& x_t, const Tensor& y, const std::vector<double>& t);
    // Gradient w.r.t. x_t; parameter gradients accumulate into the registry.
    Tensor backward(const Tensor& gscore);

    const NetworkConfig& config() const { return cfg_; }
    ParamList& params() { return params_; }
    const ParamList& params() const { return params_; }
    size_t parameter_count() const { return param_count(params_); }
    void zero_grad() { zero_grads(params_); }

    FusionMode fusion_mode = FusionMode::Learned;

    // Encoder skip features f(1..S) from the last forward, for inspection.
    const std::vector<Tensor>& skip_features() const { return f_; }
    // FEN multi-scale conditional features h(1..S-2) from the last forward.
    const std::vector<Tensor>& cond_features() const { return h_; }

    // Stand-alone FEN encoding of a conditioning stack: tokens through the
    // transformer stack reshaped to a [B, E, H/p, W/p] map.
    Tensor fen_encode(const Tensor& y);

    TimeEmbed& time_embed() { return temb_; }

private:
    Tensor fen_tokens(const Tensor& y);
    Tensor fen_tokens_backward(const Tensor& gtokens);

    NetworkConfig cfg_;
    std::vector<int> ch_;

    TimeEmbed temb_;
    Conv2d stem_;
    std::vector<std::vector<ResBlock>> enc_;
    std::vector<Conv2d> down_;
    ResBlock mid1_, mid2_;
    std::vector<std::vector<ResBlock>> dec_;
    std::vector<Conv2d> up_conv_;
    GroupNorm out_norm_;
    Conv2d out_conv_;

    Conv2d patch_embed_;
    Tensor pos_embed_, gpos_embed_;
    std::vector<TransformerLayer> fen_layers_;
    std::vector<FenUpsample> fen_up_;
    std::vector<Dfb> dfb_;

    ParamList params_;

    // forward caches
    std::vector<double> sigma_;
    std::vector<double> in_scale_;
    Tensor temb_out_, temb_act_;
    std::vector<Tensor> f_, u_, h_;
    Tensor out_act_in_;
    int token_grid_h_ = 0, token_grid_w_ = 0;
    Tensor fen_map_;                  // reshaped transformer output
    int batch_ = 0;
};

} // namespace diffdti::nn
