#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffdti/nn/fefm.hpp"
#include "test_util.hpp"

using namespace diffdti;
using namespace diffdti::nn;
using testutil::fill_randn;
using testutil::Probe;

namespace {

NetworkConfig small_config(int size = 32, int x_ch = 1, int cond_ch = 3) {
    NetworkConfig cfg;
    cfg.depth = 4;
    cfg.base_channels = 8;
    cfg.channel_mult = {1, 2, 2, 2};
    cfg.res_blocks = 1;
    cfg.x_channels = x_ch;
    cfg.cond_channels = cond_ch;
    cfg.height = cfg.width = size;
    cfg.gn_groups = 4;
    cfg.fen_patch_size = 8;
    cfg.fen_layers = 1;
    cfg.fen_heads = 2;
    cfg.fen_embed_dim = 16;
    cfg.dfb_max_kv_tokens = 64;
    return cfg;
}

void randomize_params(FefmNetwork& net, Rng& rng, double scale = 0.05) {
    for (auto& p : net.params())
        for (auto& v : p.value->v) v += scale * rng.gauss();
}

} // namespace

TEST_CASE("score_forward preserves the input shape for 1- and 3-channel targets") {
    for (int x_ch : {1, 3}) {
        NetworkConfig cfg = small_config(64, x_ch, 4);
        cfg.fen_patch_size = 16;
        FefmNetwork net(cfg, 7);
        Rng rng(1);
        Tensor x(2, x_ch, 64, 64), y(2, 4, 64, 64);
        fill_randn(x, rng);
        fill_randn(y, rng);
        Tensor s = net.forward(x, y, {0.5, 0.9});
        CHECK(s.n == 2);
        CHECK(s.c == x_ch);
        CHECK(s.h == 64);
        CHECK(s.w == 64);
        CHECK(s.all_finite());
    }
}

TEST_CASE("encoder features halve spatially per level") {
    NetworkConfig cfg = small_config(64);
    cfg.fen_patch_size = 16;
    FefmNetwork net(cfg, 3);
    Rng rng(2);
    Tensor x(1, 1, 64, 64), y(1, 3, 64, 64);
    fill_randn(x, rng);
    fill_randn(y, rng);
    net.forward(x, y, {0.4});
    const auto& f = net.skip_features();
    REQUIRE(f.size() == 4);
    CHECK(f[0].h == 64);
    CHECK(f[1].h == 32);
    CHECK(f[2].h == 16);
    CHECK(f[3].h == 8);
}

TEST_CASE("doubling base channels doubles every feature width") {
    NetworkConfig cfg = small_config(32);
    FefmNetwork net1(cfg, 5);
    cfg.base_channels *= 2;
    FefmNetwork net2(cfg, 5);
    Rng rng(3);
    Tensor x(1, 1, 32, 32), y(1, 3, 32, 32);
    fill_randn(x, rng);
    fill_randn(y, rng);
    net1.forward(x, y, {0.5});
    net2.forward(x, y, {0.5});
    for (size_t i = 0; i < net1.skip_features().size(); ++i)
        CHECK(net2.skip_features()[i].c == 2 * net1.skip_features()[i].c);
}

TEST_CASE("fusion identity: forced s1=1, s2=0 equals the plain U-Net bitwise") {
    NetworkConfig cfg = small_config(32);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        FefmNetwork net(cfg, 100 + trial);
        Tensor x(1, 1, 32, 32), y(1, 3, 32, 32);
        fill_randn(x, rng);
        fill_randn(y, rng);

        net.fusion_mode = FusionMode::Identity;
        Tensor a = net.forward(x, y, {0.7});
        net.fusion_mode = FusionMode::Disabled;
        Tensor b = net.forward(x, y, {0.7});
        CHECK(a.v == b.v); // bitwise
    }
}

TEST_CASE("learned fusion changes the output") {
    NetworkConfig cfg = small_config(32);
    FefmNetwork net(cfg, 11);
    Rng rng(5);
    randomize_params(net, rng); // move DFB convs off the identity initialization
    Tensor x(1, 1, 32, 32), y(1, 3, 32, 32);
    fill_randn(x, rng);
    fill_randn(y, rng);
    net.fusion_mode = FusionMode::Learned;
    Tensor a = net.forward(x, y, {0.7});
    net.fusion_mode = FusionMode::Disabled;
    Tensor b = net.forward(x, y, {0.7});
    CHECK(a.v != b.v);
}

TEST_CASE("conditioning sensitivity: distinct y give distinct outputs") {
    NetworkConfig cfg = small_config(32);
    FefmNetwork net(cfg, 21);
    Rng rng(6);
    randomize_params(net, rng);
    Tensor x(1, 1, 32, 32), y1(1, 3, 32, 32), y2(1, 3, 32, 32);
    fill_randn(x, rng);
    fill_randn(y1, rng);
    fill_randn(y2, rng);
    Tensor a = net.forward(x, y1, {0.5});
    Tensor b = net.forward(x, y2, {0.5});
    double diff = 0;
    for (size_t i = 0; i < a.v.size(); ++i) diff += std::fabs(a.v[i] - b.v[i]);
    CHECK(diff > 1e-8);
}

TEST_CASE("FEN token grid and multi-scale conditional features") {
    NetworkConfig cfg = small_config(64);
    cfg.fen_patch_size = 16;
    FefmNetwork net(cfg, 31);
    Rng rng(7);
    Tensor y(1, 3, 64, 64);
    fill_randn(y, rng);
    Tensor h = net.fen_encode(y);
    CHECK(h.c == cfg.fen_embed_dim);
    CHECK(h.h == 4); // (64/16)^2 = 16 tokens on a 4x4 grid
    CHECK(h.w == 4);

    Tensor x(1, 1, 64, 64);
    fill_randn(x, rng);
    net.fusion_mode = FusionMode::Learned;
    net.forward(x, y, {0.3});
    const auto& cond = net.cond_features();
    REQUIRE(cond.size() == 2); // S - 2
    CHECK(cond[0].h == net.skip_features()[0].h);
    CHECK(cond[0].w == net.skip_features()[0].w);
    CHECK(cond[1].h == net.skip_features()[1].h);
    CHECK(cond[1].c == net.skip_features()[1].c);
}

TEST_CASE("FEN is permutation-equivariant once positional embeddings are removed") {
    NetworkConfig cfg = small_config(32); // patch 8 -> 4x4 token grid
    FefmNetwork net(cfg, 41);
    for (auto& p : net.params())
        if (p.name == "fen.pos_embed") p.value->fill(0.0);

    Rng rng(8);
    Tensor y(1, 3, 32, 32);
    fill_randn(y, rng);

    // swap two patch blocks of the input image
    Tensor y_swapped = y;
    const int p = cfg.fen_patch_size;
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                std::swap(y_swapped.at(0, c, dy, dx), y_swapped.at(0, c, dy, p + dx));

    Tensor h1 = net.fen_encode(y);
    Tensor h2 = net.fen_encode(y_swapped);
    // token (0,0) of the swapped input equals token (0,1) of the original
    for (int e = 0; e < cfg.fen_embed_dim; ++e) {
        CHECK(h2.at(0, e, 0, 0) == doctest::Approx(h1.at(0, e, 0, 1)).epsilon(1e-9));
        CHECK(h2.at(0, e, 0, 1) == doctest::Approx(h1.at(0, e, 0, 0)).epsilon(1e-9));
        CHECK(h2.at(0, e, 1, 1) == doctest::Approx(h1.at(0, e, 1, 1)).epsilon(1e-9));
    }
}

TEST_CASE("DFB: identity at initialization and modulation arithmetic") {
    Rng rng(9);
    Dfb dfb(4, 64, rng);
    Tensor f(1, 4, 8, 8), h(1, 4, 8, 8);
    fill_randn(f, rng);
    fill_randn(h, rng);

    // fresh block: conv_s1 = 0x + 1, conv_s2 = 0x + 0 -> u = f
    Tensor u = dfb.forward(f, h);
    for (size_t i = 0; i < f.v.size(); ++i) CHECK(u.v[i] == doctest::Approx(f.v[i]).epsilon(1e-12));

    // Eq: u = f * s1 + s2 voxelwise
    CHECK(2.0 * 3.0 + (-1.0) == 5.0);

    // conv-path arithmetic with constant scale/shift
    dfb.conv_s1.b.fill(3.0);
    dfb.conv_s2.b.fill(1.5);
    Tensor u2 = dfb.forward(f, h);
    for (size_t i = 0; i < f.v.size(); ++i)
        CHECK(u2.v[i] == doctest::Approx(f.v[i] * 3.0 + 1.5).epsilon(1e-12));
}

TEST_CASE("DFB is affine in the main-path features for fixed conditioning") {
    Rng rng(10);
    Dfb dfb(2, 64, rng);
    fill_randn(dfb.conv_s1.w, rng, 0.2);
    fill_randn(dfb.conv_s2.w, rng, 0.2);
    fill_randn(dfb.attn.to_out.w, rng, 0.2);

    Tensor h(1, 2, 6, 6), f1(1, 2, 6, 6), f2(1, 2, 6, 6);
    fill_randn(h, rng);
    fill_randn(f1, rng);
    fill_randn(f2, rng);
    const double a = 1.7, b = -0.4;

    Tensor fmix = f1 * a + f2 * b;
    Tensor u_mix = dfb.forward(fmix, h);
    Tensor u1 = dfb.forward(f1, h);
    Tensor u2 = dfb.forward(f2, h);
    Tensor zero = Tensor::zeros_like(f1);
    Tensor s2 = dfb.forward(zero, h); // u(0) = s2

    // u(a f1 + b f2) = a u(f1) + b u(f2) - (a + b - 1) s2
    for (size_t i = 0; i < u_mix.v.size(); ++i) {
        const double expect = a * u1.v[i] + b * u2.v[i] - (a + b - 1.0) * s2.v[i];
        CHECK(u_mix.v[i] == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("time embedding: deterministic, smooth, right dimension") {
    Rng rng(11);
    TimeEmbed te(16, 24, rng);
    Tensor a = te.forward({std::log(1.5)});
    Tensor b = te.forward({std::log(1.5)});
    CHECK(a.v == b.v);
    CHECK(a.h == 24);

    NetworkConfig cfg = small_config(32);
    FefmNetwork net(cfg, 51);
    Rng rng2(12);
    Tensor x(1, 1, 32, 32), y(1, 3, 32, 32);
    fill_randn(x, rng2);
    fill_randn(y, rng2);

    // continuity through the whole embedding path
    const double t0 = 0.437;
    TimeEmbed& emb = net.time_embed();
    const double s0 = std::log(cfg.sigma_at(t0));
    const double s1 = std::log(cfg.sigma_at(t0 + 1e-9));
    Tensor e0 = emb.forward({s0});
    Tensor e1 = emb.forward({s1});
    double max_diff = 0;
    for (size_t i = 0; i < e0.v.size(); ++i)
        max_diff = std::max(max_diff, std::fabs(e0.v[i] - e1.v[i]));
    CHECK(max_diff < 1e-6);
}

TEST_CASE("parameter count is a pure function of the configuration") {
    NetworkConfig cfg = small_config(32);
    FefmNetwork a(cfg, 1), b(cfg, 999);
    CHECK(a.parameter_count() == b.parameter_count());
    CHECK(a.params().size() == b.params().size());
    for (size_t i = 0; i < a.params().size(); ++i)
        CHECK(a.params()[i].name == b.params()[i].name);
}

TEST_CASE("full network gradients match finite differences on a downsized config") {
    NetworkConfig cfg = small_config(16);
    cfg.depth = 3;
    cfg.channel_mult = {1, 2, 2};
    cfg.fen_patch_size = 8;
    FefmNetwork net(cfg, 61);
    Rng rng(13);
    randomize_params(net, rng, 0.05);

    Tensor x(2, 1, 16, 16), y(2, 3, 16, 16);
    fill_randn(x, rng);
    fill_randn(y, rng);
    std::vector<double> t = {0.35, 0.8};

    net.fusion_mode = FusionMode::Learned;
    Tensor out = net.forward(x, y, t);
    Probe probe(out, rng);
    net.zero_grad();
    Tensor gx = net.backward(probe.weights);

    auto eval = [&] { return probe(net.forward(x, y, t)); };

    // input gradient at scattered coordinates
    Rng pick(14);
    for (int k = 0; k < 10; ++k) {
        const size_t i = pick.uniform_index(x.v.size());
        const double fd = testutil::fd_at(x.v, i, eval, 1e-5);
        const double denom = std::max({std::fabs(fd), std::fabs(gx.v[i]), 1e-4});
        CHECK(std::fabs(fd - gx.v[i]) / denom < 1e-3);
    }
    // parameter gradients across all modules
    for (int k = 0; k < 30; ++k) {
        auto& p = net.params()[pick.uniform_index(net.params().size())];
        const size_t i = pick.uniform_index(p.value->size());
        const double fd = testutil::fd_at(p.value->v, i, eval, 1e-5);
        const double ad = p.grad->v[i];
        const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-4});
        INFO("param ", p.name, " coord ", i);
        CHECK(std::fabs(fd - ad) / denom < 1e-3);
    }
}

TEST_CASE("configuration violations are reported as config errors") {
    NetworkConfig cfg = small_config(30); // not divisible by 2^(S-1)
    CHECK_THROWS_AS(cfg.validate(), Error);

    NetworkConfig cfg2 = small_config(32);
    cfg2.fen_heads = 3; // 16 % 3 != 0
    CHECK_THROWS_AS(cfg2.validate(), Error);

    NetworkConfig cfg3 = small_config(32);
    FefmNetwork net(cfg3, 71);
    Tensor x(1, 1, 16, 16), y(1, 3, 16, 16); // wrong spatial size
    CHECK_THROWS_AS(net.forward(x, y, {0.5}), Error);

    Tensor x2(1, 1, 32, 32), y2(1, 5, 32, 32); // wrong channel count
    CHECK_THROWS_AS(net.forward(x2, y2, {0.5}), Error);
}

TEST_CASE("score output scales like 1/sigma at extreme noise levels") {
    // the raw body output is O(1); the score must shrink with sigma
    NetworkConfig cfg = small_config(32);
    FefmNetwork net(cfg, 81);
    Rng rng(15);
    randomize_params(net, rng, 0.05);
    Tensor x(1, 1, 32, 32), y(1, 3, 32, 32);
    fill_randn(x, rng);
    fill_randn(y, rng);
    Tensor s_low = net.forward(x, y, {0.0});  // sigma = 0.01
    Tensor s_high = net.forward(x, y, {1.0}); // sigma = 348
    double n_low = 0, n_high = 0;
    for (double v : s_low.v) n_low += v * v;
    for (double v : s_high.v) n_high += v * v;
    CHECK(n_low > n_high); // 1/sigma scaling dominates
}
