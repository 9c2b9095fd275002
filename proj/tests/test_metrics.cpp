#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "diffdti/metrics.hpp"
#include "diffdti/rng.hpp"

using namespace diffdti;

namespace {

Volume make_image(int n, double value = 0.0) {
    Volume v(n, n, 1, 1);
    for (auto& x : v.data) x = value;
    return v;
}

std::vector<uint8_t> full_mask(const Volume& v) { return std::vector<uint8_t>(v.nvox(), 1); }

// Direct sliding-window SSIM, written independently of the library path.
double ssim_oracle(const Volume& ref, const Volume& rec, int win, double c1, double c2) {
    const int r = win / 2;
    double total = 0;
    int count = 0;
    for (int y = r; y < ref.ny - r; ++y)
        for (int x = r; x < ref.nx - r; ++x) {
            double ma = 0, mb = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    ma += ref.at(x + dx, y + dy, 0);
                    mb += rec.at(x + dx, y + dy, 0);
                }
            const int n = win * win;
            ma /= n;
            mb /= n;
            double va = 0, vb = 0, cov = 0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const double da = ref.at(x + dx, y + dy, 0) - ma;
                    const double db = rec.at(x + dx, y + dy, 0) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

} // namespace

TEST_CASE("psnr: identical images give the infinite sentinel") {
    Volume ref = make_image(8, 0.5);
    CHECK(std::isinf(psnr(ref, ref, full_mask(ref))));
}

TEST_CASE("psnr: MAX 1, MSE 0.01 gives exactly 20 dB") {
    Volume ref = make_image(8, 1.0);
    Volume rec = make_image(8, 0.9); // (1 - 0.9)^2 = 0.01 everywhere
    CHECK(psnr(ref, rec, full_mask(ref)) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("psnr: Gaussian noise of std 0.1 on a unit-max image gives about 20 dB") {
    Rng rng(3);
    double mean_psnr = 0;
    const int trials = 10;
    for (int trial = 0; trial < trials; ++trial) {
        Volume ref(64, 64, 1, 1);
        for (auto& v : ref.data) v = rng.uniform();
        ref.data[0] = 1.0; // pin the max
        Volume rec = ref;
        for (auto& v : rec.data) v += 0.1 * rng.gauss();
        mean_psnr += psnr(ref, rec, full_mask(ref));
    }
    mean_psnr /= trials;
    CHECK(std::fabs(mean_psnr - 20.0) < 0.2);
}

TEST_CASE("psnr decreases monotonically with noise variance (in expectation)") {
    Rng rng(4);
    Volume ref(64, 64, 1, 1);
    for (auto& v : ref.data) v = rng.uniform();
    double prev = 1e300;
    for (double sd : {0.02, 0.05, 0.1, 0.2, 0.4}) {
        double mean = 0;
        for (int trial = 0; trial < 5; ++trial) {
            Volume rec = ref;
            for (auto& v : rec.data) v += sd * rng.gauss();
            mean += psnr(ref, rec, full_mask(ref));
        }
        mean /= 5;
        CHECK(mean < prev);
        prev = mean;
    }
}

TEST_CASE("psnr rejects an empty mask") {
    Volume ref = make_image(4);
    std::vector<uint8_t> empty(ref.nvox(), 0);
    CHECK_THROWS_AS(psnr(ref, ref, empty), Error);
}

TEST_CASE("ssim: identical images give exactly 1") {
    Rng rng(5);
    Volume ref(16, 16, 1, 1);
    for (auto& v : ref.data) v = rng.uniform();
    MetricConfig cfg;
    CHECK(ssim(ref, ref, cfg, full_mask(ref)) == 1.0);
}

TEST_CASE("ssim: a large constant shift is penalized but stays positive") {
    Rng rng(6);
    Volume ref(16, 16, 1, 1);
    for (auto& v : ref.data) v = 0.2 + 0.1 * rng.uniform();
    Volume rec = ref;
    for (auto& v : rec.data) v += 0.5;
    MetricConfig cfg;
    const double s = ssim(ref, rec, cfg, full_mask(ref));
    CHECK(s < 1.0);
    CHECK(s > 0.0);
}

TEST_CASE("ssim agrees with an independent direct implementation to 1e-8") {
    Rng rng(7);
    Volume ref(8, 8, 1, 1), rec(8, 8, 1, 1);
    for (auto& v : ref.data) v = rng.uniform();
    for (size_t i = 0; i < rec.data.size(); ++i)
        rec.data[i] = 0.7 * ref.data[i] + 0.1 + 0.05 * rng.gauss();

    MetricConfig cfg; // 7x7 uniform window
    const double lib = ssim(ref, rec, cfg, full_mask(ref));
    const double oracle = ssim_oracle(ref, rec, cfg.ssim_window, cfg.c1, cfg.c2);
    CHECK(std::fabs(lib - oracle) < 1e-8);

    // symmetric in its arguments
    CHECK(ssim(rec, ref, cfg, full_mask(ref)) == doctest::Approx(lib).epsilon(1e-12));
}

TEST_CASE("nmse identities") {
    Rng rng(8);
    Volume ref(8, 8, 1, 1);
    for (auto& v : ref.data) v = 0.1 + rng.uniform();
    auto mask = full_mask(ref);

    CHECK(nmse(ref, ref, mask) == 0.0);

    Volume zeros = make_image(8, 0.0);
    CHECK(nmse(ref, zeros, mask) == doctest::Approx(1.0).epsilon(1e-12));

    Volume twice = ref;
    for (auto& v : twice.data) v *= 2.0;
    CHECK(nmse(ref, twice, mask) == doctest::Approx(1.0).epsilon(1e-12));

    // nmse(ref, a ref) = (1 - a)^2
    for (double a : {0.5, 1.5, 3.0}) {
        Volume scaled = ref;
        for (auto& v : scaled.data) v *= a;
        CHECK(nmse(ref, scaled, mask) == doctest::Approx((1 - a) * (1 - a)).epsilon(1e-12));
    }

    CHECK_THROWS_AS(nmse(zeros, ref, mask), Error); // all-zero reference
}

TEST_CASE("metrics pool channels for multi-channel maps") {
    Rng rng(9);
    Volume ref(8, 8, 1, 3), rec(8, 8, 1, 3);
    for (auto& v : ref.data) v = rng.uniform();
    rec = ref;
    rec.data[5] += 0.3; // perturb one channel only
    std::vector<uint8_t> mask(ref.nvox(), 1);
    CHECK(std::isfinite(psnr(ref, rec, mask)));
    CHECK(nmse(ref, rec, mask) > 0.0);
}

TEST_CASE("evaluate_run aggregates per map type") {
    Rng rng(10);
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 3; ++i) {
        EvalPair p;
        p.id = "sub-" + std::to_string(i);
        p.map_type = "fa";
        p.reference = Volume(16, 16, 1, 1);
        for (auto& v : p.reference.data) v = rng.uniform();
        p.generated = p.reference;
        p.mask = full_mask(p.reference);
        pairs.push_back(std::move(p));
    }
    MetricConfig cfg;
    EvalReport report = evaluate_run(pairs, cfg);
    REQUIRE(report.rows.size() == 3); // one map type x three metrics
    for (const auto& row : report.rows) {
        if (row.metric == "psnr") CHECK(std::isinf(row.mean));
        if (row.metric == "ssim") CHECK(row.mean == 1.0);
        if (row.metric == "nmse") CHECK(row.mean == 0.0);
        CHECK(row.n == 3);
    }
    // infinite PSNR serializes as "inf"
    CHECK(report.to_csv().find("fa,psnr,inf") != std::string::npos);
}

TEST_CASE("evaluate_run: single pair has zero std, row count scales with map types") {
    Rng rng(11);
    std::vector<EvalPair> pairs;
    for (const char* map : {"fa", "md"}) {
        EvalPair p;
        p.id = "s";
        p.map_type = map;
        p.reference = Volume(16, 16, 1, 1);
        for (auto& v : p.reference.data) v = 0.2 + 0.5 * rng.uniform();
        p.generated = p.reference;
        for (auto& v : p.generated.data) v += 0.01 * rng.gauss();
        p.mask = full_mask(p.reference);
        pairs.push_back(std::move(p));
    }
    EvalReport report = evaluate_run(pairs, MetricConfig{});
    CHECK(report.rows.size() == 6);
    for (const auto& row : report.rows) CHECK(row.stddev == 0.0);
}

TEST_CASE("metric config is validated") {
    MetricConfig bad;
    bad.c1 = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    MetricConfig even;
    even.ssim_window = 8;
    CHECK_THROWS_AS(even.validate(), Error);
}
