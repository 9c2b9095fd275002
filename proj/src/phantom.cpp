#include "diffdti/phantom.hpp"

#include <cmath>

namespace diffdti {

void PhantomSpec::validate() const {
    if (size < 8) fail(ErrorKind::Config, "phantom: size must be >= 8");
    if (nslices < 1) fail(ErrorKind::Config, "phantom: nslices must be >= 1");
    if (rician_snr < 0.0) fail(ErrorKind::Config, "phantom: rician_snr must be >= 0");
    for (const auto& r : regions) {
        if (r.fa < 0.0 || r.fa > 1.0) fail(ErrorKind::Config, "phantom: region FA outside [0,1]");
        if (r.md < 0.0) fail(ErrorKind::Config, "phantom: region MD must be >= 0");
        if (r.cx < 0 || r.cx >= size || r.cy < 0 || r.cy >= size)
            fail(ErrorKind::Config, "phantom: region center outside the grid");
    }
    table.validate();
}

DiffusionTensor prolate_tensor(double fa, double md, double orient) {
    // lambda_par = md (1 + 2 d), lambda_perp = md (1 - d) with
    // d = fa * sqrt(3 / (9 - 6 fa^2)) so the triple hits the requested FA.
    const double d = fa * std::sqrt(3.0 / (9.0 - 6.0 * fa * fa));
    const double lpar = md * (1.0 + 2.0 * d);
    const double lperp = md * (1.0 - d);
    const double ex = std::cos(orient), ey = std::sin(orient);
    DiffusionTensor t;
    t.xx = lperp + (lpar - lperp) * ex * ex;
    t.yy = lperp + (lpar - lperp) * ey * ey;
    t.zz = lperp;
    t.xy = (lpar - lperp) * ex * ey;
    t.xz = 0.0;
    t.yz = 0.0;
    return t;
}

GradientTable make_directions(int n_dwi, int n_b0, double bvalue, uint64_t seed) {
    GradientTable table;
    for (int i = 0; i < n_b0; ++i) {
        table.directions.push_back({0.0, 0.0, 0.0});
        table.bvalues.push_back(0.0);
    }
    // Fibonacci hemisphere gives a well-conditioned spread; jitter by seed so
    // different tables stay distinguishable in tests.
    Rng rng(seed);
    const double offset = rng.uniform() * 0.1;
    const double golden = 2.39996322972865332; // 2*pi*(1 - 1/phi)
    for (int i = 0; i < n_dwi; ++i) {
        const double zc = (i + 0.5) / n_dwi;        // (0,1]: upper hemisphere
        const double r = std::sqrt(1.0 - zc * zc);
        const double phi = golden * i + offset;
        table.directions.push_back({r * std::cos(phi), r * std::sin(phi), zc});
        table.bvalues.push_back(bvalue);
    }
    table.validate();
    return table;
}

std::vector<PhantomRegion> random_regions(int grid, int count, Rng& rng) {
    std::vector<PhantomRegion> regions;
    const double g = grid;
    for (int i = 0; i < count; ++i) {
        PhantomRegion r;
        r.cx = rng.uniform(0.25 * g, 0.75 * g);
        r.cy = rng.uniform(0.25 * g, 0.75 * g);
        r.rx = rng.uniform(0.06 * g, 0.18 * g);
        r.ry = rng.uniform(0.04 * g, 0.12 * g);
        r.tilt = rng.uniform(0.0, 3.14159265358979);
        r.fa = rng.uniform(0.3, 0.9);
        r.md = rng.uniform(0.6e-3, 1.0e-3);
        r.orient = rng.uniform(0.0, 3.14159265358979);
        r.s0 = rng.uniform(900.0, 1100.0);
        regions.push_back(r);
    }
    return regions;
}

PhantomData generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int n = spec.size, nz = spec.nslices;
    const size_t nvox = static_cast<size_t>(n) * n * nz;

    PhantomData out;
    out.truth = TensorField(n, n, nz);
    out.analytic_fa = Volume(n, n, nz, 1);
    out.analytic_md = Volume(n, n, nz, 1);
    out.analytic_cfa = Volume(n, n, nz, 3);
    out.mask.assign(nvox, 0);
    Volume s0(n, n, nz, 1);

    const double head_r = spec.head_radius_frac * n;
    const double c0 = 0.5 * (n - 1);

    for (int z = 0; z < nz; ++z) {
        // Per-slice twist keeps slices of one subject distinct.
        const double twist = (z - 0.5 * (nz - 1)) * 0.04;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const size_t v = out.truth.index(x, y, z);
                const double dx = x - c0, dy = y - c0;
                if (dx * dx + dy * dy > head_r * head_r) {
                    out.truth.mask[v] = 0;
                    continue;
                }
                out.mask[v] = 1;
                double fa = 0.0, md = spec.background_md, orient = 0.0;
                double sig = spec.background_s0;
                for (const auto& r : spec.regions) {
                    const double ct = std::cos(r.tilt + twist), st = std::sin(r.tilt + twist);
                    const double rcx = c0 + (r.cx - c0) * std::cos(twist) -
                                       (r.cy - c0) * std::sin(twist);
                    const double rcy = c0 + (r.cx - c0) * std::sin(twist) +
                                       (r.cy - c0) * std::cos(twist);
                    const double px = x - rcx, py = y - rcy;
                    const double u = (px * ct + py * st) / r.rx;
                    const double w = (-px * st + py * ct) / r.ry;
                    if (u * u + w * w <= 1.0) {
                        fa = r.fa;
                        md = r.md;
                        orient = r.orient + twist;
                        sig = r.s0;
                    }
                }
                out.truth.tensors[v] = prolate_tensor(fa, md, orient);
                s0.data[v] = sig;
                out.analytic_fa.data[v] = fa;
                out.analytic_md.data[v] =
                    std::clamp(md / kMdScale, 0.0, 1.0);
                out.analytic_cfa.data[v] = fa * std::fabs(std::cos(orient));
                out.analytic_cfa.data[nvox + v] =
                    fa * std::fabs(std::sin(orient));
                out.analytic_cfa.data[2 * nvox + v] = 0.0;
            }
    }

    out.study = dwi_forward_model(out.truth, s0, spec.table);

    if (spec.rician_snr > 0.0) {
        // Magnitude of a complex Gaussian perturbation around the clean signal.
        double mean_b0 = 0.0;
        size_t count = 0;
        for (size_t v = 0; v < nvox; ++v)
            if (out.mask[v]) {
                mean_b0 += s0.data[v];
                ++count;
            }
        mean_b0 /= std::max<size_t>(count, 1);
        const double noise_sd = mean_b0 / spec.rician_snr;
        Rng rng = Rng(spec.seed).fork(0x51c1);
        for (auto& sample : out.study.volumes.data) {
            const double re = sample + noise_sd * rng.gauss();
            const double im = noise_sd * rng.gauss();
            sample = std::sqrt(re * re + im * im);
        }
    }
    return out;
}

} // namespace diffdti
