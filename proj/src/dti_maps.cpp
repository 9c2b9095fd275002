#include "diffdti/dti_maps.hpp"

#include <algorithm>
#include <cmath>

namespace diffdti {

const char* map_type_name(MapType t) {
    switch (t) {
        case MapType::FA: return "fa";
        case MapType::MD: return "md";
        case MapType::ColorFA: return "cfa";
    }
    return "?";
}

MapType map_type_from_name(const std::string& name) {
    if (name == "fa" || name == "FA") return MapType::FA;
    if (name == "md" || name == "MD") return MapType::MD;
    if (name == "cfa" || name == "colorfa" || name == "ColorFA") return MapType::ColorFA;
    fail(ErrorKind::Config, "unknown map type: " + name + " (expected fa, md, or cfa)");
}

int map_channels(MapType t) { return t == MapType::ColorFA ? 3 : 1; }

double compute_fa(const EigenSystem& eig) {
    const double l1 = eig.lambda[0], l2 = eig.lambda[1], l3 = eig.lambda[2];
    const double norm_sq = l1 * l1 + l2 * l2 + l3 * l3;
    if (norm_sq == 0.0) return 0.0; // background convention
    const double mean = (l1 + l2 + l3) / 3.0;
    const double dev_sq = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) +
                          (l3 - mean) * (l3 - mean);
    double fa = std::sqrt(1.5 * dev_sq / norm_sq);
    return std::min(fa, 1.0);
}

double compute_md(const EigenSystem& eig) {
    return (eig.lambda[0] + eig.lambda[1] + eig.lambda[2]) / 3.0;
}

Vec3 compute_color_fa(const EigenSystem& eig) {
    const double fa = compute_fa(eig);
    const Vec3& v1 = eig.vectors[0];
    return {fa * std::fabs(v1[0]), fa * std::fabs(v1[1]), fa * std::fabs(v1[2])};
}

DtiMapSet derive_maps(const TensorField& field) {
    const size_t nvox = field.nvox();
    DtiMapSet set;
    set.mask = field.mask;

    set.fa.type = MapType::FA;
    set.fa.values = Volume(field.nx, field.ny, field.nz, 1);
    set.md.type = MapType::MD;
    set.md.values = Volume(field.nx, field.ny, field.nz, 1);
    set.color_fa.type = MapType::ColorFA;
    set.color_fa.values = Volume(field.nx, field.ny, field.nz, 3);

    size_t clamped = 0, fitted = 0;
#pragma omp parallel for schedule(static) reduction(+ : clamped, fitted)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        if (!field.mask[v]) continue;
        ++fitted;
        EigenSystem eig = tensor_eigen(field.tensors[v]);
        if (eig.clamped) ++clamped;
        const double fa = compute_fa(eig);
        const double md = compute_md(eig);
        const Vec3 cfa = compute_color_fa(eig);
        set.fa.values.data[v] = fa;
        set.md.values.data[v] =
            std::clamp(md / kMdScale, 0.0, 1.0);
        for (int c = 0; c < 3; ++c)
            set.color_fa.values.data[c * nvox + v] = cfa[static_cast<size_t>(c)];
    }
    set.clamp_fraction = fitted ? static_cast<double>(clamped) / static_cast<double>(fitted) : 0.0;
    set.fa.mask = set.mask;
    set.md.mask = set.mask;
    set.color_fa.mask = set.mask;
    return set;
}

std::vector<uint8_t> erode_mask(const std::vector<uint8_t>& mask, int nx, int ny, int nz,
                                int radius) {
    if (radius < 0) fail(ErrorKind::Data, "erosion radius must be >= 0");
    if (radius == 0) return mask;
    std::vector<uint8_t> out(mask.size(), 0);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < nz; ++z) {
        const size_t base = static_cast<size_t>(z) * ny * nx;
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                bool keep = true;
                for (int dy = -radius; keep && dy <= radius; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= ny) { keep = false; break; }
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= nx || !mask[base + static_cast<size_t>(yy) * nx + xx]) {
                            keep = false;
                            break;
                        }
                    }
                }
                out[base + static_cast<size_t>(y) * nx + x] = keep ? 1 : 0;
            }
        }
    }
    return out;
}

DtiMap erode_reference(const DtiMap& map, const std::vector<uint8_t>& mask, int radius) {
    const Volume& vol = map.values;
    if (mask.size() != vol.nvox())
        fail(ErrorKind::Shape, "erode_reference: mask size does not match map grid");
    DtiMap out = map;
    out.mask = erode_mask(mask, vol.nx, vol.ny, vol.nz, radius);
    const size_t nvox = vol.nvox();
    for (int c = 0; c < vol.nt; ++c)
        for (size_t v = 0; v < nvox; ++v)
            if (!out.mask[v]) out.values.data[static_cast<size_t>(c) * nvox + v] = 0.0;
    return out;
}

} // namespace diffdti
