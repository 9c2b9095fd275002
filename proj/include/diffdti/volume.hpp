#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "diffdti/common.hpp"

namespace diffdti {

// Dense 4D image volume, x fastest, layout [t][z][y][x]. Scalar volumes use
// nt == 1. Values live in double precision; NIfTI files stay float32 on disk.
struct Volume {
    int nx = 0, ny = 0, nz = 0, nt = 1;
    std::array<float, 4> pixdim{1.f, 1.f, 1.f, 1.f};
    std::vector<double> data;

    Volume() = default;
    Volume(int x, int y, int z, int t = 1)
        : nx(x), ny(y), nz(z), nt(t),
          data(static_cast<size_t>(x) * y * z * t, 0.0) {}

    size_t nvox() const { return static_cast<size_t>(nx) * ny * nz; }
    size_t size() const { return nvox() * nt; }

    size_t index(int x, int y, int z, int t = 0) const {
        return ((static_cast<size_t>(t) * nz + z) * ny + y) * nx + x;
    }
    double& at(int x, int y, int z, int t = 0) { return data[index(x, y, z, t)]; }
    double at(int x, int y, int z, int t = 0) const { return data[index(x, y, z, t)]; }

    bool same_grid(const Volume& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz;
    }

    // View of one 3D frame.
    Volume frame(int t) const {
        Volume v(nx, ny, nz, 1);
        const size_t n = nvox();
        std::copy(data.begin() + t * n, data.begin() + (t + 1) * n, v.data.begin());
        v.pixdim = pixdim;
        return v;
    }

    double max_value() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, v);
        return m;
    }
};

inline void require_same_grid(const Volume& a, const Volume& b, const char* what) {
    if (!a.same_grid(b))
        fail(ErrorKind::Shape, std::string(what) + ": volume grids differ (" +
                                   std::to_string(a.nx) + "x" + std::to_string(a.ny) + "x" +
                                   std::to_string(a.nz) + " vs " + std::to_string(b.nx) + "x" +
                                   std::to_string(b.ny) + "x" + std::to_string(b.nz) + ")");
}

} // namespace diffdti
