#pragma once

#include <vector>

#include "diffdti/gradient_table.hpp"
#include "diffdti/volume.hpp"

namespace diffdti {

// Six unique components of the symmetric diffusion tensor, mm^2/s.
struct DiffusionTensor {
    double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;

    // g^T D g for a direction g.
    double quadratic_form(const Vec3& g) const {
        return g[0] * g[0] * xx + g[1] * g[1] * yy + g[2] * g[2] * zz +
               2.0 * (g[0] * g[1] * xy + g[0] * g[2] * xz + g[1] * g[2] * yz);
    }
};

// Sorted eigensystem of a diffusion tensor: lambda[0] >= lambda[1] >= lambda[2],
// orthonormal eigenvectors. clamped marks eigenvalues lifted to zero.
struct EigenSystem {
    std::array<double, 3> lambda{};
    std::array<Vec3, 3> vectors{};
    bool clamped = false;
};

// Per-voxel tensor field with the fit mask. tensors[v] is valid iff mask[v].
struct TensorField {
    int nx = 0, ny = 0, nz = 0;
    std::vector<DiffusionTensor> tensors;
    std::vector<uint8_t> mask;

    TensorField() = default;
    TensorField(int x, int y, int z)
        : nx(x), ny(y), nz(z),
          tensors(static_cast<size_t>(x) * y * z),
          mask(static_cast<size_t>(x) * y * z, 1) {}

    size_t nvox() const { return tensors.size(); }
    size_t index(int x, int y, int z) const {
        return (static_cast<size_t>(z) * ny + y) * nx + x;
    }
};

struct FitOptions {
    // Voxels whose mean b0 falls below floor_rel * max(b0) are masked out;
    // the log-linearized system is unusable there.
    double floor_rel = 1e-6;
    double b0_tolerance = 50.0; // b <= tol counts as b0
};

struct FitResult {
    TensorField field;
    Volume s0;                   // fitted (or averaged) b0 per voxel
    size_t masked_out = 0;       // voxels dropped by the signal floor
};

// Stejskal-Tanner monoexponential signal: S_i = S0 * exp(-b_i g_i^T D g_i).
// One output frame per table entry; b=0 frames reproduce b0_field exactly.
DwiStudy dwi_forward_model(const TensorField& field, const Volume& b0_field,
                           const GradientTable& table);

// Log-linearized least-squares tensor fit. Requires >= 1 b0 and >= 6 b>0
// volumes with a full-rank direction design. When more than one b0 volume is
// present, ln(S0) joins the unknowns as a 7th column.
FitResult fit_tensor_lls(const DwiStudy& study, const FitOptions& opts = {});

// Sorted eigensystem; negative eigenvalues are clamped to 0 and flagged.
EigenSystem tensor_eigen(const DiffusionTensor& tensor);

} // namespace diffdti
