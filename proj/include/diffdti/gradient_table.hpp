#pragma once

#include <array>
#include <string>
#include <vector>

#include "diffdti/common.hpp"
#include "diffdti/volume.hpp"

namespace diffdti {

using Vec3 = std::array<double, 3>;

// Diffusion gradient table: one (direction, b-value) entry per acquired
// volume, b=0 entries included explicitly. Directions for b>0 entries must be
// unit vectors.
struct GradientTable {
    std::vector<Vec3> directions;
    std::vector<double> bvalues; // s/mm^2

    size_t size() const { return bvalues.size(); }
    bool is_b0(size_t i, double tol = 50.0) const { return bvalues[i] <= tol; }
    size_t count_b0(double tol = 50.0) const;
    size_t count_dwi(double tol = 50.0) const;

    void validate() const;
};

// bval/bvec text convention: bvals is one whitespace-separated row, bvecs has
// three rows (x, y, z components).
GradientTable gradient_table_load(const std::string& bval_path, const std::string& bvec_path);
void gradient_table_save(const GradientTable& table, const std::string& bval_path,
                         const std::string& bvec_path);

// A study: 4D stack of b0 + diffusion-weighted volumes and its table.
struct DwiStudy {
    Volume volumes;       // nt == table.size()
    GradientTable table;

    void validate() const;
};

} // namespace diffdti
