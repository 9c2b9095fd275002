#pragma once

#include "diffdti/dti_maps.hpp"
#include "diffdti/gradient_table.hpp"
#include "diffdti/rng.hpp"
#include "diffdti/tensor_fit.hpp"

namespace diffdti {

// Elliptical "fiber bundle" region with a prolate tensor of the given FA/MD
// and in-plane principal orientation. Coordinates are voxel units.
struct PhantomRegion {
    double cx = 0, cy = 0;     // center
    double rx = 8, ry = 4;     // semi-axes
    double tilt = 0;           // ellipse rotation (radians)
    double fa = 0.5;           // target fractional anisotropy
    double md = 0.7e-3;        // mean diffusivity, mm^2/s
    double orient = 0;         // principal diffusion direction (in-plane angle)
    double s0 = 1000.0;        // baseline signal
};

struct PhantomSpec {
    int size = 64;             // square in-plane grid
    int nslices = 10;
    std::vector<PhantomRegion> regions; // painted in order, last wins
    double background_md = 0.7e-3;
    double background_s0 = 800.0;
    double head_radius_frac = 0.45; // brain disk radius as a fraction of size
    double rician_snr = 0.0;        // 0 = noiseless
    GradientTable table;
    uint64_t seed = 0;

    void validate() const;
};

struct PhantomData {
    DwiStudy study;
    TensorField truth;         // ground-truth tensors (background + regions)
    Volume analytic_fa;        // from region parameters, not from the tensors
    Volume analytic_md;        // normalized by the fixed MD scale
    Volume analytic_cfa;       // 3 channels
    std::vector<uint8_t> mask; // head support
};

// Prolate tensor with the given FA, MD and in-plane principal angle.
DiffusionTensor prolate_tensor(double fa, double md, double orient);

// Evenly spread unit directions plus explicit b0 entries.
GradientTable make_directions(int n_dwi, int n_b0, double bvalue, uint64_t seed);

// Random region list spanning FA in [0.3, 0.9].
std::vector<PhantomRegion> random_regions(int grid, int count, Rng& rng);

PhantomData generate_phantom(const PhantomSpec& spec);

} // namespace diffdti
