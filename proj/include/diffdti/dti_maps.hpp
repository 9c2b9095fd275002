#pragma once

#include "diffdti/tensor_fit.hpp"
#include "diffdti/volume.hpp"

namespace diffdti {

// Fixed MD normalization scale: brain MD at b=1000 stays below free-water
// diffusivity, so maps divided by this land in [0,1].
inline constexpr double kMdScale = 3.0e-3; // mm^2/s

enum class MapType { FA, MD, ColorFA };

const char* map_type_name(MapType t);
MapType map_type_from_name(const std::string& name);
int map_channels(MapType t);

// FA = sqrt(3/2) * ||lambda - mean|| / ||lambda||, 0 for the all-zero tensor.
double compute_fa(const EigenSystem& eig);

// MD = (l1 + l2 + l3) / 3.
double compute_md(const EigenSystem& eig);

// Channel c = FA * |v1[c]|; invariant to the sign of v1.
Vec3 compute_color_fa(const EigenSystem& eig);

// Scalar (FA, MD) or 3-channel (Color FA) parameter map, normalized to [0,1]
// per channel, zero outside the mask.
struct DtiMap {
    MapType type = MapType::FA;
    Volume values;             // nt == channels
    std::vector<uint8_t> mask; // per voxel
};

struct DtiMapSet {
    DtiMap fa, md, color_fa;
    std::vector<uint8_t> mask;      // shared fit mask (post-erosion if applied)
    double clamp_fraction = 0.0;    // voxels with negative eigenvalues clamped
};

// Derive normalized FA/MD/ColorFA maps from a fitted tensor field.
DtiMapSet derive_maps(const TensorField& field);

// Per-slice binary erosion with a square structuring element of side
// 2*radius+1; map values are zeroed outside the eroded mask.
std::vector<uint8_t> erode_mask(const std::vector<uint8_t>& mask, int nx, int ny, int nz,
                                int radius);
DtiMap erode_reference(const DtiMap& map, const std::vector<uint8_t>& mask, int radius);

} // namespace diffdti
