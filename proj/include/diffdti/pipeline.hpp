#pragma once

#include <string>
#include <vector>

#include "diffdti/dti_maps.hpp"
#include "diffdti/gradient_table.hpp"
#include "diffdti/nn/tensor.hpp"

namespace diffdti {

struct ManifestEntry {
    std::string id;
    std::string dwi_path;
    std::string bval_path;
    std::string bvec_path;
    std::string split; // "train" or "test"
};

// Line-oriented manifest: id dwi bval bvec split. Paths are resolved relative
// to the manifest's directory.
std::vector<ManifestEntry> manifest_load(const std::string& path);
void manifest_save(const std::vector<ManifestEntry>& entries, const std::string& path);

struct LoadOptions {
    double b_shell = 1000.0; // keep b ~ shell
    double b_tolerance = 50.0;
};

// Loads a study and keeps the b~0 and b~shell volumes only.
DwiStudy load_study(const ManifestEntry& entry, const LoadOptions& opts = {});

// Centered contiguous block of `count` axial slice indices.
std::vector<int> select_slices(int n_slices, int count = 50);

struct NormalizeOptions {
    double percentile = 99.0; // of the b0 intensities
    double clip = 2.0;
    int target = 192;         // square pad target
};

struct PaddedStack {
    Volume volumes;   // padded to target x target
    int off_x = 0, off_y = 0;
    int orig_x = 0, orig_y = 0;
    double scale = 1.0; // normalization divisor that was applied
};

// Divides by the per-subject b0 percentile, clips, then zero-pads
// symmetrically to the target size.
PaddedStack normalize_and_pad(const Volume& stack, const std::vector<int>& b0_indices,
                              const NormalizeOptions& opts);

// Zero-pad without normalization (for reference maps and masks).
PaddedStack pad_only(const Volume& stack, int target);
Volume unpad(const Volume& padded, const PaddedStack& info);

struct ReferenceOptions {
    int erode_radius = 2;
    FitOptions fit;
};

struct ReferenceMaps {
    DtiMap fa, md, color_fa;
    std::vector<uint8_t> mask; // eroded fit mask
    double clamp_fraction = 0.0;
};

// LLS fit of the full study, map derivation, and boundary erosion.
ReferenceMaps build_reference(const DwiStudy& study, const ReferenceOptions& opts = {});

// Slice of one padded stack as a network tensor [1, C, H, W]; channels taken
// from the listed frame indices.
nn::Tensor slice_to_tensor(const Volume& stack, const std::vector<int>& frames, int z);
// Single- or multi-channel map slice.
nn::Tensor map_slice_to_tensor(const Volume& map, int z);

} // namespace diffdti
