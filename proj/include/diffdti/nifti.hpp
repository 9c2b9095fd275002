#pragma once

#include <string>

#include "diffdti/volume.hpp"

namespace diffdti {

// Minimal NIfTI-1 (.nii, single file, uncompressed) reader/writer.
// Reading handles the common scalar datatypes and applies scl_slope/scl_inter;
// writing always emits float32. Up to 4 dimensions.
Volume nifti_read(const std::string& path);
void nifti_write(const std::string& path, const Volume& vol);

} // namespace diffdti
