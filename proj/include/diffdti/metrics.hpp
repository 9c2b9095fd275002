#pragma once

#include <string>
#include <vector>

#include "diffdti/volume.hpp"

namespace diffdti {

struct MetricConfig {
    // SSIM stabilizers for data in [0,1].
    double c1 = 1e-4;  // (0.01 * L)^2
    double c2 = 9e-4;  // (0.03 * L)^2
    int ssim_window = 7; // odd, uniform weighting
    bool masked = true;  // evaluate over the reference mask only

    void validate() const;
};

// 20 log10(MAX_ref / sqrt(MSE)) over masked voxels, channels pooled.
// Identical inputs give +infinity.
double psnr(const Volume& ref, const Volume& rec, const std::vector<uint8_t>& mask);

// Mean local SSIM over fully-interior windows whose center voxel is masked;
// channels averaged. Windows are per axial slice.
double ssim(const Volume& ref, const Volume& rec, const MetricConfig& cfg,
            const std::vector<uint8_t>& mask);

// sum((ref-rec)^2) / sum(ref^2) over masked voxels, channels pooled.
double nmse(const Volume& ref, const Volume& rec, const std::vector<uint8_t>& mask);

struct EvalPair {
    std::string id;
    std::string map_type;
    Volume generated;
    Volume reference;
    std::vector<uint8_t> mask;
};

struct ReportRow {
    std::string map_type;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    size_t n = 0;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::string to_csv() const;  // map_type,metric,mean,std,n
    std::string to_table() const;
};

// Aggregates per-pair metrics into mean +- std per (map type, metric).
// Infinite PSNR values are carried through and serialized as "inf".
EvalReport evaluate_run(const std::vector<EvalPair>& pairs, const MetricConfig& cfg);

} // namespace diffdti
