#include "diffdti/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffdti/nifti.hpp"

namespace fs = std::filesystem;

namespace diffdti {

std::vector<ManifestEntry> manifest_load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open manifest: " + path);
    const fs::path base = fs::path(path).parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        ManifestEntry e;
        if (!(ss >> e.id >> e.dwi_path >> e.bval_path >> e.bvec_path >> e.split))
            fail(ErrorKind::Data, "manifest: malformed line " + std::to_string(lineno) + " in " +
                                      path);
        if (e.split != "train" && e.split != "test")
            fail(ErrorKind::Data, "manifest: split must be train or test (line " +
                                      std::to_string(lineno) + ")");
        auto resolve = [&](std::string& p) {
            if (!p.empty() && !fs::path(p).is_absolute()) p = (base / p).string();
        };
        resolve(e.dwi_path);
        resolve(e.bval_path);
        resolve(e.bvec_path);
        entries.push_back(std::move(e));
    }
    if (entries.empty()) fail(ErrorKind::Data, "manifest has no entries: " + path);
    return entries;
}

void manifest_save(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Io, "cannot write manifest: " + path);
    const fs::path base = fs::path(path).parent_path();
    for (const auto& e : entries) {
        auto rel = [&](const std::string& p) {
            std::error_code ec;
            const fs::path r = fs::relative(p, base, ec);
            return ec ? p : r.string();
        };
        out << e.id << " " << rel(e.dwi_path) << " " << rel(e.bval_path) << " "
            << rel(e.bvec_path) << " " << e.split << "\n";
    }
}

DwiStudy load_study(const ManifestEntry& entry, const LoadOptions& opts) {
    GradientTable table = gradient_table_load(entry.bval_path, entry.bvec_path);
    Volume vols = nifti_read(entry.dwi_path);
    if (static_cast<size_t>(vols.nt) != table.size())
        fail(ErrorKind::Data, "study " + entry.id + ": " + std::to_string(vols.nt) +
                                  " volumes but " + std::to_string(table.size()) +
                                  " gradient entries");

    // shell selection: keep b ~ 0 and b ~ shell
    std::vector<int> keep;
    for (size_t i = 0; i < table.size(); ++i) {
        const double b = table.bvalues[i];
        if (b <= opts.b_tolerance || std::fabs(b - opts.b_shell) <= opts.b_tolerance)
            keep.push_back(static_cast<int>(i));
    }
    if (keep.size() == table.size()) {
        DwiStudy study{std::move(vols), std::move(table)};
        study.validate();
        return study;
    }

    DwiStudy study;
    study.volumes = Volume(vols.nx, vols.ny, vols.nz, static_cast<int>(keep.size()));
    study.volumes.pixdim = vols.pixdim;
    const size_t nvox = vols.nvox();
    for (size_t j = 0; j < keep.size(); ++j) {
        const double* src = vols.data.data() + static_cast<size_t>(keep[j]) * nvox;
        std::copy(src, src + nvox, study.volumes.data.data() + j * nvox);
        study.table.directions.push_back(table.directions[static_cast<size_t>(keep[j])]);
        study.table.bvalues.push_back(table.bvalues[static_cast<size_t>(keep[j])]);
    }
    study.validate();
    return study;
}

std::vector<int> select_slices(int n_slices, int count) {
    if (count < 1) fail(ErrorKind::Data, "select_slices: count must be >= 1");
    if (n_slices < count)
        fail(ErrorKind::Data, "select_slices: volume has " + std::to_string(n_slices) +
                                  " slices, need " + std::to_string(count));
    const int start = (n_slices - count) / 2;
    std::vector<int> out(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out[static_cast<size_t>(i)] = start + i;
    return out;
}

namespace {

PaddedStack pad_stack(const Volume& stack, int target, double scale, double clip) {
    if (stack.nx > target || stack.ny > target)
        fail(ErrorKind::Data, "pad: input " + std::to_string(stack.nx) + "x" +
                                  std::to_string(stack.ny) + " larger than target " +
                                  std::to_string(target));
    PaddedStack out;
    out.orig_x = stack.nx;
    out.orig_y = stack.ny;
    out.off_x = (target - stack.nx) / 2;
    out.off_y = (target - stack.ny) / 2;
    out.scale = scale;
    out.volumes = Volume(target, target, stack.nz, stack.nt);
    out.volumes.pixdim = stack.pixdim;
    for (int t = 0; t < stack.nt; ++t)
        for (int z = 0; z < stack.nz; ++z)
            for (int y = 0; y < stack.ny; ++y)
                for (int x = 0; x < stack.nx; ++x) {
                    double v = stack.at(x, y, z, t) / scale;
                    if (clip > 0.0) v = std::clamp(v, 0.0, clip);
                    out.volumes.at(x + out.off_x, y + out.off_y, z, t) = v;
                }
    return out;
}

} // namespace

PaddedStack normalize_and_pad(const Volume& stack, const std::vector<int>& b0_indices,
                              const NormalizeOptions& opts) {
    if (b0_indices.empty()) fail(ErrorKind::Data, "normalize: no b0 volumes given");
    std::vector<double> b0_values;
    b0_values.reserve(b0_indices.size() * stack.nvox());
    for (int idx : b0_indices) {
        const double* src = stack.data.data() + static_cast<size_t>(idx) * stack.nvox();
        b0_values.insert(b0_values.end(), src, src + stack.nvox());
    }
    std::sort(b0_values.begin(), b0_values.end());
    // nearest-rank percentile
    const double rank_f = std::ceil(opts.percentile / 100.0 * static_cast<double>(b0_values.size()));
    const size_t rank = static_cast<size_t>(
        std::clamp(rank_f - 1.0, 0.0, static_cast<double>(b0_values.size()) - 1.0));
    double scale = b0_values[rank];
    if (scale <= 0.0) scale = 1.0;
    return pad_stack(stack, opts.target, scale, opts.clip);
}

PaddedStack pad_only(const Volume& stack, int target) { return pad_stack(stack, target, 1.0, 0.0); }

Volume unpad(const Volume& padded, const PaddedStack& info) {
    Volume out(info.orig_x, info.orig_y, padded.nz, padded.nt);
    out.pixdim = padded.pixdim;
    for (int t = 0; t < padded.nt; ++t)
        for (int z = 0; z < padded.nz; ++z)
            for (int y = 0; y < info.orig_y; ++y)
                for (int x = 0; x < info.orig_x; ++x)
                    out.at(x, y, z, t) = padded.at(x + info.off_x, y + info.off_y, z, t);
    return out;
}

ReferenceMaps build_reference(const DwiStudy& study, const ReferenceOptions& opts) {
    FitResult fit = fit_tensor_lls(study, opts.fit);
    DtiMapSet maps = derive_maps(fit.field);
    maps.fa.values.pixdim = study.volumes.pixdim;
    maps.md.values.pixdim = study.volumes.pixdim;
    maps.color_fa.values.pixdim = study.volumes.pixdim;

    ReferenceMaps out;
    out.clamp_fraction = maps.clamp_fraction;
    out.mask = erode_mask(maps.mask, study.volumes.nx, study.volumes.ny, study.volumes.nz,
                          opts.erode_radius);
    out.fa = erode_reference(maps.fa, maps.mask, opts.erode_radius);
    out.md = erode_reference(maps.md, maps.mask, opts.erode_radius);
    out.color_fa = erode_reference(maps.color_fa, maps.mask, opts.erode_radius);
    return out;
}

nn::Tensor slice_to_tensor(const Volume& stack, const std::vector<int>& frames, int z) {
    nn::Tensor t(1, static_cast<int>(frames.size()), stack.ny, stack.nx);
    for (size_t c = 0; c < frames.size(); ++c)
        for (int y = 0; y < stack.ny; ++y)
            for (int x = 0; x < stack.nx; ++x)
                t.v[(c * stack.ny + y) * stack.nx + x] = stack.at(x, y, z, frames[c]);
    return t;
}

nn::Tensor map_slice_to_tensor(const Volume& map, int z) {
    std::vector<int> frames(static_cast<size_t>(map.nt));
    for (int c = 0; c < map.nt; ++c) frames[static_cast<size_t>(c)] = c;
    return slice_to_tensor(map, frames, z);
}

} // namespace diffdti
