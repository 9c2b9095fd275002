#include "diffdti/nifti.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace diffdti {

namespace {

// nifti1.h layout, 348 bytes.
#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiType : int16_t {
    DT_UINT8 = 2,
    DT_INT16 = 4,
    DT_INT32 = 8,
    DT_FLOAT32 = 16,
    DT_FLOAT64 = 64,
    DT_INT8 = 256,
    DT_UINT16 = 512,
};

template <typename T>
void decode(const std::vector<char>& raw, size_t n, double slope, double inter,
            std::vector<double>& out) {
    const T* src = reinterpret_cast<const T*>(raw.data());
    for (size_t i = 0; i < n; ++i)
        out[i] = static_cast<double>(src[i]) * slope + inter;
}

} // namespace

Volume nifti_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open NIfTI file: " + path);

    Nifti1Header hdr{};
    in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
    if (!in) fail(ErrorKind::Io, "truncated NIfTI header: " + path);
    if (hdr.sizeof_hdr != 348)
        fail(ErrorKind::Io, "unsupported NIfTI header (sizeof_hdr=" +
                                std::to_string(hdr.sizeof_hdr) + ", byte-swapped files not supported): " + path);
    if (std::strncmp(hdr.magic, "n+1", 3) != 0 && std::strncmp(hdr.magic, "ni1", 3) != 0)
        fail(ErrorKind::Io, "bad NIfTI magic in " + path);

    int ndim = hdr.dim[0];
    if (ndim < 1 || ndim > 4)
        fail(ErrorKind::Io, "only 1..4 dimensional NIfTI supported, got dim[0]=" +
                                std::to_string(ndim) + " in " + path);

    Volume vol;
    vol.nx = hdr.dim[1];
    vol.ny = ndim >= 2 ? hdr.dim[2] : 1;
    vol.nz = ndim >= 3 ? hdr.dim[3] : 1;
    vol.nt = ndim >= 4 ? hdr.dim[4] : 1;
    if (vol.nx <= 0 || vol.ny <= 0 || vol.nz <= 0 || vol.nt <= 0)
        fail(ErrorKind::Io, "non-positive NIfTI dimensions in " + path);
    for (int i = 0; i < 4; ++i) vol.pixdim[i] = hdr.pixdim[i + 1];

    const size_t n = vol.size();
    const int bytes = hdr.bitpix / 8;
    const double slope = hdr.scl_slope == 0.f ? 1.0 : hdr.scl_slope;
    const double inter = hdr.scl_slope == 0.f ? 0.0 : hdr.scl_inter;

    std::vector<char> raw(n * bytes);
    in.seekg(static_cast<std::streamoff>(hdr.vox_offset), std::ios::beg);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) fail(ErrorKind::Io, "truncated NIfTI data in " + path);

    vol.data.resize(n);
    switch (hdr.datatype) {
        case DT_UINT8: decode<uint8_t>(raw, n, slope, inter, vol.data); break;
        case DT_INT8: decode<int8_t>(raw, n, slope, inter, vol.data); break;
        case DT_INT16: decode<int16_t>(raw, n, slope, inter, vol.data); break;
        case DT_UINT16: decode<uint16_t>(raw, n, slope, inter, vol.data); break;
        case DT_INT32: decode<int32_t>(raw, n, slope, inter, vol.data); break;
        case DT_FLOAT32: decode<float>(raw, n, slope, inter, vol.data); break;
        case DT_FLOAT64: decode<double>(raw, n, slope, inter, vol.data); break;
        default:
            fail(ErrorKind::Io, "unsupported NIfTI datatype " + std::to_string(hdr.datatype) +
                                    " in " + path);
    }
    return vol;
}

void nifti_write(const std::string& path, const Volume& vol) {
    Nifti1Header hdr{};
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = static_cast<int16_t>(vol.nt > 1 ? 4 : 3);
    hdr.dim[1] = static_cast<int16_t>(vol.nx);
    hdr.dim[2] = static_cast<int16_t>(vol.ny);
    hdr.dim[3] = static_cast<int16_t>(vol.nz);
    hdr.dim[4] = static_cast<int16_t>(vol.nt);
    for (int i = static_cast<int>(hdr.dim[0]) + 1; i < 8; ++i) hdr.dim[i] = 1;
    hdr.datatype = DT_FLOAT32;
    hdr.bitpix = 32;
    hdr.pixdim[0] = 1.f;
    for (int i = 0; i < 4; ++i) hdr.pixdim[i + 1] = vol.pixdim[i];
    for (int i = 5; i < 8; ++i) hdr.pixdim[i] = 1.f;
    hdr.vox_offset = 352.f;
    hdr.scl_slope = 1.f;
    hdr.scl_inter = 0.f;
    hdr.xyzt_units = 10; // NIFTI_UNITS_MM | NIFTI_UNITS_SEC
    std::memcpy(hdr.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write NIfTI file: " + path);
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    const char pad[4] = {0, 0, 0, 0};
    out.write(pad, 4);
    std::vector<float> f32(vol.data.size());
    for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(vol.data[i]);
    out.write(reinterpret_cast<const char*>(f32.data()),
              static_cast<std::streamsize>(f32.size() * sizeof(float)));
    if (!out) fail(ErrorKind::Io, "short write to " + path);
}

} // namespace diffdti
