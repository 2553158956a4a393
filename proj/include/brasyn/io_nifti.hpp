#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "volume.hpp"

namespace brasyn::io {

static_assert(std::endian::native == std::endian::little,
              "volume I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// NIfTI-1 (.nii, single file, little-endian). Images are written float32,
// label maps int16. Read accepts uint8/int16/int32/float32/float64 with
// scl_slope/inter applied.
// ---------------------------------------------------------------------------

namespace detail {

#pragma pack(push, 1)
struct Nifti1Header {
    std::int32_t sizeof_hdr = 348;
    char data_type[10] = {};
    char db_name[18] = {};
    std::int32_t extents = 0;
    std::int16_t session_error = 0;
    char regular = 'r';
    char dim_info = 0;
    std::int16_t dim[8] = {};
    float intent_p1 = 0, intent_p2 = 0, intent_p3 = 0;
    std::int16_t intent_code = 0;
    std::int16_t datatype = 0;
    std::int16_t bitpix = 0;
    std::int16_t slice_start = 0;
    float pixdim[8] = {};
    float vox_offset = 352;
    float scl_slope = 0;
    float scl_inter = 0;
    std::int16_t slice_end = 0;
    char slice_code = 0;
    char xyzt_units = 2; // mm
    float cal_max = 0, cal_min = 0;
    float slice_duration = 0, toffset = 0;
    std::int32_t glmax = 0, glmin = 0;
    char descrip[80] = {};
    char aux_file[24] = {};
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 1;
    float quatern_b = 0, quatern_c = 0, quatern_d = 0;
    float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
    float srow_x[4] = {};
    float srow_y[4] = {};
    float srow_z[4] = {};
    char intent_name[16] = {};
    char magic[4] = {'n', '+', '1', 0};
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiDatatype : std::int16_t {
    kUint8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
};

inline Nifti1Header make_header(const Shape& shape,
                                const std::array<double, 3>& spacing,
                                std::int16_t datatype, std::int16_t bitpix,
                                const std::string& descrip) {
    Nifti1Header h;
    h.dim[0] = 3;
    h.dim[1] = std::int16_t(shape[2]); // x = W (fastest)
    h.dim[2] = std::int16_t(shape[1]); // y = H
    h.dim[3] = std::int16_t(shape[0]); // z = D
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.pixdim[0] = 1;
    h.pixdim[1] = float(spacing[2]);
    h.pixdim[2] = float(spacing[1]);
    h.pixdim[3] = float(spacing[0]);
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.srow_x[0] = h.pixdim[1];
    h.srow_y[1] = h.pixdim[2];
    h.srow_z[2] = h.pixdim[3];
    std::snprintf(h.descrip, sizeof(h.descrip), "%s", descrip.c_str());
    return h;
}

template <class Src>
void convert_to_float(const std::vector<char>& raw, std::vector<float>& out,
                      double slope, double inter) {
    const std::size_t n = raw.size() / sizeof(Src);
    out.resize(n);
    const Src* src = reinterpret_cast<const Src*>(raw.data());
    for (std::size_t i = 0; i < n; ++i)
        out[i] = float(double(src[i]) * slope + inter);
}

inline void read_payload(std::ifstream& f, const Nifti1Header& h,
                         std::size_t numel, std::vector<float>& out) {
    std::size_t bytes = 0;
    switch (h.datatype) {
        case kUint8: bytes = numel; break;
        case kInt16: bytes = numel * 2; break;
        case kInt32: bytes = numel * 4; break;
        case kFloat32: bytes = numel * 4; break;
        case kFloat64: bytes = numel * 8; break;
        default: BRASYN_CHECK(false, "nifti: unsupported datatype ", h.datatype);
    }
    f.seekg(std::streamoff(h.vox_offset));
    std::vector<char> raw(bytes);
    f.read(raw.data(), std::streamsize(bytes));
    BRASYN_CHECK(f.gcount() == std::streamsize(bytes), "nifti: truncated payload");

    const double slope = h.scl_slope != 0 ? double(h.scl_slope) : 1.0;
    const double inter = h.scl_slope != 0 ? double(h.scl_inter) : 0.0;
    switch (h.datatype) {
        case kUint8: convert_to_float<std::uint8_t>(raw, out, slope, inter); break;
        case kInt16: convert_to_float<std::int16_t>(raw, out, slope, inter); break;
        case kInt32: convert_to_float<std::int32_t>(raw, out, slope, inter); break;
        case kFloat32: convert_to_float<float>(raw, out, slope, inter); break;
        case kFloat64: convert_to_float<double>(raw, out, slope, inter); break;
    }
}

inline Nifti1Header read_header(std::ifstream& f, const std::string& path) {
    Nifti1Header h;
    f.read(reinterpret_cast<char*>(&h), sizeof(h));
    BRASYN_CHECK(f.gcount() == sizeof(h), "nifti: cannot read header of ", path);
    BRASYN_CHECK(h.sizeof_hdr == 348,
                 "nifti: bad or big-endian header in ", path);
    BRASYN_CHECK(h.dim[0] == 3, "nifti: expected 3-d image in ", path);
    return h;
}

inline std::optional<Modality> modality_from_descrip(const char* descrip) {
    std::string d(descrip, descrip + ::strnlen(descrip, 80));
    const auto pos = d.find("modality=");
    if (pos == std::string::npos) return std::nullopt;
    std::string tok = d.substr(pos + 9);
    if (auto sp = tok.find_first_of(" ;,"); sp != std::string::npos) tok = tok.substr(0, sp);
    for (Modality m : kModalities)
        if (tok == modality_name(m)) return m;
    return std::nullopt;
}

} // namespace detail

inline void write_nifti(const std::filesystem::path& path, const Volume& vol) {
    auto h = detail::make_header(vol.data.shape(), vol.spacing, detail::kFloat32, 32,
                                 std::string("modality=") + modality_name(vol.modality));
    std::ofstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "nifti: cannot open for write: ", path.string());
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char pad[4] = {};
    f.write(pad, 4); // no extensions
    f.write(reinterpret_cast<const char*>(vol.data.data()),
            std::streamsize(vol.data.size() * sizeof(float)));
    BRASYN_CHECK(f.good(), "nifti: write failed: ", path.string());
}

inline Volume read_nifti(const std::filesystem::path& path,
                         std::optional<Modality> modality = std::nullopt) {
    std::ifstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "nifti: cannot open: ", path.string());
    auto h = detail::read_header(f, path.string());

    const Shape shape{std::size_t(h.dim[3]), std::size_t(h.dim[2]),
                      std::size_t(h.dim[1])};
    std::vector<float> payload;
    detail::read_payload(f, h, shape_numel(shape), payload);

    Modality m = modality.value_or(
        detail::modality_from_descrip(h.descrip).value_or(Modality::T1));
    Volume v(Tensor<float>(shape, std::move(payload)), m,
             {double(h.pixdim[3]), double(h.pixdim[2]), double(h.pixdim[1])});
    return v;
}

inline void write_nifti_labels(const std::filesystem::path& path, const LabelMap& labels,
                               std::array<double, 3> spacing = {1, 1, 1}) {
    auto h = detail::make_header(labels.data.shape(), spacing, detail::kInt16, 16,
                                 "modality=label");
    std::ofstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "nifti: cannot open for write: ", path.string());
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char pad[4] = {};
    f.write(pad, 4);
    std::vector<std::int16_t> buf(labels.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = labels.data[i];
    f.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(std::int16_t)));
    BRASYN_CHECK(f.good(), "nifti: write failed: ", path.string());
}

inline LabelMap read_nifti_labels(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "nifti: cannot open: ", path.string());
    auto h = detail::read_header(f, path.string());
    const Shape shape{std::size_t(h.dim[3]), std::size_t(h.dim[2]),
                      std::size_t(h.dim[1])};
    std::vector<float> payload;
    detail::read_payload(f, h, shape_numel(shape), payload);
    Tensor<std::uint8_t> data(shape);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const long v = std::lround(payload[i]);
        BRASYN_CHECK(v >= 0 && v <= 3, "labels: value ", v, " outside {0..3} in ",
                     path.string());
        data[i] = std::uint8_t(v);
    }
    return LabelMap(std::move(data));
}

// ---------------------------------------------------------------------------
// Raw fallback: UTF-8 header line "D H W modality\n" + raw float32.
// ---------------------------------------------------------------------------

inline void write_raw(const std::filesystem::path& path, const Volume& vol) {
    std::ofstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "raw: cannot open for write: ", path.string());
    f << vol.depth() << ' ' << vol.height() << ' ' << vol.width() << ' '
      << modality_name(vol.modality) << '\n';
    f.write(reinterpret_cast<const char*>(vol.data.data()),
            std::streamsize(vol.data.size() * sizeof(float)));
    BRASYN_CHECK(f.good(), "raw: write failed: ", path.string());
}

inline Volume read_raw(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    BRASYN_CHECK(f.good(), "raw: cannot open: ", path.string());
    std::string line;
    std::getline(f, line);
    std::istringstream hdr(line);
    std::size_t D = 0, H = 0, W = 0;
    std::string mod;
    hdr >> D >> H >> W >> mod;
    BRASYN_CHECK(hdr && D >= 1 && H >= 1 && W >= 1,
                 "raw: malformed header line in ", path.string());
    Tensor<float> data(Shape{D, H, W});
    f.read(reinterpret_cast<char*>(data.data()),
           std::streamsize(data.size() * sizeof(float)));
    BRASYN_CHECK(f.gcount() == std::streamsize(data.size() * sizeof(float)),
                 "raw: truncated payload in ", path.string());
    return Volume(std::move(data), parse_modality(mod));
}

} // namespace brasyn::io
