#include "cmrssl/nifti.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include <zlib.h>

#include "cmrssl/errors.hpp"

namespace cmrssl::nifti {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

struct GzCloser {
    void operator()(gzFile_s* f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t offset, T value) {
    std::memcpy(buf.data() + offset, &value, sizeof(T));
}

template <typename T>
T get(const std::vector<unsigned char>& buf, std::size_t offset) {
    T value;
    std::memcpy(&value, buf.data() + offset, sizeof(T));
    return value;
}

int bits_of(DataType t) {
    switch (t) {
    case DataType::uint8: return 8;
    case DataType::int16: return 16;
    case DataType::int32: return 32;
    case DataType::float32: return 32;
    case DataType::float64: return 64;
    }
    return 0;
}

bool gz_path(const std::filesystem::path& p) { return p.extension() == ".gz"; }

} // namespace

void write(const std::filesystem::path& path, const Volume& vol) {
    if (vol.data.size() != vol.count()) throw FormatError("volume data size does not match dims");

    std::vector<unsigned char> hdr(kVoxOffset, 0);
    put<std::int32_t>(hdr, 0, kHeaderSize);
    const int ndim = vol.dim[2] > 1 ? 3 : 2;
    put<std::int16_t>(hdr, 40, std::int16_t(ndim));
    for (int i = 0; i < 3; ++i) put<std::int16_t>(hdr, 42 + 2 * i, std::int16_t(vol.dim[i]));
    for (int i = 3; i < 7; ++i) put<std::int16_t>(hdr, 42 + 2 * i, 1);
    put<std::int16_t>(hdr, 70, std::int16_t(vol.datatype));
    put<std::int16_t>(hdr, 72, std::int16_t(bits_of(vol.datatype)));
    put<float>(hdr, 76, 1.0f);
    for (int i = 0; i < 3; ++i) put<float>(hdr, 80 + 4 * i, vol.pixdim[i]);
    put<float>(hdr, 108, float(kVoxOffset));
    put<float>(hdr, 112, 1.0f);
    put<float>(hdr, 116, 0.0f);
    hdr[123] = 2; // mm
    put<std::int16_t>(hdr, 254, 1); // sform_code: scanner
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) put<float>(hdr, 280 + 16 * r + 4 * c, vol.sform[r][c]);
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    const std::size_t bytes = bits_of(vol.datatype) / 8;
    std::vector<unsigned char> payload(vol.count() * bytes);
    for (std::size_t i = 0; i < vol.count(); ++i) {
        const double v = vol.data[i];
        unsigned char* dst = payload.data() + i * bytes;
        switch (vol.datatype) {
        case DataType::uint8: { auto x = std::uint8_t(std::lround(v)); std::memcpy(dst, &x, 1); break; }
        case DataType::int16: { auto x = std::int16_t(std::lround(v)); std::memcpy(dst, &x, 2); break; }
        case DataType::int32: { auto x = std::int32_t(std::lround(v)); std::memcpy(dst, &x, 4); break; }
        case DataType::float32: { auto x = float(v); std::memcpy(dst, &x, 4); break; }
        case DataType::float64: { std::memcpy(dst, &v, 8); break; }
        }
    }

    // "T" selects transparent (uncompressed) output for plain .nii.
    GzHandle f(gzopen(path.c_str(), gz_path(path) ? "wb1" : "wbT"));
    if (!f) throw FormatError("cannot open " + path.string() + " for writing");
    if (gzwrite(f.get(), hdr.data(), unsigned(hdr.size())) != int(hdr.size()) ||
        gzwrite(f.get(), payload.data(), unsigned(payload.size())) != int(payload.size()))
        throw FormatError("short write to " + path.string());
}

Volume read(const std::filesystem::path& path) {
    GzHandle f(gzopen(path.c_str(), "rb"));
    if (!f) throw FormatError("cannot open " + path.string());
    std::vector<unsigned char> hdr(kHeaderSize);
    if (gzread(f.get(), hdr.data(), kHeaderSize) != kHeaderSize)
        throw FormatError(path.string() + ": truncated header");
    if (get<std::int32_t>(hdr, 0) != kHeaderSize)
        throw FormatError(path.string() + ": not a NIfTI-1 file (or byte-swapped)");
    if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0)
        throw FormatError(path.string() + ": only single-file NIfTI is supported");

    Volume vol;
    const int ndim = get<std::int16_t>(hdr, 40);
    if (ndim < 2 || ndim > 4) throw FormatError(path.string() + ": unsupported rank");
    for (int i = 0; i < 3; ++i) {
        const int d = i < ndim ? get<std::int16_t>(hdr, 42 + 2 * i) : 1;
        if (d < 1) throw FormatError(path.string() + ": bad dimension");
        vol.dim[i] = d;
        vol.pixdim[i] = get<float>(hdr, 80 + 4 * i);
    }
    if (ndim == 4 && get<std::int16_t>(hdr, 48) > 1)
        throw FormatError(path.string() + ": 4D series are not supported; split frames first");
    vol.datatype = DataType(get<std::int16_t>(hdr, 70));
    const int bits = bits_of(vol.datatype);
    if (bits == 0) throw FormatError(path.string() + ": unsupported datatype");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) vol.sform[r][c] = get<float>(hdr, 280 + 16 * r + 4 * c);

    float slope = get<float>(hdr, 112);
    const float inter = get<float>(hdr, 116);
    if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

    const auto offset = std::size_t(get<float>(hdr, 108));
    if (offset < std::size_t(kHeaderSize)) throw FormatError(path.string() + ": bad vox_offset");
    std::vector<unsigned char> skip(offset - kHeaderSize);
    if (!skip.empty() && gzread(f.get(), skip.data(), unsigned(skip.size())) != int(skip.size()))
        throw FormatError(path.string() + ": truncated extension block");

    const std::size_t bytes = bits / 8;
    std::vector<unsigned char> payload(vol.count() * bytes);
    if (gzread(f.get(), payload.data(), unsigned(payload.size())) != int(payload.size()))
        throw FormatError(path.string() + ": truncated voxel data");

    vol.data.resize(vol.count());
    for (std::size_t i = 0; i < vol.count(); ++i) {
        const unsigned char* src = payload.data() + i * bytes;
        double v = 0;
        switch (vol.datatype) {
        case DataType::uint8: v = *src; break;
        case DataType::int16: { std::int16_t x; std::memcpy(&x, src, 2); v = x; break; }
        case DataType::int32: { std::int32_t x; std::memcpy(&x, src, 4); v = x; break; }
        case DataType::float32: { float x; std::memcpy(&x, src, 4); v = x; break; }
        case DataType::float64: { std::memcpy(&v, src, 8); break; }
        }
        vol.data[i] = v * slope + inter;
    }
    return vol;
}

} // namespace cmrssl::nifti
