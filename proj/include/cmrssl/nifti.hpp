#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer for 2D and
// 3D scalar volumes. Only what slice-based training needs: dimensions, voxel
// sizes, an sform, and uint8 / int16 / int32 / float32 / float64 payloads.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace cmrssl::nifti {

enum class DataType : std::int16_t {
    uint8 = 2,
    int16 = 4,
    int32 = 8,
    float32 = 16,
    float64 = 64,
};

struct Volume {
    std::array<int, 3> dim{1, 1, 1};           // x (fastest), y, z
    std::array<float, 3> pixdim{1.f, 1.f, 1.f};
    std::array<std::array<float, 4>, 3> sform{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};
    DataType datatype = DataType::float32;
    std::vector<double> data;                  // scaled values, x fastest

    std::size_t count() const { return std::size_t(dim[0]) * dim[1] * dim[2]; }
};

/// Writes `vol` with its declared datatype; values are rounded for integer types.
void write(const std::filesystem::path& path, const Volume& vol);

/// Throws FormatError on a malformed or unsupported file.
Volume read(const std::filesystem::path& path);

} // namespace cmrssl::nifti
