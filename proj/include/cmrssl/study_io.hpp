#pragma once

// On-disk layout of a cohort:
//
//   <root>/<subject>/<frame>/<view>.nii.gz          intensity (float32)
//   <root>/<subject>/<frame>/<view>.json            geometry sidecar
//   <root>/<subject>/<frame>/<view>_label.nii.gz    structure labels (uint8, optional)
//   <root>/<subject>/<frame>/<view>_pretext.nii.gz  position labels (uint8, optional)
//
// with <view> in {sa, la2ch, la4ch}. SA stacks are stored as 3D volumes,
// one slice per z index; the sidecar lists one geometry record per slice.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cmrssl/study.hpp"

namespace cmrssl::io {

namespace fs = std::filesystem;

inline constexpr const char* kGeometrySchema = "cmrssl.geometry/1";
/// Fill value of a label slice that has no map (e.g. a skipped pretext slice).
inline constexpr std::uint8_t kMissingSlice = 255;

fs::path study_dir(const fs::path& root, const std::string& subject, Frame frame);

void save_study(const ViewStudy& study, const fs::path& root);

/// Writes only the pretext label volume of `study` for `view`. Slices without
/// a map are stored as kMissingSlice and read back as absent.
void save_pretext(const ViewStudy& study, View view, const fs::path& root);

/// Loads one study directory. Views without an intensity file are left
/// empty unless listed in `required`, which raises FormatError.
ViewStudy load_study(const fs::path& dir, std::vector<View> required = {View::sa, View::la2ch, View::la4ch});

/// All <subject>/<frame> directories under `root`, sorted by (subject, frame).
std::vector<fs::path> list_study_dirs(const fs::path& root);

std::vector<ViewStudy> load_cohort(const fs::path& root, std::vector<View> required);

struct Split {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Random split by subject (never by slice). Throws InsufficientSubjects.
Split split_subjects(std::vector<std::string> subjects, std::size_t n_train, std::uint64_t seed);

std::pair<std::vector<ViewStudy>, std::vector<ViewStudy>>
split_dataset(const std::vector<ViewStudy>& studies, std::size_t n_train, std::uint64_t seed);

std::vector<std::string> subject_ids(const std::vector<ViewStudy>& studies);

/// Hex SHA-256 of a file, or of every regular file below a directory in
/// sorted path order (paths are hashed along with contents).
std::string sha256(const fs::path& path);
std::string sha256_bytes(std::string_view bytes);

} // namespace cmrssl::io
