#pragma once

// View-plane geometry for anatomical-position labels.
//
// Coordinates follow the DICOM patient convention: +x toward patient left,
// +y posterior, +z superior. Pixel coordinates are continuous (row, col)
// pairs with (0, 0) at the centre of the first stored pixel.

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "cmrssl/image.hpp"

namespace cmrssl {

struct ViewStudy;

namespace viewgeom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

inline constexpr double kUnitTol = 1e-9;
inline constexpr double kOrthoTol = 1e-6;
inline constexpr double kParallelTol = 1e-6;
inline constexpr double kOffPlaneTol = 1e-3; // mm

enum class PatientAxis { left, posterior, superior };

std::string_view to_string(PatientAxis axis);
Vec3 axis_vector(PatientAxis axis);

/// A 2D acquisition plane embedded in patient space. Mirrors the DICOM
/// ImagePositionPatient / ImageOrientationPatient / PixelSpacing triple:
/// `row_dir` is the direction of increasing column index and `col_dir` the
/// direction of increasing row index. `spacing.x()` is the column spacing
/// (along row_dir), `spacing.y()` the row spacing (along col_dir).
struct ImagePlane {
    Vec3 origin = Vec3::Zero();
    Vec3 row_dir = Vec3::UnitX();
    Vec3 col_dir = Vec3::UnitY();
    Vec2 spacing = Vec2::Ones();
    GridSize size{1, 1};

    /// Throws InvalidGeometry when the direction cosines or spacing are unusable.
    void validate() const;
};

struct Line3 {
    Vec3 point = Vec3::Zero();
    Vec3 direction = Vec3::UnitX();
};

struct Line2 {
    Vec2 point = Vec2::Zero();     // (row, col)
    Vec2 direction = Vec2::UnitX(); // unit, (row, col)
    std::optional<PatientAxis> positive_axis;
};

enum class BoxRole {
    intersection,
    a_minus_1,
    a_minus_2,
    a_plus_1,
    a_plus_2,
    b_minus_1,
    b_minus_2,
    b_plus_1,
    b_plus_2,
};

std::string_view to_string(BoxRole role);

struct PositionBox {
    Vec2 center = Vec2::Zero(); // (row, col), continuous pixels
    int side = 11;
    int label = 1;              // 1..9
    BoxRole role = BoxRole::intersection;
    bool out_of_field = false;  // centre outside the image; still rasterised with clipping
};

/// Box layout parameters. 11 px boxes, 30 px apart are the values used on
/// 208x180 images at 1.82 mm; desk-scale phantoms use smaller values.
struct BoxParams {
    int side = 11;
    int spacing = 30;
};

inline constexpr int kPretextLabels = 10;

Vec3 plane_normal(const ImagePlane& plane);
Line3 intersect_planes(const ImagePlane& a, const ImagePlane& b);

Vec2 world_to_pixel(const ImagePlane& plane, const Vec3& p);
Vec3 pixel_to_world(const ImagePlane& plane, const Vec2& rc);

Line2 project_line(const ImagePlane& target, const Line3& line);

/// Patient-space unit vector corresponding to an in-image pixel direction.
Vec3 direction_in_patient(const Line2& line, const ImagePlane& plane);

Line2 orient_direction(const Line2& line, const ImagePlane& plane, PatientAxis axis);

/// Assigns `first` to one line and `second` to the other (maximising the total
/// |dot| between 3D line directions and their axes; ties give `first` to the
/// line most aligned with it, then to `l1`) and orients both. The returned
/// pair is ordered (line carrying `first`, line carrying `second`).
std::pair<Line2, Line2> assign_axes(const Line2& l1, const Line2& l2, const ImagePlane& plane,
                                    PatientAxis first, PatientAxis second);

/// Intersection of two image lines; throws ParallelLines.
Vec2 intersect_lines(const Line2& a, const Line2& b);

std::array<PositionBox, 9> place_positions(const Line2& line_a, const Line2& line_b,
                                           GridSize image_size, BoxParams params = {});

/// Paints the boxes into a 10-way label map. Centres are rounded to the
/// nearest pixel; squares are clipped to the image; the lowest label wins on
/// overlap.
LabelMap rasterize(std::span<const PositionBox> boxes, GridSize image_size);

/// Full chain for one target image given the two auxiliary planes.
LabelMap pretext_labels(const ImagePlane& target, const ImagePlane& aux1, const ImagePlane& aux2,
                        PatientAxis first, PatientAxis second, BoxParams params = {});

/// Which image set a pretext map is built for.
enum class PretextTarget { short_axis, long_axis_4ch };

struct PretextResult {
    // One entry per target image (SA: per slice); empty when skipped.
    std::vector<std::optional<LabelMap>> maps;
    // Box layouts for the non-skipped images, same indexing as `maps`.
    std::vector<std::optional<std::array<PositionBox, 9>>> boxes;
    int skipped = 0;
};

/// SA target uses the 2Ch and 4Ch planes with axes (left, posterior); the
/// LA-4Ch target uses the 2Ch plane and the mid SA slice with (left, superior).
/// Degenerate images are skipped with a warning.
PretextResult make_pretext_labels(const ViewStudy& study, PretextTarget target,
                                  BoxParams params = {});

/// Index of the "mid" slice of an S-slice stack.
inline int mid_slice_index(int slices) { return slices / 2; }

} // namespace viewgeom
} // namespace cmrssl
