#include "cmrssl/viewgeom.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/study.hpp"

namespace cmrssl::viewgeom {

std::string_view to_string(PatientAxis axis) {
    switch (axis) {
    case PatientAxis::left: return "left";
    case PatientAxis::posterior: return "posterior";
    case PatientAxis::superior: return "superior";
    }
    return "?";
}

Vec3 axis_vector(PatientAxis axis) {
    switch (axis) {
    case PatientAxis::left: return Vec3::UnitX();
    case PatientAxis::posterior: return Vec3::UnitY();
    case PatientAxis::superior: return Vec3::UnitZ();
    }
    return Vec3::Zero();
}

std::string_view to_string(BoxRole role) {
    switch (role) {
    case BoxRole::intersection: return "intersection";
    case BoxRole::a_minus_1: return "lineA-1";
    case BoxRole::a_minus_2: return "lineA-2";
    case BoxRole::a_plus_1: return "lineA+1";
    case BoxRole::a_plus_2: return "lineA+2";
    case BoxRole::b_minus_1: return "lineB-1";
    case BoxRole::b_minus_2: return "lineB-2";
    case BoxRole::b_plus_1: return "lineB+1";
    case BoxRole::b_plus_2: return "lineB+2";
    }
    return "?";
}

void ImagePlane::validate() const {
    if (std::abs(row_dir.norm() - 1.0) > kUnitTol || std::abs(col_dir.norm() - 1.0) > kUnitTol)
        throw InvalidGeometry("direction cosines must be unit vectors");
    if (std::abs(row_dir.dot(col_dir)) > kOrthoTol)
        throw InvalidGeometry("direction cosines must be orthogonal");
    if (!(spacing.x() > 0.0) || !(spacing.y() > 0.0))
        throw InvalidGeometry("pixel spacing must be positive");
    if (size.rows <= 0 || size.cols <= 0)
        throw InvalidGeometry("grid size must be positive");
}

Vec3 plane_normal(const ImagePlane& plane) {
    return plane.row_dir.cross(plane.col_dir).normalized();
}

Line3 intersect_planes(const ImagePlane& a, const ImagePlane& b) {
    const Vec3 na = plane_normal(a);
    const Vec3 nb = plane_normal(b);
    const Vec3 d = na.cross(nb);
    const double dn = d.norm();
    if (dn <= kParallelTol)
        throw ParallelPlanes("plane normals are parallel (|na x nb| = " + std::to_string(dn) + ")");

    // Point on both planes closest to the midpoint of the two origins: solve
    // the 3x3 system [na; nb; d] p = [na.oa, nb.ob, d.m].
    const Vec3 mid = 0.5 * (a.origin + b.origin);
    Eigen::Matrix3d m;
    m.row(0) = na.transpose();
    m.row(1) = nb.transpose();
    m.row(2) = d.transpose();
    const Vec3 rhs(na.dot(a.origin), nb.dot(b.origin), d.dot(mid));
    Line3 line;
    line.point = m.fullPivLu().solve(rhs);
    line.direction = d / dn;
    return line;
}

Vec2 world_to_pixel(const ImagePlane& plane, const Vec3& p) {
    const Vec3 rel = p - plane.origin;
    const double off = std::abs(rel.dot(plane_normal(plane)));
    if (off > kOffPlaneTol)
        throw OffPlanePoint("point is " + std::to_string(off) + " mm off the image plane");
    return {rel.dot(plane.col_dir) / plane.spacing.y(), rel.dot(plane.row_dir) / plane.spacing.x()};
}

Vec3 pixel_to_world(const ImagePlane& plane, const Vec2& rc) {
    return plane.origin + rc.y() * plane.spacing.x() * plane.row_dir +
           rc.x() * plane.spacing.y() * plane.col_dir;
}

Line2 project_line(const ImagePlane& target, const Line3& line) {
    // Anchor at the foot of the perpendicular from the plane origin.
    const double t = (target.origin - line.point).dot(line.direction);
    const Vec3 p0 = line.point + t * line.direction;
    const Vec3 p1 = p0 + 100.0 * line.direction;
    const Vec2 q0 = world_to_pixel(target, p0);
    const Vec2 q1 = world_to_pixel(target, p1);
    const Vec2 d = q1 - q0;
    if (d.norm() <= kParallelTol)
        throw OffPlanePoint("line is perpendicular to the target plane");
    return Line2{q0, d.normalized(), std::nullopt};
}

Vec3 direction_in_patient(const Line2& line, const ImagePlane& plane) {
    const Vec3 d = line.direction.x() * plane.spacing.y() * plane.col_dir +
                   line.direction.y() * plane.spacing.x() * plane.row_dir;
    return d.normalized();
}

Line2 orient_direction(const Line2& line, const ImagePlane& plane, PatientAxis axis) {
    const double dot = direction_in_patient(line, plane).dot(axis_vector(axis));
    if (std::abs(dot) <= kParallelTol)
        throw AmbiguousOrientation(std::string("line is perpendicular to the ") +
                                   std::string(to_string(axis)) + " axis");
    Line2 out = line;
    if (dot < 0) out.direction = -out.direction;
    out.positive_axis = axis;
    return out;
}

std::pair<Line2, Line2> assign_axes(const Line2& l1, const Line2& l2, const ImagePlane& plane,
                                    PatientAxis first, PatientAxis second) {
    const Vec3 d1 = direction_in_patient(l1, plane);
    const Vec3 d2 = direction_in_patient(l2, plane);
    const Vec3 f = axis_vector(first);
    const Vec3 s = axis_vector(second);
    const double keep = std::abs(d1.dot(f)) + std::abs(d2.dot(s));
    const double swap = std::abs(d2.dot(f)) + std::abs(d1.dot(s));
    bool swapped = swap > keep + kParallelTol;
    if (std::abs(swap - keep) <= kParallelTol)
        swapped = std::abs(d2.dot(f)) > std::abs(d1.dot(f)) + kParallelTol;
    const Line2& a = swapped ? l2 : l1;
    const Line2& b = swapped ? l1 : l2;
    return {orient_direction(a, plane, first), orient_direction(b, plane, second)};
}

Vec2 intersect_lines(const Line2& a, const Line2& b) {
    const double cross = a.direction.x() * b.direction.y() - a.direction.y() * b.direction.x();
    if (std::abs(cross) <= kParallelTol)
        throw ParallelLines("projected lines are parallel");
    const Vec2 w = b.point - a.point;
    const double s = (w.x() * b.direction.y() - w.y() * b.direction.x()) / cross;
    return a.point + s * a.direction;
}

std::array<PositionBox, 9> place_positions(const Line2& line_a, const Line2& line_b,
                                           GridSize image_size, BoxParams params) {
    if (params.side < 1 || params.side % 2 == 0)
        throw InvalidGeometry("box side must be odd and >= 1");
    if (params.spacing < 1) throw InvalidGeometry("box spacing must be >= 1");

    const Vec2 centre = intersect_lines(line_a, line_b);
    const double step = params.spacing;

    struct Slot { BoxRole role; const Line2* line; int k; };
    const std::array<Slot, 9> slots{{
        {BoxRole::intersection, &line_a, 0},
        {BoxRole::a_minus_1, &line_a, -1},
        {BoxRole::a_minus_2, &line_a, -2},
        {BoxRole::a_plus_1, &line_a, 1},
        {BoxRole::a_plus_2, &line_a, 2},
        {BoxRole::b_minus_1, &line_b, -1},
        {BoxRole::b_minus_2, &line_b, -2},
        {BoxRole::b_plus_1, &line_b, 1},
        {BoxRole::b_plus_2, &line_b, 2},
    }};

    std::array<PositionBox, 9> boxes;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto& box = boxes[i];
        box.center = centre + (slots[i].k * step) * slots[i].line->direction;
        box.side = params.side;
        box.label = int(i) + 1;
        box.role = slots[i].role;
        box.out_of_field = !(box.center.x() >= -0.5 && box.center.x() < image_size.rows - 0.5 &&
                             box.center.y() >= -0.5 && box.center.y() < image_size.cols - 0.5);
    }
    return boxes;
}

LabelMap rasterize(std::span<const PositionBox> boxes, GridSize image_size) {
    LabelMap out(image_size, kPretextLabels);
    std::vector<const PositionBox*> order;
    for (const auto& b : boxes) order.push_back(&b);
    // Paint highest label first so lower labels overwrite.
    std::sort(order.begin(), order.end(),
              [](const PositionBox* x, const PositionBox* y) { return x->label > y->label; });
    for (const PositionBox* b : order) {
        const int cr = int(std::floor(b->center.x() + 0.5));
        const int cc = int(std::floor(b->center.y() + 0.5));
        const int h = (b->side - 1) / 2;
        const int r0 = std::max(cr - h, 0), r1 = std::min(cr + h, image_size.rows - 1);
        const int c0 = std::max(cc - h, 0), c1 = std::min(cc + h, image_size.cols - 1);
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) out.grid(r, c) = std::uint8_t(b->label);
    }
    return out;
}

namespace {

std::array<PositionBox, 9> boxes_for(const ImagePlane& target, const ImagePlane& aux1,
                                     const ImagePlane& aux2, PatientAxis first,
                                     PatientAxis second, BoxParams params) {
    const Line2 l1 = project_line(target, intersect_planes(target, aux1));
    const Line2 l2 = project_line(target, intersect_planes(target, aux2));
    const auto [a, b] = assign_axes(l1, l2, target, first, second);
    return place_positions(a, b, target.size, params);
}

} // namespace

LabelMap pretext_labels(const ImagePlane& target, const ImagePlane& aux1, const ImagePlane& aux2,
                        PatientAxis first, PatientAxis second, BoxParams params) {
    const auto boxes = boxes_for(target, aux1, aux2, first, second, params);
    return rasterize(boxes, target.size);
}

PretextResult make_pretext_labels(const ViewStudy& study, PretextTarget target, BoxParams params) {
    PretextResult result;
    auto run = [&](const ImagePlane& plane, const ImagePlane& aux1, const ImagePlane& aux2,
                   PatientAxis first, PatientAxis second, std::string_view what) {
        try {
            auto boxes = boxes_for(plane, aux1, aux2, first, second, params);
            result.maps.emplace_back(rasterize(boxes, plane.size));
            result.boxes.emplace_back(boxes);
        } catch (const Error& e) {
            spdlog::warn("{}/{} {}: skipped pretext labels ({})", study.subject_id,
                         to_string(study.frame), what, e.what());
            result.maps.emplace_back(std::nullopt);
            result.boxes.emplace_back(std::nullopt);
            ++result.skipped;
        }
    };

    if (target == PretextTarget::short_axis) {
        for (std::size_t i = 0; i < study.sa_stack.size(); ++i)
            run(study.sa_stack[i].plane, study.la_2ch.plane, study.la_4ch.plane, PatientAxis::left,
                PatientAxis::posterior, "sa[" + std::to_string(i) + "]");
    } else {
        if (study.sa_stack.empty())
            throw InvalidGeometry("long-axis pretext labels need a short-axis stack");
        const auto& mid = study.sa_stack[mid_slice_index(int(study.sa_stack.size()))].plane;
        run(study.la_4ch.plane, study.la_2ch.plane, mid, PatientAxis::left, PatientAxis::superior,
            "la4ch");
    }
    return result;
}

} // namespace cmrssl::viewgeom
