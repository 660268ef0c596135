#pragma once

// Synthetic cardiac-like subjects.
//
// The heart is built in a local frame (u, v, w): w runs along the LV long
// axis from apex to base, u points from the LV axis toward the RV, v = w x u.
// The pose rotation maps local axes to patient axes.

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "cmrssl/study.hpp"

namespace cmrssl::phantom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Pose {
    Vec3 euler = Vec3::Zero();       // radians, R = Rz(euler.z) * Ry(euler.y) * Rx(euler.x)
    Vec3 translation = Vec3::Zero(); // mm, patient position of the local origin
    Mat3 rotation() const;
};

struct PhantomSpec {
    std::uint64_t seed = 0;
    double lv_radius = 24.0;       // ED cavity radius, mm
    double lv_length = 60.0;       // cavity semi-axis along the long axis (apex side), mm
    double myo_thickness = 8.0;
    double rv_offset = 30.0;       // distance of the RV centre from the LV axis
    double atrial_size = 18.0;     // LA radius; RA is 0.9x
    Pose heart_pose;
    double noise_sigma = 0.05;
    int grid_size = 112;           // voxels per side
    double grid_spacing = 2.0;     // mm
    double es_scale = 0.7;         // ES cavity radius relative to ED

    // Tissue intensities before noise.
    double blood_level = 1.0;
    double myo_level = 0.3;
    double tissue_level = 0.5;
    double lung_level = 0.08;

    /// Throws DegenerateSpec.
    void validate() const;
};

/// Analytic shapes of one frame in the heart-local frame.
struct HeartShape {
    double cavity_radius, cavity_length;
    double epi_radius, epi_length;
    double base_w;                 // truncation plane, local w
    double rv_centre_u, rv_radius_u, rv_radius_v, rv_length;
    double la_radius, ra_radius;
    Vec3 la_centre, ra_centre;     // local
};

HeartShape heart_shape(const PhantomSpec& spec, Frame frame);

/// Closed-form myocardium volume (mm^3) of a frame's shape.
double analytic_myocardium_volume(const HeartShape& shape);

struct Volume {
    int size = 0;
    double spacing = 1.0;
    std::vector<std::uint8_t> labels;
    std::vector<float> intensity;

    std::size_t index(int i, int j, int k) const {
        return (std::size_t(k) * size + j) * size + i;
    }
    /// Patient position of voxel (i, j, k); the grid is centred on the patient origin.
    Vec3 world(double i, double j, double k) const {
        const double c = (size - 1) / 2.0;
        return {(i - c) * spacing, (j - c) * spacing, (k - c) * spacing};
    }
    Vec3 to_voxel(const Vec3& p) const {
        const double c = (size - 1) / 2.0;
        return p / spacing + Vec3::Constant(c);
    }
    float sample_linear(const Vec3& p) const;
    std::uint8_t sample_nearest(const Vec3& p) const;
};

struct Phantom {
    PhantomSpec spec;
    Frame frame = Frame::ED;
    HeartShape shape;
    Mat3 rotation;   // local -> patient
    Vec3 translation;
    Volume volume;

    Vec3 local_to_patient(const Vec3& local) const { return rotation * local + translation; }
    Vec3 long_axis() const { return rotation.col(2); }
    /// Patient position of the LV cavity centroid.
    Vec3 lv_centroid() const;
};

Phantom generate_phantom(const PhantomSpec& spec, Frame frame = Frame::ED);

struct ViewConfig {
    int image_size = 64;            // square images; 208x180 at 1.82 mm in the clinical data
    double pixel_spacing = 2.5;     // mm
    double sa_slice_gap = 8.0;      // mm between SA slices
    double azimuth_4ch_deg = 0.0;   // around the long axis, from the RV direction
    double azimuth_2ch_deg = 60.0;
    double centre_jitter_px = 4.0;  // random in-plane shift of the heart in each image
};

ViewStudy sample_view_study(const Phantom& phantom, const ViewConfig& cfg,
                            const std::string& subject_id);

struct CohortConfig {
    PhantomSpec base;
    ViewConfig views;
    double angle_jitter_deg = 15.0;
    double translation_jitter_mm = 10.0;
    double size_jitter = 0.15;      // relative
    double contrast_jitter = 0.15;  // relative
};

/// Per-subject spec with anatomical default orientation plus random jitter.
PhantomSpec subject_spec(const CohortConfig& cfg, std::uint64_t cohort_seed, int subject_index);

std::string subject_name(int subject_index);

/// Generates ED and ES studies for one subject.
std::vector<ViewStudy> generate_subject(const CohortConfig& cfg, std::uint64_t cohort_seed,
                                        int subject_index);

} // namespace cmrssl::phantom
