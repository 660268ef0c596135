#include "cmrssl/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "cmrssl/errors.hpp"
#include "cmrssl/seed.hpp"

namespace cmrssl::phantom {

namespace {

double truncated_ellipsoid_volume(double radius, double half_length, double top) {
    // pi R^2 * integral_{-A}^{top} (1 - w^2 / A^2) dw
    const double a = half_length;
    const double t = std::min(top, a);
    return std::numbers::pi * radius * radius * ((t + a) - (t * t * t + a * a * a) / (3 * a * a));
}

struct Labeler {
    const HeartShape& s;

    std::uint8_t operator()(const Vec3& p) const {
        const double u = p.x(), v = p.y(), w = p.z();
        if (w <= s.base_w) {
            const double rho2 = u * u + v * v;
            if (rho2 / (s.cavity_radius * s.cavity_radius) +
                    w * w / (s.cavity_length * s.cavity_length) <= 1.0)
                return structure::lv;
            if (rho2 / (s.epi_radius * s.epi_radius) + w * w / (s.epi_length * s.epi_length) <= 1.0)
                return structure::myo;
            const double du = (u - s.rv_centre_u) / s.rv_radius_u;
            const double dv = v / s.rv_radius_v;
            const double dw = w / s.rv_length;
            if (du * du + dv * dv + dw * dw <= 1.0) return structure::rv;
            return structure::background;
        }
        if ((p - s.la_centre).squaredNorm() <= s.la_radius * s.la_radius) return structure::la;
        if ((p - s.ra_centre).squaredNorm() <= s.ra_radius * s.ra_radius) return structure::ra;
        return structure::background;
    }
};

double background_level(const PhantomSpec& spec, const Vec3& patient) {
    // Two lungs and a descending aorta, fixed in patient space.
    auto inside = [](const Vec3& p, const Vec3& c, const Vec3& r) {
        return ((p - c).array() / r.array()).square().sum() <= 1.0;
    };
    const Vec3 lung_r(40.0, 70.0, 110.0);
    if (inside(patient, Vec3(80.0, 20.0, 0.0), lung_r) ||
        inside(patient, Vec3(-80.0, 20.0, 0.0), lung_r))
        return spec.lung_level;
    const double ax = patient.x() - 15.0, ay = patient.y() - 60.0;
    if (ax * ax + ay * ay <= 11.0 * 11.0) return spec.blood_level * 0.9;
    return spec.tissue_level;
}

} // namespace

Mat3 Pose::rotation() const {
    return (Eigen::AngleAxisd(euler.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(euler.y(), Vec3::UnitY()) *
            Eigen::AngleAxisd(euler.x(), Vec3::UnitX()))
        .toRotationMatrix();
}

void PhantomSpec::validate() const {
    if (!(lv_radius > 0)) throw DegenerateSpec("lv_radius must be positive");
    if (!(lv_length > 0)) throw DegenerateSpec("lv_length must be positive");
    if (!(myo_thickness > 0)) throw DegenerateSpec("myo_thickness must be positive");
    if (myo_thickness >= lv_radius)
        throw DegenerateSpec("myo_thickness >= lv_radius collapses the cavity region");
    if (!(noise_sigma >= 0)) throw DegenerateSpec("noise_sigma must be non-negative");
    if (!(rv_offset > 0) || 2 * rv_offset <= lv_radius + myo_thickness)
        throw DegenerateSpec("rv_offset leaves no room for the RV outside the epicardium");
    if (!(atrial_size > 0)) throw DegenerateSpec("atrial_size must be positive");
    if (!(es_scale > 0 && es_scale <= 1)) throw DegenerateSpec("es_scale must be in (0, 1]");
    if (grid_size < 8 || !(grid_spacing > 0)) throw DegenerateSpec("volume grid too small");
}

HeartShape heart_shape(const PhantomSpec& spec, Frame frame) {
    const bool es = frame == Frame::ES;
    HeartShape s{};
    s.cavity_radius = spec.lv_radius * (es ? spec.es_scale : 1.0);
    s.cavity_length = spec.lv_length * (es ? 0.9 : 1.0);
    const double t = spec.myo_thickness * (es ? 1.25 : 1.0);
    s.epi_radius = s.cavity_radius + t;
    s.epi_length = s.cavity_length + t;
    s.base_w = 0.35 * spec.lv_length;
    const double rv_scale = es ? 0.75 : 1.0;
    s.rv_centre_u = spec.rv_offset;
    s.rv_radius_u = spec.rv_offset * rv_scale;
    s.rv_radius_v = 1.5 * (spec.lv_radius + spec.myo_thickness) * rv_scale;
    s.rv_length = 0.8 * spec.lv_length;
    const double atrial_scale = es ? 1.15 : 1.0;
    s.la_radius = spec.atrial_size * atrial_scale;
    s.ra_radius = 0.9 * spec.atrial_size * atrial_scale;
    s.la_centre = Vec3(-0.2 * s.la_radius, 0.0, s.base_w + 0.8 * s.la_radius);
    s.ra_centre = Vec3(spec.rv_offset, 0.0, s.base_w + 0.8 * s.ra_radius);
    return s;
}

double analytic_myocardium_volume(const HeartShape& s) {
    return truncated_ellipsoid_volume(s.epi_radius, s.epi_length, s.base_w) -
           truncated_ellipsoid_volume(s.cavity_radius, s.cavity_length, s.base_w);
}

float Volume::sample_linear(const Vec3& p) const {
    const Vec3 g = to_voxel(p);
    const double fi = std::floor(g.x()), fj = std::floor(g.y()), fk = std::floor(g.z());
    const int i0 = int(fi), j0 = int(fj), k0 = int(fk);
    const double ti = g.x() - fi, tj = g.y() - fj, tk = g.z() - fk;
    double acc = 0.0;
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const int i = i0 + di, j = j0 + dj, k = k0 + dk;
                if (i < 0 || j < 0 || k < 0 || i >= size || j >= size || k >= size) continue;
                const double wgt =
                    (di ? ti : 1 - ti) * (dj ? tj : 1 - tj) * (dk ? tk : 1 - tk);
                acc += wgt * intensity[index(i, j, k)];
            }
    return float(acc);
}

std::uint8_t Volume::sample_nearest(const Vec3& p) const {
    const Vec3 g = to_voxel(p);
    const int i = int(std::floor(g.x() + 0.5)), j = int(std::floor(g.y() + 0.5)),
              k = int(std::floor(g.z() + 0.5));
    if (i < 0 || j < 0 || k < 0 || i >= size || j >= size || k >= size) return 0;
    return labels[index(i, j, k)];
}

Vec3 Phantom::lv_centroid() const {
    // Centroid of the truncated cavity ellipsoid along w.
    const double a = shape.cavity_length, t = std::min(shape.base_w, a);
    auto m0 = [&](double w) { return w - w * w * w / (3 * a * a); };
    auto m1 = [&](double w) { return w * w / 2 - w * w * w * w / (4 * a * a); };
    const double wbar = (m1(t) - m1(-a)) / (m0(t) - m0(-a));
    return local_to_patient(Vec3(0, 0, wbar));
}

Phantom generate_phantom(const PhantomSpec& spec, Frame frame) {
    spec.validate();
    Phantom ph;
    ph.spec = spec;
    ph.frame = frame;
    ph.shape = heart_shape(spec, frame);
    ph.rotation = spec.heart_pose.rotation();
    ph.translation = spec.heart_pose.translation;

    Volume& vol = ph.volume;
    vol.size = spec.grid_size;
    vol.spacing = spec.grid_spacing;
    const std::size_t n = std::size_t(vol.size) * vol.size * vol.size;
    vol.labels.assign(n, 0);
    vol.intensity.assign(n, 0.0f);

    const Labeler label_of{ph.shape};
    const Mat3 to_local = ph.rotation.transpose();
    const int N = vol.size;
#pragma omp parallel for schedule(static)
    for (int k = 0; k < N; ++k)
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < N; ++i) {
                const Vec3 p = vol.world(i, j, k);
                const std::uint8_t lab = label_of(to_local * (p - ph.translation));
                const std::size_t idx = vol.index(i, j, k);
                vol.labels[idx] = lab;
                double level;
                switch (lab) {
                case structure::background: level = background_level(spec, p); break;
                case structure::myo: level = spec.myo_level; break;
                default: level = spec.blood_level; break;
                }
                vol.intensity[idx] = float(level);
            }

    if (spec.noise_sigma > 0) {
        std::mt19937_64 rng(mix_seed(spec.seed, frame == Frame::ED ? 0x1d : 0x2e));
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (auto& v : vol.intensity) v = float(v + noise(rng));
    }
    return ph;
}

namespace {

ViewImage resample(const Volume& vol, const viewgeom::ImagePlane& plane, int num_labels) {
    ViewImage vi;
    vi.plane = plane;
    vi.image = Image(plane.size);
    LabelMap labels(plane.size, num_labels);
    for (int r = 0; r < plane.size.rows; ++r)
        for (int c = 0; c < plane.size.cols; ++c) {
            const Vec3 p = viewgeom::pixel_to_world(plane, viewgeom::Vec2(r, c));
            vi.image(r, c) = vol.sample_linear(p);
            const auto lab = vol.sample_nearest(p);
            labels.grid(r, c) = lab < num_labels ? lab : std::uint8_t(0);
        }
    vi.structures = std::move(labels);
    return vi;
}

viewgeom::ImagePlane centred_plane(const Vec3& centre, const Vec3& row_dir, const Vec3& col_dir,
                                   const ViewConfig& cfg, double jitter_r, double jitter_c) {
    viewgeom::ImagePlane plane;
    plane.row_dir = row_dir.normalized();
    plane.col_dir = col_dir.normalized();
    plane.spacing = viewgeom::Vec2::Constant(cfg.pixel_spacing);
    plane.size = {cfg.image_size, cfg.image_size};
    const double cr = (cfg.image_size - 1) / 2.0 + jitter_r;
    const double cc = (cfg.image_size - 1) / 2.0 + jitter_c;
    plane.origin = centre - cc * cfg.pixel_spacing * plane.row_dir -
                   cr * cfg.pixel_spacing * plane.col_dir;
    return plane;
}

} // namespace

ViewStudy sample_view_study(const Phantom& ph, const ViewConfig& cfg, const std::string& subject_id) {
    if (cfg.image_size < 8 || !(cfg.pixel_spacing > 0) || !(cfg.sa_slice_gap > 0))
        throw DegenerateSpec("invalid view configuration");

    // Plane placement depends on the subject only, so ED and ES share geometry.
    std::mt19937_64 rng(mix_seed(ph.spec.seed, 0x5a));
    std::uniform_real_distribution<double> jitter(-cfg.centre_jitter_px, cfg.centre_jitter_px);

    const Vec3 u = ph.rotation.col(0), v = ph.rotation.col(1), w = ph.rotation.col(2);
    const HeartShape ed = heart_shape(ph.spec, Frame::ED);

    ViewStudy study;
    study.subject_id = subject_id;
    study.frame = ph.frame;

    // SA stack, base to apex. Rows follow the projection of patient-left.
    Vec3 row = Vec3::UnitX() - Vec3::UnitX().dot(w) * w;
    if (row.norm() < 1e-3) row = Vec3::UnitY() - Vec3::UnitY().dot(w) * w;
    row.normalize();
    const Vec3 col = w.cross(row);
    const double w_hi = ed.base_w - 2.0;
    const double w_lo = -0.9 * ph.spec.lv_length;
    const int slices = int(std::floor((w_hi - w_lo) / cfg.sa_slice_gap)) + 1;
    const double jr = jitter(rng), jc = jitter(rng);
    for (int s = 0; s < slices; ++s) {
        const Vec3 centre = ph.local_to_patient(Vec3(0, 0, w_hi - s * cfg.sa_slice_gap));
        study.sa_stack.push_back(
            resample(ph.volume, centred_plane(centre, row, col, cfg, jr, jc), structure_label_count(View::sa)));
    }

    // Long-axis planes contain the LV axis; base at the top of the image.
    const double w_mid = 0.5 * (-(ed.epi_length) + ed.base_w + 2 * ed.la_radius);
    const Vec3 la_centre = ph.local_to_patient(Vec3(0, 0, w_mid));
    auto long_axis_plane = [&](double azimuth_deg) {
        const double az = azimuth_deg * std::numbers::pi / 180.0;
        Vec3 in_plane = std::cos(az) * u + std::sin(az) * v;
        if (in_plane.x() < 0) in_plane = -in_plane;
        const double a = jitter(rng), b = jitter(rng);
        return centred_plane(la_centre, in_plane, -w, cfg, a, b);
    };
    study.la_4ch = resample(ph.volume, long_axis_plane(cfg.azimuth_4ch_deg),
                            structure_label_count(View::la4ch));
    study.la_2ch = resample(ph.volume, long_axis_plane(cfg.azimuth_2ch_deg),
                            structure_label_count(View::la2ch));
    return study;
}

std::string subject_name(int subject_index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "subj%04d", subject_index);
    return buf;
}

PhantomSpec subject_spec(const CohortConfig& cfg, std::uint64_t cohort_seed, int subject_index) {
    std::mt19937_64 rng(mix_seed(cohort_seed, std::uint64_t(subject_index)));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    auto scaled = [&](double v, double rel) { return v * (1.0 + rel * unit(rng)); };

    PhantomSpec s = cfg.base;
    s.seed = mix_seed(cohort_seed ^ 0x9e3779b97f4a7c15ULL, std::uint64_t(subject_index));
    s.lv_radius = scaled(cfg.base.lv_radius, cfg.size_jitter);
    s.lv_length = scaled(cfg.base.lv_length, cfg.size_jitter);
    s.myo_thickness = scaled(cfg.base.myo_thickness, cfg.size_jitter);
    s.rv_offset = scaled(cfg.base.rv_offset, cfg.size_jitter);
    s.atrial_size = scaled(cfg.base.atrial_size, cfg.size_jitter);
    s.blood_level = scaled(cfg.base.blood_level, cfg.contrast_jitter);
    s.myo_level = scaled(cfg.base.myo_level, cfg.contrast_jitter);
    s.tissue_level = scaled(cfg.base.tissue_level, cfg.contrast_jitter);
    s.lung_level = scaled(cfg.base.lung_level, cfg.contrast_jitter);

    // Anatomical orientation: apex toward anterior-left-inferior, RV toward
    // right-anterior, then a random rotation on top.
    const Vec3 w = Vec3(-0.6, 0.5, 0.6).normalized();
    Vec3 u = Vec3(-1.0, -1.0, 0.0);
    u = (u - u.dot(w) * w).normalized();
    Mat3 anat;
    anat.col(0) = u;
    anat.col(1) = w.cross(u);
    anat.col(2) = w;
    const double j = cfg.angle_jitter_deg * std::numbers::pi / 180.0;
    const Mat3 jit = (Eigen::AngleAxisd(j * unit(rng), Vec3::UnitZ()) *
                      Eigen::AngleAxisd(j * unit(rng), Vec3::UnitY()) *
                      Eigen::AngleAxisd(j * unit(rng), Vec3::UnitX()))
                         .toRotationMatrix();
    const Vec3 zyx = (jit * anat).eulerAngles(2, 1, 0);
    s.heart_pose.euler = Vec3(zyx[2], zyx[1], zyx[0]);
    s.heart_pose.translation = Vec3(unit(rng), unit(rng), unit(rng)) * cfg.translation_jitter_mm;
    return s;
}

std::vector<ViewStudy> generate_subject(const CohortConfig& cfg, std::uint64_t cohort_seed,
                                        int subject_index) {
    const PhantomSpec spec = subject_spec(cfg, cohort_seed, subject_index);
    std::vector<ViewStudy> out;
    for (Frame f : {Frame::ED, Frame::ES}) {
        const Phantom ph = generate_phantom(spec, f);
        out.push_back(sample_view_study(ph, cfg.views, subject_name(subject_index)));
    }
    return out;
}

} // namespace cmrssl::phantom
