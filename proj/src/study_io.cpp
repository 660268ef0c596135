#include "cmrssl/study_io.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/nifti.hpp"

namespace cmrssl::io {

using nlohmann::json;
using viewgeom::ImagePlane;

namespace {

json plane_to_json(const ImagePlane& p) {
    return json{
        {"image_position_patient", {p.origin.x(), p.origin.y(), p.origin.z()}},
        {"image_orientation_patient",
         {p.row_dir.x(), p.row_dir.y(), p.row_dir.z(), p.col_dir.x(), p.col_dir.y(), p.col_dir.z()}},
        // DICOM order: spacing between rows, then between columns.
        {"pixel_spacing", {p.spacing.y(), p.spacing.x()}},
        {"rows", p.size.rows},
        {"columns", p.size.cols},
    };
}

ImagePlane plane_from_json(const json& j) {
    ImagePlane p;
    const auto pos = j.at("image_position_patient").get<std::vector<double>>();
    const auto ori = j.at("image_orientation_patient").get<std::vector<double>>();
    const auto sp = j.at("pixel_spacing").get<std::vector<double>>();
    if (pos.size() != 3 || ori.size() != 6 || sp.size() != 2)
        throw FormatError("geometry record has wrong vector lengths");
    p.origin = {pos[0], pos[1], pos[2]};
    p.row_dir = {ori[0], ori[1], ori[2]};
    p.col_dir = {ori[3], ori[4], ori[5]};
    // Sidecars written by other tools carry ~6 significant digits.
    p.row_dir.normalize();
    p.col_dir.normalize();
    p.spacing = {sp[1], sp[0]};
    p.size = {j.at("rows").get<int>(), j.at("columns").get<int>()};
    p.validate();
    return p;
}

std::array<std::array<float, 4>, 3> sform_of(const ImagePlane& p, const viewgeom::Vec3& slice_step) {
    // LPS (DICOM) to RAS (NIfTI): negate x and y.
    const viewgeom::Vec3 ci = p.row_dir * p.spacing.x();
    const viewgeom::Vec3 cj = p.col_dir * p.spacing.y();
    std::array<std::array<float, 4>, 3> m{};
    for (int r = 0; r < 3; ++r) {
        const float s = r < 2 ? -1.f : 1.f;
        m[r] = {s * float(ci[r]), s * float(cj[r]), s * float(slice_step[r]), s * float(p.origin[r])};
    }
    return m;
}

std::vector<const ViewImage*> view_images(const ViewStudy& s, View v) { return s.images(v); }

void write_stack(const fs::path& path, const std::vector<const ViewImage*>& imgs,
                 nifti::DataType type, auto&& value_at) {
    const auto& p0 = imgs.front()->plane;
    nifti::Volume vol;
    vol.dim = {p0.size.cols, p0.size.rows, int(imgs.size())};
    viewgeom::Vec3 step = viewgeom::plane_normal(p0);
    if (imgs.size() > 1) step = imgs[1]->plane.origin - p0.origin;
    vol.pixdim = {float(p0.spacing.x()), float(p0.spacing.y()), float(step.norm())};
    vol.sform = sform_of(p0, step);
    vol.datatype = type;
    vol.data.reserve(vol.count());
    for (const ViewImage* vi : imgs) {
        if (vi->plane.size != p0.size)
            throw FormatError("all slices of a stack must share one grid size");
        for (int r = 0; r < p0.size.rows; ++r)
            for (int c = 0; c < p0.size.cols; ++c) vol.data.push_back(value_at(*vi, r, c));
    }
    nifti::write(path, vol);
}

void write_labels(const fs::path& path, const std::vector<const ViewImage*>& imgs,
                  std::optional<LabelMap> ViewImage::*member) {
    write_stack(path, imgs, nifti::DataType::uint8,
                [&](const ViewImage& vi, int r, int c) {
                    return (vi.*member) ? double((vi.*member)->grid(r, c)) : double(kMissingSlice);
                });
}

bool any_have(const std::vector<const ViewImage*>& imgs, std::optional<LabelMap> ViewImage::*member) {
    return std::any_of(imgs.begin(), imgs.end(), [&](const ViewImage* v) { return (v->*member).has_value(); });
}

bool all_have(const std::vector<const ViewImage*>& imgs, std::optional<LabelMap> ViewImage::*member) {
    return std::all_of(imgs.begin(), imgs.end(), [&](const ViewImage* v) { return (v->*member).has_value(); });
}

void read_labels(const fs::path& path, std::vector<ViewImage*>& imgs,
                 std::optional<LabelMap> ViewImage::*member, int num_labels) {
    const nifti::Volume vol = nifti::read(path);
    const auto& p0 = imgs.front()->plane;
    if (vol.dim[0] != p0.size.cols || vol.dim[1] != p0.size.rows || vol.dim[2] != int(imgs.size()))
        throw FormatError(path.string() + ": label volume shape differs from the geometry sidecar");
    std::size_t i = 0;
    const std::size_t plane = std::size_t(p0.size.rows) * p0.size.cols;
    for (ViewImage* vi : imgs) {
        const auto first = vol.data.begin() + std::ptrdiff_t(i);
        if (std::all_of(first, first + std::ptrdiff_t(plane), [](double x) { return x == kMissingSlice; })) {
            i += plane;
            vi->*member = std::nullopt;
            continue;
        }
        LabelMap lm(vi->plane.size, num_labels);
        for (auto& v : lm.grid.values()) {
            const double x = vol.data[i++];
            if (x < 0 || x >= num_labels)
                throw FormatError(path.string() + ": label value out of range");
            v = std::uint8_t(x);
        }
        vi->*member = std::move(lm);
    }
}

} // namespace

fs::path study_dir(const fs::path& root, const std::string& subject, Frame frame) {
    return root / subject / std::string(to_string(frame));
}

void save_study(const ViewStudy& study, const fs::path& root) {
    const fs::path dir = study_dir(root, study.subject_id, study.frame);
    fs::create_directories(dir);
    for (View v : {View::sa, View::la2ch, View::la4ch}) {
        const auto imgs = view_images(study, v);
        if (imgs.empty()) continue;
        const std::string name(to_string(v));

        json side{{"schema", kGeometrySchema},
                  {"subject", study.subject_id},
                  {"frame", to_string(study.frame)},
                  {"view", name},
                  {"slices", json::array()}};
        for (const ViewImage* vi : imgs) side["slices"].push_back(plane_to_json(vi->plane));
        std::ofstream(dir / (name + ".json")) << std::setprecision(17) << side.dump(1) << '\n';

        write_stack(dir / (name + ".nii.gz"), imgs, nifti::DataType::float32,
                    [](const ViewImage& vi, int r, int c) { return double(vi.image(r, c)); });
        if (all_have(imgs, &ViewImage::structures))
            write_labels(dir / (name + "_label.nii.gz"), imgs, &ViewImage::structures);
        if (any_have(imgs, &ViewImage::pretext))
            write_labels(dir / (name + "_pretext.nii.gz"), imgs, &ViewImage::pretext);
    }
}

void save_pretext(const ViewStudy& study, View view, const fs::path& root) {
    const fs::path dir = study_dir(root, study.subject_id, study.frame);
    const auto imgs = view_images(study, view);
    if (imgs.empty() || !any_have(imgs, &ViewImage::pretext))
        throw FormatError("study has no pretext labels for view " + std::string(to_string(view)));
    write_labels(dir / (std::string(to_string(view)) + "_pretext.nii.gz"), imgs, &ViewImage::pretext);
}

ViewStudy load_study(const fs::path& dir, std::vector<View> required) {
    ViewStudy study;
    bool have_meta = false;
    for (View v : {View::sa, View::la2ch, View::la4ch}) {
        const std::string name(to_string(v));
        const fs::path side_path = dir / (name + ".json");
        const fs::path img_path = dir / (name + ".nii.gz");
        const bool needed = std::find(required.begin(), required.end(), v) != required.end();
        if (!fs::exists(img_path) && !needed) continue;
        if (!fs::exists(side_path))
            throw FormatError("missing geometry sidecar " + side_path.string());

        json side;
        try {
            std::ifstream in(side_path);
            side = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(side_path.string() + ": " + e.what());
        }
        std::vector<ImagePlane> planes;
        try {
            if (side.value("schema", "") != kGeometrySchema)
                throw FormatError(side_path.string() + ": unknown schema");
            if (!have_meta) {
                study.subject_id = side.at("subject").get<std::string>();
                study.frame = parse_frame(side.at("frame").get<std::string>());
                have_meta = true;
            }
            for (const auto& s : side.at("slices")) planes.push_back(plane_from_json(s));
        } catch (const json::exception& e) {
            throw FormatError(side_path.string() + ": " + e.what());
        } catch (const InvalidGeometry& e) {
            throw FormatError(side_path.string() + ": " + e.what());
        }
        if (planes.empty()) throw FormatError(side_path.string() + ": no slices");

        if (!fs::exists(img_path)) throw FormatError("missing image " + img_path.string());
        const nifti::Volume vol = nifti::read(img_path);
        const GridSize g = planes.front().size;
        if (vol.dim[0] != g.cols || vol.dim[1] != g.rows || vol.dim[2] != int(planes.size()))
            throw FormatError(img_path.string() + ": image shape differs from the geometry sidecar");

        std::vector<ViewImage> images(planes.size());
        std::size_t i = 0;
        for (std::size_t s = 0; s < planes.size(); ++s) {
            images[s].plane = planes[s];
            images[s].image = Image(g);
            for (auto& px : images[s].image.values()) px = float(vol.data[i++]);
        }
        if (v == View::sa) {
            study.sa_stack = std::move(images);
        } else {
            if (images.size() != 1) throw FormatError(img_path.string() + ": long-axis views hold one slice");
            (v == View::la2ch ? study.la_2ch : study.la_4ch) = std::move(images.front());
        }

        auto targets = study.images(v);
        if (fs::exists(dir / (name + "_label.nii.gz")))
            read_labels(dir / (name + "_label.nii.gz"), targets, &ViewImage::structures,
                        structure_label_count(v));
        if (fs::exists(dir / (name + "_pretext.nii.gz")))
            read_labels(dir / (name + "_pretext.nii.gz"), targets, &ViewImage::pretext,
                        viewgeom::kPretextLabels);
    }
    if (!have_meta) throw FormatError("no views found in " + dir.string());
    return study;
}

std::vector<fs::path> list_study_dirs(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::is_directory(root)) throw FormatError("data directory " + root.string() + " does not exist");
    for (const auto& subj : fs::directory_iterator(root)) {
        if (!subj.is_directory()) continue;
        for (const char* f : {"ED", "ES"})
            if (fs::is_directory(subj.path() / f)) out.push_back(subj.path() / f);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<ViewStudy> load_cohort(const fs::path& root, std::vector<View> required) {
    std::vector<ViewStudy> out;
    for (const auto& d : list_study_dirs(root)) out.push_back(load_study(d, required));
    return out;
}

std::vector<std::string> subject_ids(const std::vector<ViewStudy>& studies) {
    std::set<std::string> ids;
    for (const auto& s : studies) ids.insert(s.subject_id);
    return {ids.begin(), ids.end()};
}

Split split_subjects(std::vector<std::string> subjects, std::size_t n_train, std::uint64_t seed) {
    std::sort(subjects.begin(), subjects.end());
    subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
    if (n_train > subjects.size())
        throw InsufficientSubjects("requested " + std::to_string(n_train) + " training subjects, " +
                                   std::to_string(subjects.size()) + " available");
    std::mt19937_64 rng(seed);
    // Fisher-Yates with an explicit draw so the order is identical across
    // standard library implementations.
    for (std::size_t i = subjects.size(); i > 1; --i) {
        const std::size_t j = std::size_t(rng() % i);
        std::swap(subjects[i - 1], subjects[j]);
    }
    Split s;
    s.train.assign(subjects.begin(), subjects.begin() + std::ptrdiff_t(n_train));
    s.test.assign(subjects.begin() + std::ptrdiff_t(n_train), subjects.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

std::pair<std::vector<ViewStudy>, std::vector<ViewStudy>>
split_dataset(const std::vector<ViewStudy>& studies, std::size_t n_train, std::uint64_t seed) {
    const Split s = split_subjects(subject_ids(studies), n_train, seed);
    const std::set<std::string> train(s.train.begin(), s.train.end());
    std::pair<std::vector<ViewStudy>, std::vector<ViewStudy>> out;
    for (const auto& st : studies) (train.count(st.subject_id) ? out.first : out.second).push_back(st);
    return out;
}

namespace {

struct MdCtx {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    MdCtx() { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
    ~MdCtx() { EVP_MD_CTX_free(ctx); }
    void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx, p, n); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx, md, &len);
        std::ostringstream os;
        for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
        return os.str();
    }
};

void hash_file(MdCtx& md, const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot read " + p.string());
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), std::streamsize(buf.size()));
        md.update(buf.data(), std::size_t(in.gcount()));
    }
}

} // namespace

std::string sha256_bytes(std::string_view bytes) {
    MdCtx md;
    md.update(bytes.data(), bytes.size());
    return md.hex();
}

std::string sha256(const fs::path& path) {
    MdCtx md;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(path))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string rel = fs::relative(f, path).generic_string();
            md.update(rel.data(), rel.size() + 1);
            hash_file(md, f);
        }
    } else {
        hash_file(md, path);
    }
    return md.hex();
}

} // namespace cmrssl::io
