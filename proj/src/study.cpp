#include "cmrssl/study.hpp"

#include <cmath>

#include "cmrssl/errors.hpp"

namespace cmrssl {

std::string_view to_string(Frame f) { return f == Frame::ED ? "ED" : "ES"; }

std::string_view to_string(View v) {
    switch (v) {
    case View::sa: return "sa";
    case View::la2ch: return "la2ch";
    case View::la4ch: return "la4ch";
    }
    return "?";
}

Frame parse_frame(std::string_view s) {
    if (s == "ED") return Frame::ED;
    if (s == "ES") return Frame::ES;
    throw FormatError("unknown frame '" + std::string(s) + "'");
}

View parse_view(std::string_view s) {
    if (s == "sa") return View::sa;
    if (s == "la2ch") return View::la2ch;
    if (s == "la4ch") return View::la4ch;
    throw FormatError("unknown view '" + std::string(s) + "'");
}

std::string_view structure_name(int label) {
    switch (label) {
    case structure::background: return "background";
    case structure::lv: return "LV";
    case structure::myo: return "Myo";
    case structure::rv: return "RV";
    case structure::la: return "LA";
    case structure::ra: return "RA";
    default: return "?";
    }
}

std::vector<const ViewImage*> ViewStudy::images(View v) const {
    std::vector<const ViewImage*> out;
    switch (v) {
    case View::sa:
        for (const auto& s : sa_stack) out.push_back(&s);
        break;
    case View::la2ch: out.push_back(&la_2ch); break;
    case View::la4ch: out.push_back(&la_4ch); break;
    }
    return out;
}

std::vector<ViewImage*> ViewStudy::images(View v) {
    std::vector<ViewImage*> out;
    for (const ViewImage* p : std::as_const(*this).images(v)) out.push_back(const_cast<ViewImage*>(p));
    return out;
}

void ViewStudy::validate() const {
    auto check = [](const ViewImage& vi) {
        vi.plane.validate();
        if (!vi.image.empty() && vi.image.size() != vi.plane.size)
            throw InvalidGeometry("image shape differs from its plane");
        if (vi.structures && vi.structures->size() != vi.plane.size)
            throw InvalidGeometry("label map shape differs from its plane");
    };
    for (const auto& s : sa_stack) check(s);
    check(la_2ch);
    check(la_4ch);
    if (sa_stack.empty()) return;
    const auto n0 = viewgeom::plane_normal(sa_stack.front().plane);
    for (const auto& s : sa_stack)
        if (viewgeom::plane_normal(s.plane).cross(n0).norm() > 1e-6)
            throw InvalidGeometry("short-axis slices are not parallel");
}

} // namespace cmrssl
