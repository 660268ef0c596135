#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cmrssl/image.hpp"
#include "cmrssl/viewgeom.hpp"

namespace cmrssl {

enum class Frame { ED, ES };
enum class View { sa, la2ch, la4ch };

std::string_view to_string(Frame f);
std::string_view to_string(View v);
Frame parse_frame(std::string_view s);
View parse_view(std::string_view s);

// Structure label values.
namespace structure {
inline constexpr std::uint8_t background = 0;
inline constexpr std::uint8_t lv = 1;
inline constexpr std::uint8_t myo = 2;
inline constexpr std::uint8_t rv = 3;
inline constexpr std::uint8_t la = 4;
inline constexpr std::uint8_t ra = 5;
} // namespace structure

/// Number of structure labels (including background) annotated on a view.
inline int structure_label_count(View v) { return v == View::sa ? 4 : 6; }
std::string_view structure_name(int label);

struct ViewImage {
    viewgeom::ImagePlane plane;
    Image image;
    std::optional<LabelMap> structures;
    std::optional<LabelMap> pretext;
};

/// One subject at one cardiac frame: SA stack plus the 2Ch and 4Ch long-axis
/// slices, all in one patient coordinate frame.
struct ViewStudy {
    std::string subject_id;
    Frame frame = Frame::ED;
    std::vector<ViewImage> sa_stack;
    ViewImage la_2ch;
    ViewImage la_4ch;

    /// The images belonging to a view (SA: whole stack).
    std::vector<const ViewImage*> images(View v) const;
    std::vector<ViewImage*> images(View v);

    /// Throws InvalidGeometry if planes are malformed or SA slices are not parallel.
    void validate() const;
};

} // namespace cmrssl
