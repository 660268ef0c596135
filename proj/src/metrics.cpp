#include "cmrssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "cmrssl/errors.hpp"

namespace cmrssl::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_same(GridSize a, GridSize b) {
    if (a != b)
        throw ShapeMismatch(fmt::format("prediction {}x{} vs ground truth {}x{}", a.rows, a.cols, b.rows, b.cols));
}

// Lower envelope of parabolas: out[p] = min_q (sp * (p - q))^2 + f[q].
void distance_1d(const std::vector<double>& f, double sp, std::vector<double>& out,
                 std::vector<int>& v, std::vector<double>& z) {
    const int n = int(f.size());
    const double s2 = sp * sp;
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        const auto meet = [&](int r) {
            return ((f[q] + s2 * q * q) - (f[r] + s2 * double(r) * r)) / (2.0 * s2 * (q - r));
        };
        // z[0] is -inf, so the scan always stops at k >= 0.
        double s = meet(v[k]);
        while (s <= z[k]) s = meet(v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    out.assign(n, kInf);
    if (k < 0) return;
    int j = 0;
    for (int p = 0; p < n; ++p) {
        while (z[j + 1] < p) ++j;
        const double d = p - v[j];
        out[p] = s2 * d * d + f[v[j]];
    }
}

double mean_distance_to(const Mask& from, const Grid<double>& dist) {
    double sum = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < from.values().size(); ++i)
        if (from.values()[i]) sum += dist.values()[i], ++n;
    return sum / double(n);
}

Spacing plane_spacing(const viewgeom::ImagePlane& plane) { return {plane.spacing.y(), plane.spacing.x()}; }

} // namespace

double dice(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt, int label) {
    check_same(pred.size(), gt.size());
    long a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.values().size(); ++i) {
        const bool p = pred.values()[i] == label, g = gt.values()[i] == label;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(both) / double(a + b);
}

double dice(const LabelMap& pred, const LabelMap& gt, int label) { return dice(pred.grid, gt.grid, label); }

Mask label_mask(const Grid<std::uint8_t>& labels, int label) {
    Mask m(labels.size(), 0);
    for (std::size_t i = 0; i < m.values().size(); ++i) m.values()[i] = labels.values()[i] == label;
    return m;
}

Mask boundary(const Mask& mask) {
    Mask out(mask.size(), 0);
    const int rows = mask.rows(), cols = mask.cols();
    const auto inside = [&](int r, int c) { return mask.contains(r, c) && mask(r, c) != 0; };
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            if (mask(r, c) && (!inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)))
                out(r, c) = 1;
    return out;
}

Grid<double> distance_transform(const Mask& mask, Spacing spacing) {
    const int rows = mask.rows(), cols = mask.cols();
    Grid<double> sq(mask.size(), kInf);
    std::vector<double> f, out, z;
    std::vector<int> v;
    // Vertical pass: distances within each column.
    f.resize(rows);
    for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < rows; ++r) f[r] = mask(r, c) ? 0.0 : kInf;
        distance_1d(f, spacing.row, out, v, z);
        for (int r = 0; r < rows; ++r) sq(r, c) = out[r];
    }
    // Horizontal pass over the column results.
    f.resize(cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) f[c] = sq(r, c);
        distance_1d(f, spacing.col, out, v, z);
        for (int c = 0; c < cols; ++c) sq(r, c) = out[c];
    }
    for (auto& d : sq.values()) d = std::sqrt(d);
    return sq;
}

double mean_contour_distance(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt, int label,
                             Spacing spacing) {
    check_same(pred.size(), gt.size());
    const Mask bp = boundary(label_mask(pred, label));
    const Mask bg = boundary(label_mask(gt, label));
    const auto any = [](const Mask& m) {
        return std::any_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v != 0; });
    };
    if (!any(bp) || !any(bg)) throw EmptyMask(fmt::format("label {} is absent from one of the masks", label));
    const double forward = mean_distance_to(bp, distance_transform(bg, spacing));
    const double backward = mean_distance_to(bg, distance_transform(bp, spacing));
    return 0.5 * (forward + backward);
}

std::vector<int> evaluated_structures(View v) {
    switch (v) {
    case View::sa: return {structure::lv, structure::myo, structure::rv};
    case View::la2ch: return {structure::lv, structure::myo, structure::la};
    case View::la4ch: return {structure::lv, structure::myo, structure::rv, structure::la, structure::ra};
    }
    return {};
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.count = int(values.size());
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
    if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) sq += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(sq / double(values.size() - 1));
    }
    return s;
}

std::vector<double> MetricsReport::subject_mean_dice(std::optional<Frame> frame) const {
    std::vector<double> out;
    std::size_t i = 0;
    while (i < rows.size()) {
        std::size_t j = i;
        double sum = 0.0;
        while (j < rows.size() && rows[j].subject == rows[i].subject && rows[j].frame == rows[i].frame)
            sum += rows[j++].dice;
        if (!frame || rows[i].frame == *frame) out.push_back(sum / double(j - i));
        i = j;
    }
    return out;
}

Summary MetricsReport::dice_summary(std::optional<Frame> frame) const {
    const auto v = subject_mean_dice(frame);
    return summarize(v);
}

Summary MetricsReport::structure_dice(int s, std::optional<Frame> frame) const {
    std::vector<double> v;
    for (const auto& r : rows)
        if (r.structure == s && (!frame || r.frame == *frame)) v.push_back(r.dice);
    return summarize(v);
}

Summary MetricsReport::structure_mcd(int s, std::optional<Frame> frame) const {
    std::vector<double> v;
    for (const auto& r : rows)
        if (r.structure == s && r.mcd_mm && (!frame || r.frame == *frame)) v.push_back(*r.mcd_mm);
    return summarize(v);
}

namespace {

void sort_rows(std::vector<MetricRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
        return std::tie(a.subject, a.frame, a.structure) < std::tie(b.subject, b.frame, b.structure);
    });
}

} // namespace

MetricsReport score(const std::vector<ViewStudy>& studies, View view,
                    const std::vector<std::vector<LabelMap>>& predictions) {
    if (predictions.size() != studies.size()) throw ShapeMismatch("one prediction list per study expected");
    MetricsReport rep;
    rep.view = view;
    const auto structures = evaluated_structures(view);
    for (std::size_t i = 0; i < studies.size(); ++i) {
        const auto images = studies[i].images(view);
        if (predictions[i].size() != images.size())
            throw ShapeMismatch(fmt::format("{}: {} predictions for {} images", studies[i].subject_id,
                                            predictions[i].size(), images.size()));
        for (int s : structures) {
            double dice_sum = 0.0, mcd_sum = 0.0;
            int scored = 0, mcd_n = 0;
            for (std::size_t j = 0; j < images.size(); ++j) {
                if (!images[j]->structures) continue;
                const auto& gt = images[j]->structures->grid;
                const auto& pred = predictions[i][j].grid;
                dice_sum += dice(pred, gt, s);
                ++scored;
                try {
                    mcd_sum += mean_contour_distance(pred, gt, s, plane_spacing(images[j]->plane));
                    ++mcd_n;
                } catch (const EmptyMask&) {
                    ++rep.mcd_excluded;
                }
            }
            if (scored == 0) continue;
            MetricRow row{studies[i].subject_id, studies[i].frame, s, dice_sum / scored, std::nullopt};
            if (mcd_n > 0) row.mcd_mm = mcd_sum / mcd_n;
            rep.rows.push_back(std::move(row));
        }
    }
    sort_rows(rep.rows);
    return rep;
}

MetricsReport evaluate(segnet::NetworkHandle& net, int head, const std::vector<ViewStudy>& studies, View view) {
    if (net.head_classes(head) != structure_label_count(view))
        throw BadConfig(fmt::format("head {} has {} classes but view {} needs {}", head, net.head_classes(head),
                                    to_string(view), structure_label_count(view)));
    std::vector<std::vector<LabelMap>> predictions(studies.size());
    for (std::size_t i = 0; i < studies.size(); ++i) {
        const auto images = studies[i].images(view);
        if (images.empty()) continue;
        std::vector<Image> normalised;
        normalised.reserve(images.size());
        for (const ViewImage* im : images) normalised.push_back(segnet::zscore(im->image));
        std::vector<const Image*> ptrs;
        for (const auto& im : normalised) ptrs.push_back(&im);
        const Tensor<float> logits = net.predict(segnet::make_batch(ptrs), head);
        for (int j = 0; j < logits.n; ++j) predictions[i].push_back(segnet::argmax_labels(logits, j));
    }
    return score(studies, view, predictions);
}

void write_rows_csv(const std::filesystem::path& path, const MetricsReport& report) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "subject,frame,structure,dice,mcd_mm\n";
    auto rows = report.rows;
    sort_rows(rows);
    for (const auto& r : rows)
        out << fmt::format("{},{},{},{:.17g},{}\n", r.subject, to_string(r.frame), structure_name(r.structure),
                           r.dice, r.mcd_mm ? fmt::format("{:.17g}", *r.mcd_mm) : std::string());
}

MetricsReport read_rows_csv(const std::filesystem::path& path, View view) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "subject,frame,structure,dice,mcd_mm") throw FormatError(path.string() + ": unexpected header");
    MetricsReport rep;
    rep.view = view;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 4) f.emplace_back();
        if (f.size() != 5) throw FormatError(path.string() + ": malformed row '" + line + "'");
        MetricRow r;
        r.subject = f[0];
        r.frame = parse_frame(f[1]);
        r.structure = -1;
        for (int s = 0; s < 6; ++s)
            if (structure_name(s) == f[2]) r.structure = s;
        if (r.structure < 0) throw FormatError(path.string() + ": unknown structure '" + f[2] + "'");
        try {
            r.dice = std::stod(f[3]);
            if (!f[4].empty()) r.mcd_mm = std::stod(f[4]);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": bad number in '" + line + "'");
        }
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

const TableCell* ExperimentTable::cell(const std::string& mode, int n) const {
    auto it = cells.find({mode, n});
    return it == cells.end() ? nullptr : &it->second;
}

ExperimentTable aggregate_experiment(const ExperimentResults& results, const std::vector<std::string>& mode_order) {
    ExperimentTable t;
    std::set<int> budgets;
    std::set<std::string> seen;
    for (const auto& m : mode_order) {
        t.modes.push_back(m);
        seen.insert(m);
    }
    for (const auto& [key, reports] : results) {
        budgets.insert(key.n_subjects);
        if (seen.insert(key.mode).second) t.modes.push_back(key.mode);
        TableCell cell;
        cell.seeds = int(reports.size());
        std::vector<double> pooled;
        std::map<Frame, std::vector<double>> by_frame;
        std::map<int, std::vector<double>> sd, sm;
        for (const auto& rep : reports) {
            for (double v : rep.subject_mean_dice()) pooled.push_back(v);
            for (Frame f : {Frame::ED, Frame::ES})
                for (double v : rep.subject_mean_dice(f)) by_frame[f].push_back(v);
            for (const auto& r : rep.rows) {
                sd[r.structure].push_back(r.dice);
                if (r.mcd_mm) sm[r.structure].push_back(*r.mcd_mm);
            }
        }
        cell.dice = summarize(pooled);
        for (const auto& [f, v] : by_frame) cell.dice_by_frame[f] = summarize(v);
        for (const auto& [s, v] : sd) cell.structure_dice[s] = summarize(v);
        for (const auto& [s, v] : sm) cell.structure_mcd[s] = summarize(v);
        t.cells[key] = std::move(cell);
    }
    t.budgets.assign(budgets.begin(), budgets.end());
    return t;
}

std::string format_mean_std(const Summary& s, int digits) {
    return fmt::format("{:.{}f} ({:.{}f})", s.mean, digits, s.std, digits);
}

void write_table_csv(const std::filesystem::path& path, const ExperimentTable& table) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "n_subjects";
    for (const auto& m : table.modes) out << "," << m;
    out << "\n";
    for (int n : table.budgets) {
        out << n;
        for (const auto& m : table.modes) {
            const TableCell* c = table.cell(m, n);
            out << "," << (c ? format_mean_std(c->dice) : std::string("missing"));
        }
        out << "\n";
    }
}

void write_summary_csv(const std::filesystem::path& path, const ExperimentTable& table) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "n_subjects,mode,scope,metric,mean,std,count\n";
    const auto row = [&](int n, const std::string& m, std::string_view scope, std::string_view metric,
                         const Summary& s) {
        out << fmt::format("{},{},{},{},{:.17g},{:.17g},{}\n", n, m, scope, metric, s.mean, s.std, s.count);
    };
    for (int n : table.budgets)
        for (const auto& m : table.modes) {
            const TableCell* c = table.cell(m, n);
            if (!c) continue;
            row(n, m, "pooled", "dice", c->dice);
            for (const auto& [f, s] : c->dice_by_frame) row(n, m, to_string(f), "dice", s);
            for (const auto& [st, s] : c->structure_dice) row(n, m, structure_name(st), "dice", s);
            for (const auto& [st, s] : c->structure_mcd) row(n, m, structure_name(st), "mcd_mm", s);
        }
}

void write_learning_curves_svg(const std::filesystem::path& path, const ExperimentTable& table, View view,
                               bool distance) {
    static constexpr const char* kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const auto structures = evaluated_structures(view);
    const int pw = 300, ph = 240, ml = 50, mr = 15, mt = 30, mb = 40;
    const int width = pw * int(structures.size()), height = ph + 30;

    const auto value = [&](const TableCell& c, int s) -> const Summary* {
        const auto& m = distance ? c.structure_mcd : c.structure_dice;
        auto it = m.find(s);
        return it == m.end() ? nullptr : &it->second;
    };
    double ymax = 1.0;
    if (distance) {
        ymax = 0.0;
        for (const auto& [k, c] : table.cells)
            for (int s : structures)
                if (const Summary* v = value(c, s)) ymax = std::max(ymax, v->mean);
        ymax = ymax > 0 ? std::ceil(ymax * 1.1) : 1.0;
    }

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" "
                       "font-family=\"sans-serif\" font-size=\"11\">\n", width, height);
    out << fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", width, height);
    const int nb = int(table.budgets.size());
    for (std::size_t p = 0; p < structures.size(); ++p) {
        const int x0 = int(p) * pw + ml, x1 = int(p + 1) * pw - mr, y0 = mt, y1 = ph - mb + mt;
        const auto px = [&](int i) { return nb <= 1 ? (x0 + x1) / 2.0 : x0 + (x1 - x0) * double(i) / (nb - 1); };
        const auto py = [&](double v) { return y1 - (y1 - y0) * std::clamp(v / ymax, 0.0, 1.0); };
        out << fmt::format("<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-weight=\"bold\">{} {}</text>\n",
                           (x0 + x1) / 2, structure_name(structures[p]), distance ? "MCD (mm)" : "Dice");
        out << fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", x0, y1, x1, y1);
        out << fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", x0, y0, x0, y1);
        for (int k = 0; k <= 4; ++k) {
            const double v = ymax * k / 4.0;
            out << fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n", x0 - 4,
                               py(v) + 4, v);
        }
        for (int i = 0; i < nb; ++i)
            out << fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", px(i), y1 + 15,
                               table.budgets[i]);
        out << fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">training subjects</text>\n",
                           (x0 + x1) / 2, y1 + 30);
        for (std::size_t m = 0; m < table.modes.size(); ++m) {
            std::string points;
            for (int i = 0; i < nb; ++i) {
                const TableCell* c = table.cell(table.modes[m], table.budgets[i]);
                const Summary* v = c ? value(*c, structures[p]) : nullptr;
                if (!v || v->count == 0) continue;
                points += fmt::format("{:.1f},{:.1f} ", px(i), py(v->mean));
            }
            const char* colour = kColours[m % std::size(kColours)];
            out << fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                               colour, points);
        }
    }
    for (std::size_t m = 0; m < table.modes.size(); ++m)
        out << fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n", 10 + int(m) * 110, height - 8,
                           kColours[m % std::size(kColours)], table.modes[m]);
    out << "</svg>\n";
}

} // namespace cmrssl::metrics
