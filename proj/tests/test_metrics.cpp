#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>
#include <random>
#include <sstream>

#include <unistd.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/metrics.hpp"
#include "cmrssl/phantom.hpp"
#include "oracles.hpp"

using namespace cmrssl;
using namespace cmrssl::metrics;
namespace fs = std::filesystem;

namespace {

Mask random_mask(std::mt19937_64& rng, GridSize size, double p) {
    std::bernoulli_distribution d(p);
    Mask m(size, 0);
    for (auto& v : m.values()) v = d(rng) ? 1 : 0;
    return m;
}

/// Random blob: union of a few filled rectangles, so boundaries are non-trivial.
Mask random_blobs(std::mt19937_64& rng, GridSize size, int label) {
    Mask m(size, 0);
    std::uniform_int_distribution<int> r(0, size.rows - 1), c(0, size.cols - 1), ext(1, 8), count(1, 4);
    const int n = count(rng);
    for (int k = 0; k < n; ++k) {
        const int r0 = r(rng), c0 = c(rng), h = ext(rng), w = ext(rng);
        for (int y = r0; y < std::min(size.rows, r0 + h); ++y)
            for (int x = c0; x < std::min(size.cols, c0 + w); ++x) m(y, x) = std::uint8_t(label);
    }
    return m;
}

Mask square(GridSize size, int r0, int c0, int side) {
    Mask m(size, 0);
    for (int y = r0; y < r0 + side; ++y)
        for (int x = c0; x < c0 + side; ++x) m(y, x) = 1;
    return m;
}

Mask disk(GridSize size, double cr, double cc, double radius) {
    Mask m(size, 0);
    for (int y = 0; y < size.rows; ++y)
        for (int x = 0; x < size.cols; ++x)
            if ((y - cr) * (y - cr) + (x - cc) * (x - cc) <= radius * radius) m(y, x) = 1;
    return m;
}

const std::vector<ViewStudy>& tiny_studies() {
    static const std::vector<ViewStudy> studies = [] {
        phantom::CohortConfig cc;
        cc.views.image_size = 32;
        cc.views.pixel_spacing = 5.0;
        std::vector<ViewStudy> out;
        for (int s = 0; s < 3; ++s)
            for (auto& st : phantom::generate_subject(cc, 12, s)) out.push_back(std::move(st));
        return out;
    }();
    return studies;
}

std::vector<std::vector<LabelMap>> predictions(const std::vector<ViewStudy>& studies, View v, bool perfect) {
    std::vector<std::vector<LabelMap>> out;
    for (const auto& st : studies) {
        auto& row = out.emplace_back();
        for (const auto* im : st.images(v))
            row.push_back(perfect ? *im->structures : LabelMap(im->plane.size, structure_label_count(v)));
    }
    return out;
}

} // namespace

TEST_CASE("dice: examples, conventions, shape check") {
    Mask a(GridSize{4, 4}, 0), b(GridSize{4, 4}, 0);
    CHECK(dice(a, b, 1) == 1.0);
    a(0, 0) = a(0, 1) = a(1, 0) = a(1, 1) = 1;
    CHECK(dice(a, a, 1) == 1.0);
    CHECK(dice(a, b, 1) == 0.0);
    b(1, 0) = b(1, 1) = b(2, 0) = b(2, 1) = 1;
    CHECK(dice(a, b, 1) == 0.5);
    b = Mask(GridSize{4, 4}, 0);
    b(3, 3) = 1;
    CHECK(dice(a, b, 1) == 0.0);
    CHECK_THROWS_AS(dice(a, Mask(GridSize{4, 5}, 0), 1), ShapeMismatch);
}

TEST_CASE("dice equals brute-force counting on 200 random mask pairs, symmetric") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_mask(rng, {16, 16}, 0.1 + 0.004 * trial);
        const auto b = random_mask(rng, {16, 16}, 0.5);
        CHECK(dice(a, b, 1) == oracle::brute_dice(a, b, 1));
        CHECK(dice(a, b, 1) == dice(b, a, 1));
        CHECK(dice(a, b, 0) == oracle::brute_dice(a, b, 0));
    }
}

TEST_CASE("boundary matches the 4-neighbour oracle") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = random_blobs(rng, {20, 17}, 1);
        const auto b = boundary(m);
        Mask expect(m.size(), 0);
        for (auto [r, c] : oracle::boundary_pixels(m, 1)) expect(r, c) = 1;
        CHECK(b == expect);
    }
}

TEST_CASE("distance transform matches brute force with anisotropic spacing") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const auto m = random_mask(rng, {13, 19}, 0.05);
        const Spacing sp{1.82, 0.7 + 0.05 * trial};
        const auto dt = distance_transform(m, sp);
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) {
                double best = std::numeric_limits<double>::infinity();
                for (int y = 0; y < m.rows(); ++y)
                    for (int x = 0; x < m.cols(); ++x)
                        if (m(y, x)) best = std::min(best, std::hypot((y - r) * sp.row, (x - c) * sp.col));
                if (std::isinf(best))
                    CHECK(std::isinf(dt(r, c)));
                else
                    CHECK(std::abs(dt(r, c) - best) < 1e-9);
            }
    }
}

TEST_CASE("mean contour distance: examples") {
    const GridSize size{40, 40};
    const auto a = square(size, 10, 10, 20);
    CHECK(mean_contour_distance(a, a, 1, {1.82, 1.82}) == 0.0);

    // Concentric squares with contours 3 px apart.
    const auto inner = square(size, 13, 13, 14);
    const double mcd = mean_contour_distance(a, inner, 1, {1.82, 1.82});
    CHECK(mcd >= 3 * 1.82 * 0.7);
    CHECK(mcd <= 3 * 1.82 * 1.1);
    CHECK(std::abs(mcd - oracle::brute_mcd(a, inner, 1, 1.82, 1.82)) < 1e-9);

    const GridSize big{80, 80};
    const auto d0 = disk(big, 40, 40, 25), d1 = disk(big, 40, 41, 25);
    CHECK(std::abs(mean_contour_distance(d0, d1, 1, {1.0, 1.0}) - 1.0) < 0.3);

    CHECK_THROWS_AS(mean_contour_distance(a, Mask(size, 0), 1, {1, 1}), EmptyMask);
}

TEST_CASE("mean contour distance matches the all-pairs oracle on masks up to 32x32") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> dim(4, 32);
    std::uniform_real_distribution<double> sp(0.5, 2.5);
    int compared = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const GridSize size{dim(rng), dim(rng)};
        const auto a = random_blobs(rng, size, 2), b = random_blobs(rng, size, 2);
        const double sr = sp(rng), sc = sp(rng);
        const double got = mean_contour_distance(a, b, 2, {sr, sc});
        CHECK(std::abs(got - oracle::brute_mcd(a, b, 2, sr, sc)) < 1e-9);
        CHECK(std::abs(got - mean_contour_distance(b, a, 2, {sr, sc})) < 1e-12);
        ++compared;
    }
    CHECK(compared == 120);
}

TEST_CASE("summaries use the sample standard deviation") {
    const std::vector<double> v{1.0, 2.0, 4.0};
    const auto s = summarize(v);
    CHECK(s.count == 3);
    CHECK(s.mean == doctest::Approx(7.0 / 3));
    CHECK(s.std == doctest::Approx(std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                              (4 - 7.0 / 3) * (4 - 7.0 / 3)) / 2)));
    CHECK(summarize(std::vector<double>{5.0}).std == 0.0);
    CHECK(summarize(std::vector<double>{}).count == 0);
    CHECK(format_mean_std({0.8114, 0.0372, 3}) == "0.811 (0.037)");
}

TEST_CASE("score: perfect and constant-background predictors") {
    const auto& st = tiny_studies();
    for (View v : {View::sa, View::la4ch}) {
        const auto perfect = score(st, v, predictions(st, v, true));
        CHECK(perfect.rows.size() == st.size() * evaluated_structures(v).size());
        for (const auto& r : perfect.rows) {
            CHECK(r.dice == 1.0);
            REQUIRE(r.mcd_mm.has_value());
            CHECK(*r.mcd_mm == 0.0);
        }
        CHECK(perfect.dice_summary().mean == 1.0);

        const auto blank = score(st, v, predictions(st, v, false));
        for (const auto& r : blank.rows) {
            CHECK_FALSE(r.mcd_mm.has_value());
            if (v == View::la4ch) CHECK(r.dice == 0.0);
        }
        CHECK(blank.mcd_excluded > 0);
    }
    CHECK(evaluated_structures(View::sa) == std::vector<int>{1, 2, 3});
    CHECK(evaluated_structures(View::la4ch) == std::vector<int>{1, 2, 3, 4, 5});
}

TEST_CASE("SA scoring averages slices within a subject before subjects") {
    const auto& st = tiny_studies();
    auto preds = predictions(st, View::sa, true);
    // Corrupt LV on one slice of the first study: its row must be the slice mean.
    auto& m = preds[0][std::size_t(viewgeom::mid_slice_index(int(preds[0].size())))];
    for (auto& v : m.grid.values())
        if (v == structure::lv) v = structure::background;
    const auto rep = score(st, View::sa, preds);
    const auto lv = std::find_if(rep.rows.begin(), rep.rows.end(), [&](const MetricRow& r) {
        return r.subject == st[0].subject_id && r.frame == st[0].frame && r.structure == structure::lv;
    });
    REQUIRE(lv != rep.rows.end());
    const double n = double(preds[0].size());
    CHECK(lv->dice == doctest::Approx((n - 1) / n));
}

TEST_CASE("aggregation is recomputable from raw rows; rows are sorted") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.3, 1.0);
    MetricsReport rep;
    for (int s = 4; s >= 0; --s)
        for (Frame f : {Frame::ES, Frame::ED})
            for (int k : {3, 1, 2})
                rep.rows.push_back({phantom::subject_name(s), f, k, u(rng), u(rng) * 4});
    const auto& st = tiny_studies();
    // Round-trip through CSV to exercise the sorted on-disk form.
    const fs::path dir = fs::temp_directory_path() / ("cmrssl_metrics_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    write_rows_csv(dir / "m.csv", rep);
    const auto back = read_rows_csv(dir / "m.csv", View::sa);
    REQUIRE(back.rows.size() == rep.rows.size());
    for (std::size_t i = 1; i < back.rows.size(); ++i) {
        const auto &a = back.rows[i - 1], &b = back.rows[i];
        CHECK(std::tie(a.subject, a.frame, a.structure) < std::tie(b.subject, b.frame, b.structure));
    }
    for (const auto& r : rep.rows) {
        const auto it = std::find_if(back.rows.begin(), back.rows.end(), [&](const MetricRow& x) {
            return x.subject == r.subject && x.frame == r.frame && x.structure == r.structure;
        });
        REQUIRE(it != back.rows.end());
        CHECK(it->dice == r.dice);
        CHECK(it->mcd_mm == r.mcd_mm);
    }

    std::map<std::pair<std::string, Frame>, std::vector<double>> per;
    for (const auto& r : back.rows) per[{r.subject, r.frame}].push_back(r.dice);
    std::vector<double> means;
    for (auto& [k, v] : per) means.push_back(std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()));
    const double mean = std::accumulate(means.begin(), means.end(), 0.0) / double(means.size());
    double ss = 0;
    for (double v : means) ss += (v - mean) * (v - mean);
    const auto s = back.dice_summary();
    CHECK(s.count == 10);
    CHECK(std::abs(s.mean - mean) < 1e-12);
    CHECK(std::abs(s.std - std::sqrt(ss / double(means.size() - 1))) < 1e-12);
    CHECK(back.dice_summary(Frame::ED).count == 5);

    // A single cell passes through aggregation unchanged.
    ExperimentResults one{{{"scratch", 5}, {back}}};
    const auto table = aggregate_experiment(one);
    const auto* cell = table.cell("scratch", 5);
    REQUIRE(cell);
    CHECK(cell->dice.mean == s.mean);
    CHECK(cell->dice.std == s.std);
    CHECK(cell->seeds == 1);
    CHECK(cell->structure_dice.at(2).mean == back.structure_dice(2).mean);
    (void)st;
    fs::remove_all(dir);
}

TEST_CASE("experiment tables: ascending budgets, mode order, pooled seeds, files") {
    auto report = [](double d) {
        MetricsReport r;
        for (int s = 0; s < 2; ++s)
            for (int k : {1, 2, 3}) r.rows.push_back({phantom::subject_name(s), Frame::ED, k, d + 0.01 * s, 1.0});
        return r;
    };
    ExperimentResults res;
    res[{"ssl_all", 5}] = {report(0.8), report(0.9)};
    res[{"scratch", 1}] = {report(0.5)};
    res[{"scratch", 5}] = {report(0.7)};
    res[{"ssl_all", 1}] = {report(0.6)};
    const auto t = aggregate_experiment(res, {"scratch", "ssl_all"});
    CHECK(t.budgets == std::vector<int>{1, 5});
    CHECK(t.modes == std::vector<std::string>{"scratch", "ssl_all"});
    const auto* pooled = t.cell("ssl_all", 5);
    REQUIRE(pooled);
    CHECK(pooled->seeds == 2);
    CHECK(pooled->dice.count == 4);
    CHECK(pooled->dice.mean == doctest::Approx(0.855));
    CHECK(t.cell("ssl_decoder", 1) == nullptr);

    const fs::path dir = fs::temp_directory_path() / ("cmrssl_tables_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    write_table_csv(dir / "t.csv", t);
    write_summary_csv(dir / "s.csv", t);
    write_learning_curves_svg(dir / "c.svg", t, View::sa, false);
    std::ifstream in(dir / "t.csv");
    std::string header, row1, row2;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    CHECK(header.find("scratch") < header.find("ssl_all"));
    CHECK(row1.rfind("1,", 0) == 0);
    CHECK(row2.rfind("5,", 0) == 0);
    std::stringstream svg;
    svg << std::ifstream(dir / "c.svg").rdbuf();
    CHECK(svg.str().find("<svg") != std::string::npos);
    CHECK(fs::file_size(dir / "s.csv") > 0);
    fs::remove_all(dir);
}
