#pragma once

// Dice, mean contour distance, per-subject evaluation and experiment tables.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmrssl/image.hpp"
#include "cmrssl/segnet.hpp"
#include "cmrssl/study.hpp"

namespace cmrssl::metrics {

using Mask = Grid<std::uint8_t>;

/// 2|A∩B| / (|A|+|B|) for the masks of `label`; 1 when both are empty.
/// Throws ShapeMismatch.
double dice(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt, int label);
double dice(const LabelMap& pred, const LabelMap& gt, int label);

/// Mask pixels with at least one 4-neighbour outside the mask (pixels outside
/// the image count as outside the mask).
Mask boundary(const Mask& mask);

/// Binary mask of `label`.
Mask label_mask(const Grid<std::uint8_t>& labels, int label);

/// Pixel spacing in mm along rows (vertical step) and columns (horizontal step).
struct Spacing {
    double row = 1.0;
    double col = 1.0;
};

/// Exact Euclidean distance (mm) from every pixel to the nearest set pixel of
/// `mask`; +inf everywhere if the mask is empty.
Grid<double> distance_transform(const Mask& mask, Spacing spacing);

/// Symmetric mean boundary distance in mm: the mean over pred boundary pixels
/// of the distance to the nearest gt boundary pixel, averaged with the
/// reverse direction. Throws EmptyMask if either mask is empty.
double mean_contour_distance(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt, int label,
                             Spacing spacing);

/// Structures scored for a view (SA: LV, myocardium, RV).
std::vector<int> evaluated_structures(View v);

struct MetricRow {
    std::string subject;
    Frame frame = Frame::ED;
    int structure = 0;
    double dice = 0.0;
    std::optional<double> mcd_mm;   // missing when a mask was empty on every slice
};

struct Summary {
    double mean = 0.0;
    double std = 0.0;   // sample standard deviation (n - 1); 0 for n <= 1
    int count = 0;
};

Summary summarize(std::span<const double> values);

struct MetricsReport {
    View view = View::sa;
    std::vector<MetricRow> rows;   // sorted by (subject, frame, structure)
    int mcd_excluded = 0;          // slices skipped in MCD because a mask was empty

    /// Per (subject, frame) Dice averaged over structures, optionally one frame.
    std::vector<double> subject_mean_dice(std::optional<Frame> frame = std::nullopt) const;
    Summary dice_summary(std::optional<Frame> frame = std::nullopt) const;
    Summary structure_dice(int structure, std::optional<Frame> frame = std::nullopt) const;
    Summary structure_mcd(int structure, std::optional<Frame> frame = std::nullopt) const;
};

/// Scores one predicted label map per image against its structure labels.
/// For SA stacks slice metrics are averaged within a subject/frame first.
/// `predictions[i][j]` is the prediction for `studies[i].images(view)[j]`.
MetricsReport score(const std::vector<ViewStudy>& studies, View view,
                    const std::vector<std::vector<LabelMap>>& predictions);

/// Runs `net` (head `head`) on every image of `view` and scores it.
MetricsReport evaluate(segnet::NetworkHandle& net, int head, const std::vector<ViewStudy>& studies, View view);

void write_rows_csv(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_rows_csv(const std::filesystem::path& path, View view);

// ---- experiment tables ----

struct CellKey {
    std::string mode;
    int n_subjects = 0;
    friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

/// Reports for one (mode, n) cell, one per seed (missing seeds simply absent).
using ExperimentResults = std::map<CellKey, std::vector<MetricsReport>>;

struct TableCell {
    Summary dice;                           // pooled over seeds, subjects and frames
    std::map<Frame, Summary> dice_by_frame;
    std::map<int, Summary> structure_dice;  // per structure, pooled
    std::map<int, Summary> structure_mcd;
    int seeds = 0;
};

struct ExperimentTable {
    std::vector<int> budgets;               // ascending
    std::vector<std::string> modes;         // in first-seen order of `mode_order`, then others
    std::map<CellKey, TableCell> cells;
    const TableCell* cell(const std::string& mode, int n) const;
};

ExperimentTable aggregate_experiment(const ExperimentResults& results,
                                     const std::vector<std::string>& mode_order = {});

/// Wide "mean (std)" grid: one row per budget, one column per mode.
void write_table_csv(const std::filesystem::path& path, const ExperimentTable& table);
/// Long format with every summary: n,mode,scope,metric,mean,std,count.
void write_summary_csv(const std::filesystem::path& path, const ExperimentTable& table);
/// Learning curves (metric vs number of training subjects), one line per mode.
void write_learning_curves_svg(const std::filesystem::path& path, const ExperimentTable& table, View view,
                               bool distance);

std::string format_mean_std(const Summary& s, int digits = 3);

} // namespace cmrssl::metrics
