#pragma once

// Pretext pretraining, the four transfer regimes and the alternating
// multi-task schedule.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmrssl/image.hpp"
#include "cmrssl/segnet.hpp"
#include "cmrssl/study.hpp"

namespace cmrssl::trainer {

using segnet::NetworkHandle;

struct AugmentConfig {
    bool enabled = true;
    double rotation_deg = 30.0;   // uniform in [-rotation_deg, rotation_deg]
    double scale_min = 0.8;
    double scale_max = 1.25;
};

struct TrainConfig {
    double learning_rate = 0.001;
    int batch_size = 8;           // 20 slices at clinical scale
    int iterations = 2000;        // 50,000 at clinical scale
    int beta = 10;                // task-2 sub-iterations per task-1 sub-iteration
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    AugmentConfig augment;

    void validate() const;  // throws BadConfig
};

enum class TransferMode { scratch, ssl_decoder, ssl_all, ssl_multitask };
std::string_view to_string(TransferMode m);
TransferMode parse_mode(std::string_view s);
inline constexpr TransferMode kAllModes[] = {TransferMode::scratch, TransferMode::ssl_decoder,
                                             TransferMode::ssl_all, TransferMode::ssl_multitask};

/// One training slice: a z-scored image and its label map.
struct Sample {
    Image image;
    Grid<std::uint8_t> labels;
};

struct Dataset {
    std::vector<Sample> samples;
    int num_classes = 0;
    bool empty() const { return samples.empty(); }
};

/// Slices of `view` with pretext labels (images without a pretext map are left out).
Dataset pretext_dataset(const std::vector<ViewStudy>& studies, View view);
/// Slices of `view` with structure labels.
Dataset structure_dataset(const std::vector<ViewStudy>& studies, View view);

/// Rotation by `angle_deg` (positive angles turn +col toward +row, i.e.
/// clockwise on screen) and isotropic scaling by `scale` about the image centre.
/// Image bilinear, labels nearest neighbour; pixels mapped from outside the
/// canvas get the image minimum and label 0. Multiples of 90 degrees use exact
/// cosines.
std::pair<Image, Grid<std::uint8_t>> transform(const Image& image, const Grid<std::uint8_t>& labels,
                                               double angle_deg, double scale);

/// Random rotation and scaling drawn from `cfg`, applied to both grids.
std::pair<Image, Grid<std::uint8_t>> augment(const Image& image, const Grid<std::uint8_t>& labels,
                                             std::mt19937_64& rng, const AugmentConfig& cfg = {});

/// Adam with per-parameter moment buffers keyed by parameter name.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    explicit Adam(const TrainConfig& cfg)
        : Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

    /// One update of every parameter for which `trainable` holds, using the
    /// gradients currently stored in the network.
    void step(NetworkHandle& net, const std::function<bool(const segnet::Param<float>&)>& trainable);
    long steps() const { return t_; }

private:
    struct Moments { std::vector<double> m, v; };
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Task ids (1 or 2) in execution order: repeating [1, 2 x beta].
/// Throws BadBudget unless beta >= 1 and budget is a positive multiple of beta.
std::vector<int> multitask_step_schedule(int beta, int task2_budget);

struct LogRow {
    int iter = 0;   // global sub-iteration index
    int task = 0;   // 1 = pretext, 2 = target task
    double loss = 0.0;
};

struct TrainLog {
    std::vector<LogRow> rows;
    int count(int task) const;
    /// Mean loss of the first / last `window` rows of `task`.
    double head_mean(int task, int window) const;
    double tail_mean(int task, int window) const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Called after every optimiser step with the global sub-iteration index.
using StepObserver = std::function<void(int iter, int task, const NetworkHandle& net)>;

/// Trains a fresh K=10 network on pretext labels.
NetworkHandle pretrain(const TrainConfig& cfg, const segnet::NetConfig& net_cfg, const Dataset& pretext,
                       TrainLog* log = nullptr, const StepObserver& observer = {});

/// Target-task training. `pretrained` is required unless mode is scratch;
/// `pretext` is required for ssl_multitask. The returned network predicts the
/// target task with head `target_head(mode)`.
NetworkHandle finetune(TransferMode mode, const TrainConfig& cfg, const segnet::NetConfig& net_cfg,
                       const Dataset& annotated, const NetworkHandle* pretrained,
                       const Dataset* pretext = nullptr, TrainLog* log = nullptr,
                       const StepObserver& observer = {});

/// Alternating optimisation of the pretext (head 0) and target (head 1)
/// tasks from a pretrained single-head network, following
/// multitask_step_schedule(cfg.beta, cfg.iterations).
NetworkHandle multitask_finetune(const TrainConfig& cfg, const Dataset& pretext, const Dataset& annotated,
                                 const NetworkHandle& pretrained, TrainLog* log = nullptr,
                                 const StepObserver& observer = {});

inline int target_head(TransferMode m) { return m == TransferMode::ssl_multitask ? 1 : 0; }

} // namespace cmrssl::trainer
