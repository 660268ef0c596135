#include "cmrssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/seed.hpp"
#include "cmrssl/viewgeom.hpp"

namespace cmrssl::trainer {

void TrainConfig::validate() const {
    if (!(learning_rate > 0)) throw BadConfig("learning_rate must be positive");
    if (batch_size < 1) throw BadConfig("batch_size must be >= 1");
    if (iterations < 1) throw BadConfig("iterations must be >= 1");
    if (beta < 1) throw BadConfig("beta must be an integer >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0))
        throw BadConfig("invalid Adam hyper-parameters");
    if (augment.rotation_deg < 0 || !(augment.scale_min > 0) || augment.scale_max < augment.scale_min)
        throw BadConfig("invalid augmentation ranges");
}

std::string_view to_string(TransferMode m) {
    switch (m) {
    case TransferMode::scratch: return "scratch";
    case TransferMode::ssl_decoder: return "ssl_decoder";
    case TransferMode::ssl_all: return "ssl_all";
    case TransferMode::ssl_multitask: return "ssl_multitask";
    }
    return "?";
}

TransferMode parse_mode(std::string_view s) {
    for (auto m : kAllModes)
        if (to_string(m) == s) return m;
    throw BadConfig(fmt::format("unknown mode '{}' (scratch, ssl_decoder, ssl_all, ssl_multitask)", s));
}

Dataset pretext_dataset(const std::vector<ViewStudy>& studies, View view) {
    Dataset ds;
    ds.num_classes = viewgeom::kPretextLabels;
    for (const auto& st : studies)
        for (const ViewImage* im : st.images(view))
            if (im->pretext) ds.samples.push_back({segnet::zscore(im->image), im->pretext->grid});
    return ds;
}

Dataset structure_dataset(const std::vector<ViewStudy>& studies, View view) {
    Dataset ds;
    ds.num_classes = structure_label_count(view);
    for (const auto& st : studies)
        for (const ViewImage* im : st.images(view))
            if (im->structures) ds.samples.push_back({segnet::zscore(im->image), im->structures->grid});
    return ds;
}

std::pair<Image, Grid<std::uint8_t>> transform(const Image& image, const Grid<std::uint8_t>& labels,
                                               double angle_deg, double scale) {
    if (image.size() != labels.size()) throw BadShape("image and label map differ in size");
    const int rows = image.rows(), cols = image.cols();
    double c, s;
    const double quarter = angle_deg / 90.0;
    if (quarter == std::round(quarter)) {
        const int q = ((int(std::round(quarter)) % 4) + 4) % 4;
        constexpr int cs[4] = {1, 0, -1, 0}, sn[4] = {0, 1, 0, -1};
        c = cs[q];
        s = sn[q];
    } else {
        const double a = angle_deg * std::numbers::pi / 180.0;
        c = std::cos(a);
        s = std::sin(a);
    }
    float fill = 0.0f;
    if (!image.empty()) fill = *std::min_element(image.values().begin(), image.values().end());

    const double cr = (rows - 1) / 2.0, cc = (cols - 1) / 2.0;
    Image out_img(image.size(), fill);
    Grid<std::uint8_t> out_lab(labels.size(), 0);
    for (int r = 0; r < rows; ++r)
        for (int col = 0; col < cols; ++col) {
            // Inverse map: rotate by -angle and divide by the scale.
            const double dx = col - cc, dy = r - cr;
            const double sx = cc + (c * dx + s * dy) / scale;
            const double sy = cr + (-s * dx + c * dy) / scale;
            const double rx = std::floor(sx + 0.5), ry = std::floor(sy + 0.5);
            if (rx >= 0 && rx < cols && ry >= 0 && ry < rows) out_lab(r, col) = labels(int(ry), int(rx));
            if (sx < 0 || sx > cols - 1 || sy < 0 || sy > rows - 1) continue;
            const int x0 = std::min(int(sx), cols - 1), y0 = std::min(int(sy), rows - 1);
            const int x1 = std::min(x0 + 1, cols - 1), y1 = std::min(y0 + 1, rows - 1);
            const double fx = sx - x0, fy = sy - y0;
            const double top = image(y0, x0) + fx * (image(y0, x1) - image(y0, x0));
            const double bot = image(y1, x0) + fx * (image(y1, x1) - image(y1, x0));
            out_img(r, col) = float(top + fy * (bot - top));
        }
    return {std::move(out_img), std::move(out_lab)};
}

std::pair<Image, Grid<std::uint8_t>> augment(const Image& image, const Grid<std::uint8_t>& labels,
                                             std::mt19937_64& rng, const AugmentConfig& cfg) {
    std::uniform_real_distribution<double> rot(-cfg.rotation_deg, cfg.rotation_deg);
    std::uniform_real_distribution<double> scl(cfg.scale_min, cfg.scale_max);
    const double angle = rot(rng);
    const double scale = scl(rng);
    return transform(image, labels, angle, scale);
}

void Adam::step(NetworkHandle& net, const std::function<bool(const segnet::Param<float>&)>& trainable) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (auto& p : net.params()) {
        if (!trainable(p)) continue;
        auto& st = state_[p.name];
        if (st.m.size() != p.value.size()) {
            st.m.assign(p.value.size(), 0.0);
            st.v.assign(p.value.size(), 0.0);
        }
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
            st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
            p.value[i] = float(p.value[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

std::vector<int> multitask_step_schedule(int beta, int task2_budget) {
    if (beta < 1) throw BadBudget(fmt::format("beta must be >= 1, got {}", beta));
    if (task2_budget < 1 || task2_budget % beta != 0)
        throw BadBudget(fmt::format("task-2 budget {} is not a positive multiple of beta {}", task2_budget, beta));
    std::vector<int> out;
    out.reserve(std::size_t(task2_budget) + task2_budget / beta);
    for (int block = 0; block < task2_budget / beta; ++block) {
        out.push_back(1);
        out.insert(out.end(), std::size_t(beta), 2);
    }
    return out;
}

int TrainLog::count(int task) const {
    return int(std::count_if(rows.begin(), rows.end(), [&](const LogRow& r) { return r.task == task; }));
}

double TrainLog::head_mean(int task, int window) const {
    double sum = 0;
    int n = 0;
    for (auto it = rows.begin(); it != rows.end() && n < window; ++it)
        if (it->task == task) sum += it->loss, ++n;
    return n ? sum / n : 0.0;
}

double TrainLog::tail_mean(int task, int window) const {
    double sum = 0;
    int n = 0;
    for (auto it = rows.rbegin(); it != rows.rend() && n < window; ++it)
        if (it->task == task) sum += it->loss, ++n;
    return n ? sum / n : 0.0;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "iter,task,loss\n";
    for (const auto& r : rows) out << fmt::format("{},{},{:.9g}\n", r.iter, r.task, r.loss);
}

namespace {

using Trainable = std::function<bool(const segnet::Param<float>&)>;

struct StepSpec {
    int head = 0;
    bool encoder_grads = true;
    Trainable trainable;
};

Tensor<float> sample_batch(const Dataset& ds, const TrainConfig& cfg, int iter, int task,
                           std::vector<std::uint8_t>& labels) {
    std::mt19937_64 rng(mix_seed(cfg.seed, (std::uint64_t(iter) << 2) | std::uint64_t(task)));
    std::uniform_int_distribution<std::size_t> pick(0, ds.samples.size() - 1);
    const int b = cfg.batch_size;
    std::vector<std::size_t> idx(b);
    std::vector<std::uint64_t> seeds(b);
    for (int i = 0; i < b; ++i) {
        idx[i] = pick(rng);
        seeds[i] = rng();
    }
    const GridSize size = ds.samples[idx[0]].image.size();
    for (int i = 1; i < b; ++i)
        if (ds.samples[idx[i]].image.size() != size) throw BadShape("dataset images differ in size");

    std::vector<Sample> batch(b);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < b; ++i) {
        const Sample& s = ds.samples[idx[i]];
        if (cfg.augment.enabled) {
            std::mt19937_64 local(seeds[i]);
            auto [im, lab] = augment(s.image, s.labels, local, cfg.augment);
            batch[i] = {std::move(im), std::move(lab)};
        } else {
            batch[i] = s;
        }
    }
    std::vector<const Image*> ptrs(b);
    labels.resize(std::size_t(b) * size.count());
    for (int i = 0; i < b; ++i) {
        ptrs[i] = &batch[i].image;
        std::copy(batch[i].labels.values().begin(), batch[i].labels.values().end(),
                  labels.begin() + std::ptrdiff_t(i * size.count()));
    }
    return segnet::make_batch(ptrs);
}

double train_step(NetworkHandle& net, Adam& adam, const Dataset& ds, const TrainConfig& cfg,
                  const StepSpec& spec, int iter, int task) {
    std::vector<std::uint8_t> labels;
    const Tensor<float> x = sample_batch(ds, cfg, iter, task, labels);
    net.zero_grad();
    const Tensor<float> logits = net.forward(x, spec.head);
    Tensor<float> dlogits;
    const double loss = segnet::cross_entropy(logits, std::span<const std::uint8_t>(labels), &dlogits);
    if (!std::isfinite(loss)) throw TrainingDiverged(fmt::format("non-finite loss at iteration {}", iter));
    net.backward(dlogits, spec.encoder_grads);
    adam.step(net, spec.trainable);
    return loss;
}

void check_dataset(const Dataset& ds, const char* what) {
    if (ds.empty()) throw EmptyDataset(fmt::format("{} dataset has no slices", what));
}

void run_single_task(NetworkHandle& net, const TrainConfig& cfg, const Dataset& ds, const StepSpec& spec,
                     TrainLog* log, const StepObserver& observer, const char* label) {
    Adam adam(cfg);
    for (int it = 0; it < cfg.iterations; ++it) {
        const double loss = train_step(net, adam, ds, cfg, spec, it, 2);
        if (log) log->rows.push_back({it, 2, loss});
        if (observer) observer(it, 2, net);
        if ((it + 1) % 100 == 0 || it + 1 == cfg.iterations)
            spdlog::debug("{} iter {}/{} loss {:.4f}", label, it + 1, cfg.iterations, loss);
    }
}

} // namespace

NetworkHandle pretrain(const TrainConfig& cfg, const segnet::NetConfig& net_cfg, const Dataset& pretext,
                       TrainLog* log, const StepObserver& observer) {
    cfg.validate();
    check_dataset(pretext, "pretext");
    segnet::NetConfig nc = net_cfg;
    nc.num_classes = pretext.num_classes;
    NetworkHandle net = segnet::build_net(nc, mix_seed(cfg.seed, 0x11));
    Adam adam(cfg);
    const StepSpec spec{0, true, [](const segnet::Param<float>&) { return true; }};
    for (int it = 0; it < cfg.iterations; ++it) {
        const double loss = train_step(net, adam, pretext, cfg, spec, it, 1);
        if (log) log->rows.push_back({it, 1, loss});
        if (observer) observer(it, 1, net);
        if ((it + 1) % 100 == 0 || it + 1 == cfg.iterations)
            spdlog::debug("pretrain iter {}/{} loss {:.4f}", it + 1, cfg.iterations, loss);
    }
    return net;
}

NetworkHandle finetune(TransferMode mode, const TrainConfig& cfg, const segnet::NetConfig& net_cfg,
                       const Dataset& annotated, const NetworkHandle* pretrained, const Dataset* pretext,
                       TrainLog* log, const StepObserver& observer) {
    cfg.validate();
    check_dataset(annotated, "annotated");
    if (mode != TransferMode::scratch && !pretrained)
        throw MissingCheckpoint(fmt::format("mode {} needs a pretrained network", to_string(mode)));
    const int k = annotated.num_classes;
    const auto all = [](const segnet::Param<float>&) { return true; };

    switch (mode) {
    case TransferMode::scratch: {
        segnet::NetConfig nc = net_cfg;
        nc.num_classes = k;
        NetworkHandle net = segnet::build_net(nc, mix_seed(cfg.seed, 0x22));
        run_single_task(net, cfg, annotated, {0, true, all}, log, observer, "scratch");
        return net;
    }
    case TransferMode::ssl_decoder: {
        NetworkHandle net = segnet::replace_head(*pretrained, k, mix_seed(cfg.seed, 0x33));
        const StepSpec spec{0, false, [](const segnet::Param<float>& p) {
                                return p.partition != segnet::Partition::encoder;
                            }};
        run_single_task(net, cfg, annotated, spec, log, observer, "ssl_decoder");
        return net;
    }
    case TransferMode::ssl_all: {
        NetworkHandle net = segnet::replace_head(*pretrained, k, mix_seed(cfg.seed, 0x33));
        run_single_task(net, cfg, annotated, {0, true, all}, log, observer, "ssl_all");
        return net;
    }
    case TransferMode::ssl_multitask:
        if (!pretext) throw EmptyDataset("ssl_multitask needs the pretext dataset");
        return multitask_finetune(cfg, *pretext, annotated, *pretrained, log, observer);
    }
    throw BadConfig("unknown transfer mode");
}

NetworkHandle multitask_finetune(const TrainConfig& cfg, const Dataset& pretext, const Dataset& annotated,
                                 const NetworkHandle& pretrained, TrainLog* log, const StepObserver& observer) {
    cfg.validate();
    check_dataset(pretext, "pretext");
    check_dataset(annotated, "annotated");
    if (pretrained.num_heads() != 1 || pretrained.head_classes(0) != pretext.num_classes)
        throw BadConfig(fmt::format("multitask training expects a single {}-way pretrained head",
                                    pretext.num_classes));
    const std::vector<int> schedule = multitask_step_schedule(cfg.beta, cfg.iterations);
    NetworkHandle net = segnet::attach_second_head(pretrained, annotated.num_classes, mix_seed(cfg.seed, 0x44));

    // Each task keeps its own optimiser state, as two independent Adam optimisers would.
    Adam adam1(cfg), adam2(cfg);
    const auto owns = [](int head) {
        return [head](const segnet::Param<float>& p) {
            return p.partition != segnet::Partition::head || p.head == head;
        };
    };
    const StepSpec task1{0, true, owns(0)}, task2{1, true, owns(1)};
    for (int it = 0; it < int(schedule.size()); ++it) {
        const int task = schedule[it];
        const double loss = task == 1 ? train_step(net, adam1, pretext, cfg, task1, it, 1)
                                      : train_step(net, adam2, annotated, cfg, task2, it, 2);
        if (log) log->rows.push_back({it, task, loss});
        if (observer) observer(it, task, net);
        if ((it + 1) % 100 == 0 || it + 1 == int(schedule.size()))
            spdlog::debug("multitask sub-iter {}/{} task {} loss {:.4f}", it + 1, schedule.size(), task, loss);
    }
    return net;
}

} // namespace cmrssl::trainer
