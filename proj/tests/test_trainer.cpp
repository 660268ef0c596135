#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <omp.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/metrics.hpp"
#include "cmrssl/phantom.hpp"
#include "cmrssl/trainer.hpp"
#include "cmrssl/viewgeom.hpp"
#include "oracles.hpp"

using namespace cmrssl;
using namespace cmrssl::trainer;
using segnet::Partition;

namespace {

Grid<std::uint8_t> random_labels(std::mt19937_64& rng, GridSize size, int k) {
    std::uniform_int_distribution<int> d(0, k - 1);
    Grid<std::uint8_t> g(size, 0);
    for (auto& v : g.values()) v = std::uint8_t(d(rng));
    return g;
}

Image random_image(std::mt19937_64& rng, GridSize size) {
    std::normal_distribution<float> d(0.f, 1.f);
    Image im(size);
    for (auto& v : im.values()) v = d(rng);
    return im;
}

/// Small cohort of 32x32 phantom studies with SA pretext labels.
const std::vector<ViewStudy>& small_cohort() {
    static const std::vector<ViewStudy> studies = [] {
        phantom::CohortConfig cc;
        cc.views.image_size = 32;
        cc.views.pixel_spacing = 5.0;
        cc.views.centre_jitter_px = 2.0;
        std::vector<ViewStudy> out;
        for (int s = 0; s < 3; ++s)
            for (auto& st : phantom::generate_subject(cc, 31, s)) {
                const auto pre = viewgeom::make_pretext_labels(st, viewgeom::PretextTarget::short_axis, {3, 6});
                for (std::size_t i = 0; i < st.sa_stack.size(); ++i) st.sa_stack[i].pretext = pre.maps[i];
                out.push_back(std::move(st));
            }
        return out;
    }();
    return studies;
}

segnet::NetConfig tiny_net() {
    segnet::NetConfig c;
    c.depth = 2;
    c.base_channels = 4;
    return c;
}

TrainConfig quick(int iterations) {
    TrainConfig c;
    c.iterations = iterations;
    c.batch_size = 2;
    c.seed = 5;
    return c;
}

std::vector<AlignedVector<float>> head_values(const NetworkHandle& net, int head) {
    std::vector<AlignedVector<float>> out;
    for (const auto& p : net.params())
        if (p.partition == Partition::head && p.head == head) out.push_back(p.value);
    return out;
}

std::vector<AlignedVector<float>> all_values(const NetworkHandle& net) {
    std::vector<AlignedVector<float>> out;
    for (const auto& p : net.params()) out.push_back(p.value);
    return out;
}

/// Gradients of the mean cross-entropy of one sample through `head`.
std::map<std::string, AlignedVector<float>> grads_for(NetworkHandle net, const Sample& s, int head) {
    const Image* im = &s.image;
    const auto x = segnet::make_batch(std::span<const Image* const>(&im, 1));
    net.zero_grad();
    Tensor<float> dz;
    segnet::cross_entropy(net.forward(x, head), std::span<const std::uint8_t>(s.labels.values()), &dz);
    net.backward(dz);
    std::map<std::string, AlignedVector<float>> out;
    for (const auto& p : net.params()) out[p.name] = p.grad;
    return out;
}

/// First Adam step from zero moments, written out by hand.
double first_adam_step(double value, double g, const TrainConfig& cfg) {
    const double m = (1 - cfg.adam_beta1) * g, v = (1 - cfg.adam_beta2) * g * g;
    const double mhat = m / (1 - cfg.adam_beta1), vhat = v / (1 - cfg.adam_beta2);
    return value - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
}

} // namespace

TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.beta = 0;
    CHECK_THROWS_AS(c.validate(), BadConfig);
    c = {};
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(), BadConfig);
    c = {};
    c.augment.scale_min = 2.0;
    CHECK_THROWS_AS(c.validate(), BadConfig);
    for (auto m : kAllModes) CHECK(parse_mode(to_string(m)) == m);
    CHECK_THROWS_AS(parse_mode("ssl_everything"), BadConfig);
}

TEST_CASE("transform: identity, exact 90-degree permutations, label closure") {
    std::mt19937_64 rng(1);
    const GridSize sq{9, 9};
    const Image im = random_image(rng, sq);
    const auto lab = random_labels(rng, sq, 5);

    const auto [i0, l0] = transform(im, lab, 0.0, 1.0);
    CHECK(l0 == lab);
    CHECK(i0 == im);

    // Clockwise on screen: the pixel at (r, c) moves to (c, n-1-r).
    const auto [i90, l90] = transform(im, lab, 90.0, 1.0);
    const auto [i180, l180] = transform(im, lab, 180.0, 1.0);
    const int n = sq.rows;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            CHECK(l90(c, n - 1 - r) == lab(r, c));
            CHECK(i90(c, n - 1 - r) == doctest::Approx(im(r, c)).epsilon(1e-6));
            CHECK(l180(n - 1 - r, n - 1 - c) == lab(r, c));
        }
    const auto [i90b, l90b] = transform(i90, l90, 90.0, 1.0);
    CHECK(oracle::brute_dice(l90b, l180, 3) == 1.0);
    CHECK(l90b == l180);

    for (int trial = 0; trial < 30; ++trial) {
        std::uniform_real_distribution<double> ang(-180, 180), sc(0.5, 2.0);
        const GridSize size{12 + trial % 5, 15};
        Grid<std::uint8_t> sparse(size, 0);
        for (int r = 2; r < 6; ++r)
            for (int c = 3; c < 9; ++c) sparse(r, c) = std::uint8_t(2 + (r + c) % 2 * 5);
        const auto [ti, tl] = transform(random_image(rng, size), sparse, ang(rng), sc(rng));
        CHECK(ti.size() == size);
        for (auto v : tl.values()) CHECK((v == 0 || v == 2 || v == 7));
    }
}

TEST_CASE("augment fills out-of-canvas pixels with the image minimum and label 0") {
    Image im(16, 16, 5.0f);
    im(3, 3) = -2.0f;
    Grid<std::uint8_t> lab(GridSize{16, 16}, 3);
    const auto [ti, tl] = transform(im, lab, 45.0, 0.6);
    CHECK(ti(0, 0) == -2.0f);
    CHECK(tl(0, 0) == 0);
    CHECK(tl(8, 8) == 3);

    AugmentConfig off;
    off.rotation_deg = 0;
    off.scale_min = off.scale_max = 1.0;
    std::mt19937_64 rng(2);
    CHECK(augment(im, lab, rng, off).second == lab);
}

TEST_CASE("multitask schedule: examples, counts and BadBudget") {
    CHECK(multitask_step_schedule(1, 4) == std::vector<int>{1, 2, 1, 2, 1, 2, 1, 2});
    const auto full = oracle::count_tasks(multitask_step_schedule(10, 50000));
    CHECK(full[1] == 5000);
    CHECK(full[2] == 50000);
    const auto s = multitask_step_schedule(3, 6);
    CHECK(s == std::vector<int>{1, 2, 2, 2, 1, 2, 2, 2});

    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> beta(1, 40), blocks(1, 200);
    for (int trial = 0; trial < 50; ++trial) {
        const int b = beta(rng), budget = b * blocks(rng);
        const auto n = oracle::count_tasks(multitask_step_schedule(b, budget));
        CHECK(n[2] == budget);
        CHECK(n[1] * b == n[2]);
    }
    CHECK_THROWS_AS(multitask_step_schedule(10, 55), BadBudget);
    CHECK_THROWS_AS(multitask_step_schedule(0, 10), BadBudget);
    CHECK_THROWS_AS(multitask_step_schedule(2, 0), BadBudget);
}

TEST_CASE("datasets from phantom studies") {
    const auto& st = small_cohort();
    const auto pre = pretext_dataset(st, View::sa);
    const auto sa = structure_dataset(st, View::sa);
    CHECK(pre.num_classes == 10);
    CHECK(sa.num_classes == 4);
    CHECK(sa.samples.size() >= pre.samples.size());
    for (const auto& s : sa.samples) CHECK(s.image.size() == s.labels.size());
    CHECK(structure_dataset(st, View::la4ch).num_classes == 6);
}

TEST_CASE("pretraining reduces the loss and is deterministic") {
    const auto pre = pretext_dataset(small_cohort(), View::sa);
    auto cfg = quick(120);
    cfg.batch_size = 4;
    TrainLog a, b;
    const auto na = pretrain(cfg, tiny_net(), pre, &a);
    const auto nb = pretrain(cfg, tiny_net(), pre, &b);
    CHECK(na.head_classes(0) == 10);
    CHECK(a.count(1) == 120);
    CHECK(a.head_mean(1, 10) > a.tail_mean(1, 10));
    CHECK(a.head_mean(1, 5) == doctest::Approx(std::log(10.0)).epsilon(0.3));
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].loss == b.rows[i].loss);
    CHECK(all_values(na) == all_values(nb));
}

TEST_CASE("fair budget, freeze invariant and per-mode determinism") {
    const auto pre = pretext_dataset(small_cohort(), View::sa);
    const auto sa = structure_dataset(small_cohort(), View::sa);
    const auto pretrained = pretrain(quick(20), tiny_net(), pre);
    const auto cfg = quick(20);
    for (auto mode : kAllModes) {
        TrainLog log;
        std::uint64_t enc = pretrained.checksum(Partition::encoder);
        int frozen_violations = 0;
        const StepObserver obs = [&](int, int, const NetworkHandle& net) {
            frozen_violations += net.checksum(Partition::encoder) != enc;
        };
        const auto net = finetune(mode, cfg, tiny_net(), sa, &pretrained, &pre, &log, obs);
        CAPTURE(to_string(mode));
        CHECK(log.count(2) == cfg.iterations);
        CHECK(net.head_classes(target_head(mode)) == 4);
        if (mode == TransferMode::ssl_decoder)
            CHECK(frozen_violations == 0);
        else
            CHECK(frozen_violations > 0);
        if (mode == TransferMode::ssl_multitask) CHECK(log.count(1) == cfg.iterations / cfg.beta);

        const int saved = omp_get_max_threads();
        omp_set_num_threads(saved > 1 ? 1 : 2);
        const auto again = finetune(mode, cfg, tiny_net(), sa, &pretrained, &pre);
        omp_set_num_threads(saved);
        CHECK(all_values(again) == all_values(net));
    }
}

TEST_CASE("missing inputs raise the documented errors") {
    const auto sa = structure_dataset(small_cohort(), View::sa);
    CHECK_THROWS_AS(finetune(TransferMode::ssl_all, quick(2), tiny_net(), sa, nullptr), MissingCheckpoint);
    CHECK_THROWS_AS(finetune(TransferMode::scratch, quick(2), tiny_net(), Dataset{}, nullptr), EmptyDataset);
    CHECK_THROWS_AS(pretrain(quick(2), tiny_net(), Dataset{}), EmptyDataset);
    const auto pre = pretrain(quick(2), tiny_net(), pretext_dataset(small_cohort(), View::sa));
    CHECK_THROWS_AS(finetune(TransferMode::ssl_multitask, quick(2), tiny_net(), sa, &pre, nullptr), EmptyDataset);
    // The pretrained head must match the pretext label count.
    CHECK_THROWS_AS(finetune(TransferMode::ssl_multitask, quick(20), tiny_net(), sa, &pre, &sa), BadConfig);
}

TEST_CASE("multitask: task-1 steps leave head 2 untouched, task-2 steps leave head 1 untouched") {
    const auto pre = pretext_dataset(small_cohort(), View::sa);
    const auto sa = structure_dataset(small_cohort(), View::sa);
    const auto pretrained = pretrain(quick(5), tiny_net(), pre);
    auto cfg = quick(20);
    cfg.beta = 2;
    std::vector<AlignedVector<float>> h1, h2;
    int checked1 = 0, checked2 = 0;
    const StepObserver obs = [&](int it, int task, const NetworkHandle& net) {
        const auto n1 = head_values(net, 0), n2 = head_values(net, 1);
        if (it > 0) {
            if (task == 1) {
                CHECK(n2 == h2);
                CHECK(n1 != h1);
                ++checked1;
            } else {
                CHECK(n1 == h1);
                ++checked2;
            }
        }
        h1 = n1;
        h2 = n2;
    };
    TrainLog log;
    multitask_finetune(cfg, pre, sa, pretrained, &log, obs);
    CHECK(checked1 == 9);
    CHECK(checked2 == 20);
    CHECK(log.rows.front().task == 1);
}

TEST_CASE("multitask: two sub-iterations match a hand-stepped optimiser with per-task state") {
    std::mt19937_64 rng(9);
    const GridSize size{8, 8};
    Dataset pre{{{random_image(rng, size), random_labels(rng, size, 10)}}, 10};
    Dataset seg{{{random_image(rng, size), random_labels(rng, size, 4)}}, 4};
    segnet::NetConfig nc = tiny_net();
    nc.num_classes = 10;
    const auto pretrained = segnet::build_net(nc, 77);

    TrainConfig cfg = quick(1);
    cfg.beta = 1;
    cfg.batch_size = 1;
    cfg.augment.enabled = false;

    std::vector<NetworkHandle> after;
    multitask_finetune(cfg, pre, seg, pretrained, nullptr,
                       [&](int, int, const NetworkHandle& net) { after.push_back(net); });
    REQUIRE(after.size() == 2);

    // Step 1 (task 1, fresh optimiser): head 0 + shared parameters move, head 1 does not.
    const auto g1 = grads_for(pretrained, pre.samples[0], 0);
    int moved = 0;
    for (const auto& p : after[0].params()) {
        if (p.partition == Partition::head && p.head == 1) continue;
        const auto& before = pretrained.param(p.name).value;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double expect = first_adam_step(before[i], g1.at(p.name)[i], cfg);
            CHECK(std::abs(p.value[i] - expect) < 2e-6);
            moved += p.value[i] != before[i];
        }
    }
    CHECK(moved > 0);

    // Step 2 (task 2, its own fresh optimiser): another first step from the step-1 state.
    const auto g2 = grads_for(after[0], seg.samples[0], 1);
    for (const auto& p : after[1].params()) {
        const auto& before = after[0].param(p.name).value;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            if (p.partition == Partition::head && p.head == 0) {
                CHECK(p.value[i] == before[i]);
                continue;
            }
            const double expect = first_adam_step(before[i], g2.at(p.name)[i], cfg);
            CHECK(std::abs(p.value[i] - expect) < 2e-6);
        }
    }
}

TEST_CASE("loss log CSV") {
    TrainLog log;
    log.rows = {{0, 1, 2.5}, {1, 2, 1.25}};
    const auto path = std::filesystem::temp_directory_path() / "cmrssl_loss_test.csv";
    log.write_csv(path);
    std::ifstream in(path);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "iter,task,loss");
    CHECK(first.rfind("0,1,2.5", 0) == 0);
    std::filesystem::remove(path);
}
