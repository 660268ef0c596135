#include "cmrssl/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <omp.h>
#include <spdlog/spdlog.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/phantom.hpp"
#include "cmrssl/seed.hpp"
#include "cmrssl/study_io.hpp"

#ifndef CMRSSL_SOURCE_REVISION
#define CMRSSL_SOURCE_REVISION "unknown"
#endif

namespace cmrssl::pipeline {

using nlohmann::json;

namespace {

std::string now_utc() {
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                    std::chrono::system_clock::now())));
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

std::vector<View> views_for(View v) { return {v}; }

viewgeom::PretextTarget pretext_target(View v) {
    switch (v) {
    case View::sa: return viewgeom::PretextTarget::short_axis;
    case View::la4ch: return viewgeom::PretextTarget::long_axis_4ch;
    case View::la2ch: break;
    }
    throw BadConfig("pretext labels are defined for the sa and la4ch views only");
}

bool finished_with(const fs::path& manifest, const std::string& digest) {
    const auto j = RunManifest::read(manifest);
    return j && j->value("status", "") == "complete" && j->value("config_digest", "") == digest;
}

int head_of(const segnet::Checkpoint& ck) {
    auto it = ck.meta.find("task_head");
    return it == ck.meta.end() ? 0 : std::stoi(it->second);
}

} // namespace

// ---- manifest ----

RunManifest::RunManifest(fs::path path, std::string command, const config::RunConfig& cfg)
    : path_(std::move(path)) {
    j_ = {{"schema", "cmrssl.manifest/1"},
          {"command", command},
          {"run_id", fmt::format("{}-{}", command, config_digest(cfg).substr(0, 12))},
          {"config", config::to_ini(cfg)},
          {"config_digest", config_digest(cfg)},
          {"source_revision", source_revision()},
          {"inputs", json::object()},
          {"artifacts", json::array()},
          {"started_at", now_utc()},
          {"finished_at", nullptr},
          {"status", "running"}};
}

void RunManifest::add_input(const std::string& name, const fs::path& path) {
    j_["inputs"][name] = {{"path", path.string()}, {"sha256", io::sha256(path)}};
}

void RunManifest::add_artifact(const std::string& kind, const std::string& name, const fs::path& path) {
    j_["artifacts"].push_back({{"kind", kind}, {"name", name}, {"path", path.string()}});
}

void RunManifest::set(const std::string& key, nlohmann::json value) { j_[key] = std::move(value); }

void RunManifest::write_started() { write_text(path_, j_.dump(2) + "\n"); }

void RunManifest::write_finished(const std::string& status) {
    j_["finished_at"] = now_utc();
    j_["status"] = status;
    write_text(path_, j_.dump(2) + "\n");
}

std::optional<json> RunManifest::read(const fs::path& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

std::string source_revision() { return CMRSSL_SOURCE_REVISION; }

std::string config_digest(const config::RunConfig& cfg) {
    // Grid shape and parallelism do not change any single cell's result.
    config::RunConfig c = cfg;
    c.experiment.budgets = config::ExperimentConfig{}.budgets;
    c.experiment.modes = config::ExperimentConfig{}.modes;
    c.experiment.seeds = 1;
    c.experiment.workers = 1;
    return io::sha256_bytes(config::to_ini(c));
}

// ---- data ----

GenerateStats generate_cohort(const config::RunConfig& cfg, const fs::path& data_root, int n_subjects,
                              int workers) {
    if (n_subjects < 0) throw BadConfig("subject count must be >= 0");
    fs::create_directories(data_root);
    std::exception_ptr failure;
    std::mutex mu;
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers))
    for (int i = 0; i < n_subjects; ++i) {
        try {
            for (const auto& study : phantom::generate_subject(cfg.cohort, cfg.data_seed, i))
                io::save_study(study, data_root);
        } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return {n_subjects, 2 * n_subjects};
}

PretextStats make_pretext(const fs::path& data_root, View view, const viewgeom::BoxParams& boxes) {
    const auto target = pretext_target(view);
    PretextStats stats;
    for (const auto& dir : io::list_study_dirs(data_root)) {
        ViewStudy study = io::load_study(dir, {View::sa, View::la2ch, View::la4ch});
        const auto result = viewgeom::make_pretext_labels(study, target, boxes);
        auto images = study.images(view);
        for (std::size_t i = 0; i < images.size(); ++i) images[i]->pretext = result.maps[i];
        stats.images += int(images.size());
        stats.skipped += result.skipped;
        if (result.skipped < int(images.size())) io::save_pretext(study, view, data_root);
    }
    return stats;
}

CohortSplit cohort_split(const fs::path& data_root, const config::RunConfig& cfg) {
    if (!fs::is_directory(data_root))
        throw InsufficientSubjects(fmt::format("no cohort at {}; run `cmrssl gen-data` first", data_root.string()));
    std::set<std::string> ids;
    for (const auto& dir : io::list_study_dirs(data_root)) ids.insert(dir.parent_path().filename().string());
    const auto& e = cfg.experiment;
    const std::size_t need = std::size_t(e.pretrain_subjects) + std::size_t(e.test_subjects);
    if (ids.size() < need)
        throw InsufficientSubjects(fmt::format("{} holds {} subjects but {} + {} are configured; run "
                                               "`cmrssl gen-data --subjects {}` first",
                                               data_root.string(), ids.size(), e.pretrain_subjects,
                                               e.test_subjects, need));
    CohortSplit s;
    auto it = ids.begin();
    for (int i = 0; i < e.pretrain_subjects; ++i) s.pool.push_back(*it++);
    for (int i = 0; i < e.test_subjects; ++i) s.test.push_back(*it++);
    return s;
}

std::vector<std::string> training_subjects(const CohortSplit& split, int n, int seed_index,
                                           const config::RunConfig& cfg) {
    return io::split_subjects(split.pool, std::size_t(n), mix_seed(cfg.train.seed, 0x2000 + std::uint64_t(seed_index)))
        .train;
}

std::vector<ViewStudy> load_subjects(const fs::path& data_root, const std::vector<std::string>& ids,
                                     std::vector<View> views) {
    std::vector<ViewStudy> out;
    for (const auto& id : ids)
        for (Frame f : {Frame::ED, Frame::ES}) {
            const fs::path dir = io::study_dir(data_root, id, f);
            if (!fs::is_directory(dir)) throw FormatError("missing study directory " + dir.string());
            out.push_back(io::load_study(dir, views));
        }
    return out;
}

// ---- training ----

fs::path run_pretrain(const config::RunConfig& cfg, const fs::path& data_root, const fs::path& out_dir) {
    cfg.validate();
    const View view = cfg.experiment.view;
    pretext_target(view);
    const CohortSplit split = cohort_split(data_root, cfg);
    fs::create_directories(out_dir);
    RunManifest manifest(out_dir / "manifest.json", "pretrain", cfg);
    manifest.add_input("data", data_root);
    manifest.write_started();

    const trainer::Dataset pretext = trainer::pretext_dataset(load_subjects(data_root, split.pool, views_for(view)), view);
    if (pretext.empty())
        throw EmptyDataset(fmt::format("no {} pretext labels under {}; run `cmrssl make-pretext --view {}` first",
                                       to_string(view), data_root.string(), to_string(view)));
    spdlog::info("pretraining on {} {} slices from {} subjects, {} iterations", pretext.samples.size(),
                 to_string(view), split.pool.size(), cfg.pretrain_iterations);

    trainer::TrainLog log;
    const auto net = trainer::pretrain(cfg.pretrain_config(), cfg.net, pretext, &log);
    const int window = std::max(1, std::min(50, cfg.pretrain_iterations / 10));
    const double first = log.head_mean(1, window), last = log.tail_mean(1, window);
    manifest.set("loss_initial", first);
    manifest.set("loss_final", last);

    const fs::path ckpt = out_dir / "checkpoint.ckpt", loss = out_dir / "loss.csv";
    segnet::save_checkpoint(ckpt, net, {{"kind", "pretrain"}, {"view", std::string(to_string(view))},
                                        {"task_head", "0"}, {"config_digest", config_digest(cfg)}});
    log.write_csv(loss);
    manifest.add_artifact("checkpoint", "pretrain", ckpt);
    manifest.add_artifact("log", "loss", loss);
    if (!(last < first)) {
        manifest.write_finished("failed");
        throw TrainingDiverged(fmt::format("pretext loss did not decrease ({:.4f} -> {:.4f})", first, last));
    }
    manifest.write_finished();
    spdlog::info("pretraining loss {:.4f} -> {:.4f}", first, last);
    return ckpt;
}

std::string CellSpec::name() const {
    return fmt::format("{}_n{}_s{}", trainer::to_string(mode), n_subjects, seed_index);
}

metrics::MetricsReport run_cell(const config::RunConfig& cfg, const fs::path& data_root, const fs::path& pretrained,
                                const CellSpec& cell, const fs::path& out_dir) {
    cfg.validate();
    const View view = cfg.experiment.view;
    const CohortSplit split = cohort_split(data_root, cfg);
    fs::create_directories(out_dir);
    RunManifest manifest(out_dir / "manifest.json", "finetune", cfg);
    manifest.set("run_id", fmt::format("{}-{}", cell.name(), config_digest(cfg).substr(0, 12)));
    manifest.set("cell", {{"mode", trainer::to_string(cell.mode)},
                          {"n_subjects", cell.n_subjects},
                          {"seed_index", cell.seed_index}});
    manifest.add_input("data", data_root);

    std::optional<segnet::Checkpoint> pre;
    if (cell.mode != trainer::TransferMode::scratch) {
        if (!fs::exists(pretrained))
            throw MissingCheckpoint(fmt::format("{} not found; run `cmrssl pretrain` first", pretrained.string()));
        pre = segnet::load_checkpoint(pretrained);
        manifest.add_input("pretrained", pretrained);
    }
    manifest.write_started();

    const auto train_ids = training_subjects(split, cell.n_subjects, cell.seed_index, cfg);
    manifest.set("training_subjects", train_ids);
    const trainer::Dataset annotated =
        trainer::structure_dataset(load_subjects(data_root, train_ids, views_for(view)), view);
    trainer::Dataset pretext;
    if (cell.mode == trainer::TransferMode::ssl_multitask) {
        pretext = trainer::pretext_dataset(load_subjects(data_root, split.pool, views_for(view)), view);
        if (pretext.empty())
            throw EmptyDataset(fmt::format("no pretext labels; run `cmrssl make-pretext --view {}` first",
                                           to_string(view)));
    }

    const trainer::TrainConfig tc = cfg.finetune_config(cell.seed_index);
    trainer::StepObserver observer;
    std::uint64_t encoder_before = 0;
    if (cell.mode == trainer::TransferMode::ssl_decoder) {
        encoder_before = pre->net.checksum(segnet::Partition::encoder);
        observer = [&](int iter, int, const segnet::NetworkHandle& net) {
            if (net.checksum(segnet::Partition::encoder) != encoder_before)
                throw TrainingDiverged(fmt::format("encoder changed at iteration {} of a frozen run", iter));
        };
    }
    trainer::TrainLog log;
    spdlog::info("cell {}: {} slices from {} subjects", cell.name(), annotated.samples.size(), train_ids.size());
    auto net = trainer::finetune(cell.mode, tc, cfg.net, annotated, pre ? &pre->net : nullptr, &pretext, &log,
                                 observer);
    if (cell.mode == trainer::TransferMode::ssl_decoder) {
        manifest.set("encoder_checksum_before", fmt::format("{:016x}", encoder_before));
        manifest.set("encoder_checksum_after", fmt::format("{:016x}", net.checksum(segnet::Partition::encoder)));
    }
    manifest.set("task2_updates", log.count(2));
    manifest.set("task1_updates", log.count(1));

    const int head = trainer::target_head(cell.mode);
    const fs::path ckpt = out_dir / "checkpoint.ckpt", loss = out_dir / "loss.csv", csv = out_dir / "metrics.csv";
    segnet::save_checkpoint(ckpt, net, {{"kind", "finetune"}, {"mode", std::string(trainer::to_string(cell.mode))},
                                        {"view", std::string(to_string(view))}, {"task_head", std::to_string(head)},
                                        {"config_digest", config_digest(cfg)}});
    log.write_csv(loss);

    const auto report = metrics::evaluate(net, head, load_subjects(data_root, split.test, views_for(view)), view);
    metrics::write_rows_csv(csv, report);
    manifest.set("mcd_excluded_slices", report.mcd_excluded);
    manifest.set("dice_mean", report.dice_summary().mean);
    manifest.add_artifact("checkpoint", cell.name(), ckpt);
    manifest.add_artifact("log", "loss", loss);
    manifest.add_artifact("metrics", "rows", csv);
    manifest.write_finished();
    spdlog::info("cell {}: Dice {}", cell.name(), metrics::format_mean_std(report.dice_summary()));
    return report;
}

metrics::MetricsReport run_evaluate(const config::RunConfig& cfg, const fs::path& data_root,
                                    const fs::path& checkpoint, const fs::path& metrics_csv) {
    const View view = cfg.experiment.view;
    auto ck = segnet::load_checkpoint(checkpoint);
    const CohortSplit split = cohort_split(data_root, cfg);
    const auto report =
        metrics::evaluate(ck.net, head_of(ck), load_subjects(data_root, split.test, views_for(view)), view);
    metrics::write_rows_csv(metrics_csv, report);
    return report;
}

metrics::ExperimentTable run_experiment(const config::RunConfig& cfg, const fs::path& data_root,
                                        const fs::path& out_dir) {
    cfg.validate();
    const auto& e = cfg.experiment;
    const std::string digest = config_digest(cfg);
    fs::create_directories(out_dir);
    write_text(out_dir / "config.ini", config::to_ini(cfg));
    RunManifest manifest(out_dir / "manifest.json", "experiment", cfg);
    manifest.add_input("data", data_root);
    manifest.write_started();

    const bool needs_pretrain = std::any_of(e.modes.begin(), e.modes.end(),
                                            [](auto m) { return m != trainer::TransferMode::scratch; });
    const fs::path pre_dir = out_dir / "pretrain", pre_ckpt = pre_dir / "checkpoint.ckpt";
    if (needs_pretrain) {
        if (finished_with(pre_dir / "manifest.json", digest) && fs::exists(pre_ckpt))
            spdlog::info("reusing pretrained network {}", pre_ckpt.string());
        else
            run_pretrain(cfg, data_root, pre_dir);
        manifest.add_artifact("checkpoint", "pretrain", pre_ckpt);
    }

    std::vector<CellSpec> cells;
    for (int n : e.budgets)
        for (auto m : e.modes)
            for (int s = 0; s < e.seeds; ++s) cells.push_back({m, n, s});
    std::vector<CellSpec> pending;
    for (const auto& c : cells) {
        const fs::path dir = out_dir / "cells" / c.name();
        if (finished_with(dir / "manifest.json", digest) && fs::exists(dir / "metrics.csv"))
            spdlog::info("cell {} already complete", c.name());
        else
            pending.push_back(c);
    }

    const int workers = std::max(1, std::min(e.workers, int(pending.size())));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    const int omp_threads = std::max(1, omp_get_num_procs() / workers);
    auto work = [&] {
        omp_set_num_threads(omp_threads);
        for (std::size_t i; (i = next++) < pending.size();) {
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            try {
                run_cell(cfg, data_root, pre_ckpt, pending[i], out_dir / "cells" / pending[i].name());
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) {
        manifest.write_finished("failed");
        std::rethrow_exception(failure);
    }

    std::vector<std::string> mode_order;
    for (auto m : e.modes) mode_order.emplace_back(trainer::to_string(m));
    metrics::ExperimentResults pooled;
    std::vector<metrics::ExperimentResults> per_seed(std::size_t(e.seeds));
    for (const auto& c : cells) {
        const fs::path csv = out_dir / "cells" / c.name() / "metrics.csv";
        auto report = metrics::read_rows_csv(csv, e.view);
        const metrics::CellKey key{std::string(trainer::to_string(c.mode)), c.n_subjects};
        per_seed[std::size_t(c.seed_index)][key].push_back(report);
        pooled[key].push_back(std::move(report));
        manifest.add_artifact("metrics", c.name(), csv);
    }
    const auto table = metrics::aggregate_experiment(pooled, mode_order);
    metrics::write_table_csv(out_dir / "table.csv", table);
    metrics::write_summary_csv(out_dir / "summary.csv", table);
    metrics::write_learning_curves_svg(out_dir / "curves_dice.svg", table, e.view, false);
    metrics::write_learning_curves_svg(out_dir / "curves_mcd.svg", table, e.view, true);
    for (int s = 0; s < e.seeds; ++s) {
        const fs::path p = out_dir / fmt::format("table_seed{}.csv", s);
        metrics::write_table_csv(p, metrics::aggregate_experiment(per_seed[std::size_t(s)], mode_order));
        manifest.add_artifact("table", fmt::format("seed{}", s), p);
    }
    for (const char* name : {"table.csv", "summary.csv", "curves_dice.svg", "curves_mcd.svg"})
        manifest.add_artifact(name[0] == 'c' ? "plot" : "table", name, out_dir / name);
    manifest.write_finished();
    return table;
}

} // namespace cmrssl::pipeline
