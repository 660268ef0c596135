// cmrssl: command-line driver for cohort generation, pretext labelling,
// pretraining, finetuning, evaluation and full experiment grids.
//
// Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 training failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cmrssl/config.hpp"
#include "cmrssl/errors.hpp"
#include "cmrssl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cmrssl;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kTraining = 3 };

struct Globals {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string workspace;
    std::string data;
    bool verbose = false;
    bool quiet = false;
};

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

fs::path resolve(const Globals& g, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(g.workspace) / path;
}

fs::path data_root(const Globals& g) { return resolve(g, g.data.empty() ? env_or("CMRSSL_DATA", "data") : g.data); }

config::RunConfig load_config(const Globals& g, std::vector<std::string> extra = {}) {
    std::vector<std::string> all = g.overrides;
    all.insert(all.end(), extra.begin(), extra.end());
    if (g.config_file.empty()) return config::from_string("", all);
    return config::load(resolve(g, g.config_file), all);
}

int exit_code_for(const Error& e) {
    const std::string& k = e.kind();
    if (k == "BadConfig" || k == "BadBudget") return kUsage;
    if (k == "TrainingDiverged") return kTraining;
    return kData;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised cardiac MR segmentation with anatomical-position pretext labels"};
    app.require_subcommand(1);
    Globals g;
    g.workspace = env_or("CMRSSL_WORKSPACE", ".");
    app.option_defaults()->always_capture_default();
    app.add_option("-c,--config", g.config_file, "INI configuration file");
    app.add_option("--set", g.overrides, "Override a config value: section.key=value (repeatable)");
    app.add_option("-w,--workspace", g.workspace, "Base directory for relative paths (env CMRSSL_WORKSPACE)");
    app.add_option("-d,--data", g.data, "Cohort directory (env CMRSSL_DATA, default <workspace>/data)");
    app.add_flag("-v,--verbose", g.verbose, "Debug logging");
    app.add_flag("-q,--quiet", g.quiet, "Warnings and errors only");
    app.fallthrough();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a phantom cohort (ED and ES studies per subject)");
    int gen_subjects = -1, gen_workers = 1;
    std::optional<std::uint64_t> gen_seed;
    std::string gen_out;
    gen->add_option("-n,--subjects", gen_subjects, "Number of subjects (default: pool + test subjects)");
    gen->add_option("-s,--seed", gen_seed, "Cohort seed (overrides phantom.seed)");
    gen->add_option("-o,--out", gen_out, "Output directory (default: the data directory)");
    gen->add_option("-j,--workers", gen_workers, "Generation threads")->check(CLI::PositiveNumber);

    // make-pretext
    auto* pre = app.add_subcommand("make-pretext", "Write anatomical-position pretext labels next to the images");
    std::string pre_view = "sa";
    pre->add_option("--view", pre_view, "Target view")->check(CLI::IsMember({"sa", "la4ch"}));

    // pretrain
    auto* ptr = app.add_subcommand("pretrain", "Pretrain a 10-way network on pretext labels");
    std::string ptr_out = "runs/pretrain";
    ptr->add_option("-o,--out", ptr_out, "Output directory");

    // finetune
    auto* fin = app.add_subcommand("finetune", "Train one grid cell and evaluate it on the test subjects");
    std::string fin_mode, fin_pretrained = "runs/pretrain/checkpoint.ckpt", fin_out;
    int fin_n = 1, fin_seed = 0;
    fin->add_option("-m,--mode", fin_mode, "scratch | ssl_decoder | ssl_all | ssl_multitask")->required()
        ->check(CLI::IsMember({"scratch", "ssl_decoder", "ssl_all", "ssl_multitask"}));
    fin->add_option("-n,--subjects", fin_n, "Number of annotated training subjects")->check(CLI::PositiveNumber);
    fin->add_option("--seed-index", fin_seed, "Replicate index")->check(CLI::NonNegativeNumber);
    fin->add_option("-p,--pretrained", fin_pretrained, "Pretrained checkpoint (ignored for scratch)");
    fin->add_option("-o,--out", fin_out, "Output directory (default runs/cells/<cell>)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test subjects");
    std::string ev_ckpt, ev_out = "metrics.csv";
    ev->add_option("-k,--checkpoint", ev_ckpt, "Checkpoint to evaluate")->required();
    ev->add_option("-o,--out", ev_out, "Raw metrics CSV");

    // experiment
    auto* ex = app.add_subcommand("experiment", "Run the {mode x budget x seed} grid and build the tables");
    std::string ex_out = "runs/experiment";
    std::optional<int> ex_seeds, ex_workers;
    std::optional<std::string> ex_budgets, ex_modes;
    ex->add_option("-o,--out", ex_out, "Output directory (resumable)");
    ex->add_option("--seeds", ex_seeds, "Replicates per cell (experiment.seeds)");
    ex->add_option("--budgets", ex_budgets, "Comma-separated subject budgets (experiment.budgets)");
    ex->add_option("--modes", ex_modes, "Comma-separated modes (experiment.modes)");
    ex->add_option("-j,--workers", ex_workers, "Cells trained concurrently (experiment.workers)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }
    spdlog::set_level(g.verbose ? spdlog::level::debug : g.quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        if (*gen) {
            std::vector<std::string> extra;
            if (gen_seed) extra.push_back(fmt::format("phantom.seed={}", *gen_seed));
            const auto cfg = load_config(g, extra);
            const int n = gen_subjects >= 0 ? gen_subjects
                                            : cfg.experiment.pretrain_subjects + cfg.experiment.test_subjects;
            const fs::path out = gen_out.empty() ? data_root(g) : resolve(g, gen_out);
            pipeline::RunManifest m(out / "manifest.json", "gen-data", cfg);
            m.set("subjects", n);
            fs::create_directories(out);
            m.write_started();
            const auto stats = pipeline::generate_cohort(cfg, out, n, gen_workers);
            m.set("studies", stats.studies);
            m.write_finished();
            spdlog::info("wrote {} subjects ({} studies) to {}", stats.subjects, stats.studies, out.string());
        } else if (*pre) {
            const auto cfg = load_config(g);
            const fs::path root = data_root(g);
            const View view = parse_view(pre_view);
            pipeline::RunManifest m(root / fmt::format("pretext_{}.manifest.json", pre_view), "make-pretext", cfg);
            m.write_started();
            const auto stats = pipeline::make_pretext(root, view, cfg.boxes);
            m.set("images", stats.images);
            m.set("skipped", stats.skipped);
            spdlog::info("pretext labels for {} {} images, {} skipped ({:.1f}%)", stats.images, pre_view,
                         stats.skipped, 100.0 * stats.skipped_fraction());
            if (stats.skipped_fraction() > 0.10) {
                m.write_finished("failed");
                spdlog::error("more than 10% of images were skipped; the view geometry looks broken");
                return kData;
            }
            m.write_finished();
        } else if (*ptr) {
            const auto cfg = load_config(g);
            pipeline::run_pretrain(cfg, data_root(g), resolve(g, ptr_out));
        } else if (*fin) {
            const auto cfg = load_config(g);
            const pipeline::CellSpec cell{trainer::parse_mode(fin_mode), fin_n, fin_seed};
            const fs::path out = fin_out.empty() ? resolve(g, "runs/cells/" + cell.name()) : resolve(g, fin_out);
            const auto report = pipeline::run_cell(cfg, data_root(g), resolve(g, fin_pretrained), cell, out);
            std::cout << fmt::format("{}\tDice {}\n", cell.name(), metrics::format_mean_std(report.dice_summary()));
        } else if (*ev) {
            const auto cfg = load_config(g);
            const auto report = pipeline::run_evaluate(cfg, data_root(g), resolve(g, ev_ckpt), resolve(g, ev_out));
            std::cout << fmt::format("Dice {}\n", metrics::format_mean_std(report.dice_summary()));
            for (int s : metrics::evaluated_structures(cfg.experiment.view))
                std::cout << fmt::format("  {:<4} Dice {}  MCD {} mm\n", structure_name(s),
                                         metrics::format_mean_std(report.structure_dice(s)),
                                         metrics::format_mean_std(report.structure_mcd(s), 2));
        } else if (*ex) {
            std::vector<std::string> extra;
            if (ex_seeds) extra.push_back(fmt::format("experiment.seeds={}", *ex_seeds));
            if (ex_budgets) extra.push_back("experiment.budgets=" + *ex_budgets);
            if (ex_modes) extra.push_back("experiment.modes=" + *ex_modes);
            if (ex_workers) extra.push_back(fmt::format("experiment.workers={}", *ex_workers));
            const auto cfg = load_config(g, extra);
            const fs::path out = resolve(g, ex_out);
            const auto table = pipeline::run_experiment(cfg, data_root(g), out);
            std::cout << "n_subjects";
            for (const auto& m : table.modes) std::cout << '\t' << m;
            std::cout << '\n';
            for (int n : table.budgets) {
                std::cout << n;
                for (const auto& m : table.modes) {
                    const auto* c = table.cell(m, n);
                    std::cout << '\t' << (c ? metrics::format_mean_std(c->dice) : "missing");
                }
                std::cout << '\n';
            }
            spdlog::info("tables and plots written to {}", out.string());
        }
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return kData;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kTraining;
    }
    return kOk;
}
