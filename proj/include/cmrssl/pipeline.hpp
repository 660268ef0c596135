#pragma once

// Artifact-producing steps shared by the command-line tool and the acceptance
// suite. Every step writes a RunManifest next to its outputs.
//
// Workspace layout:
//   <data>/<subject>/<ED|ES>/<view>.nii.gz ...       cohort (gen-data, make-pretext)
//   <out>/pretrain/{checkpoint.ckpt,loss.csv,manifest.json}
//   <out>/cells/<mode>_n<N>_s<seed>/{checkpoint.ckpt,loss.csv,metrics.csv,manifest.json}
//   <out>/{config.ini,manifest.json,table.csv,table_seed<k>.csv,summary.csv,curves_*.svg}

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmrssl/config.hpp"
#include "cmrssl/metrics.hpp"
#include "cmrssl/trainer.hpp"

namespace cmrssl::pipeline {

namespace fs = std::filesystem;

/// Run record: id, resolved config, input digests, produced artifacts,
/// timestamps and source revision. Written when a step starts and rewritten
/// when it finishes.
class RunManifest {
public:
    RunManifest(fs::path path, std::string command, const config::RunConfig& cfg);

    void add_input(const std::string& name, const fs::path& path);    // records its sha256
    void add_artifact(const std::string& kind, const std::string& name, const fs::path& path);
    void set(const std::string& key, nlohmann::json value);
    void write_started();
    void write_finished(const std::string& status = "complete");

    const nlohmann::json& json() const { return j_; }
    static std::optional<nlohmann::json> read(const fs::path& path);

private:
    fs::path path_;
    nlohmann::json j_;
};

std::string source_revision();
std::string config_digest(const config::RunConfig& cfg);

struct GenerateStats {
    int subjects = 0;
    int studies = 0;
};

/// Writes subjects [0, n) of the cohort under `data_root`. Subjects are
/// generated on `workers` threads; output is identical for any worker count.
GenerateStats generate_cohort(const config::RunConfig& cfg, const fs::path& data_root, int n_subjects,
                              int workers = 1);

struct PretextStats {
    int images = 0;
    int skipped = 0;
    double skipped_fraction() const { return images ? double(skipped) / images : 0.0; }
};

/// Builds pretext label maps for `view` (sa or la4ch) for every study under
/// `data_root` and writes them next to the images.
PretextStats make_pretext(const fs::path& data_root, View view, const viewgeom::BoxParams& boxes);

/// Subject ids of the unannotated pool and the held-out test set: the first
/// pretrain_subjects sorted ids and the following test_subjects ids.
struct CohortSplit {
    std::vector<std::string> pool;
    std::vector<std::string> test;
};
CohortSplit cohort_split(const fs::path& data_root, const config::RunConfig& cfg);

/// Annotated training subjects for one grid cell: nested in n for a fixed seed.
std::vector<std::string> training_subjects(const CohortSplit& split, int n, int seed_index,
                                           const config::RunConfig& cfg);

std::vector<ViewStudy> load_subjects(const fs::path& data_root, const std::vector<std::string>& ids,
                                     std::vector<View> views);

/// Pretext pretraining on the pool. Throws TrainingDiverged if the final
/// loss is not below the initial loss.
fs::path run_pretrain(const config::RunConfig& cfg, const fs::path& data_root, const fs::path& out_dir);

struct CellSpec {
    trainer::TransferMode mode = trainer::TransferMode::scratch;
    int n_subjects = 1;
    int seed_index = 0;
    std::string name() const;
};

/// Finetunes one grid cell and evaluates it on the test subjects. `pretrained`
/// is ignored for scratch.
metrics::MetricsReport run_cell(const config::RunConfig& cfg, const fs::path& data_root,
                                const fs::path& pretrained, const CellSpec& cell, const fs::path& out_dir);

/// Evaluates a checkpoint on the test subjects of the configured view.
metrics::MetricsReport run_evaluate(const config::RunConfig& cfg, const fs::path& data_root,
                                    const fs::path& checkpoint, const fs::path& metrics_csv);

/// Full grid {mode x budget x seed}; finished cells (complete manifest with a
/// matching config digest) are reused.
metrics::ExperimentTable run_experiment(const config::RunConfig& cfg, const fs::path& data_root,
                                        const fs::path& out_dir);

} // namespace cmrssl::pipeline
