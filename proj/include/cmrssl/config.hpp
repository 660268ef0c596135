#pragma once

// INI configuration. Sections mirror the modules:
//
//   [phantom]     cohort generation and view sampling
//   [viewgeom]    pretext box geometry
//   [segnet]      network shape
//   [trainer]     optimisation (pretraining and finetuning)
//   [experiment]  grid definition
//
// Every key can be overridden with `section.key=value`. Unknown sections or
// keys are rejected so typos never silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmrssl/phantom.hpp"
#include "cmrssl/segnet.hpp"
#include "cmrssl/study.hpp"
#include "cmrssl/trainer.hpp"
#include "cmrssl/viewgeom.hpp"

namespace cmrssl::config {

struct ExperimentConfig {
    View view = View::sa;
    int pretrain_subjects = 200;      // unannotated pool; finetuning subsets are drawn from it
    int test_subjects = 20;           // held-out subjects generated after the pool
    std::vector<int> budgets{1, 2, 5, 10, 20};   // clinical scale: 1, 5, 10, 50, 100
    std::vector<trainer::TransferMode> modes{std::begin(trainer::kAllModes), std::end(trainer::kAllModes)};
    int seeds = 3;
    int workers = 1;
};

struct RunConfig {
    std::uint64_t data_seed = 7;
    phantom::CohortConfig cohort;
    viewgeom::BoxParams boxes{7, 12};         // 11 px boxes, 30 px apart on 1.82 mm images
    segnet::NetConfig net;
    trainer::TrainConfig train;               // shared by pretraining and finetuning
    int pretrain_iterations = 2000;           // train.iterations applies to finetuning
    ExperimentConfig experiment;

    void validate() const;  // throws BadConfig
    trainer::TrainConfig pretrain_config() const;
    /// Finetuning settings for replicate `seed_index` of a grid cell.
    trainer::TrainConfig finetune_config(int seed_index) const;
};

/// Parses an INI file over the defaults and applies `section.key=value`
/// overrides in order. Throws BadConfig.
RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
RunConfig from_string(const std::string& ini, const std::vector<std::string>& overrides = {});

/// Fully resolved configuration in the same INI format; from_string(to_ini(c)) == c.
std::string to_ini(const RunConfig& cfg);

} // namespace cmrssl::config
