#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrf/blob_data.hpp"
#include "mrf/cluster_eval.hpp"
#include "mrf/probe_eval.hpp"
#include "mrf/refine.hpp"
#include "mrf/toy_encoder.hpp"

namespace mrf {

struct ProbeStageConfig {
    KnnConfig knn;
    std::size_t linear_epochs = 200;
    double linear_lr = 0.5;
    double linear_wd = 1e-4;
    std::vector<std::size_t> low_shot = {1, 5};
    double test_fraction = 0.2;
    std::uint64_t low_shot_seed = 5;

    void validate() const;
};

// Head placement and shape; empty vectors fall back to the last third of the
// blocks and the stock head dimensions for the encoder width.
struct HeadsSpec {
    std::vector<std::size_t> attach;
    std::vector<std::size_t> projector_dims;
    std::vector<std::size_t> predictor_dims;
};

struct ClusterStageConfig {
    KmeansConfig kmeans;
    bool per_block = false; // adds the consecutive-block label similarity sweep
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "run";
    std::vector<std::string> stages = {"pretrain", "analyze_blocks", "init_heads",
                                       "refine",   "probe",          "cluster"};
    BlobDatasetConfig data;
    EncoderConfig encoder;
    MimConfig mim;
    HeadsSpec heads;
    RefineConfig refine;
    ProbeStageConfig probe;
    ClusterStageConfig cluster;

    EnsembleConfig ensemble() const;
    void validate() const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::string& path);

// Runs the requested stages in dependency order. Each stage persists its
// artifacts and a JSON section under out_dir and missing inputs are loaded
// from the checkpoints of earlier runs; a stage whose inputs are nowhere to
// be found fails with its name attached. Returns the merged report, which is
// also written to out_dir/report.json.
nlohmann::json run_stages(const ExperimentConfig& cfg,
                          const std::vector<std::string>& stages);
nlohmann::json run_experiment(const ExperimentConfig& cfg);

// Re-assembles report.json from the stage sections already on disk.
nlohmann::json merge_report(const ExperimentConfig& cfg);

} // namespace mrf
