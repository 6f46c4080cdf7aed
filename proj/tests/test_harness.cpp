#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrf/embedding_io.hpp"
#include "mrf/error.hpp"
#include "mrf/experiment.hpp"

using namespace mrf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// same tiny vector-mode recipe everywhere: three well-spread classes, a
// depth-4 encoder and a pipeline that finishes in well under a second
json tiny_config(const std::string& run_name) {
    const fs::path dir = fs::temp_directory_path() / "mrf_harness_tests" / run_name;
    fs::remove_all(dir);
    return {
        {"seed", 7},
        {"out_dir", dir.string()},
        {"data",
         {{"layout", "vector"}, {"n_classes", 3}, {"n_per_class", 20}, {"dim", 16},
          {"spread", 3.0}, {"noise", 0.3}, {"seed", 5}}},
        {"encoder", {{"depth", 4}, {"width", 16}, {"tokens", 8}, {"token_dim", 2},
                     {"mlp_hidden", 24}}},
        {"mim", {{"epochs", 3}, {"batch", 10}, {"lr", 0.001}, {"probe_epochs", 2}}},
        {"heads", {{"projector_dims", {16, 24, 24, 12}}, {"predictor_dims", {12, 16, 12}}}},
        {"refine",
         {{"epochs", 2}, {"batch", 10}, {"queue_capacity", 128}, {"queue_top_k", 3},
          {"init_epochs", 2}, {"views", {{"n_local", 2}, {"jitter_sd", 0.05}}}}},
        {"probe", {{"knn_k", 5}, {"linear_epochs", 30}, {"low_shot", {1, 2}}}},
        {"cluster", {{"k", 3}, {"restarts", 5}, {"iterations", 10}, {"minibatch", 16}}},
    };
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Err thrown_code(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code;
    }
    FAIL("expected an Error");
    return Err::ConfigError;
}

std::string thrown_message(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    FAIL("expected an Error");
    return {};
}

} // namespace

TEST_CASE("config survives parse, serialize, parse unchanged") {
    const json j = tiny_config("roundtrip");
    const ExperimentConfig a = experiment_from_json(j);
    const json ja = experiment_to_json(a);
    const ExperimentConfig b = experiment_from_json(ja);
    CHECK(experiment_to_json(b).dump() == ja.dump());
    CHECK(a.stages == std::vector<std::string>{"pretrain", "analyze_blocks", "init_heads",
                                               "refine", "probe", "cluster"});
}

TEST_CASE("unknown config keys are rejected, top level and nested") {
    json j = tiny_config("unknown");
    j["surprise"] = 1;
    CHECK(thrown_code([&] { experiment_from_json(j); }) == Err::ConfigError);

    json j2 = tiny_config("unknown2");
    j2["mim"]["learning_rate"] = 0.1; // the key is spelled lr
    CHECK(thrown_code([&] { experiment_from_json(j2); }) == Err::ConfigError);
}

TEST_CASE("bad stage lists are rejected") {
    json j = tiny_config("stages");
    j["stages"] = {"pretrain", "polish"};
    CHECK(thrown_message([&] { experiment_from_json(j); }).find("polish") != std::string::npos);

    j["stages"] = {"pretrain", "pretrain"};
    CHECK(thrown_code([&] { experiment_from_json(j); }) == Err::ConfigError);
}

TEST_CASE("encoder token layout must match the data layout") {
    json j = tiny_config("layout");
    j["encoder"]["tokens"] = 4; // vector data always presents 8 tokens
    j["encoder"]["token_dim"] = 4;
    CHECK(thrown_message([&] { experiment_from_json(j); }).find("token layout") !=
          std::string::npos);
}

TEST_CASE("malformed config files fail with a parse error") {
    const fs::path p = fs::temp_directory_path() / "mrf_harness_tests" / "broken.json";
    fs::create_directories(p.parent_path());
    std::ofstream(p) << "{\"seed\": }";
    CHECK(thrown_code([&] { load_experiment_config(p.string()); }) == Err::ConfigError);
    // a missing file is a config mistake too: the CLI turns this into exit code 2
    CHECK(thrown_code([&] { load_experiment_config("/no/such/file.json"); }) == Err::ConfigError);
}

TEST_CASE("pretrain alone yields a checkpoint and a loss curve") {
    const ExperimentConfig cfg = experiment_from_json(tiny_config("pretrain_only"));
    const json report = run_stages(cfg, {"pretrain"});

    CHECK(fs::exists(fs::path(cfg.out_dir) / "pretrain.mrfc"));
    const json& sections = report.at("stages");
    CHECK(sections.contains("pretrain"));
    CHECK_FALSE(sections.contains("probe"));
    CHECK(sections.at("pretrain").at("epochs") == 3);
    CHECK(sections.at("pretrain").at("final_loss").get<double>() > 0.0);

    const std::string csv = slurp(fs::path(cfg.out_dir) / "mim_loss.csv");
    CHECK(csv.rfind("epoch,loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4); // header + one line per epoch

    const std::string on_disk = slurp(fs::path(cfg.out_dir) / "report.json");
    CHECK(json::parse(on_disk) == report);
}

TEST_CASE("a stage missing its inputs names itself in the error") {
    const ExperimentConfig cfg = experiment_from_json(tiny_config("no_inputs"));
    const std::string msg = thrown_message([&] { run_stages(cfg, {"probe"}); });
    CHECK(msg.find("stage probe") != std::string::npos);
    CHECK(msg.find("pretrain") != std::string::npos);

    const std::string msg2 = thrown_message([&] { run_stages(cfg, {"refine"}); });
    CHECK(msg2.find("stage refine") != std::string::npos);
}

TEST_CASE("later stages resume from checkpoints written by earlier runs") {
    const ExperimentConfig cfg = experiment_from_json(tiny_config("resume"));
    run_stages(cfg, {"pretrain"});
    run_stages(cfg, {"init_heads"});
    run_stages(cfg, {"refine"});
    const json report = run_stages(cfg, {"probe", "cluster"});

    // merged report picks up the sections persisted by all four invocations
    const json& sections = report.at("stages");
    CHECK(sections.contains("pretrain"));
    CHECK(sections.contains("init_heads"));
    CHECK(sections.contains("refine"));
    CHECK(sections.at("probe").contains("refined"));
    CHECK(sections.at("cluster").contains("refined"));

    const auto exported =
        import_embeddings((fs::path(cfg.out_dir) / "embeddings_refined_test.mrfe").string());
    CHECK(exported.has_labels);
    CHECK(exported.features.rows == 12); // 3 classes, tail fifth of 20 each
}

TEST_CASE("checkpoints from a different encoder config refuse to resume") {
    json j = tiny_config("guard");
    const ExperimentConfig cfg = experiment_from_json(j);
    run_stages(cfg, {"pretrain"});

    j["encoder"]["depth"] = 5;
    j["heads"]["attach"] = {2, 3}; // keep head inputs valid for the deeper encoder
    const ExperimentConfig other = experiment_from_json(j);
    const std::string msg = thrown_message([&] { run_stages(other, {"probe"}); });
    CHECK(msg.find("refusing to resume") != std::string::npos);
}

TEST_CASE("the same config reproduces report and checkpoint byte for byte") {
    const ExperimentConfig cfg = experiment_from_json(tiny_config("repro"));
    run_experiment(cfg);
    const std::string report1 = slurp(fs::path(cfg.out_dir) / "report.json");
    const std::string ckpt1 = slurp(fs::path(cfg.out_dir) / "refine.mrfc");
    run_experiment(cfg);
    CHECK(slurp(fs::path(cfg.out_dir) / "report.json") == report1);
    CHECK(slurp(fs::path(cfg.out_dir) / "refine.mrfc") == ckpt1);
}

TEST_CASE("full pipeline report carries probes, swaps and the cluster battery") {
    const ExperimentConfig cfg = experiment_from_json(tiny_config("full"));
    const json report = run_experiment(cfg);

    const json& sections = report.at("stages");
    for (const auto* stage :
         {"pretrain", "analyze_blocks", "init_heads", "refine", "probe", "cluster"})
        CHECK(sections.contains(stage));
    CHECK(report.at("config") == experiment_to_json(cfg));

    const json& blocks = sections.at("analyze_blocks");
    CHECK(blocks.at("per_block_knn").size() == 4); // one accuracy per encoder block

    const json& refine = sections.at("refine");
    CHECK(refine.at("epoch_swap").size() == 2);

    const json& probe = sections.at("probe");
    for (const auto* variant : {"unrefined", "refined"}) {
        CHECK(probe.at(variant).at("per_block_knn").size() == 4);
        CHECK(probe.at(variant).contains("linear"));
        CHECK(probe.at(variant).at("low_shot").contains("1"));
    }

    const json& cluster = sections.at("cluster");
    for (const auto* variant : {"unrefined", "refined"})
        for (const auto* metric : {"ACC", "NMI", "AMI", "ARI", "SIL", "DBS"})
            CHECK(cluster.at(variant).contains(metric));

    // merging with no stages listed just re-reads the persisted sections
    CHECK(run_stages(cfg, {}).at("stages") == sections);
}

TEST_CASE("per block clustering reports the similarity chain") {
    json j = tiny_config("per_block");
    j["cluster"]["per_block"] = true;
    j["stages"] = {"pretrain", "cluster"};
    const ExperimentConfig cfg = experiment_from_json(j);
    const json report = run_experiment(cfg);
    const json& sim = report.at("stages").at("cluster").at("unrefined").at("block_similarity");
    CHECK(sim.size() == 3); // one consecutive-block pair per step through 4 blocks
    for (const auto& v : sim) {
        CHECK(v.get<double>() >= -5.0);
        CHECK(v.get<double>() <= 100.5);
    }
}
