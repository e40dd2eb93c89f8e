#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <nlohmann/json.hpp>

#include "catr/experiment.hpp"
#include "catr/schema.hpp"

using namespace catr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

experiment::ExperimentConfig smoke_config(const fs::path& out) {
    experiment::ExperimentConfig cfg;
    experiment::GeneratorConfig gen;
    gen.n = 300;
    gen.spec.embedding_dim = 8;
    gen.spec.doc_len_min = 4;
    gen.spec.doc_len_max = 8;
    cfg.generator = gen;
    cfg.train.selector_hidden = {8};
    cfg.train.trunk_hidden = {16, 8};
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 64;
    cfg.est.bootstrap_b = 50;
    cfg.replications = 2;
    cfg.seed = 42;
    cfg.workers = 2;
    cfg.out_dir = out.string();
    return cfg;
}

}  // namespace

TEST_CASE("config loading: fields, overrides, and source exclusivity") {
    const auto dir = temp_dir("catr_cfg");
    const auto path = dir / "cfg.json";
    {
        std::ofstream out(path);
        out << R"({
          "seed": 7,
          "out_dir": "somewhere",
          "replications": 5,
          "generator": {"n": 123, "keywords": ["a", "b"],
                        "doc_length_range": [3, 9],
                        "propensity_params": [-0.2, 1.1],
                        "outcome_params": [0.5, 2.0, 1.5],
                        "noise_sd": 0.7, "embedding_dim": 10},
          "train": {"mu": 0.3, "gamma": 2.0, "batch_size": 48,
                     "sparsity": "kl_to_prior", "sparsity_prior": 0.25,
                     "kernel": {"outcome_kernel": "linear"}},
          "estimators": {"clip_ipw": 0.05, "bootstrap_b": 17},
          "ablation": {"disable_hsic": true}
        })";
    }
    const auto cfg = experiment::load_config(path);
    REQUIRE(cfg.seed == 7);
    REQUIRE(cfg.replications == 5);
    REQUIRE(cfg.generator.has_value());
    REQUIRE(cfg.generator->n == 123);
    REQUIRE(cfg.generator->spec.keywords == std::vector<std::string>{"a", "b"});
    REQUIRE(cfg.generator->spec.doc_len_min == 3);
    REQUIRE(cfg.generator->spec.a1 == 1.1);
    REQUIRE(cfg.generator->spec.b2 == 1.5);
    REQUIRE(cfg.generator->spec.embedding_dim == 10);
    REQUIRE(cfg.train.mu == 0.3);
    REQUIRE(cfg.train.gamma == 2.0);
    REQUIRE(cfg.train.batch_size == 48);
    REQUIRE(cfg.train.sparsity.kind == rationalizer::SparsityKind::kl_to_prior);
    REQUIRE(cfg.train.kernel.outcome_kernel == kernels::OutcomeKernel::linear);
    REQUIRE(cfg.est.clip_ipw == 0.05);
    REQUIRE(cfg.est.bootstrap_b == 17);
    REQUIRE(cfg.disable_hsic);
    cfg.validate_sources();  // generator only: fine

    auto both = cfg;
    both.dataset_path = "x";
    REQUIRE_THROWS_AS(both.validate_sources(), std::invalid_argument);
    auto neither = cfg;
    neither.generator.reset();
    REQUIRE_THROWS_AS(neither.validate_sources(), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("smoke: R=2 short-epoch pipeline writes every declared output") {
    const auto out = temp_dir("catr_run_smoke");
    const auto cfg = smoke_config(out / "exp");
    const auto result = experiment::run_experiment(cfg);
    REQUIRE(result.failures == 0);
    REQUIRE(result.rows.size() == 2);
    REQUIRE(fs::exists(out / "exp" / "replications.csv"));
    REQUIRE(fs::exists(out / "exp" / "aggregate.json"));
    REQUIRE(fs::exists(out / "exp" / "importance_top20.csv"));
    REQUIRE(fs::exists(out / "exp" / "history.csv"));
    REQUIRE(fs::exists(out / "exp" / "checkpoint" / "selector.net"));

    // aggregate validates against both the embedded and the shipped schema
    const auto agg = nlohmann::json::parse(slurp(out / "exp" / "aggregate.json"));
    REQUIRE(schema::validate_aggregate(agg).empty());
    const auto shipped = nlohmann::json::parse(
        slurp(fs::path(CATR_SOURCE_DIR) / "schemas" / "aggregate.schema.json"));
    REQUIRE(schema::validate(agg, shipped).empty());
    fs::remove_all(out);
}

TEST_CASE("embedded schema matches the shipped schema file") {
    const auto shipped =
        slurp(fs::path(CATR_SOURCE_DIR) / "schemas" / "aggregate.schema.json");
    REQUIRE(nlohmann::json::parse(shipped) ==
            nlohmann::json::parse(schema::kAggregateSchema));
}

TEST_CASE("schema validator rejects structural violations") {
    auto agg = nlohmann::json::parse(R"({
      "version": 1, "tau_true": 1.0, "replications": 2, "failures": 0,
      "estimators": {"or": {"mean_abs_bias": 0.1, "sd": 0.1, "avg_se": 0.1, "coverage": 0.9},
                      "ipw": {"mean_abs_bias": 0.1, "sd": 0.1, "avg_se": 0.1, "coverage": 0.9},
                      "aipw": {"mean_abs_bias": 0.1, "sd": 0.1, "avg_se": 0.1, "coverage": 0.9}},
      "diagnostics": {"ess_ratio": 0.5, "clipping_fraction": 0.1, "clip_epsilon": 0.03}
    })");
    REQUIRE(schema::validate_aggregate(agg).empty());

    auto missing = agg;
    missing["estimators"].erase("aipw");
    REQUIRE_FALSE(schema::validate_aggregate(missing).empty());

    auto bad_type = agg;
    bad_type["replications"] = "twenty";
    REQUIRE_FALSE(schema::validate_aggregate(bad_type).empty());

    auto out_of_range = agg;
    out_of_range["estimators"]["or"]["coverage"] = 1.5;
    REQUIRE_FALSE(schema::validate_aggregate(out_of_range).empty());
}

TEST_CASE("determinism: identical configs give byte-identical outputs") {
    const auto out1 = temp_dir("catr_det_a");
    const auto out2 = temp_dir("catr_det_b");
    auto cfg1 = smoke_config(out1 / "exp");
    auto cfg2 = smoke_config(out2 / "exp");
    cfg1.workers = 2;
    cfg2.workers = 1;  // worker count must not affect results
    experiment::run_experiment(cfg1);
    experiment::run_experiment(cfg2);
    for (const auto* name :
         {"replications.csv", "aggregate.json", "importance_top20.csv",
          "history.csv"}) {
        INFO(name);
        REQUIRE(slurp(out1 / "exp" / name) == slurp(out2 / "exp" / name));
    }
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("run requires the generator as its data source") {
    auto cfg = smoke_config(fs::temp_directory_path() / "catr_nogen");
    cfg.generator.reset();
    cfg.dataset_path = "somewhere";
    REQUIRE_THROWS_WITH(experiment::run_experiment(cfg),
                        Catch::Matchers::ContainsSubstring("generator"));
}

TEST_CASE("ablation: switched-off terms are identically zero in histories") {
    const auto out = temp_dir("catr_abl");
    auto cfg = smoke_config(out / "exp");
    cfg.replications = 1;
    cfg.disable_hsic = true;
    cfg.disable_sparsity = true;
    experiment::run_experiment(cfg);
    std::ifstream in(out / "exp" / "history.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        // epoch,l_sup,l_sparse,hsic,total,val_total
        std::stringstream ss(line);
        std::string field;
        std::getline(ss, field, ',');
        std::getline(ss, field, ',');
        std::getline(ss, field, ',');
        REQUIRE(field == "0");
        std::getline(ss, field, ',');
        REQUIRE(field == "0");
    }
    fs::remove_all(out);
}

TEST_CASE("ablation arms share generator draws and produce the joined table") {
    const auto out = temp_dir("catr_abl3");
    auto cfg = smoke_config(out / "exp");
    cfg.replications = 2;
    const auto arms = experiment::run_ablation(cfg);
    REQUIRE(arms.size() == 3);
    // identical documents + assignments: tau_true matches exactly across arms
    REQUIRE(arms[0].result.tau_true == arms[1].result.tau_true);
    REQUIRE(arms[0].result.tau_true == arms[2].result.tau_true);

    std::ifstream in(out / "exp" / "ablation.csv");
    std::string line;
    std::getline(in, line);
    REQUIRE(line ==
            "arm,estimator,mean_abs_bias,sd,avg_se,coverage,ess_ratio,clip_frac");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    REQUIRE(rows == 9);  // 3 arms x 3 estimators
    fs::remove_all(out);
}

TEST_CASE("lab command emits the three CSVs deterministically") {
    const auto out = temp_dir("catr_lab_cmd");
    experiment::ExperimentConfig cfg;
    cfg.generator = experiment::GeneratorConfig{};  // unused by lab
    experiment::LabRunConfig lc;
    lc.spec.n = 150;
    lc.dims = {2, 8};
    lc.repeats = 2;
    cfg.lab = lc;
    cfg.seed = 5;
    cfg.out_dir = (out / "lab").string();
    REQUIRE(experiment::cmd_lab(cfg) == 0);
    const auto sweep1 = slurp(out / "lab" / "sweep.csv");
    REQUIRE(fs::exists(out / "lab" / "pca.csv"));
    REQUIRE(fs::exists(out / "lab" / "ps_hist.csv"));
    {
        std::istringstream ss(sweep1);
        std::string line;
        std::getline(ss, line);
        REQUIRE(line == "dim,repeat,clip_frac_hat,clip_frac_true,ess_ratio");
        int rows = 0;
        while (std::getline(ss, line))
            if (!line.empty()) ++rows;
        REQUIRE(rows == 4);  // one row per (dim, repeat)
    }
    REQUIRE(experiment::cmd_lab(cfg) == 0);
    REQUIRE(slurp(out / "lab" / "sweep.csv") == sweep1);
    fs::remove_all(out);
}

TEST_CASE("importance command works from a saved dataset directory") {
    const auto out = temp_dir("catr_imp");
    auto gen_cfg = smoke_config(out / "gen");
    REQUIRE(experiment::cmd_generate(gen_cfg) == 0);

    experiment::ExperimentConfig cfg;
    cfg.dataset_path = (out / "gen" / "dataset").string();
    cfg.train = gen_cfg.train;
    cfg.seed = 3;
    cfg.importance_top_k = 10;
    cfg.out_dir = (out / "imp").string();
    REQUIRE(experiment::cmd_importance(cfg) == 0);
    const auto imp = slurp(out / "imp" / "importance_top10.csv");
    REQUIRE(imp.rfind("rank,token,score", 0) == 0);
    REQUIRE(fs::exists(out / "imp" / "checkpoint" / "selector.net"));
    fs::remove_all(out);
}

TEST_CASE("generate command round-trips through load_dataset") {
    const auto out = temp_dir("catr_gen_cmd");
    auto cfg = smoke_config(out / "exp");
    REQUIRE(experiment::cmd_generate(cfg) == 0);
    const auto ds = dataset::load_dataset(out / "exp" / "dataset");
    REQUIRE(ds.n == 300);
    REQUIRE(ds.d == 8);
    // byte-identical regeneration
    const auto meta1 = slurp(out / "exp" / "dataset" / "meta.json");
    const auto emb1 = slurp(out / "exp" / "dataset" / "embeddings.f32");
    fs::remove_all(out / "exp" / "dataset");
    REQUIRE(experiment::cmd_generate(cfg) == 0);
    REQUIRE(slurp(out / "exp" / "dataset" / "meta.json") == meta1);
    REQUIRE(slurp(out / "exp" / "dataset" / "embeddings.f32") == emb1);
    fs::remove_all(out);
}

TEST_CASE("bootstrap refit flag exercises the full-refit path") {
    const auto out = temp_dir("catr_refit");
    auto cfg = smoke_config(out / "exp");
    cfg.replications = 1;
    cfg.train.max_epochs = 1;
    cfg.est.bootstrap_b = 3;
    cfg.est.refit = true;
    const auto result = experiment::run_experiment(cfg);
    REQUIRE(result.failures == 0);
    fs::remove_all(out);
}
