#pragma once
// Configuration-driven experiment runner: replication loops with fixed
// documents and fresh treatment/outcome draws, three-arm ablations, the
// positivity lab, and token-importance reports. Every command is a pure
// function of its config; replications run in a worker pool and are
// collected in index order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "catr/dataset.hpp"
#include "catr/estimators.hpp"
#include "catr/lab.hpp"
#include "catr/schema.hpp"
#include "catr/trainer.hpp"
#include "catr/util.hpp"

namespace catr::experiment {

namespace fs = std::filesystem;

struct GeneratorConfig {
    dataset::ConfounderSpec spec;
    int n = 2000;
};

struct EstimatorSettings {
    double clip_or = 0.0;     // OR ignores g; kept for symmetry in reports
    double clip_ipw = 0.03;
    double clip_aipw = 0.03;
    double diag_eps = 0.03;   // clipping-fraction threshold in diagnostics
    int bootstrap_b = 1000;
    bool refit = false;       // refit nuisances inside each bootstrap resample
};

struct LabRunConfig {
    lab::ProxySpec spec;
    std::vector<int> dims{4, 16, 64, 256, 1024};
    double eps = 0.03;
    int repeats = 5;
    double l2 = 1e-4;
};

struct ExperimentConfig {
    std::optional<GeneratorConfig> generator;
    std::optional<std::string> dataset_path;
    trainer::TrainConfig train;
    EstimatorSettings est;
    int replications = 1;
    bool disable_hsic = false;
    bool disable_sparsity = false;
    std::string out_dir = "catr-out";
    int workers = 0;  // 0 = hardware concurrency
    std::uint64_t seed = 0;
    int importance_top_k = 20;
    trainer::EvalMaskMode eval_mask = trainer::EvalMaskMode::threshold;
    int eval_top_k = 1;
    std::optional<LabRunConfig> lab;

    void validate_sources() const {
        if (generator.has_value() == dataset_path.has_value())
            throw std::invalid_argument(
                "config: exactly one data source (generator or dataset_path) required");
    }
};

// ---- config file ----

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_config: cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded())
        throw std::runtime_error("load_config: " + path.string() + " is not valid JSON");

    ExperimentConfig cfg;
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.out_dir = j.value("out_dir", std::string{"catr-out"});
    cfg.workers = j.value("workers", 0);
    cfg.replications = j.value("replications", 1);
    cfg.importance_top_k = j.value("importance_top_k", 20);

    if (j.contains("generator")) {
        const auto& g = j["generator"];
        GeneratorConfig gen;
        gen.n = g.value("n", 2000);
        auto& s = gen.spec;
        if (g.contains("keywords"))
            s.keywords = g["keywords"].get<std::vector<std::string>>();
        s.filler_vocab_size = g.value("filler_vocab_size", s.filler_vocab_size);
        if (g.contains("doc_length_range")) {
            s.doc_len_min = g["doc_length_range"][0].get<int>();
            s.doc_len_max = g["doc_length_range"][1].get<int>();
        }
        s.keyword_inclusion_prob =
            g.value("keyword_inclusion_prob", s.keyword_inclusion_prob);
        if (g.contains("propensity_params")) {
            s.a0 = g["propensity_params"][0].get<double>();
            s.a1 = g["propensity_params"][1].get<double>();
        }
        if (g.contains("outcome_params")) {
            s.b0 = g["outcome_params"][0].get<double>();
            s.b1 = g["outcome_params"][1].get<double>();
            s.b2 = g["outcome_params"][2].get<double>();
        }
        s.noise_sd = g.value("noise_sd", s.noise_sd);
        s.embedding_dim = g.value("embedding_dim", s.embedding_dim);
        s.binary_outcome = g.value("binary_outcome", s.binary_outcome);
        cfg.generator = gen;
    }
    if (j.contains("dataset_path"))
        cfg.dataset_path = j["dataset_path"].get<std::string>();

    if (j.contains("train")) {
        const auto& t = j["train"];
        auto& tc = cfg.train;
        tc.mu = t.value("mu", tc.mu);
        tc.gamma = t.value("gamma", tc.gamma);
        tc.eta = t.value("eta", tc.eta);
        tc.batch_size = t.value("batch_size", tc.batch_size);
        tc.max_epochs = t.value("max_epochs", tc.max_epochs);
        tc.patience = t.value("patience", tc.patience);
        tc.learning_rate = t.value("learning_rate", tc.learning_rate);
        if (t.contains("split_ratio")) {
            const auto r = t["split_ratio"].get<std::vector<int>>();
            if (r.size() != 3)
                throw std::runtime_error("config: split_ratio needs 3 entries");
            tc.split_ratio = {r[0], r[1], r[2]};
        }
        if (t.contains("sparsity")) {
            const auto k = t["sparsity"].get<std::string>();
            if (k == "entropy") tc.sparsity.kind = rationalizer::SparsityKind::entropy;
            else if (k == "entropy_full")
                tc.sparsity.kind = rationalizer::SparsityKind::entropy_full;
            else if (k == "kl_to_prior")
                tc.sparsity.kind = rationalizer::SparsityKind::kl_to_prior;
            else if (k == "l1") tc.sparsity.kind = rationalizer::SparsityKind::l1;
            else throw std::runtime_error("config: unknown sparsity kind '" + k + "'");
        }
        tc.sparsity.prior = t.value("sparsity_prior", tc.sparsity.prior);
        if (t.contains("outcome_mode")) {
            const auto m = t["outcome_mode"].get<std::string>();
            if (m == "real") tc.outcome = predictor::OutcomeMode::real;
            else if (m == "binary") tc.outcome = predictor::OutcomeMode::binary;
            else throw std::runtime_error("config: unknown outcome_mode '" + m + "'");
        }
        if (t.contains("selector_hidden"))
            tc.selector_hidden = t["selector_hidden"].get<std::vector<int>>();
        if (t.contains("trunk_hidden"))
            tc.trunk_hidden = t["trunk_hidden"].get<std::vector<int>>();
        if (t.contains("kernel")) {
            const auto& k = t["kernel"];
            if (k.contains("outcome_kernel")) {
                const auto ok = k["outcome_kernel"].get<std::string>();
                if (ok == "rbf")
                    tc.kernel.outcome_kernel = kernels::OutcomeKernel::rbf;
                else if (ok == "linear")
                    tc.kernel.outcome_kernel = kernels::OutcomeKernel::linear;
                else
                    throw std::runtime_error("config: unknown outcome_kernel '" + ok + "'");
            }
            tc.kernel.bandwidth_floor =
                k.value("bandwidth_floor", tc.kernel.bandwidth_floor);
            if (k.contains("fixed_sigma")) {
                tc.kernel.bandwidth_mode = kernels::BandwidthMode::fixed;
                tc.kernel.fixed_sigma = k["fixed_sigma"].get<double>();
            }
        }
    }

    if (j.contains("estimators")) {
        const auto& e = j["estimators"];
        cfg.est.clip_or = e.value("clip_or", cfg.est.clip_or);
        cfg.est.clip_ipw = e.value("clip_ipw", cfg.est.clip_ipw);
        cfg.est.clip_aipw = e.value("clip_aipw", cfg.est.clip_aipw);
        cfg.est.diag_eps = e.value("diag_eps", cfg.est.diag_eps);
        cfg.est.bootstrap_b = e.value("bootstrap_b", cfg.est.bootstrap_b);
        cfg.est.refit = e.value("refit", cfg.est.refit);
    }
    if (j.contains("ablation")) {
        cfg.disable_hsic = j["ablation"].value("disable_hsic", false);
        cfg.disable_sparsity = j["ablation"].value("disable_sparsity", false);
    }
    if (j.contains("eval_mask")) {
        const auto m = j["eval_mask"].get<std::string>();
        if (m == "threshold") cfg.eval_mask = trainer::EvalMaskMode::threshold;
        else if (m == "soft") cfg.eval_mask = trainer::EvalMaskMode::soft;
        else if (m == "top_k") cfg.eval_mask = trainer::EvalMaskMode::top_k;
        else throw std::runtime_error("config: unknown eval_mask '" + m + "'");
        cfg.eval_top_k = j.value("eval_top_k", 1);
    }
    if (j.contains("lab")) {
        const auto& l = j["lab"];
        LabRunConfig lc;
        lc.spec.n = l.value("n", lc.spec.n);
        lc.spec.p = l.value("proxy_dim", lc.spec.p);
        lc.spec.latent_dim = l.value("latent_dim", lc.spec.latent_dim);
        lc.spec.active_fraction = l.value("active_fraction", lc.spec.active_fraction);
        lc.spec.noise_sd = l.value("noise_sd", lc.spec.noise_sd);
        lc.spec.slope = l.value("slope", lc.spec.slope);
        if (l.contains("dims")) lc.dims = l["dims"].get<std::vector<int>>();
        lc.eps = l.value("eps", lc.eps);
        lc.repeats = l.value("repeats", lc.repeats);
        lc.l2 = l.value("l2", lc.l2);
        cfg.lab = lc;
    }
    return cfg;
}

// Output root: absolute out_dir wins; otherwise CATR_OUT_ROOT (when set)
// prefixes it.
inline fs::path resolve_out_dir(const ExperimentConfig& cfg) {
    fs::path out(cfg.out_dir);
    if (out.is_absolute()) return out;
    if (const char* root = std::getenv("CATR_OUT_ROOT"))
        return fs::path(root) / out;
    return out;
}

// ---- worker pool ----

// Runs fn(0..n-1) on `workers` threads; exceptions are rethrown after all
// workers join (first index wins). Results must be written by index.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 0)
        workers = static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::string> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (const std::exception& e) {
                    errors[static_cast<std::size_t>(i)] = e.what();
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = "unknown error";
                }
            }
        });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error(e);
}

// ---- replication pipeline ----

struct ReplicationRow {
    int r = 0;
    bool failed = false;
    std::string error;
    estimators::ATEReport rep_or, rep_ipw, rep_aipw;
    double ess_ratio = 0.0;
    double clip_frac = 0.0;
};

struct RunOutput {
    double tau_true = 0.0;
    std::vector<ReplicationRow> rows;
    int failures = 0;
    estimators::ReplicationAggregate agg_or, agg_ipw, agg_aipw;
    double mean_ess_ratio = 0.0;
    double mean_clip_frac = 0.0;
    std::vector<std::pair<std::string, double>> importance;  // mean over reps
};

namespace detail {

template <typename T>
std::vector<T> take(const std::vector<T>& v, const std::vector<int>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
    return out;
}

inline trainer::TrainConfig arm_config(trainer::TrainConfig base, bool no_hsic,
                                       bool no_sparsity) {
    if (no_hsic) base.gamma = 0.0;
    if (no_sparsity) base.mu = 0.0;
    return base;
}

inline void write_replications_csv(const std::vector<ReplicationRow>& rows,
                                   const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "r,failed,estimator,tau_hat,se,ci_lo,ci_hi,b_used,b_missing,flagged,"
           "ess_ratio,clip_frac\n";
    for (const auto& row : rows) {
        if (row.failed) {
            out << row.r << ",1,,,,,,,,,,\n";
            continue;
        }
        for (const auto* rep : {&row.rep_or, &row.rep_ipw, &row.rep_aipw}) {
            out << row.r << ",0," << rep->estimator << ','
                << util::fmt_double(rep->tau_hat) << ',' << util::fmt_double(rep->se)
                << ',' << util::fmt_double(rep->ci_lo) << ','
                << util::fmt_double(rep->ci_hi) << ',' << rep->b_used << ','
                << rep->b_missing << ',' << (rep->flagged ? 1 : 0) << ','
                << util::fmt_double(row.ess_ratio) << ','
                << util::fmt_double(row.clip_frac) << '\n';
        }
    }
}

inline nlohmann::json aggregate_json(const RunOutput& out, int replications,
                                     double diag_eps) {
    auto metrics = [](const estimators::ReplicationAggregate& a) {
        return nlohmann::json{{"mean_abs_bias", a.mean_abs_bias},
                              {"sd", a.sd},
                              {"avg_se", a.avg_se},
                              {"coverage", a.coverage}};
    };
    return nlohmann::json{
        {"version", 1},
        {"tau_true", out.tau_true},
        {"replications", replications},
        {"failures", out.failures},
        {"estimators",
         {{"or", metrics(out.agg_or)},
          {"ipw", metrics(out.agg_ipw)},
          {"aipw", metrics(out.agg_aipw)}}},
        {"diagnostics",
         {{"ess_ratio", out.mean_ess_ratio},
          {"clipping_fraction", out.mean_clip_frac},
          {"clip_epsilon", diag_eps}}}};
}

inline void write_importance_csv(
    const std::vector<std::pair<std::string, double>>& imp, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "rank,token,score\n";
    for (std::size_t i = 0; i < imp.size(); ++i)
        out << i + 1 << ',' << imp[i].first << ',' << util::fmt_double(imp[i].second)
            << '\n';
}

inline void save_checkpoint(const trainer::TrainedModel& m, const fs::path& dir) {
    fs::create_directories(dir);
    nets::save_net(m.selector, dir / "selector.net");
    nets::save_net(m.pred.trunk, dir / "trunk.net");
    nets::save_net(m.pred.head_g, dir / "head_g.net");
    nets::save_net(m.pred.head_q0, dir / "head_q0.net");
    nets::save_net(m.pred.head_q1, dir / "head_q1.net");
}

}  // namespace detail

// Replication loop on fixed documents with fresh treatment/outcome draws.
// Estimators and diagnostics run on the test split of each replication.
// Writes replications.csv, aggregate.json, importance_top<k>.csv, plus the
// first replication's history.csv and checkpoint/.
inline RunOutput run_experiment(const ExperimentConfig& cfg,
                                bool write_outputs = true) {
    cfg.validate_sources();
    if (!cfg.generator)
        throw std::invalid_argument(
            "run: replications need the generator block (fresh treatment/outcome "
            "draws on fixed documents); dataset_path runs are supported by the "
            "importance command");
    if (cfg.replications < 1)
        throw std::invalid_argument("run: replications must be >= 1");

    const auto& gen = *cfg.generator;
    const auto docs = dataset::generate_semisynthetic(
        gen.spec, gen.n, rng::derive(cfg.seed, rng::fnv1a64("docs")));

    RunOutput out;
    out.tau_true = docs.truth.tau_true;
    out.rows.assign(static_cast<std::size_t>(cfg.replications), {});

    std::vector<std::map<std::string, double>> rep_importance(
        static_cast<std::size_t>(cfg.replications));
    std::vector<trainer::TrainedModel> first_model(1);

    const auto train_cfg =
        detail::arm_config(cfg.train, cfg.disable_hsic, cfg.disable_sparsity);

    parallel_for(cfg.replications, cfg.workers, [&](int r) {
        auto& row = out.rows[static_cast<std::size_t>(r)];
        row.r = r;
        try {
            dataset::SemiSynthetic data = docs;
            const std::uint64_t rep_seed =
                rng::derive(cfg.seed, static_cast<std::uint64_t>(r));
            dataset::resample_assignments(data, gen.spec, rep_seed);

            auto tc = train_cfg;
            tc.seed = rep_seed;
            auto model = trainer::train(data.ds, tc);

            const auto nuis_all = trainer::evaluate_nuisances(
                model.selector, model.pred, data.ds, cfg.eval_mask, cfg.eval_top_k);
            const auto& test = model.split.test;
            estimators::NuisanceEstimates nuis;
            nuis.g_hat = detail::take(nuis_all.g_hat, test);
            nuis.q0_hat = detail::take(nuis_all.q0_hat, test);
            nuis.q1_hat = detail::take(nuis_all.q1_hat, test);
            const auto t = detail::take(data.ds.treatment, test);
            const auto y = detail::take(data.ds.outcome, test);
            const auto g_true = detail::take(data.truth.true_propensity, test);

            estimators::EstimatorConfig bc;
            bc.bootstrap_b = cfg.est.bootstrap_b;
            bc.bootstrap_seed = rng::derive(cfg.seed, static_cast<std::uint64_t>(r),
                                            rng::fnv1a64("boot"));
            std::function<estimators::NuisanceEstimates(const std::vector<int>&)>
                refit;
            if (cfg.est.refit) {
                refit = [&data, &tc, &test, &cfg](const std::vector<int>& idx) {
                    // retrain on the same replication data, then read the
                    // refit nuisances at the resampled test rows
                    auto bs = trainer::train(data.ds, tc);
                    const auto alln = trainer::evaluate_nuisances(
                        bs.selector, bs.pred, data.ds, cfg.eval_mask, cfg.eval_top_k);
                    estimators::NuisanceEstimates outn;
                    for (int i : idx) {
                        const int unit = test[static_cast<std::size_t>(i)];
                        outn.g_hat.push_back(alln.g_hat[static_cast<std::size_t>(unit)]);
                        outn.q0_hat.push_back(alln.q0_hat[static_cast<std::size_t>(unit)]);
                        outn.q1_hat.push_back(alln.q1_hat[static_cast<std::size_t>(unit)]);
                    }
                    return outn;
                };
            }

            bc.clip = cfg.est.clip_or;
            row.rep_or = estimators::bootstrap_report(estimators::EstimatorKind::or_,
                                                      nuis, t, y, bc, refit);
            bc.clip = cfg.est.clip_ipw;
            row.rep_ipw = estimators::bootstrap_report(estimators::EstimatorKind::ipw,
                                                       nuis, t, y, bc, refit);
            bc.clip = cfg.est.clip_aipw;
            row.rep_aipw = estimators::bootstrap_report(
                estimators::EstimatorKind::aipw, nuis, t, y, bc, refit);

            row.ess_ratio = estimators::ess_ratio(nuis.g_hat, g_true, t);
            row.clip_frac = estimators::clipping_fraction(nuis.g_hat, cfg.est.diag_eps);

            const auto imp = trainer::token_importance(
                model.selector, data.ds, std::numeric_limits<int>::max());
            auto& slot = rep_importance[static_cast<std::size_t>(r)];
            for (const auto& [tok, score] : imp) slot[tok] = score;

            if (r == 0) first_model[0] = std::move(model);
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
    });

    std::vector<std::pair<double, double>> est_or, est_ipw, est_aipw;
    for (const auto& row : out.rows) {
        if (row.failed) {
            out.failures += 1;
            continue;
        }
        est_or.emplace_back(row.rep_or.tau_hat, row.rep_or.se);
        est_ipw.emplace_back(row.rep_ipw.tau_hat, row.rep_ipw.se);
        est_aipw.emplace_back(row.rep_aipw.tau_hat, row.rep_aipw.se);
        out.mean_ess_ratio += row.ess_ratio;
        out.mean_clip_frac += row.clip_frac;
    }
    const int ok = cfg.replications - out.failures;
    if (ok >= 2) {
        out.agg_or = estimators::replication_metrics(est_or, out.tau_true);
        out.agg_ipw = estimators::replication_metrics(est_ipw, out.tau_true);
        out.agg_aipw = estimators::replication_metrics(est_aipw, out.tau_true);
    } else if (ok == 1) {
        out.agg_or = {std::fabs(est_or[0].first - out.tau_true), 0.0, est_or[0].second,
                      0.0};
        out.agg_ipw = {std::fabs(est_ipw[0].first - out.tau_true), 0.0,
                       est_ipw[0].second, 0.0};
        out.agg_aipw = {std::fabs(est_aipw[0].first - out.tau_true), 0.0,
                        est_aipw[0].second, 0.0};
    }
    if (ok > 0) {
        out.mean_ess_ratio /= ok;
        out.mean_clip_frac /= ok;
    }

    // mean importance score per token across successful replications
    std::map<std::string, std::pair<double, int>> merged;
    for (const auto& rep : rep_importance)
        for (const auto& [tok, score] : rep) {
            merged[tok].first += score;
            merged[tok].second += 1;
        }
    for (const auto& [tok, sc] : merged)
        out.importance.emplace_back(tok, sc.first / sc.second);
    std::stable_sort(out.importance.begin(), out.importance.end(),
                     [](const auto& a, const auto& b) {
                         if (a.second != b.second) return a.second > b.second;
                         return a.first < b.first;
                     });
    if (static_cast<int>(out.importance.size()) > cfg.importance_top_k)
        out.importance.resize(static_cast<std::size_t>(cfg.importance_top_k));

    if (write_outputs) {
        const auto dir = resolve_out_dir(cfg);
        fs::create_directories(dir);
        detail::write_replications_csv(out.rows, dir / "replications.csv");
        const auto agg =
            detail::aggregate_json(out, cfg.replications, cfg.est.diag_eps);
        const auto errors = schema::validate_aggregate(agg);
        if (!errors.empty())
            throw std::runtime_error("aggregate.json failed schema validation: " +
                                     errors.front());
        std::ofstream aggf(dir / "aggregate.json");
        aggf << agg.dump(2) << '\n';
        detail::write_importance_csv(
            out.importance,
            dir / ("importance_top" + std::to_string(cfg.importance_top_k) + ".csv"));
        if (!out.rows.empty() && !out.rows[0].failed) {
            trainer::write_history_csv(first_model[0], dir / "history.csv");
            detail::save_checkpoint(first_model[0], dir / "checkpoint");
        }
    }
    return out;
}

// ---- commands ----

inline int cmd_generate(const ExperimentConfig& cfg) {
    if (!cfg.generator)
        throw std::invalid_argument("generate: config needs a generator block");
    const auto& gen = *cfg.generator;
    const auto data = dataset::generate_semisynthetic(
        gen.spec, gen.n, rng::derive(cfg.seed, rng::fnv1a64("docs")));
    const auto dir = resolve_out_dir(cfg) / "dataset";
    dataset::save_dataset(data.ds, dir);
    std::printf("generated dataset: n=%d d=%d l_max=%d tau_true=%.6f -> %s\n",
                data.ds.n, data.ds.d, data.ds.l_max, data.truth.tau_true,
                dir.string().c_str());
    return 0;
}

inline int cmd_run(const ExperimentConfig& cfg) {
    const auto out = run_experiment(cfg);
    std::printf("run: R=%d failures=%d tau_true=%.4f\n", cfg.replications,
                out.failures, out.tau_true);
    std::printf("  %-5s %12s %10s %10s %10s\n", "est", "mean|bias|", "sd", "avg_se",
                "coverage");
    for (const auto& [name, agg] :
         {std::pair{"or", out.agg_or}, {"ipw", out.agg_ipw}, {"aipw", out.agg_aipw}})
        std::printf("  %-5s %12.4f %10.4f %10.4f %9.1f%%\n", name, agg.mean_abs_bias,
                    agg.sd, agg.avg_se, 100.0 * agg.coverage);
    std::printf("  ess_ratio=%.4f clip_frac=%.2f%%\n", out.mean_ess_ratio,
                100.0 * out.mean_clip_frac);
    return out.failures * 5 > cfg.replications ? 1 : 0;
}

struct AblationArm {
    std::string name;
    RunOutput result;
};

inline std::vector<AblationArm> run_ablation(const ExperimentConfig& cfg,
                                             bool write_outputs = true) {
    std::vector<AblationArm> arms;
    const std::vector<std::pair<std::string, std::pair<bool, bool>>> plan{
        {"full", {false, false}},
        {"no_hsic", {true, false}},
        {"no_hsic_no_sparsity", {true, true}}};
    for (const auto& [name, flags] : plan) {
        ExperimentConfig arm = cfg;
        arm.disable_hsic = flags.first;
        arm.disable_sparsity = flags.second;
        arm.out_dir = (fs::path(cfg.out_dir) / name).string();
        arms.push_back({name, run_experiment(arm, write_outputs)});
    }
    if (write_outputs) {
        const auto dir = resolve_out_dir(cfg);
        fs::create_directories(dir);
        std::ofstream out(dir / "ablation.csv");
        out << "arm,estimator,mean_abs_bias,sd,avg_se,coverage,ess_ratio,clip_frac\n";
        for (const auto& arm : arms)
            for (const auto& [est, agg] : {std::pair{"or", arm.result.agg_or},
                                           {"ipw", arm.result.agg_ipw},
                                           {"aipw", arm.result.agg_aipw}})
                out << arm.name << ',' << est << ','
                    << util::fmt_double(agg.mean_abs_bias) << ','
                    << util::fmt_double(agg.sd) << ',' << util::fmt_double(agg.avg_se)
                    << ',' << util::fmt_double(agg.coverage) << ','
                    << util::fmt_double(arm.result.mean_ess_ratio) << ','
                    << util::fmt_double(arm.result.mean_clip_frac) << '\n';
    }
    return arms;
}

inline int cmd_ablation(const ExperimentConfig& cfg) {
    const auto arms = run_ablation(cfg);
    int worst = 0;
    for (const auto& arm : arms) {
        std::printf("%s: ipw mean|bias|=%.4f clip_frac=%.2f%%\n", arm.name.c_str(),
                    arm.result.agg_ipw.mean_abs_bias,
                    100.0 * arm.result.mean_clip_frac);
        if (arm.result.failures * 5 > cfg.replications) worst = 1;
    }
    return worst;
}

inline int cmd_lab(const ExperimentConfig& cfg) {
    if (!cfg.lab) throw std::invalid_argument("lab: config needs a lab block");
    LabRunConfig lc = *cfg.lab;
    lc.spec.seed = cfg.seed;
    const auto dir = resolve_out_dir(cfg);
    fs::create_directories(dir);

    const auto rows =
        lab::dimension_sweep(lc.dims, lc.spec, lc.eps, lc.repeats, lc.l2);
    lab::write_sweep_csv(rows, dir / "sweep.csv");

    // single-dimension detail at the configured proxy_dim
    lab::ProxySpec detail_spec = lc.spec;
    detail_spec.seed = rng::derive(cfg.seed, rng::fnv1a64("detail"));
    const auto data = lab::generate_latent_proxy(detail_spec);
    const auto g_hat = lab::fit_logistic_ps(data.x, data.t, lc.l2);
    lab::write_ps_hist_csv(g_hat, data.g_true, dir / "ps_hist.csv");
    const auto pca = lab::top2_pca(data.x);
    lab::write_pca_csv(pca, data.t, dir / "pca.csv");

    const auto summary = lab::summarize_sweep(rows);
    for (const auto& s : summary)
        std::printf("dim=%5d clip_hat=%.4f clip_true=%.4f ess_ratio=%.4f\n", s.dim,
                    s.mean_clip_hat, s.mean_clip_true, s.mean_ess_ratio);
    return 0;
}

inline int cmd_importance(const ExperimentConfig& cfg) {
    cfg.validate_sources();
    dataset::TokenSequenceDataset ds;
    if (cfg.generator) {
        const auto data = dataset::generate_semisynthetic(
            cfg.generator->spec, cfg.generator->n,
            rng::derive(cfg.seed, rng::fnv1a64("docs")));
        ds = data.ds;
    } else {
        ds = dataset::load_dataset(*cfg.dataset_path);
    }
    auto tc = detail::arm_config(cfg.train, cfg.disable_hsic, cfg.disable_sparsity);
    tc.seed = rng::derive(cfg.seed, 0);
    const auto model = trainer::train(ds, tc);
    const auto top = trainer::token_importance(model.selector, ds, cfg.importance_top_k);
    const auto dir = resolve_out_dir(cfg);
    fs::create_directories(dir);
    detail::write_importance_csv(
        top, dir / ("importance_top" + std::to_string(cfg.importance_top_k) + ".csv"));
    detail::save_checkpoint(model, dir / "checkpoint");
    for (const auto& [tok, score] : top)
        std::printf("%-24s %.4f\n", tok.c_str(), score);
    return 0;
}

}  // namespace catr::experiment
