#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hudd/artifacts.hpp"
#include "hudd/retrainer.hpp"
#include "hudd/steps.hpp"
#include "hudd/synthlab.hpp"

namespace hudd::experiment {

using json = nlohmann::ordered_json;

struct ExperimentConfig {
    synth::SceneSpec scene;
    double train_hard_fraction = 0.04;
    double eval_hard_fraction = 0.35;  // test and improvement sets
    std::size_t train_size = 2000;
    std::size_t test_size = 2000;
    std::size_t improvement_size = 3000;
    net::TrainConfig train{10, 0.05, 16, 0, true};
    net::TrainConfig retrain{3, 0.02, 16, 0, true};
    double sf = 0.3;
    std::vector<int> layers;  // empty: every hidden parameterized layer
    std::size_t k_cap = 50;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::size_t jobs = 1;
    std::string output_dir;  // empty: keep nothing on disk

    void validate() const {
        scene.validate();
        for (double h : {train_hard_fraction, eval_hard_fraction})
            if (!(h >= 0.0 && h <= 1.0)) throw InvalidArgument("hard fractions must lie in [0, 1]");
        if (train_size == 0 || test_size == 0 || improvement_size == 0) throw InvalidArgument("set sizes must be > 0");
        train.validate();
        retrain.validate();
        if (!(sf >= 0.0 && sf <= 1.0)) throw InvalidArgument("sf must lie in [0, 1]");
        if (k_cap < 2) throw InvalidArgument("k_cap must be >= 2");
        if (seeds.empty()) throw InvalidArgument("at least one seed is required");
    }
};

inline json to_json(const synth::Range& r) { return json::array({r.lo, r.hi}); }

inline synth::Range range_from_json(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        throw InvalidArgument(std::string(what) + " must be a [lo, hi] pair");
    return {j[0].get<double>(), j[1].get<double>()};
}

inline json to_json(const synth::SceneSpec& s) {
    return {{"size", s.size},
            {"classes", s.classes},
            {"angle", to_json(s.angle)},
            {"length", to_json(s.length)},
            {"occlusion", to_json(s.occlusion)},
            {"brightness", to_json(s.brightness)},
            {"offset", to_json(s.offset)},
            {"noise", s.noise},
            {"hard_fraction", s.hard_fraction},
            {"cause_weights", s.cause_weights},
            {"boundary_band", s.boundary_band},
            {"heavy_occlusion", to_json(s.heavy_occlusion)},
            {"low_brightness", to_json(s.low_brightness)}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline synth::SceneSpec scene_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("scene must be an object");
    synth::SceneSpec s;
    for (const auto& [key, v] : j.items()) {
        if (key == "size") s.size = v.get<std::size_t>();
        else if (key == "classes") s.classes = v.get<std::size_t>();
        else if (key == "angle") s.angle = range_from_json(v, "angle");
        else if (key == "length") s.length = range_from_json(v, "length");
        else if (key == "occlusion") s.occlusion = range_from_json(v, "occlusion");
        else if (key == "brightness") s.brightness = range_from_json(v, "brightness");
        else if (key == "offset") s.offset = range_from_json(v, "offset");
        else if (key == "noise") s.noise = v.get<double>();
        else if (key == "hard_fraction") s.hard_fraction = v.get<double>();
        else if (key == "cause_weights") s.cause_weights = v.get<std::array<double, 3>>();
        else if (key == "boundary_band") s.boundary_band = v.get<double>();
        else if (key == "heavy_occlusion") s.heavy_occlusion = range_from_json(v, "heavy_occlusion");
        else if (key == "low_brightness") s.low_brightness = range_from_json(v, "low_brightness");
        else throw InvalidArgument("unknown scene key '" + key + "'");
    }
    s.validate();
    return s;
}

inline json to_json(const net::TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"warm_start", c.warm_start}};
}

inline net::TrainConfig train_from_json(const json& j, net::TrainConfig c = {}) {
    if (!j.is_object()) throw InvalidArgument("training config must be an object");
    for (const auto& [key, v] : j.items()) {
        if (key == "epochs") c.epochs = v.get<std::size_t>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "warm_start") c.warm_start = v.get<bool>();
        else throw InvalidArgument("unknown training key '" + key + "'");
    }
    c.validate();
    return c;
}

inline json to_json(const ExperimentConfig& c) {
    return {{"scene", to_json(c.scene)},
            {"train_hard_fraction", c.train_hard_fraction},
            {"eval_hard_fraction", c.eval_hard_fraction},
            {"train_size", c.train_size},
            {"test_size", c.test_size},
            {"improvement_size", c.improvement_size},
            {"train", to_json(c.train)},
            {"retrain", to_json(c.retrain)},
            {"sf", c.sf},
            {"layers", c.layers},
            {"k_cap", c.k_cap},
            {"seeds", c.seeds},
            {"jobs", c.jobs},
            {"output_dir", c.output_dir}};
}

inline ExperimentConfig experiment_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("experiment config must be an object");
    ExperimentConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "scene") c.scene = scene_from_json(v);
            else if (key == "train_hard_fraction") c.train_hard_fraction = v.get<double>();
            else if (key == "eval_hard_fraction") c.eval_hard_fraction = v.get<double>();
            else if (key == "train_size") c.train_size = v.get<std::size_t>();
            else if (key == "test_size") c.test_size = v.get<std::size_t>();
            else if (key == "improvement_size") c.improvement_size = v.get<std::size_t>();
            else if (key == "train") c.train = train_from_json(v, c.train);
            else if (key == "retrain") c.retrain = train_from_json(v, c.retrain);
            else if (key == "sf") c.sf = v.get<double>();
            else if (key == "layers") c.layers = v.get<std::vector<int>>();
            else if (key == "k_cap") c.k_cap = v.get<std::size_t>();
            else if (key == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
            else if (key == "jobs") c.jobs = v.get<std::size_t>();
            else if (key == "output_dir") c.output_dir = v.get<std::string>();
            else throw InvalidArgument("unknown experiment key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

enum class Method { hudd = 0, b1 = 1, b2 = 2 };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::hudd: return "HUDD";
        case Method::b1: return "B1";
        case Method::b2: return "B2";
    }
    return "?";
}

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::size_t improvement_size = 0;   // IS
    std::size_t unsafe_size = 0;        // US: labels requested by HUDD
    std::size_t balanced_size = 0;      // BLUS
    std::size_t labels_b1 = 0;          // labels requested by B1
    std::size_t labels_b2 = 0;          // labels requested by B2
    std::size_t b1_misclassified = 0;
    bool b1_empty = false;
    double acc_original = 0.0;
    double acc_hudd = 0.0;
    double acc_b1 = 0.0;
    double acc_b2 = 0.0;
    std::size_t test_errors = 0;
    int layer = 0;
    std::size_t clusters = 0;
    synth::RrTable rr;
    std::vector<std::vector<std::size_t>> cluster_causes;  // per cluster: count per synth::Cause
    double seconds = 0.0;

    double delta(Method m) const {
        switch (m) {
            case Method::hudd: return acc_hudd - acc_original;
            case Method::b1: return acc_b1 - acc_original;
            case Method::b2: return acc_b2 - acc_original;
        }
        return 0.0;
    }
    bool budget_parity() const { return unsafe_size == labels_b1 && unsafe_size == labels_b2; }
};

struct EvaluationReport {
    std::vector<SeedOutcome> seeds;
    std::vector<double> thresholds = synth::default_thresholds();
    std::vector<double> profile;        // percentage of clusters (all seeds) with max RR >= threshold
    double pct_rr_positive = 0.0;       // percentage of clusters with some RR > 0
    double mean_delta_hudd = 0.0;
    double mean_delta_b1 = 0.0;
    double mean_delta_b2 = 0.0;
    double a12_b1 = 0.5;                // A12(HUDD deltas, B1 deltas)
    double a12_b2 = 0.5;
    bool budget_parity = true;
};

inline EvaluationReport summarize(std::vector<SeedOutcome> outcomes) {
    EvaluationReport r;
    r.seeds = std::move(outcomes);
    std::vector<std::vector<double>> rr_rows;
    std::vector<double> dh, d1, d2;
    for (const auto& s : r.seeds) {
        for (const auto& row : s.rr.rr) rr_rows.push_back(row);
        dh.push_back(s.delta(Method::hudd));
        d1.push_back(s.delta(Method::b1));
        d2.push_back(s.delta(Method::b2));
        r.budget_parity = r.budget_parity && s.budget_parity();
    }
    r.profile = synth::threshold_profile(rr_rows, r.thresholds);
    std::size_t positive = 0;
    for (const auto& row : rr_rows)
        if (synth::max_rr(row) > 0.0) ++positive;
    r.pct_rr_positive = rr_rows.empty() ? 0.0 : 100.0 * static_cast<double>(positive) / static_cast<double>(rr_rows.size());
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    r.mean_delta_hudd = mean(dh);
    r.mean_delta_b1 = mean(d1);
    r.mean_delta_b2 = mean(d2);
    if (!dh.empty()) {
        r.a12_b1 = synth::vargha_delaney(dh, d1);
        r.a12_b2 = synth::vargha_delaney(dh, d2);
    }
    return r;
}

inline double pct_at(const EvaluationReport& r, double threshold) {
    for (std::size_t i = 0; i < r.thresholds.size(); ++i)
        if (std::abs(r.thresholds[i] - threshold) < 1e-12) return r.profile[i];
    throw InvalidArgument("threshold not in profile");
}

inline json to_json(const EvaluationReport& r) {
    json seeds = json::array();
    for (const auto& s : r.seeds) {
        json rr = json::array();
        for (const auto& row : s.rr.rr) {
            json jr = json::object();
            for (std::size_t p = 0; p < s.rr.params.size(); ++p)
                jr[s.rr.params[p]] = std::isnan(row[p]) ? json(nullptr) : json(row[p]);
            rr.push_back(jr);
        }
        seeds.push_back({{"seed", s.seed},
                         {"IS", s.improvement_size},
                         {"US", s.unsafe_size},
                         {"BLUS", s.balanced_size},
                         {"labels", {{"HUDD", s.unsafe_size}, {"B1", s.labels_b1}, {"B2", s.labels_b2}}},
                         {"b1_misclassified", s.b1_misclassified},
                         {"b1_empty_warning", s.b1_empty},
                         {"accuracy",
                          {{"original", s.acc_original}, {"HUDD", s.acc_hudd}, {"B1", s.acc_b1}, {"B2", s.acc_b2}}},
                         {"delta",
                          {{"HUDD", s.delta(Method::hudd)}, {"B1", s.delta(Method::b1)}, {"B2", s.delta(Method::b2)}}},
                         {"test_errors", s.test_errors},
                         {"layer", s.layer},
                         {"clusters", s.clusters},
                         {"cluster_causes", s.cluster_causes},
                         {"rr", rr},
                         {"seconds", s.seconds}});
    }
    return {{"seeds", seeds},
            {"thresholds", r.thresholds},
            {"rr_profile_percent", r.profile},
            {"rr_positive_percent", r.pct_rr_positive},
            {"mean_delta", {{"HUDD", r.mean_delta_hudd}, {"B1", r.mean_delta_b1}, {"B2", r.mean_delta_b2}}},
            {"a12", {{"HUDD_vs_B1", r.a12_b1}, {"HUDD_vs_B2", r.a12_b2}}},
            {"budget_parity", r.budget_parity}};
}

/// One row per seed with the accuracy-table columns, then a summary row
/// whose A12 columns hold the effect sizes over all seeds.
inline csv::Table accuracy_table(const EvaluationReport& r) {
    csv::Table t{{"seed", "IS", "US", "BLUS", "acc_original", "acc_hudd", "acc_b1", "acc_b2", "delta_hudd",
                  "delta_b1", "delta_b2", "a12_hudd_b1", "a12_hudd_b2"},
                 {}};
    for (const auto& s : r.seeds) {
        t.rows.push_back({std::to_string(s.seed), std::to_string(s.improvement_size), std::to_string(s.unsafe_size),
                          std::to_string(s.balanced_size), csv::fmt(s.acc_original), csv::fmt(s.acc_hudd),
                          csv::fmt(s.acc_b1), csv::fmt(s.acc_b2), csv::fmt(s.delta(Method::hudd)),
                          csv::fmt(s.delta(Method::b1)), csv::fmt(s.delta(Method::b2)), "", ""});
    }
    t.rows.push_back({"mean", "", "", "", "", "", "", "", csv::fmt(r.mean_delta_hudd), csv::fmt(r.mean_delta_b1),
                      csv::fmt(r.mean_delta_b2), csv::fmt(r.a12_b1), csv::fmt(r.a12_b2)});
    return t;
}

inline csv::Table rr_table(const EvaluationReport& r) {
    csv::Table t;
    t.header = {"seed", "cluster"};
    if (!r.seeds.empty()) t.header.insert(t.header.end(), r.seeds.front().rr.params.begin(), r.seeds.front().rr.params.end());
    for (const auto& s : r.seeds) {
        for (std::size_t c = 0; c < s.rr.rr.size(); ++c) {
            std::vector<std::string> row{std::to_string(s.seed), std::to_string(c)};
            for (double v : s.rr.rr[c]) row.push_back(std::isnan(v) ? "NA" : csv::fmt(v));
            t.rows.push_back(std::move(row));
        }
    }
    return t;
}

inline void write_report(const EvaluationReport& r, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path d(dir);
    artifacts::write_json((d / "report.json").string(), to_json(r));
    csv::write((d / "accuracy.csv").string(), accuracy_table(r));
    csv::write((d / "rr.csv").string(), rr_table(r));
    csv::Table prof{{"threshold", "percent_clusters"}, {}};
    for (std::size_t i = 0; i < r.thresholds.size(); ++i)
        prof.rows.push_back({csv::fmt(r.thresholds[i]), csv::fmt(r.profile[i])});
    csv::write((d / "rr_profile.csv").string(), prof);
}

// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline net::LabeledDataset gather(const net::LabeledDataset& data, const std::vector<std::size_t>& indices) {
    net::LabeledDataset out;
    for (auto i : indices) out.add(data.ids[i], data.images[i], data.labels[i]);
    return out;
}

/// Original training set followed by `extra` (indices into `pool`, repeats allowed).
inline net::LabeledDataset augmented(const net::LabeledDataset& train, const net::LabeledDataset& pool,
                                     const std::vector<std::size_t>& extra) {
    net::LabeledDataset out = train;
    for (auto i : extra) out.add(pool.ids[i], pool.images[i], pool.labels[i]);
    return out;
}

}  // namespace detail

using Progress = std::function<void(const std::string&)>;

/// HUDD and both baselines for one seed. Every method retrains from the same
/// base model with the same retraining seed, so accuracy deltas differ only
/// through the retraining data.
inline SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed, const Progress& progress = {}) {
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    auto log = [&](const std::string& m) {
        if (progress) progress("seed " + std::to_string(seed) + ": " + m);
    };
    SeedOutcome out;
    out.seed = seed;
    const std::string dir = config.output_dir.empty() ? "" : (fs::path(config.output_dir) / ("seed_" + std::to_string(seed))).string();
    if (!dir.empty()) fs::create_directories(dir);
    auto path = [&](const char* name) { return (fs::path(dir) / name).string(); };

    auto train_spec = config.scene, eval_spec = config.scene;
    train_spec.hard_fraction = config.train_hard_fraction;
    eval_spec.hard_fraction = config.eval_hard_fraction;
    const auto classes = synth::class_names(config.scene.classes);

    const auto [train, test, test_set, improvement, improvement_set] = detail::stage("generate", [&] {
        auto tr = synth::generate(train_spec, config.train_size, mix_seed(seed, 0x747261696e), "train");
        auto te = synth::generate(eval_spec, config.test_size, mix_seed(seed, 0x74657374), "test");
        auto im = synth::generate(eval_spec, config.improvement_size, mix_seed(seed, 0x696d70), "improve");
        return std::make_tuple(tr.dataset(), te.dataset(), std::move(te), im.dataset(), std::move(im));
    });
    out.improvement_size = improvement.size();

    log("training base model");
    const auto base = detail::stage("train", [&] {
        auto cfg = config.train;
        cfg.seed = seed;
        cfg.warm_start = false;
        return net::train(net::make_default_classifier(classes, {1, config.scene.size, config.scene.size}, seed), train, cfg);
    });
    if (!dir.empty()) net::save(base, path("base_model.bin"));

    const auto eval = detail::stage("eval", [&] { return net::evaluate(base, test); });
    out.acc_original = eval.accuracy;
    const auto errors = steps::error_indices(eval);
    out.test_errors = errors.size();

    log("clustering " + std::to_string(errors.size()) + " error-inducing images");
    cluster::SelectionOptions opts{config.k_cap, 1};
    const auto cs = detail::stage("cluster", [&] { return steps::cluster_errors(base, test, errors, config.layers, opts); });
    const auto& rc = cs.clusters;
    out.layer = rc.layer;
    out.clusters = rc.cluster_count();
    out.rr = detail::stage("rr", [&] { return synth::variance_reduction(rc.members, test_set.manifest); });
    {
        const auto index = test_set.manifest.index();
        for (const auto& members : rc.members) {
            std::vector<std::size_t> causes(4, 0);
            for (const auto& id : members) ++causes[static_cast<std::size_t>(test_set.params[index.at(id)].cause)];
            out.cluster_causes.push_back(causes);
        }
    }
    if (!dir.empty()) {
        artifacts::write_clusters_csv(path("clusters.csv"), rc);
        artifacts::write_json(path("clusters.json"), artifacts::clusters_summary(rc));
    }

    log("selecting unsafe images");
    const auto sel = detail::stage("select", [&] {
        select::SelectionConfig sc{config.sf, test.size(), eval.accuracy};
        return steps::select_unsafe(base, cs.raw.layer(rc.layer), rc.result.assignment.labels, rc.cluster_count(),
                                    improvement, sc, 1);
    });
    out.unsafe_size = sel.unsafe.total();
    if (!dir.empty()) {
        artifacts::write_unsafe_csv(path("unsafe.csv"), sel.unsafe);
        artifacts::write_json(path("quotas.json"), artifacts::quotas_summary(sel.quotas, sel.unsafe));
    }

    auto retrain_cfg = config.retrain;
    retrain_cfg.seed = mix_seed(seed, 0x7265);
    retrain_cfg.warm_start = true;

    log("retraining (HUDD)");
    const auto balanced = detail::stage("retrain", [&] { return retrain::balance(sel.unsafe, seed); });
    out.balanced_size = balanced.total();
    const auto hudd_model = detail::stage("retrain", [&] {
        return retrain::retrain(base, train, balanced, improvement, retrain_cfg);
    });
    out.acc_hudd = net::evaluate(hudd_model, test).accuracy;

    // Equal label budget: both baselines label a uniform subset of |US| images.
    log("retraining (baselines)");
    const auto b2 = detail::stage("baseline", [&] {
        return synth::baseline_b2(improvement.size(), out.unsafe_size, out.balanced_size, seed);
    });
    const auto b1 = detail::stage("baseline", [&] {
        return synth::baseline_b1(base, improvement, b2.selected, out.balanced_size, seed);
    });
    out.labels_b2 = b2.selected.size();
    out.labels_b1 = b2.selected.size();
    out.b1_misclassified = b1.selected.size();
    out.b1_empty = b1.empty_warning;
    const auto b1_model = detail::stage("retrain", [&] {
        return net::train(base, detail::augmented(train, improvement, b1.resampled), retrain_cfg);
    });
    const auto b2_model = detail::stage("retrain", [&] {
        return net::train(base, detail::augmented(train, improvement, b2.resampled), retrain_cfg);
    });
    out.acc_b1 = net::evaluate(b1_model, test).accuracy;
    out.acc_b2 = net::evaluate(b2_model, test).accuracy;
    if (!dir.empty()) {
        net::save(hudd_model, path("hudd_model.bin"));
        net::save(b1_model, path("b1_model.bin"));
        net::save(b2_model, path("b2_model.bin"));
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log("done in " + std::to_string(out.seconds) + " s");
    return out;
}

/// Seeds run as independent jobs (up to config.jobs at a time); outcomes are
/// merged in seed-list order.
inline EvaluationReport run_experiment(const ExperimentConfig& config, const Progress& progress = {}) {
    config.validate();
    std::vector<SeedOutcome> outcomes(config.seeds.size());
    std::mutex log_mutex;
    Progress locked;
    if (progress) {
        locked = [&](const std::string& m) {
            std::lock_guard lock(log_mutex);
            progress(m);
        };
    }
    parallel_for(config.seeds.size(), config.jobs,
                 [&](std::size_t i) { outcomes[i] = run_seed(config, config.seeds[i], locked); });
    auto report = summarize(std::move(outcomes));
    if (!config.output_dir.empty()) {
        write_report(report, config.output_dir);
        artifacts::write_json((std::filesystem::path(config.output_dir) / "config.json").string(), to_json(config));
    }
    return report;
}

}  // namespace hudd::experiment
