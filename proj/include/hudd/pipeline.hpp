#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "hudd/config.hpp"

namespace hudd::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using config::RunConfig;

/// Upstream artifact absent; names the subcommand that produces it.
class DependencyError : public Error {
public:
    DependencyError(const std::string& path, const std::string& producer)
        : Error("missing " + path + "; run `hudd " + producer + "` first"), producer_(producer) {}

    const std::string& producer() const noexcept { return producer_; }

private:
    std::string producer_;
};

// ---------------------------------------------------------------------------
// Hashing

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 unavailable");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("SHA-256 update failed");
    }
    void update(std::string_view s) { update(s.data(), s.size()); }

    void update_file(const fs::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw NotFoundError("cannot open " + path.string());
        std::vector<char> buf(1 << 16);
        while (in) {
            in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            update(buf.data(), static_cast<std::size_t>(in.gcount()));
        }
    }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("SHA-256 final failed");
        static const char* digits = "0123456789abcdef";
        std::string out;
        for (unsigned i = 0; i < len; ++i) {
            out.push_back(digits[md[i] >> 4]);
            out.push_back(digits[md[i] & 15]);
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

inline std::string sha256_file(const fs::path& path) {
    Sha256 h;
    h.update_file(path);
    return h.hex();
}

/// A dataset directory hashes as its manifest followed by every listed
/// image in manifest order.
inline std::string sha256_dataset(const fs::path& dir) {
    Sha256 h;
    const auto manifest = dir / "manifest.csv";
    h.update_file(manifest);
    for (const auto& row : synth::read_manifest(manifest.string()).rows) {
        h.update(row.path);
        h.update_file(dir / row.path);
    }
    return h.hex();
}

// ---------------------------------------------------------------------------
// Stages

struct Input {
    std::string path;
    std::string producer;  // subcommand that writes it
    bool dataset = false;
};

struct StageResult {
    std::string stage;
    bool skipped = false;
    double seconds = 0.0;
    std::vector<std::string> outputs;
};

using Logger = std::function<void(const std::string&)>;

class Pipeline {
public:
    explicit Pipeline(RunConfig config, Logger log = {}) : cfg_(std::move(config)), log_(std::move(log)) {}

    const RunConfig& config() const { return cfg_; }
    fs::path run_dir() const { return cfg_.run_dir(); }
    fs::path dir(const char* kind) const { return run_dir() / kind; }

    fs::path model_path() const { return dir("model") / "model.bin"; }
    fs::path eval_path() const { return dir("model") / "eval.json"; }
    fs::path predictions_path() const { return dir("model") / "predictions.csv"; }
    fs::path heatmap_path(int layer) const { return dir("heatmaps") / ("layer_" + std::to_string(layer) + ".hmp"); }
    fs::path improvement_heatmap_path(int layer) const {
        return dir("heatmaps") / ("improvement_layer_" + std::to_string(layer) + ".hmp");
    }
    fs::path clusters_path() const { return dir("clusters") / "clusters.csv"; }
    fs::path clusters_summary_path() const { return dir("clusters") / "summary.json"; }
    fs::path unsafe_path() const { return dir("unsafe") / "unsafe.csv"; }
    fs::path quotas_path() const { return dir("unsafe") / "quotas.json"; }
    fs::path retrained_model_path() const { return dir("retrained") / "model.bin"; }
    fs::path retrained_eval_path() const { return dir("retrained") / "eval.json"; }
    fs::path balanced_path() const { return dir("retrained") / "balanced.csv"; }

    void set_force(bool force) { force_ = force; }

    // -- generate ----------------------------------------------------------
    StageResult generate() {
        const auto& g = cfg_.generate;
        json params = {{"scene", experiment::to_json(g.scene)},
                       {"train_size", g.train_size},
                       {"test_size", g.test_size},
                       {"improvement_size", g.improvement_size},
                       {"train_hard_fraction", g.train_hard_fraction},
                       {"eval_hard_fraction", g.eval_hard_fraction},
                       {"seed", g.seed},
                       {"paths", {cfg_.data.train, cfg_.data.test, cfg_.data.improvement}}};
        const std::vector<std::string> outputs{(fs::path(cfg_.data.train) / "manifest.csv").string(),
                                               (fs::path(cfg_.data.test) / "manifest.csv").string(),
                                               (fs::path(cfg_.data.improvement) / "manifest.csv").string()};
        return run_stage("generate", run_dir() / "generate.stage.json", {}, params, outputs, [&] {
            auto tr = g.scene, ev = g.scene;
            tr.hard_fraction = g.train_hard_fraction;
            ev.hard_fraction = g.eval_hard_fraction;
            synth::write_dataset(synth::generate(tr, g.train_size, mix_seed(g.seed, 0x747261696e), "train"), cfg_.data.train);
            synth::write_dataset(synth::generate(ev, g.test_size, mix_seed(g.seed, 0x74657374), "test"), cfg_.data.test);
            synth::write_dataset(synth::generate(ev, g.improvement_size, mix_seed(g.seed, 0x696d70), "improve"),
                                 cfg_.data.improvement);
        });
    }

    // -- train -------------------------------------------------------------
    StageResult train() {
        json params = {{"train", experiment::to_json(cfg_.train)}, {"classes", cfg_.classes}, {"seed", cfg_.seed}};
        return run_stage("train", dir("model") / "train.stage.json", {dataset_input(cfg_.data.train)}, params,
                         {model_path().string()}, [&] {
                             const auto data = synth::load_dataset(cfg_.data.train);
                             auto tc = cfg_.train;
                             tc.seed = cfg_.seed;
                             tc.warm_start = false;
                             const auto& shape = data.data.images.front().shape();
                             auto model = net::make_default_classifier(synth::class_names(cfg_.classes), shape, cfg_.seed);
                             net::save(net::train(model, data.data, tc), model_path().string());
                         });
    }

    // -- eval --------------------------------------------------------------
    StageResult eval() {
        return run_stage("eval", dir("model") / "eval.stage.json",
                         {{model_path().string(), "train"}, dataset_input(cfg_.data.test)}, json::object(),
                         {eval_path().string(), predictions_path().string()}, [&] {
                             const auto model = net::load(model_path().string());
                             const auto test = synth::load_dataset(cfg_.data.test);
                             const auto report = net::evaluate(model, test.data);
                             artifacts::write_predictions_csv(predictions_path().string(), test.data, report);
                             auto j = artifacts::accuracy_summary(report);
                             artifacts::write_json(eval_path().string(), j);
                             info("test accuracy " + csv::fmt(report.accuracy));
                         });
    }

    // -- heatmaps ----------------------------------------------------------
    StageResult heatmaps() {
        const auto layers = experiment::detail::stage("heatmaps", [&] { return candidate_layers(); });
        std::vector<std::string> outputs;
        for (int l : layers) outputs.push_back(heatmap_path(l).string());
        return run_stage(
            "heatmaps", dir("heatmaps") / "stage.json",
            {{model_path().string(), "train"}, dataset_input(cfg_.data.test), {predictions_path().string(), "eval"}},
            {{"layers", layers}}, outputs, [&] {
                const auto model = net::load(model_path().string());
                const auto test = synth::load_dataset(cfg_.data.test);
                const auto errors = error_indices_from_predictions(test.data);
                if (errors.empty()) throw InvalidArgument("the model misclassifies no test image; nothing to explain");
                const auto store = lrp::heatmaps_for_set(model, steps::image_refs(test.data, errors),
                                                         steps::seed_mode(model), layers, cfg_.jobs);
                for (int l : layers) lrp::save_heatmaps(store.layer(l), heatmap_path(l).string());
                info(std::to_string(errors.size()) + " error-inducing images, " + std::to_string(layers.size()) +
                     " layers");
            });
    }

    // -- cluster -----------------------------------------------------------
    StageResult cluster() {
        const auto layers = experiment::detail::stage("cluster", [&] { return candidate_layers(); });
        std::vector<Input> inputs;
        for (int l : layers) inputs.push_back({heatmap_path(l).string(), "heatmaps"});
        std::vector<std::string> outputs{clusters_path().string(), clusters_summary_path().string()};
        return run_stage("cluster", dir("clusters") / "stage.json", inputs, {{"layers", layers}, {"k_cap", cfg_.k_cap}},
                         outputs, [&] {
                             std::vector<lrp::HeatmapSet> normalized;
                             for (int l : layers) {
                                 auto set = space::normalize_layer(lrp::load_heatmaps(heatmap_path(l).string())).first;
                                 const auto dm = space::distance_matrix(set, true, cfg_.jobs);
                                 space::save(dm, (dir("distances") / ("layer_" + std::to_string(l) + ".dsm")).string());
                                 normalized.push_back(std::move(set));
                             }
                             const auto rc = cluster::select_root_cause_clusters(normalized, {cfg_.k_cap, cfg_.jobs});
                             for (const auto& c : rc.candidates)
                                 artifacts::write_curve_csv(
                                     (dir("clusters") / ("wicd_layer_" + std::to_string(c.layer) + ".csv")).string(), c.curve);
                             artifacts::write_clusters_csv(clusters_path().string(), rc);
                             artifacts::write_json(clusters_summary_path().string(), artifacts::clusters_summary(rc));
                             info("layer " + std::to_string(rc.layer) + ", " + std::to_string(rc.cluster_count()) +
                                  " root-cause clusters");
                         });
    }

    // -- select ------------------------------------------------------------
    StageResult select() {
        const int layer = experiment::detail::stage("select", [&] {
            require({clusters_summary_path().string(), "cluster"});
            return artifacts::read_json(clusters_summary_path().string()).at("selected_layer").get<int>();
        });
        return run_stage(
            "select", dir("unsafe") / "stage.json",
            {{clusters_path().string(), "cluster"},
             {clusters_summary_path().string(), "cluster"},
             {heatmap_path(layer).string(), "heatmaps"},
             {model_path().string(), "train"},
             {eval_path().string(), "eval"},
             dataset_input(cfg_.data.improvement)},
            {{"sf", cfg_.sf}}, {unsafe_path().string(), quotas_path().string()}, [&] {
                const auto ct = artifacts::read_clusters_csv(clusters_path().string());
                const auto error_raw = lrp::load_heatmaps(heatmap_path(layer).string());
                if (error_raw.ids != ct.ids) throw FormatError("cluster file and heatmaps list different images", 0);
                const auto model = net::load(model_path().string());
                const auto ev = artifacts::read_json(eval_path().string());
                const auto improvement = synth::load_dataset(cfg_.data.improvement);
                select::SelectionConfig sc{cfg_.sf, ev.at("total").get<std::size_t>(), ev.at("accuracy").get<double>()};
                std::vector<std::size_t> sizes(ct.members.size());
                for (std::size_t c = 0; c < sizes.size(); ++c) sizes[c] = ct.members[c].size();
                steps::SelectStage sel;
                sel.quotas = select::cluster_quotas(sc, sizes);
                const auto store = lrp::heatmaps_for_set(model, steps::image_refs(improvement.data, steps::all_indices(improvement.data)),
                                                         steps::seed_mode(model), {layer}, cfg_.jobs);
                lrp::save_heatmaps(store.layer(layer), improvement_heatmap_path(layer).string());
                const auto dm = space::improvement_distance_matrix(store.layer(layer), error_raw, cfg_.jobs);
                space::save(dm, (dir("distances") / "improvement.drm").string());
                sel.ranks = select::rank_clusters(dm, ct.labels, ct.members.size());
                sel.unsafe = select::assign_unsafe(sel.ranks, sel.quotas.counts);
                artifacts::write_unsafe_csv(unsafe_path().string(), sel.unsafe);
                artifacts::write_json(quotas_path().string(), artifacts::quotas_summary(sel.quotas, sel.unsafe));
                info(std::to_string(sel.unsafe.total()) + " unsafe images selected");
            });
    }

    // -- retrain -----------------------------------------------------------
    StageResult retrain() {
        std::vector<Input> inputs{{unsafe_path().string(), "select"},
                                  {clusters_summary_path().string(), "cluster"},
                                  {model_path().string(), "train"},
                                  dataset_input(cfg_.data.train),
                                  dataset_input(cfg_.data.improvement),
                                  dataset_input(cfg_.data.test)};
        if (!cfg_.data.labels.empty()) inputs.push_back({cfg_.data.labels, "(labels file)"});
        json params = {{"retrain", experiment::to_json(cfg_.retrain)}, {"seed", cfg_.seed}};
        return run_stage(
            "retrain", dir("retrained") / "stage.json", inputs, params,
            {retrained_model_path().string(), balanced_path().string(), retrained_eval_path().string()}, [&] {
                const auto k = artifacts::read_json(clusters_summary_path().string()).at("cluster_count").get<std::size_t>();
                const auto rows = artifacts::read_unsafe_csv(unsafe_path().string());
                const auto balanced = retrain::balance(artifacts::group_unsafe(rows, k), cfg_.seed);
                csv::Table bt{{"image_id", "cluster_id"}, {}};
                for (std::size_t c = 0; c < balanced.clusters.size(); ++c)
                    for (const auto& id : balanced.clusters[c]) bt.rows.push_back({id, std::to_string(c)});
                csv::write(balanced_path().string(), bt);

                const auto train = synth::load_dataset(cfg_.data.train);
                const auto labeled = labeled_unsafe(rows);
                const auto model = net::load(model_path().string());
                auto rc = cfg_.retrain;
                rc.seed = mix_seed(cfg_.seed, 0x7265);
                const auto retrained = retrain::retrain(model, train.data, balanced, labeled, rc);
                net::save(retrained, retrained_model_path().string());
                const auto test = synth::load_dataset(cfg_.data.test);
                const auto before = net::evaluate(model, test.data).accuracy;
                const auto after = net::evaluate(retrained, test.data);
                auto j = artifacts::accuracy_summary(after);
                j["accuracy_before"] = before;
                j["balanced_size"] = balanced.total();
                j["skipped_clusters"] = balanced.skipped;
                artifacts::write_json(retrained_eval_path().string(), j);
                info("test accuracy " + csv::fmt(before) + " -> " + csv::fmt(after.accuracy));
            });
    }

    // -- report ------------------------------------------------------------
    StageResult report(std::vector<std::string>* missing = nullptr) {
        json params = {{"tiles", cfg_.report.tiles},
                       {"columns", cfg_.report.columns},
                       {"scale", cfg_.report.scale},
                       {"params", cfg_.report.params},
                       {"gif", cfg_.report.gif},
                       {"images_per_minute", cfg_.report.images_per_minute}};
        const auto ct = experiment::detail::stage("report", [&] {
            require({clusters_path().string(), "cluster"});
            return artifacts::read_clusters_csv(clusters_path().string());
        });
        std::vector<std::string> outputs;
        for (std::size_t c = 0; c < ct.members.size(); ++c)
            outputs.push_back((dir("reports") / ("cluster_" + std::to_string(c) + ".png")).string());
        // The test set may be incomplete on disk; hash only its manifest.
        return run_stage("report", dir("reports") / "stage.json",
                         {{clusters_path().string(), "cluster"},
                          {(fs::path(cfg_.data.test) / "manifest.csv").string(), "generate"}},
                         params, outputs, [&] {
                             const auto manifest = synth::read_manifest((fs::path(cfg_.data.test) / "manifest.csv").string());
                             const auto r = report::write_cluster_reports(ct.members, manifest, cfg_.data.test,
                                                                          dir("reports").string(), cfg_.report);
                             for (const auto& id : r.missing) warn("image missing for " + id);
                             if (missing) *missing = r.missing;
                             info(std::to_string(r.sheets.size()) + " contact sheets");
                         });
    }

    // -- experiment --------------------------------------------------------
    StageResult run_experiment(experiment::EvaluationReport* out = nullptr) {
        const auto& ec = cfg_.experiment;
        const auto report_json = (fs::path(ec.output_dir) / "report.json").string();
        auto params = experiment::to_json(ec);
        params.erase("jobs");
        return run_stage("experiment", fs::path(ec.output_dir) / "stage.json", {}, params, {report_json}, [&] {
            const auto r = experiment::run_experiment(ec, [&](const std::string& m) { info(m); });
            if (out) *out = r;
            info("mean delta HUDD " + csv::fmt(r.mean_delta_hudd) + ", B1 " + csv::fmt(r.mean_delta_b1) + ", B2 " +
                 csv::fmt(r.mean_delta_b2) + "; A12 vs B2 " + csv::fmt(r.a12_b2));
        });
    }

    /// train, eval, heatmaps, cluster, select, retrain, report in order.
    std::vector<StageResult> run_all() {
        std::vector<StageResult> out;
        out.push_back(train());
        out.push_back(eval());
        out.push_back(heatmaps());
        out.push_back(cluster());
        out.push_back(select());
        out.push_back(retrain());
        out.push_back(report());
        return out;
    }

    std::vector<int> candidate_layers() const {
        if (!cfg_.layers.empty()) return cfg_.layers;
        require({model_path().string(), "train"});
        return steps::default_candidate_layers(net::load(model_path().string()));
    }

private:
    static Input dataset_input(const std::string& dir) { return {dir, "generate", true}; }

    void info(const std::string& m) const {
        if (log_) log_(m);
    }
    void warn(const std::string& m) const {
        if (log_) log_("warning: " + m);
    }

    static void require(const Input& in) {
        const fs::path p = in.dataset ? fs::path(in.path) / "manifest.csv" : fs::path(in.path);
        if (!fs::exists(p)) throw DependencyError(p.string(), in.producer);
    }

    std::vector<std::size_t> error_indices_from_predictions(const net::LabeledDataset& test) const {
        const auto t = csv::read(predictions_path().string());
        const auto id_col = t.column("image_id"), ok_col = t.column("correct");
        if (t.rows.size() != test.size()) throw FormatError("predictions do not match the test set", 0);
        std::vector<std::size_t> errors;
        for (std::size_t i = 0; i < t.rows.size(); ++i) {
            if (t.rows[i][id_col] != test.ids[i]) throw FormatError("predictions do not match the test set", i + 2);
            if (t.rows[i][ok_col] == "0") errors.push_back(i);
        }
        return errors;
    }

    /// Unsafe images with their labels: from the labels CSV when configured,
    /// otherwise from the improvement manifest.
    net::LabeledDataset labeled_unsafe(const std::vector<artifacts::UnsafeRow>& rows) const {
        const auto improvement = synth::load_dataset(cfg_.data.improvement);
        std::map<std::string, std::size_t> label_of;
        if (!cfg_.data.labels.empty()) {
            const auto t = csv::read(cfg_.data.labels);
            const auto id_col = t.column("image_id"), l_col = t.column("label");
            std::size_t line = 1;
            for (const auto& r : t.rows) label_of[r[id_col]] = csv::parse_size(r[l_col], ++line);
        }
        std::set<std::string> wanted;
        for (const auto& r : rows) wanted.insert(r.id);
        net::LabeledDataset out;
        for (std::size_t i = 0; i < improvement.data.size(); ++i) {
            const auto& id = improvement.data.ids[i];
            if (!wanted.contains(id)) continue;
            std::size_t label = improvement.data.labels[i];
            if (!cfg_.data.labels.empty()) {
                auto it = label_of.find(id);
                if (it == label_of.end()) throw NotFoundError("labels file has no entry for '" + id + "'");
                label = it->second;
            }
            out.add(id, improvement.data.images[i], label);
        }
        return out;
    }

    template <typename Body>
    StageResult run_stage(const std::string& name, const fs::path& manifest_path, const std::vector<Input>& inputs,
                          const json& params, const std::vector<std::string>& outputs, Body&& body) {
        StageResult result{name, false, 0.0, outputs};
        json hashes = json::object();
        try {
            for (const auto& in : inputs) {
                require(in);
                hashes[in.path] = in.dataset ? sha256_dataset(in.path) : sha256_file(in.path);
            }
        } catch (const DependencyError& e) {
            throw StageError(name, e.what());
        }
        if (!force_ && fs::exists(manifest_path)) {
            bool fresh = true;
            try {
                const auto old = artifacts::read_json(manifest_path.string());
                fresh = old.at("inputs") == hashes && old.at("params") == params;
            } catch (const std::exception&) {
                fresh = false;
            }
            for (const auto& o : outputs) fresh = fresh && fs::exists(o);
            if (fresh) {
                info(name + ": up to date, skipped");
                result.skipped = true;
                return result;
            }
        }
        fs::create_directories(manifest_path.parent_path());
        for (const char* kind : {"model", "heatmaps", "distances", "clusters", "unsafe", "retrained", "reports"})
            fs::create_directories(dir(kind));
        info(name + ": running");
        const auto t0 = std::chrono::steady_clock::now();
        try {
            body();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
        result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        artifacts::write_json(manifest_path.string(), {{"stage", name},
                                                       {"inputs", hashes},
                                                       {"params", params},
                                                       {"outputs", outputs},
                                                       {"duration_seconds", result.seconds}});
        return result;
    }

    RunConfig cfg_;
    Logger log_;
    bool force_ = false;
};

}  // namespace hudd::pipeline
