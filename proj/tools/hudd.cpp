#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hudd/pipeline.hpp"

namespace {

using hudd::pipeline::Pipeline;
using hudd::pipeline::StageResult;

void print(const StageResult& r) {
    std::cout << r.stage << (r.skipped ? " (skipped, inputs unchanged)" : "") << '\n';
    for (const auto& o : r.outputs) std::cout << "  " << o << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heatmap-based unsupervised debugging of DNNs: explain, cluster, select and retrain."};
    app.require_subcommand(1);

    std::string config_path = "hudd.json";
    std::size_t jobs = 0;
    bool force = false;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "Run configuration (JSON)")->capture_default_str();
    app.add_option("-j,--jobs", jobs, "Worker threads for parallel stages (overrides the config)");
    app.add_flag("-f,--force", force, "Rerun stages even when their inputs are unchanged");
    app.add_flag("-q,--quiet", quiet, "Only print errors and stage results");

    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"generate", "Render the synthetic train, test and improvement sets"},
        {"train", "Train the model on the training set"},
        {"eval", "Evaluate the model on the test set"},
        {"heatmaps", "Relevance heatmaps of the misclassified test images"},
        {"cluster", "Cluster the heatmaps and select the root-cause layer"},
        {"select", "Pick unsafe images from the improvement set"},
        {"retrain", "Balance the unsafe set and retrain the model"},
        {"report", "Write per-cluster contact sheets (and GIFs)"},
        {"experiment", "Compare HUDD with two baselines over several seeds"},
        {"run", "train, eval, heatmaps, cluster, select, retrain and report"},
    };
    for (const auto& c : commands) app.add_subcommand(c.name, c.help);
    auto* schema_cmd = app.add_subcommand("schema", "Print the configuration JSON schema");
    auto* check_cmd = app.add_subcommand("check-config", "Validate the configuration and print it resolved");

    CLI11_PARSE(app, argc, argv);

    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (sub == schema_cmd) {
            std::cout << hudd::config::schema().dump(2) << '\n';
            return 0;
        }
        auto cfg = hudd::config::load(config_path);
        if (jobs > 0) {
            cfg.jobs = jobs;
            cfg.experiment.jobs = jobs;
        }
        if (sub == check_cmd) {
            std::cout << "configuration OK; run directory " << cfg.run_dir().string() << '\n';
            return 0;
        }
        Pipeline p(cfg, [&](const std::string& m) {
            if (!quiet) std::cerr << m << '\n';
        });
        p.set_force(force);
        if (name == "generate") print(p.generate());
        else if (name == "train") print(p.train());
        else if (name == "eval") print(p.eval());
        else if (name == "heatmaps") print(p.heatmaps());
        else if (name == "cluster") print(p.cluster());
        else if (name == "select") print(p.select());
        else if (name == "retrain") print(p.retrain());
        else if (name == "report") {
            std::vector<std::string> missing;
            print(p.report(&missing));
            if (!missing.empty()) std::cerr << missing.size() << " image(s) missing from the report\n";
        } else if (name == "experiment") {
            print(p.run_experiment());
        } else if (name == "run") {
            for (const auto& r : p.run_all()) print(r);
        }
    } catch (const hudd::StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: [" << name << "] " << e.what() << '\n';
        return 1;
    }
    return 0;
}
