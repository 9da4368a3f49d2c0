// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "hudd/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hudd;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit_seconds > 0 && s >= limit_seconds) {
        o.pass = false;
        o.detail += "; over the " + std::to_string(static_cast<int>(limit_seconds)) + " s limit";
    }
    if (!o.pass) ++failures;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), s);
    std::fflush(stdout);
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << v;
    return os.str();
}

std::vector<std::vector<double>> square(const space::DistanceMatrix& m) {
    std::vector<std::vector<double>> d(m.size(), std::vector<double>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m.size(); ++j) d[i][j] = m(i, j);
    return d;
}

double loop_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

lrp::HeatmapSet random_heatmaps(std::size_t n, std::size_t rows, std::size_t cols, Rng& rng) {
    lrp::HeatmapSet s;
    s.layer = 2;
    s.rows = rows;
    s.cols = cols;
    for (std::size_t i = 0; i < n; ++i) s.ids.push_back("h" + std::to_string(i));
    const double lo = rng.uniform(-5.0, 0.0), hi = rng.uniform(0.5, 5.0);
    s.values.resize(n * rows * cols);
    for (auto& v : s.values) v = rng.uniform(lo, hi);
    return s;
}

// -- 1 ---------------------------------------------------------------------

Outcome lrp_conservation() {
    double worst = 0.0;
    std::size_t maps = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(mix_seed(s, 0x6c7270));
        const std::size_t classes = 2 + static_cast<std::size_t>(rng.below(9));
        const auto net = net::make_default_classifier(synth::class_names(classes), {1, 32, 32}, s);
        const auto image = hudd::testing::random_tensor(net.input_shape, rng, 0.0, 1.0);
        const auto fr = net::forward(net, image);
        const auto seed = lrp::make_seed(net, fr.output, lrp::SeedMode::predicted_class);
        for (const auto& h : lrp::propagate(net, fr.trace, seed)) {
            worst = std::max(worst, std::abs(h.sum() - seed.value) / std::abs(seed.value));
            ++maps;
        }
    }
    return {worst <= 1e-6, "100 pairs, " + std::to_string(maps) + " layer sums, max relative error " + fmt(worst)};
}

// -- 2 ---------------------------------------------------------------------

Outcome ward_oracle() {
    Rng rng(0x77617264);
    std::size_t matched = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.below(7));
        const auto p = oracle::random_points(n, 1 + static_cast<std::size_t>(rng.below(5)), rng);
        const auto dg = cluster::hac_ward(oracle::points_matrix(p));
        if (oracle::same_merges(dg.merges, oracle::ward_merges(p))) ++matched;
    }
    return {matched == 200, std::to_string(matched) + "/200 merge sequences identical"};
}

// -- 3 ---------------------------------------------------------------------

Outcome formula_oracles() {
    Rng rng(0x65717573);
    double e_extrema = 0, e_norm = 0, e_dist = 0, e_icd = 0, e_wicd = 0, e_quota = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + static_cast<std::size_t>(rng.below(12));
        const auto raw = random_heatmaps(n, 1 + static_cast<std::size_t>(rng.below(5)), 1 + static_cast<std::size_t>(rng.below(6)), rng);
        std::vector<std::vector<double>> maps;
        for (std::size_t i = 0; i < n; ++i) maps.emplace_back(raw.map(i).begin(), raw.map(i).end());
        const auto [lo, hi] = oracle::layer_extrema(maps);
        const auto [norm, stats] = space::normalize_layer(raw);
        e_extrema = std::max({e_extrema, std::abs(stats.min - lo), std::abs(stats.max - hi)});
        for (std::size_t i = 0; i < raw.values.size(); ++i)
            e_norm = std::max(e_norm, std::abs(norm.values[i] - oracle::normalized_entry(raw.values[i], lo, hi)));

        const auto dm = space::distance_matrix(norm);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double d = loop_distance(norm.map(i), norm.map(j));
                e_dist = std::max({e_dist, std::abs(dm(i, j) - d), std::abs(space::heatmap_distance(norm.map(i), norm.map(j)) - d)});
            }

        const auto sq = square(dm);
        const auto dg = cluster::hac_ward(dm);
        for (std::size_t k = 1; k <= n; ++k) {
            const auto a = cluster::cut(dg, k);
            for (std::size_t c = 0; c < k; ++c) e_icd = std::max(e_icd, std::abs(cluster::icd(a, dm, c) - oracle::icd(sq, a.members(c))));
            e_wicd = std::max(e_wicd, std::abs(cluster::wicd(a, dm) - oracle::wicd(sq, a.labels, k)));
        }

        const select::SelectionConfig cfg{rng.uniform(), 100 + static_cast<std::size_t>(rng.below(200000)), rng.uniform()};
        std::vector<std::size_t> sizes(1 + rng.below(20));
        std::size_t members = 0;
        for (auto& s : sizes) members += (s = 1 + rng.below(300));
        const auto q = select::cluster_quotas(cfg, sizes);
        for (std::size_t c = 0; c < sizes.size(); ++c) {
            const double expect = oracle::quota(static_cast<double>(cfg.test_size), cfg.sf, cfg.test_accuracy,
                                                static_cast<double>(sizes[c]), static_cast<double>(members));
            e_quota = std::max(e_quota, std::abs(q.raw[c] - expect) / std::max(1.0, expect));
        }
    }
    const double worst = std::max({e_extrema, e_norm, e_dist, e_icd, e_wicd, e_quota});
    return {worst <= 1e-9, "max error extrema " + fmt(e_extrema) + ", normalization " + fmt(e_norm) + ", distance " +
                               fmt(e_dist) + ", WICD (outer /k) " + fmt(e_wicd) + ", ICD " + fmt(e_icd) + ", quota " +
                               fmt(e_quota)};
}

// -- 4 ---------------------------------------------------------------------

Outcome self_assignment() {
    synth::SceneSpec scene;
    auto train_spec = scene, eval_spec = scene;
    train_spec.hard_fraction = 0.04;
    eval_spec.hard_fraction = 0.35;
    const auto train = synth::generate(train_spec, 800, 11, "train").dataset();
    const auto test = synth::generate(eval_spec, 500, 12, "test").dataset();
    const auto model = net::train(net::make_default_classifier(synth::class_names(scene.classes), {1, 32, 32}, 4), train,
                                  net::TrainConfig{4, 0.05, 16, 4, false});
    const auto errors = steps::error_indices(net::evaluate(model, test));
    const auto cs = steps::cluster_errors(model, test, errors, {}, {50, 1});
    const auto& rc = cs.clusters;
    const auto& labels = rc.result.assignment.labels;
    std::vector<std::size_t> quotas(rc.cluster_count(), 0);
    for (auto l : labels) ++quotas[l];

    // The error-inducing images return as a fresh improvement set.
    net::LabeledDataset again;
    for (auto i : errors) again.add("again_" + test.ids[i], test.images[i], test.labels[i]);
    const auto improvement = lrp::heatmaps_for_set(model, steps::image_refs(again, steps::all_indices(again)),
                                                   steps::seed_mode(model), {rc.layer}, 1);
    const auto dm = space::improvement_distance_matrix(improvement.layer(rc.layer), cs.raw.layer(rc.layer));
    const auto u = select::assign_unsafe(select::rank_clusters(dm, labels, rc.cluster_count()), quotas);
    std::size_t mismatches = 0, placed = 0;
    for (std::size_t c = 0; c < u.clusters.size(); ++c)
        for (const auto& s : u.clusters[c]) {
            ++placed;
            if (labels[s.image] != c) ++mismatches;
        }
    mismatches += errors.size() - placed;
    return {mismatches == 0 && placed == errors.size(),
            std::to_string(errors.size()) + " error-inducing images in " + std::to_string(rc.cluster_count()) +
                " clusters (layer " + std::to_string(rc.layer) + "), " + std::to_string(mismatches) + " mismatches"};
}

// -- 5 ---------------------------------------------------------------------

Outcome quota_total() {
    const select::SelectionConfig large{0.3, 132630, 0.9595};
    const auto errors = static_cast<std::size_t>(std::llround(132630 * (1 - 0.9595)));
    Rng rng(0x71756f74);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        // Random composition of the error count into 16 nonempty clusters.
        std::vector<std::size_t> cuts{0, errors};
        while (cuts.size() < 17) {
            const auto c = 1 + rng.below(errors - 1);
            if (std::find(cuts.begin(), cuts.end(), c) == cuts.end()) cuts.push_back(c);
        }
        std::sort(cuts.begin(), cuts.end());
        std::vector<std::size_t> sizes;
        for (std::size_t i = 1; i < cuts.size(); ++i) sizes.push_back(cuts[i] - cuts[i - 1]);
        const auto total = select::cluster_quotas(large, sizes).total();
        lo = std::min(lo, total);
        hi = std::max(hi, total);
    }
    return {lo >= 1611 && hi <= 1615, "sum of quotas over 1000 random 16-cluster splits in [" + std::to_string(lo) + ", " +
                                          std::to_string(hi) + "]"};
}

// -- 8 ---------------------------------------------------------------------

Outcome knee_hockey_sticks() {
    Rng rng(0x6b6e6565);
    int hits = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto hi = 15 + static_cast<std::size_t>(rng.below(36));
        const auto elbow = 4 + static_cast<std::size_t>(rng.below(hi - 8));
        const auto r = cluster::knee_point(oracle::hockey_stick(2, hi, elbow, rng));
        if (r.k + 1 >= elbow && r.k <= elbow + 1) ++hits;
    }
    return {hits >= 95, std::to_string(hits) + "/100 knees within one of the elbow"};
}

// -- 9 ---------------------------------------------------------------------

Outcome determinism() {
    const auto root = fs::temp_directory_path() / ("hudd_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    auto run = [&](const std::string& tag) {
        const json doc = {{"name", "run"},
                          {"runs_dir", tag + "/runs"},
                          {"data", {{"train", tag + "/train"}, {"test", tag + "/test"}, {"improvement", tag + "/improvement"}}},
                          {"generate", {{"train_size", 600}, {"test_size", 400}, {"improvement_size", 600}, {"seed", 21}}},
                          {"train", {{"epochs", 3}}},
                          {"retrain", {{"epochs", 2}}},
                          {"seed", 21}};
        pipeline::Pipeline p(config::from_json(doc, root));
        p.generate();
        p.run_all();
        return p;
    };
    const auto a = run("a"), b = run("b");
    auto bytes = [](const fs::path& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    std::vector<std::pair<std::string, std::pair<fs::path, fs::path>>> files{
        {"model", {a.model_path(), b.model_path()}},
        {"clusters.csv", {a.clusters_path(), b.clusters_path()}},
        {"unsafe.csv", {a.unsafe_path(), b.unsafe_path()}},
        {"retrained model", {a.retrained_model_path(), b.retrained_model_path()}}};
    std::string detail;
    bool same = true;
    for (const auto& [name, paths] : files) {
        const auto x = bytes(paths.first), y = bytes(paths.second);
        const bool eq = !x.empty() && x == y;
        same = same && eq;
        detail += (detail.empty() ? "" : ", ") + name + (eq ? " identical" : " DIFFERS") + " (" + std::to_string(x.size()) + " B)";
    }
    fs::remove_all(root);
    return {same, detail};
}

// -- 10 --------------------------------------------------------------------

/// Max relative error between backprop and central differences of a fixed
/// linear functional of the output, over every parameter and input entry.
double gradient_error(std::vector<net::Layer> layers, Shape input, std::uint64_t seed) {
    Rng rng(seed);
    net::Network n;
    n.input_shape = input;
    n.layers = std::move(layers);
    if (n.boundary_shapes().back().size() != 1) n.layers.emplace_back(net::Flatten{});
    n.outputs = hudd::testing::names(n.output_width());
    hudd::testing::randomize(n, rng, 0.3);
    const auto x = hudd::testing::random_tensor(input, rng);
    const auto c = hudd::testing::random_tensor({n.output_width()}, rng);
    auto loss = [&](const Tensor& in) {
        const auto out = net::run_from(n, 0, in);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += c[i] * out[i];
        return s;
    };
    const auto g = net::backprop(n, net::forward(n, x).trace, c);
    const double h = 1e-5;
    double worst = 0.0;
    auto check = [&](std::vector<double>& params, const std::vector<double>& analytic) {
        for (std::size_t k = 0; k < params.size(); ++k) {
            const double saved = params[k];
            params[k] = saved + h;
            const double up = loss(x);
            params[k] = saved - h;
            const double down = loss(x);
            params[k] = saved;
            worst = std::max(worst, hudd::testing::rel_error(analytic[k], (up - down) / (2 * h)));
        }
    };
    for (std::size_t i = 0; i < n.layers.size(); ++i) {
        if (auto* d = std::get_if<net::Dense>(&n.layers[i])) {
            check(d->weights, g.params[i].weights);
            check(d->bias, g.params[i].bias);
        } else if (auto* cv = std::get_if<net::Conv2d>(&n.layers[i])) {
            check(cv->weights, g.params[i].weights);
            check(cv->bias, g.params[i].bias);
        }
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        Tensor up = x, down = x;
        up[k] += h;
        down[k] -= h;
        worst = std::max(worst, hudd::testing::rel_error(g.input[k], (loss(up) - loss(down)) / (2 * h)));
    }
    return worst;
}

Outcome gradient_checks() {
    using namespace net;
    const std::vector<std::pair<std::string, std::function<double()>>> cases{
        {"dense", [] { return gradient_error({Dense(6, 4)}, {6}, 1); }},
        {"conv", [] { return gradient_error({Conv2d(2, 3, 3)}, {2, 6, 6}, 2); }},
        {"strided padded conv", [] { return gradient_error({Conv2d(2, 2, 3, 2, 1)}, {2, 7, 6}, 3); }},
        {"relu", [] { return gradient_error({Dense(6, 8), Relu{}, Dense(8, 3)}, {6}, 4); }},
        {"maxpool", [] { return gradient_error({Conv2d(1, 2, 3), MaxPool{}}, {1, 8, 8}, 5); }},
        {"flatten", [] { return gradient_error({Conv2d(1, 2, 3), Flatten{}, Dense(2 * 4 * 4, 3)}, {1, 6, 6}, 6); }},
    };
    double worst = 0.0;
    std::string detail;
    for (const auto& [name, f] : cases) {
        const double e = f();
        worst = std::max(worst, e);
        detail += (detail.empty() ? "" : ", ") + name + " " + fmt(e, 2);
    }
    return {worst <= 1e-3, "max relative error: " + detail};
}

// -- 6 and 7 ---------------------------------------------------------------

struct ExperimentRun {
    experiment::EvaluationReport report;
    double seconds = 0.0;
};

ExperimentRun run_default_experiment() {
    experiment::ExperimentConfig cfg;
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentRun r;
    r.report = experiment::run_experiment(cfg, [](const std::string& m) { std::fprintf(stderr, "  %s\n", m.c_str()); });
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace

int main() {
    criterion(1, "relevance conservation", 30, lrp_conservation);
    criterion(2, "Ward merges match brute force", 60, ward_oracle);
    criterion(3, "formula oracles", 0, formula_oracles);
    criterion(4, "self-assignment fidelity", 0, self_assignment);
    criterion(5, "quota total for 16 clusters of a large test set", 0, quota_total);
    criterion(8, "knee on hockey sticks", 0, knee_hockey_sticks);
    criterion(9, "determinism of two pipeline runs", 0, determinism);
    criterion(10, "gradient checks", 0, gradient_checks);

    std::optional<ExperimentRun> exp;
    std::string exp_error;
    try {
        exp = run_default_experiment();
    } catch (const std::exception& e) {
        exp_error = e.what();
    }
    criterion(6, "reduction rates over 10 seeds", 0, [&]() -> Outcome {
        if (!exp) return {false, "experiment failed: " + exp_error};
        const auto& r = exp->report;
        std::size_t clusters = 0;
        for (const auto& s : r.seeds) clusters += s.rr.rr.size();
        const double at_half = experiment::pct_at(r, 0.5);
        Outcome o{r.pct_rr_positive == 100.0 && at_half >= 57.0,
                  std::to_string(clusters) + " clusters, " + fmt(r.pct_rr_positive) + "% with RR > 0, " + fmt(at_half) +
                      "% with RR >= 0.5; experiment took " + fmt(exp->seconds, 3) + " s"};
        if (exp->seconds >= 15 * 60) {
            o.pass = false;
            o.detail += "; over the 15 min limit";
        }
        return o;
    });
    criterion(7, "retraining improvement over 10 seeds", 0, [&]() -> Outcome {
        if (!exp) return {false, "experiment failed: " + exp_error};
        const auto& r = exp->report;
        std::size_t improved = 0;
        for (const auto& s : r.seeds)
            if (s.acc_hudd >= s.acc_original) ++improved;
        Outcome o{r.mean_delta_hudd >= r.mean_delta_b1 && r.mean_delta_hudd >= r.mean_delta_b2 && r.a12_b2 >= 0.5 &&
                      r.budget_parity,
                  "mean delta HUDD " + fmt(r.mean_delta_hudd) + ", B1 " + fmt(r.mean_delta_b1) + ", B2 " +
                      fmt(r.mean_delta_b2) + "; A12 vs B1 " + fmt(r.a12_b1, 3) + ", vs B2 " + fmt(r.a12_b2, 3) +
                      (r.a12_b2 >= 0.6 ? " (meets the 0.60 target)" : " (below the 0.60 target)") +
                      "; equal label budgets " + (r.budget_parity ? "yes" : "NO") + "; retrained >= original in " +
                      std::to_string(improved) + "/" + std::to_string(r.seeds.size()) + " seeds"};
        if (exp->seconds >= 45 * 60) {
            o.pass = false;
            o.detail += "; over the 45 min limit";
        }
        return o;
    });

    std::printf("%s: %d criterion(s) failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
    return failures == 0 ? 0 : 1;
}
