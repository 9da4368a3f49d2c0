#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "hudd/csv.hpp"
#include "hudd/network.hpp"
#include "hudd/random.hpp"

namespace hudd::synth {

// ---------------------------------------------------------------------------
// Grayscale images and PGM (P5) files

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline void write_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw Error("write failed: " + path);
}

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open image " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError(path + ": not a binary PGM", 0);
    auto next_int = [&]() {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string skip;
            std::getline(in, skip);
            in >> std::ws;
        }
        long v = -1;
        in >> v;
        if (!in || v <= 0) throw FormatError(path + ": bad PGM header", static_cast<std::size_t>(in.tellg()));
        return static_cast<std::size_t>(v);
    };
    GrayImage img;
    img.width = next_int();
    img.height = next_int();
    const auto maxval = next_int();
    if (maxval != 255) throw FormatError(path + ": only 8-bit PGM supported", 0);
    in.get();  // single whitespace before the raster
    img.pixels.resize(img.width * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw FormatError(path + ": truncated PGM raster", static_cast<std::size_t>(in.gcount()));
    }
    return img;
}

/// 1 x H x W tensor with values in [0, 1].
inline Tensor to_tensor(const GrayImage& img) {
    Tensor t({1, img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i] / 255.0;
    return t;
}

// ---------------------------------------------------------------------------
// Scene parameters

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
    friend bool operator==(const Range&, const Range&) = default;
};

/// Root causes the generator can inject.
enum class Cause : std::uint8_t { none = 0, boundary_angle = 1, heavy_occlusion = 2, low_brightness = 3 };

/// A clock-hand scene: a bright hand of `length` pixels points from a pivot
/// near the image center in direction `angle` (degrees, counter-clockwise
/// from +x); an occluding disk hides its outer `occlusion` fraction;
/// `brightness` scales the hand's contrast over a noisy background.
/// Label = angle bin, bins of 360/classes degrees centered on multiples of
/// the bin width, half-open [lo, hi).
struct SceneSpec {
    std::size_t size = 32;
    std::size_t classes = 8;
    Range angle{0.0, 360.0};
    Range length{9.0, 14.0};
    Range occlusion{0.0, 0.3};
    Range brightness{0.55, 1.0};
    Range offset{-3.0, 3.0};
    double noise = 0.06;

    double hard_fraction = 0.0;                    // share of samples drawn from a hard region
    std::array<double, 3> cause_weights{1, 1, 1};  // boundary angle, heavy occlusion, low brightness
    double boundary_band = 4.0;                    // degrees either side of a bin boundary
    Range heavy_occlusion{0.55, 0.85};
    Range low_brightness{0.12, 0.3};

    double bin_width() const { return 360.0 / static_cast<double>(classes); }

    void validate() const {
        auto in = [](const Range& r, double lo, double hi, const char* what) {
            if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) throw InvalidArgument(std::string("invalid ") + what + " range");
        };
        if (size < 8) throw InvalidArgument("image size must be >= 8");
        if (classes < 2) throw InvalidArgument("need at least 2 classes");
        in(angle, 0.0, 360.0, "angle");
        in(length, 1.0, static_cast<double>(size) / 2.0, "length");
        in(occlusion, 0.0, 1.0, "occlusion");
        in(brightness, 0.0, 1.0, "brightness");
        in(offset, -static_cast<double>(size) / 4.0, static_cast<double>(size) / 4.0, "offset");
        in(heavy_occlusion, 0.0, 1.0, "heavy occlusion");
        in(low_brightness, 0.0, 1.0, "low brightness");
        if (!(noise >= 0.0)) throw InvalidArgument("noise must be >= 0");
        if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) throw InvalidArgument("hard_fraction must lie in [0, 1]");
        if (!(boundary_band >= 0.0 && boundary_band < bin_width() / 2.0)) throw InvalidArgument("invalid boundary band");
        double w = 0.0;
        for (double c : cause_weights) {
            if (c < 0.0) throw InvalidArgument("cause weights must be >= 0");
            w += c;
        }
        if (hard_fraction > 0.0 && w <= 0.0) throw InvalidArgument("cause weights sum to zero");
    }
};

struct SimParams {
    double angle = 0.0;
    double length = 0.0;
    double occlusion = 0.0;
    double brightness = 0.0;
    double offset_x = 0.0;
    double offset_y = 0.0;
    Cause cause = Cause::none;
};

/// Names of the manifest parameter columns, in order.
inline const std::vector<std::string>& param_names() {
    static const std::vector<std::string> names{"angle",    "length",   "occlusion",      "brightness",
                                                "offset_x", "offset_y", "boundary_margin"};
    return names;
}

/// Output names for the angle bins: "bin0", "bin1", ...
inline std::vector<std::string> class_names(std::size_t classes) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < classes; ++i) out.push_back("bin" + std::to_string(i));
    return out;
}

inline std::size_t angle_label(double angle, std::size_t classes) {
    const double w = 360.0 / static_cast<double>(classes);
    double a = std::fmod(angle + w / 2.0, 360.0);
    if (a < 0.0) a += 360.0;
    return std::min(static_cast<std::size_t>(a / w), classes - 1);
}

/// Angular distance (degrees) to the nearest bin boundary.
inline double boundary_margin(double angle, std::size_t classes) {
    const double w = 360.0 / static_cast<double>(classes);
    double a = std::fmod(angle + w / 2.0, w);
    if (a < 0.0) a += w;
    return std::min(a, w - a);
}

inline std::vector<double> param_values(const SimParams& p, std::size_t classes) {
    return {p.angle, p.length, p.occlusion, p.brightness, p.offset_x, p.offset_y, boundary_margin(p.angle, classes)};
}

inline SimParams sample_params(const SceneSpec& spec, Rng& rng) {
    SimParams p;
    p.angle = spec.angle.sample(rng);
    p.length = spec.length.sample(rng);
    p.occlusion = spec.occlusion.sample(rng);
    p.brightness = spec.brightness.sample(rng);
    p.offset_x = spec.offset.sample(rng);
    p.offset_y = spec.offset.sample(rng);
    // Always consume the same number of draws so streams stay aligned.
    const double hard = rng.uniform();
    const double pick = rng.uniform();
    const double jitter = rng.uniform();
    const auto boundary = static_cast<double>(rng.below(spec.classes));
    if (hard < spec.hard_fraction) {
        const auto& cw = spec.cause_weights;
        const double total = cw[0] + cw[1] + cw[2];
        const double u = pick * total;
        if (u < cw[0]) {
            p.cause = Cause::boundary_angle;
            const double edge = (boundary + 0.5) * spec.bin_width();
            p.angle = std::fmod(edge + (2.0 * jitter - 1.0) * spec.boundary_band + 360.0, 360.0);
        } else if (u < cw[0] + cw[1]) {
            p.cause = Cause::heavy_occlusion;
            p.occlusion = spec.heavy_occlusion.lo + jitter * (spec.heavy_occlusion.hi - spec.heavy_occlusion.lo);
        } else {
            p.cause = Cause::low_brightness;
            p.brightness = spec.low_brightness.lo + jitter * (spec.low_brightness.hi - spec.low_brightness.lo);
        }
    }
    return p;
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

inline constexpr double kBackground = 0.2;
inline constexpr double kContrast = 0.7;
inline constexpr double kOccluderLevel = 0.45;

/// Deterministic rendering of one scene; noise comes from `rng`.
inline GrayImage render(const SceneSpec& spec, const SimParams& p, Rng& rng) {
    const std::size_t n = spec.size;
    GrayImage img{n, n, std::vector<std::uint8_t>(n * n)};
    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    const double cx = c + p.offset_x, cy = c + p.offset_y;
    const double rad = p.angle * std::numbers::pi / 180.0;
    const double ux = std::cos(rad), uy = -std::sin(rad);
    const double tx = cx + p.length * ux, ty = cy + p.length * uy;
    const bool occluded = p.occlusion > 0.02;
    const double occ_r = p.length * p.occlusion / 2.0 + 1.0;
    const double ox = cx + p.length * (1.0 - p.occlusion / 2.0) * ux;
    const double oy = cy + p.length * (1.0 - p.occlusion / 2.0) * uy;
    const double level = kContrast * p.brightness;
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double px = static_cast<double>(x), py = static_cast<double>(y);
            double v = kBackground;
            const double dh = detail::segment_distance(px, py, cx, cy, tx, ty);
            const double hand = std::clamp(1.6 - dh, 0.0, 1.0);
            const double dp = std::hypot(px - cx, py - cy);
            const double pivot = std::clamp(2.5 - dp, 0.0, 1.0);
            v += level * std::max(hand, pivot);
            if (occluded) {
                const double d = std::hypot(px - ox, py - oy);
                const double cover = std::clamp(occ_r + 0.5 - d, 0.0, 1.0);
                v = (1.0 - cover) * v + cover * kOccluderLevel;
            }
            v += spec.noise * rng.normal();
            img.pixels[y * n + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
    std::string id;
    std::string path;
    std::size_t label = 0;
    std::vector<double> params;  // param_names() order
};

struct Manifest {
    std::vector<std::string> param_names = synth::param_names();
    std::vector<ManifestRow> rows;

    std::size_t param_index(const std::string& name) const {
        for (std::size_t i = 0; i < param_names.size(); ++i)
            if (param_names[i] == name) return i;
        throw NotFoundError("no parameter '" + name + "' in manifest");
    }

    const ManifestRow& row(const std::string& id) const {
        for (const auto& r : rows)
            if (r.id == id) return r;
        throw NotFoundError("no manifest row for '" + id + "'");
    }

    std::map<std::string, std::size_t> index() const {
        std::map<std::string, std::size_t> m;
        for (std::size_t i = 0; i < rows.size(); ++i) m.emplace(rows[i].id, i);
        return m;
    }
};

inline void write_manifest(const Manifest& m, const std::string& path) {
    csv::Table t;
    t.header = {"id", "path", "label"};
    t.header.insert(t.header.end(), m.param_names.begin(), m.param_names.end());
    for (const auto& r : m.rows) {
        std::vector<std::string> row{r.id, r.path, std::to_string(r.label)};
        for (double v : r.params) row.push_back(csv::fmt(v));
        t.rows.push_back(std::move(row));
    }
    csv::write(path, t);
}

inline Manifest read_manifest(const std::string& path) {
    const auto t = csv::read(path);
    if (t.header.size() < 3 || t.header[0] != "id" || t.header[1] != "path" || t.header[2] != "label") {
        throw FormatError(path + ": manifest header must start with id,path,label", 1);
    }
    Manifest m;
    m.param_names.assign(t.header.begin() + 3, t.header.end());
    std::size_t line = 1;
    for (const auto& row : t.rows) {
        ++line;
        ManifestRow r{row[0], row[1], csv::parse_size(row[2], line), {}};
        for (std::size_t i = 3; i < row.size(); ++i) r.params.push_back(csv::parse_double(row[i], line));
        m.rows.push_back(std::move(r));
    }
    return m;
}

struct GeneratedSet {
    std::vector<GrayImage> images;
    std::vector<SimParams> params;
    Manifest manifest;

    net::LabeledDataset dataset() const {
        net::LabeledDataset d;
        for (std::size_t i = 0; i < images.size(); ++i) d.add(manifest.rows[i].id, to_tensor(images[i]), manifest.rows[i].label);
        return d;
    }
};

/// n scenes from (spec, seed); IDs are `<prefix>_<index>` zero-padded and
/// image paths are relative (`images/<id>.pgm`).
inline GeneratedSet generate(const SceneSpec& spec, std::size_t n, std::uint64_t seed, const std::string& prefix = "img") {
    spec.validate();
    if (n == 0) throw InvalidArgument("generate: n must be > 0");
    Rng params_rng(mix_seed(seed, 1));
    Rng noise_rng(mix_seed(seed, 2));
    GeneratedSet out;
    const int width = std::max<int>(5, static_cast<int>(std::to_string(n - 1).size()));
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = sample_params(spec, params_rng);
        out.images.push_back(render(spec, p, noise_rng));
        out.params.push_back(p);
        std::string num = std::to_string(i);
        num.insert(0, static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0');
        const auto id = prefix + "_" + num;
        out.manifest.rows.push_back({id, "images/" + id + ".pgm", angle_label(p.angle, spec.classes),
                                     param_values(p, spec.classes)});
    }
    return out;
}

/// Writes `dir/manifest.csv` and `dir/images/*.pgm`.
inline void write_dataset(const GeneratedSet& set, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    for (std::size_t i = 0; i < set.images.size(); ++i) write_pgm(set.images[i], (fs::path(dir) / set.manifest.rows[i].path).string());
    write_manifest(set.manifest, (fs::path(dir) / "manifest.csv").string());
}

struct LoadedDataset {
    Manifest manifest;
    net::LabeledDataset data;
};

inline LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    LoadedDataset out;
    out.manifest = read_manifest((fs::path(dir) / "manifest.csv").string());
    for (const auto& r : out.manifest.rows) {
        out.data.add(r.id, to_tensor(read_pgm((fs::path(dir) / r.path).string())), r.label);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation statistics

/// Population variance.
inline double variance(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size());
}

/// rr[cluster][param]; NaN where the whole-set variance is zero (not applicable).
struct RrTable {
    std::vector<std::string> params;
    std::vector<std::vector<double>> rr;
};

/// RR = 1 - var(p over cluster) / var(p over all clustered images), for
/// every cluster and parameter. `clusters` lists member IDs per cluster;
/// their union is the error-inducing set.
inline RrTable variance_reduction(const std::vector<std::vector<std::string>>& clusters, const Manifest& manifest,
                                  std::vector<std::string> params = {}) {
    if (params.empty()) params = manifest.param_names;
    const auto index = manifest.index();
    auto row_of = [&](const std::string& id) -> const ManifestRow& {
        auto it = index.find(id);
        if (it == index.end()) throw NotFoundError("no manifest row for '" + id + "'");
        return manifest.rows[it->second];
    };
    RrTable t{params, std::vector<std::vector<double>>(clusters.size(), std::vector<double>(params.size()))};
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto col = manifest.param_index(params[pi]);
        std::vector<double> all;
        for (const auto& c : clusters)
            for (const auto& id : c) all.push_back(row_of(id).params[col]);
        const double total_var = variance(all);
        for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
            std::vector<double> v;
            for (const auto& id : clusters[ci]) v.push_back(row_of(id).params[col]);
            t.rr[ci][pi] = total_var > 0.0 ? 1.0 - variance(v) / total_var : std::numeric_limits<double>::quiet_NaN();
        }
    }
    return t;
}

inline double max_rr(const std::vector<double>& row) {
    double best = -std::numeric_limits<double>::infinity();
    for (double v : row)
        if (!std::isnan(v)) best = std::max(best, v);
    return best;
}

/// Percentage of clusters with at least one parameter at RR >= t, per threshold.
inline std::vector<double> threshold_profile(const std::vector<std::vector<double>>& rr,
                                             const std::vector<double>& thresholds) {
    std::vector<double> out;
    for (double t : thresholds) {
        std::size_t hit = 0;
        for (const auto& row : rr)
            if (max_rr(row) >= t) ++hit;
        out.push_back(rr.empty() ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(rr.size()));
    }
    return out;
}

inline std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 0; i <= 9; ++i) t.push_back(i / 10.0);
    return t;
}

/// Vargha-Delaney A12 = P(A > B) + 0.5 P(A == B), from midranks of the
/// pooled sample.
inline double vargha_delaney(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw InvalidArgument("vargha_delaney needs nonempty samples");
    const std::size_t m = a.size(), n = b.size();
    std::vector<std::pair<double, bool>> pooled;
    for (double x : a) pooled.emplace_back(x, true);
    for (double x : b) pooled.emplace_back(x, false);
    std::sort(pooled.begin(), pooled.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
    double rank_sum_a = 0.0;
    for (std::size_t i = 0; i < pooled.size();) {
        std::size_t j = i;
        while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (pooled[k].second) rank_sum_a += midrank;
        i = j;
    }
    const double dm = static_cast<double>(m), dn = static_cast<double>(n);
    return (rank_sum_a / dm - (dm + 1.0) / 2.0) / dn;
}

// ---------------------------------------------------------------------------
// Baselines

/// k distinct indices from [0, n), uniformly (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    if (k > n) throw InvalidArgument("cannot sample more items than available");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(n - i))]);
    idx.resize(k);
    return idx;
}

/// Bootstrap to exactly `target` entries: every item once plus uniform draws
/// with replacement, or a uniform subset when `items` is larger than target.
inline std::vector<std::size_t> resample_to(const std::vector<std::size_t>& items, std::size_t target, Rng& rng) {
    if (items.empty()) return {};
    if (items.size() >= target) {
        auto pick = sample_without_replacement(items.size(), target, rng);
        std::vector<std::size_t> out;
        for (auto i : pick) out.push_back(items[i]);
        return out;
    }
    auto out = items;
    while (out.size() < target) out.push_back(items[static_cast<std::size_t>(rng.below(items.size()))]);
    return out;
}

struct BaselineSet {
    std::vector<std::size_t> selected;   // before resampling (indices into the improvement set)
    std::vector<std::size_t> resampled;  // retraining multiset
    bool empty_warning = false;
};

/// B1: misclassified members of the labeled subset, resampled to `target`.
inline BaselineSet baseline_b1(const net::Network& network, const net::LabeledDataset& improvement,
                               const std::vector<std::size_t>& subset, std::size_t target, std::uint64_t seed) {
    BaselineSet b;
    for (auto i : subset) {
        const auto p = net::predict(network, improvement.images.at(i));
        if (p.label != improvement.labels.at(i)) b.selected.push_back(i);
    }
    b.empty_warning = b.selected.empty();
    Rng rng(mix_seed(seed, 0xb1));
    b.resampled = resample_to(b.selected, target, rng);
    return b;
}

/// B2: a uniform random subset of `budget` improvement images, resampled to `target`.
inline BaselineSet baseline_b2(std::size_t improvement_size, std::size_t budget, std::size_t target, std::uint64_t seed) {
    if (budget > improvement_size) throw InvalidArgument("B2 budget exceeds the improvement set");
    BaselineSet b;
    Rng rng(mix_seed(seed, 0xb2));
    b.selected = sample_without_replacement(improvement_size, budget, rng);
    std::sort(b.selected.begin(), b.selected.end());
    b.resampled = resample_to(b.selected, target, rng);
    b.empty_warning = b.selected.empty();
    return b;
}

}  // namespace hudd::synth
