#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hudd/binary_io.hpp"
#include "hudd/lrp.hpp"
#include "hudd/parallel.hpp"

namespace hudd::space {

using lrp::HeatmapSet;

/// Global min/max of one layer's heatmap entries over an image set.
struct NormalizationStats {
    int layer = 0;
    double min = 0.0;
    double max = 0.0;
};

/// Min-max normalization with the layer-wide extrema. A constant layer
/// (max == min) maps every entry to 0.
inline std::pair<HeatmapSet, NormalizationStats> normalize_layer(const HeatmapSet& raw) {
    if (raw.count() == 0 || raw.values.empty()) throw InvalidArgument("normalize_layer needs at least one heatmap");
    const auto [lo, hi] = std::minmax_element(raw.values.begin(), raw.values.end());
    NormalizationStats stats{raw.layer, *lo, *hi};
    HeatmapSet out = raw;
    const double span = stats.max - stats.min;
    if (span == 0.0) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
    } else {
        for (auto& v : out.values) v = (v - stats.min) / span;
    }
    return {std::move(out), stats};
}

/// Euclidean distance between two heatmaps of identical dimensions.
inline double heatmap_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("heatmap dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double heatmap_distance(const lrp::Heatmap& a, const lrp::Heatmap& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("heatmap dimension mismatch");
    return heatmap_distance(std::span<const double>(a.values), std::span<const double>(b.values));
}

/// Symmetric distance matrix with zero diagonal, stored as a packed strict
/// lower triangle.
class DistanceMatrix {
public:
    DistanceMatrix() = default;
    DistanceMatrix(std::vector<std::string> ids, int layer, bool normalized)
        : ids_(std::move(ids)), layer_(layer), normalized_(normalized),
          packed_(ids_.size() * (ids_.size() > 0 ? ids_.size() - 1 : 0) / 2, 0.0) {}

    /// Validates a dense square matrix (symmetric, zero diagonal, finite).
    static DistanceMatrix from_square(std::span<const double> square, std::size_t n, std::vector<std::string> ids = {},
                                      int layer = 0, bool normalized = false) {
        if (square.size() != n * n) throw ShapeError("square matrix has wrong number of entries");
        if (ids.empty())
            for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
        if (ids.size() != n) throw ShapeError("id count does not match matrix size");
        DistanceMatrix dm(std::move(ids), layer, normalized);
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(square[i * n + i]) || square[i * n + i] != 0.0) {
                throw InvalidArgument("distance matrix diagonal must be zero");
            }
            for (std::size_t j = 0; j < i; ++j) {
                const double a = square[i * n + j], b = square[j * n + i];
                if (!std::isfinite(a) || !std::isfinite(b)) throw InvalidArgument("distance matrix contains NaN/Inf");
                if (a != b) throw InvalidArgument("distance matrix is not symmetric");
                if (a < 0.0) throw InvalidArgument("negative distance");
                dm.set(i, j, a);
            }
        }
        return dm;
    }

    std::size_t size() const noexcept { return ids_.size(); }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    int layer() const noexcept { return layer_; }
    bool normalized() const noexcept { return normalized_; }
    const std::vector<double>& packed() const noexcept { return packed_; }
    std::vector<double>& packed() noexcept { return packed_; }

    double operator()(std::size_t i, std::size_t j) const {
        if (i == j) return 0.0;
        return packed_[index(i, j)];
    }

    void set(std::size_t i, std::size_t j, double v) {
        if (i != j) packed_[index(i, j)] = v;
    }

    std::vector<double> to_square() const {
        const auto n = size();
        std::vector<double> sq(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) sq[i * n + j] = (*this)(i, j);
        return sq;
    }

    friend bool operator==(const DistanceMatrix&, const DistanceMatrix&) = default;

private:
    static std::size_t index(std::size_t i, std::size_t j) {
        if (i < j) std::swap(i, j);
        return i * (i - 1) / 2 + j;
    }

    std::vector<std::string> ids_;
    int layer_ = 0;
    bool normalized_ = false;
    std::vector<double> packed_;
};

/// Rows = improvement images, columns = error-inducing test images.
class RectDistanceMatrix {
public:
    RectDistanceMatrix() = default;
    RectDistanceMatrix(std::vector<std::string> row_ids, std::vector<std::string> col_ids, int layer, bool normalized)
        : rows_(std::move(row_ids)), cols_(std::move(col_ids)), layer_(layer), normalized_(normalized),
          data_(rows_.size() * cols_.size(), 0.0) {}

    std::size_t rows() const noexcept { return rows_.size(); }
    std::size_t cols() const noexcept { return cols_.size(); }
    const std::vector<std::string>& row_ids() const noexcept { return rows_; }
    const std::vector<std::string>& col_ids() const noexcept { return cols_; }
    int layer() const noexcept { return layer_; }
    bool normalized() const noexcept { return normalized_; }
    const std::vector<double>& data() const noexcept { return data_; }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    friend bool operator==(const RectDistanceMatrix&, const RectDistanceMatrix&) = default;

private:
    std::vector<std::string> rows_;
    std::vector<std::string> cols_;
    int layer_ = 0;
    bool normalized_ = false;
    std::vector<double> data_;
};

/// All pairwise distances of one layer's heatmaps. Rows are partitioned over
/// `jobs` threads; each pair is written by exactly one worker.
inline DistanceMatrix distance_matrix(const HeatmapSet& heatmaps, bool normalized = true, std::size_t jobs = 1) {
    const auto n = heatmaps.count();
    if (n < 2) throw InvalidArgument("distance_matrix needs at least 2 heatmaps");
    DistanceMatrix dm(heatmaps.ids, heatmaps.layer, normalized);
    parallel_for(n, jobs, [&](std::size_t i) {
        for (std::size_t j = 0; j < i; ++j) dm.set(i, j, heatmap_distance(heatmaps.map(i), heatmaps.map(j)));
    });
    return dm;
}

/// Distances between improvement-set and error-inducing heatmaps of the same
/// layer. Both sets are expected raw (unnormalized).
inline RectDistanceMatrix improvement_distance_matrix(const HeatmapSet& improvement, const HeatmapSet& test,
                                                      std::size_t jobs = 1) {
    if (improvement.count() == 0 || test.count() == 0) throw InvalidArgument("both heatmap sets must be nonempty");
    if (improvement.layer != test.layer) throw ShapeError("heatmap sets come from different layers");
    if (improvement.rows != test.rows || improvement.cols != test.cols) throw ShapeError("heatmap dimension mismatch");
    RectDistanceMatrix dm(improvement.ids, test.ids, test.layer, false);
    parallel_for(improvement.count(), jobs, [&](std::size_t r) {
        for (std::size_t c = 0; c < test.count(); ++c) dm.at(r, c) = heatmap_distance(improvement.map(r), test.map(c));
    });
    return dm;
}

// ---------------------------------------------------------------------------
// Binary files: "HUDDDSM1" (symmetric, packed lower triangle) or "HUDDDRM1"
// (rectangular, dense row-major); header i32 layer, u64 rows, u64 cols,
// u8 normalized, then float64 payload. IDs go to a sidecar CSV
// (`axis,index,id`).

inline constexpr std::string_view kSymMagic = "HUDDDSM1";
inline constexpr std::string_view kRectMagic = "HUDDDRM1";

namespace detail {

inline void write_ids_csv(const std::string& path, const std::vector<std::string>& rows,
                          const std::vector<std::string>* cols) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << "axis,index,id\n";
    for (std::size_t i = 0; i < rows.size(); ++i) out << "row," << i << ',' << rows[i] << '\n';
    const auto& c = cols ? *cols : rows;
    for (std::size_t i = 0; i < c.size(); ++i) out << "col," << i << ',' << c[i] << '\n';
}

inline std::pair<std::vector<std::string>, std::vector<std::string>> read_ids_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open " + path);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> rows, cols;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto a = line.find(','), b = line.find(',', a + 1);
        if (a == std::string::npos || b == std::string::npos) throw FormatError("bad id row", lineno);
        const auto axis = line.substr(0, a);
        (axis == "row" ? rows : cols).push_back(line.substr(b + 1));
    }
    return {rows, cols};
}

}  // namespace detail

inline void save(const DistanceMatrix& dm, const std::string& path) {
    io::ByteWriter w;
    w.raw(kSymMagic);
    w.put<std::int32_t>(dm.layer());
    w.u64(dm.size());
    w.u64(dm.size());
    w.u8(dm.normalized() ? 1 : 0);
    for (double v : dm.packed()) w.f64(v);
    w.save(path);
    detail::write_ids_csv(path + ".ids.csv", dm.ids(), nullptr);
}

inline void save(const RectDistanceMatrix& dm, const std::string& path) {
    io::ByteWriter w;
    w.raw(kRectMagic);
    w.put<std::int32_t>(dm.layer());
    w.u64(dm.rows());
    w.u64(dm.cols());
    w.u8(dm.normalized() ? 1 : 0);
    for (double v : dm.data()) w.f64(v);
    w.save(path);
    detail::write_ids_csv(path + ".ids.csv", dm.row_ids(), &dm.col_ids());
}

inline DistanceMatrix load_distance_matrix(const std::string& path) {
    auto r = io::ByteReader::from_file(path);
    if (r.remaining() < kSymMagic.size() || r.raw(kSymMagic.size()) != kSymMagic) {
        throw VersionError("not a symmetric distance matrix: " + path, 0);
    }
    const int layer = r.get<std::int32_t>("layer");
    const auto n = r.u64("rows");
    if (r.u64("cols") != n) throw FormatError("symmetric matrix must be square", r.offset());
    const bool normalized = r.u8("normalized flag") != 0;
    auto [ids, unused] = detail::read_ids_csv(path + ".ids.csv");
    if (ids.size() != n) throw FormatError("id sidecar does not match matrix size", 0);
    DistanceMatrix dm(std::move(ids), layer, normalized);
    if (dm.packed().size() > r.remaining() / sizeof(double)) throw FormatError("truncated distance payload", r.offset());
    for (auto& v : dm.packed()) v = r.f64("distance");
    if (!r.done()) throw FormatError("trailing bytes", r.offset());
    return dm;
}

inline RectDistanceMatrix load_rect_distance_matrix(const std::string& path) {
    auto r = io::ByteReader::from_file(path);
    if (r.remaining() < kRectMagic.size() || r.raw(kRectMagic.size()) != kRectMagic) {
        throw VersionError("not a rectangular distance matrix: " + path, 0);
    }
    const int layer = r.get<std::int32_t>("layer");
    const auto rows = r.u64("rows");
    const auto cols = r.u64("cols");
    const bool normalized = r.u8("normalized flag") != 0;
    auto [row_ids, col_ids] = detail::read_ids_csv(path + ".ids.csv");
    if (row_ids.size() != rows || col_ids.size() != cols) throw FormatError("id sidecar does not match matrix", 0);
    RectDistanceMatrix dm(std::move(row_ids), std::move(col_ids), layer, normalized);
    if (rows * cols > r.remaining() / sizeof(double)) throw FormatError("truncated distance payload", r.offset());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dm.at(i, j) = r.f64("distance");
    if (!r.done()) throw FormatError("trailing bytes", r.offset());
    return dm;
}

}  // namespace hudd::space
