#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "hudd/csv.hpp"
#include "hudd/synthlab.hpp"

namespace hudd::report {

using synth::GrayImage;

// ---------------------------------------------------------------------------
// Canvas and 3x5 bitmap font

struct Canvas {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    Canvas(std::size_t w, std::size_t h, std::uint8_t fill = 255) : width(w), height(h), pixels(w * h, fill) {}

    void set(std::size_t x, std::size_t y, std::uint8_t v) {
        if (x < width && y < height) pixels[y * width + x] = v;
    }

    /// Nearest-neighbour upscale of `img` by `scale` with its top-left at (x0, y0).
    void blit(const GrayImage& img, std::size_t x0, std::size_t y0, std::size_t scale) {
        for (std::size_t y = 0; y < img.height * scale; ++y)
            for (std::size_t x = 0; x < img.width * scale; ++x) set(x0 + x, y0 + y, img.pixels[(y / scale) * img.width + x / scale]);
    }

    GrayImage image() const { return {width, height, pixels}; }
};

namespace detail {

// Rows top to bottom, 3 bits each (bit 2 = left column).
struct Glyph {
    char c;
    std::array<std::uint8_t, 5> rows;
};

inline constexpr std::array<Glyph, 45> kFont{{
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 3, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 2, 2}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'A', {2, 5, 7, 5, 5}}, {'B', {6, 5, 6, 5, 6}},
    {'C', {3, 4, 4, 4, 3}}, {'D', {6, 5, 5, 5, 6}}, {'E', {7, 4, 6, 4, 7}}, {'F', {7, 4, 6, 4, 4}},
    {'G', {3, 4, 5, 5, 3}}, {'H', {5, 5, 7, 5, 5}}, {'I', {7, 2, 2, 2, 7}}, {'J', {1, 1, 1, 5, 2}},
    {'K', {5, 5, 6, 5, 5}}, {'L', {4, 4, 4, 4, 7}}, {'M', {5, 7, 7, 5, 5}}, {'N', {6, 5, 5, 5, 5}},
    {'O', {2, 5, 5, 5, 2}}, {'P', {6, 5, 6, 4, 4}}, {'Q', {2, 5, 5, 6, 3}}, {'R', {6, 5, 6, 5, 5}},
    {'S', {3, 4, 2, 1, 6}}, {'T', {7, 2, 2, 2, 2}}, {'U', {5, 5, 5, 5, 7}}, {'V', {5, 5, 5, 5, 2}},
    {'W', {5, 5, 7, 7, 5}}, {'X', {5, 5, 2, 5, 5}}, {'Y', {5, 5, 2, 2, 2}}, {'Z', {7, 1, 2, 4, 7}},
    {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}}, {'_', {0, 0, 0, 0, 7}}, {'=', {0, 7, 0, 7, 0}},
    {':', {0, 2, 0, 2, 0}}, {'/', {1, 1, 2, 4, 4}}, {'+', {0, 2, 7, 2, 0}}, {'#', {5, 7, 5, 7, 5}},
    {'?', {7, 1, 2, 0, 2}},
}};

inline const Glyph* glyph(char c) {
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (const auto& g : kFont)
        if (g.c == c) return &g;
    return nullptr;
}

}  // namespace detail

inline constexpr std::size_t kGlyphAdvance = 4;
inline constexpr std::size_t kLineHeight = 6;

/// Draws `text` at (x, y); letters are rendered upper-case, unknown
/// characters as '?', spaces as blanks.
inline void draw_text(Canvas& c, std::size_t x, std::size_t y, std::string_view text, std::uint8_t ink = 0) {
    for (char ch : text) {
        if (ch != ' ') {
            const auto* g = detail::glyph(ch);
            if (!g) g = detail::glyph('?');
            for (std::size_t r = 0; r < 5; ++r)
                for (std::size_t b = 0; b < 3; ++b)
                    if (g->rows[r] & (4u >> b)) c.set(x + b, y + r, ink);
        }
        x += kGlyphAdvance;
    }
}

// ---------------------------------------------------------------------------
// PNG (8-bit grayscale, filter 0, zlib-compressed)

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const GrayImage& img) {
    if (img.width == 0 || img.height == 0) throw InvalidArgument("empty image");
    std::vector<std::uint8_t> raw;
    raw.reserve((img.width + 1) * img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(y * img.width),
                   img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * img.width));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) throw Error("zlib compression failed");
    z.resize(zlen);

    std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, deflate, filter 0, no interlace
    detail::chunk(out, "IHDR", ihdr);
    detail::chunk(out, "IDAT", z);
    detail::chunk(out, "IEND", {});
    return out;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path);
}

inline void write_png(const GrayImage& img, const std::string& path) { write_bytes(path, encode_png(img)); }

// ---------------------------------------------------------------------------
// Animated GIF (GIF89a, 256-level gray palette, LZW)

namespace detail {

class BitPacker {
public:
    void put(std::uint32_t code, unsigned width) {
        acc_ |= static_cast<std::uint64_t>(code) << nbits_;
        nbits_ += width;
        while (nbits_ >= 8) {
            bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
            acc_ >>= 8;
            nbits_ -= 8;
        }
    }
    void flush() {
        if (nbits_ > 0) bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xff));
        acc_ = 0;
        nbits_ = 0;
    }
    std::vector<std::uint8_t> bytes;

private:
    std::uint64_t acc_ = 0;
    unsigned nbits_ = 0;
};

/// Variable-width LZW over 8-bit indices, as GIF expects: clear code first,
/// table reset when it reaches 4096 entries, end code last.
inline std::vector<std::uint8_t> lzw_encode(const std::vector<std::uint8_t>& indices) {
    constexpr std::uint32_t kClear = 256, kEnd = 257, kMax = 4096;
    BitPacker bits;
    std::vector<std::int32_t> table(kMax * 256, -1);  // (prefix code, byte) -> code
    std::uint32_t next = 258;
    unsigned width = 9;
    bits.put(kClear, width);
    if (indices.empty()) {
        bits.put(kEnd, width);
        bits.flush();
        return bits.bytes;
    }
    std::uint32_t prefix = indices[0];
    for (std::size_t i = 1; i < indices.size(); ++i) {
        const std::uint8_t b = indices[i];
        const auto found = table[prefix * 256 + b];
        if (found >= 0) {
            prefix = static_cast<std::uint32_t>(found);
            continue;
        }
        bits.put(prefix, width);
        if (next < kMax) {
            table[prefix * 256 + b] = static_cast<std::int32_t>(next);
            if (next == (1u << width) && width < 12) ++width;
            ++next;
        } else {
            bits.put(kClear, width);
            std::fill(table.begin(), table.end(), -1);
            next = 258;
            width = 9;
        }
        prefix = b;
    }
    bits.put(prefix, width);
    bits.put(kEnd, width);
    bits.flush();
    return bits.bytes;
}

inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace detail

/// Frames must share dimensions; `delay_cs` is the per-frame delay in
/// hundredths of a second. Loops forever.
inline std::vector<std::uint8_t> encode_gif(const std::vector<GrayImage>& frames, std::uint16_t delay_cs) {
    if (frames.empty()) throw InvalidArgument("GIF needs at least one frame");
    const auto w = frames.front().width, h = frames.front().height;
    if (w == 0 || h == 0 || w > 0xffff || h > 0xffff) throw InvalidArgument("invalid GIF frame size");
    std::vector<std::uint8_t> out{'G', 'I', 'F', '8', '9', 'a'};
    detail::put_le16(out, static_cast<std::uint16_t>(w));
    detail::put_le16(out, static_cast<std::uint16_t>(h));
    out.insert(out.end(), {0xf7, 0, 0});  // global table, 8-bit color resolution, 256 entries
    for (int i = 0; i < 256; ++i) out.insert(out.end(), 3, static_cast<std::uint8_t>(i));
    const char* loop = "NETSCAPE2.0";
    out.insert(out.end(), {0x21, 0xff, 11});
    out.insert(out.end(), loop, loop + 11);
    out.insert(out.end(), {3, 1, 0, 0, 0});
    for (const auto& f : frames) {
        if (f.width != w || f.height != h) throw ShapeError("GIF frames differ in size");
        out.insert(out.end(), {0x21, 0xf9, 4, 0});
        detail::put_le16(out, delay_cs);
        out.insert(out.end(), {0, 0});
        out.push_back(0x2c);
        detail::put_le16(out, 0);
        detail::put_le16(out, 0);
        detail::put_le16(out, static_cast<std::uint16_t>(w));
        detail::put_le16(out, static_cast<std::uint16_t>(h));
        out.push_back(0);
        out.push_back(8);  // LZW minimum code size
        const auto data = detail::lzw_encode(f.pixels);
        for (std::size_t i = 0; i < data.size(); i += 255) {
            const auto n = std::min<std::size_t>(255, data.size() - i);
            out.push_back(static_cast<std::uint8_t>(n));
            out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(i),
                       data.begin() + static_cast<std::ptrdiff_t>(i + n));
        }
        out.push_back(0);
    }
    out.push_back(0x3b);
    return out;
}

/// Frame delay in centiseconds for a display rate in images per minute.
inline std::uint16_t frame_delay_cs(double images_per_minute) {
    if (!(images_per_minute > 0.0)) throw InvalidArgument("frame rate must be positive");
    return static_cast<std::uint16_t>(std::clamp(std::lround(6000.0 / images_per_minute), 1L, 65535L));
}

struct GifInfo {
    std::size_t frames = 0;
    std::uint32_t total_cs = 0;
};

/// Frame count and summed delays of a GIF byte stream.
inline GifInfo inspect_gif(const std::vector<std::uint8_t>& gif) {
    auto need = [&](std::size_t pos, std::size_t n) {
        if (pos + n > gif.size()) throw FormatError("truncated GIF", pos);
    };
    need(0, 13);
    if (std::string(gif.begin(), gif.begin() + 6) != "GIF89a") throw FormatError("not a GIF89a stream", 0);
    std::size_t pos = 13;
    if (gif[10] & 0x80) pos += 3u * (1u << ((gif[10] & 7) + 1));
    GifInfo info;
    auto skip_blocks = [&] {
        while (true) {
            need(pos, 1);
            const auto n = gif[pos++];
            if (n == 0) return;
            pos += n;
        }
    };
    while (true) {
        need(pos, 1);
        const auto tag = gif[pos++];
        if (tag == 0x3b) return info;
        if (tag == 0x21) {
            need(pos, 1);
            const auto label = gif[pos++];
            if (label == 0xf9) {
                need(pos, 6);
                info.total_cs += static_cast<std::uint32_t>(gif[pos + 2] | (gif[pos + 3] << 8));
            }
            skip_blocks();
        } else if (tag == 0x2c) {
            need(pos, 10);
            const auto flags = gif[pos + 8];
            pos += 9;
            if (flags & 0x80) pos += 3u * (1u << ((flags & 7) + 1));
            ++pos;  // minimum code size
            skip_blocks();
            ++info.frames;
        } else {
            throw FormatError("unexpected GIF block", pos - 1);
        }
    }
}

// ---------------------------------------------------------------------------
// Cluster reports

struct ReportOptions {
    std::size_t tiles = 25;
    std::size_t columns = 5;
    std::size_t scale = 2;
    std::vector<std::string> params{"angle", "occlusion", "brightness"};
    bool gif = false;
    double images_per_minute = 100.0;

    void validate() const {
        if (tiles == 0 || columns == 0 || scale == 0) throw InvalidArgument("tiles, columns and scale must be positive");
        if (!(images_per_minute > 0.0)) throw InvalidArgument("images_per_minute must be positive");
    }
};

struct ReportResult {
    std::vector<std::string> sheets;
    std::vector<std::string> gifs;
    std::vector<std::string> missing;  // IDs whose image could not be found or read
};

namespace detail {

inline std::string short_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, std::abs(v) >= 100 ? "%.0f" : "%.2f", v);
    return buf;
}

inline std::string short_name(const std::string& name) {
    std::string s = name.substr(0, 3);
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace detail

/// One PNG contact sheet per cluster (up to `tiles` members in a grid of
/// `columns`, each annotated with its ID and the chosen manifest parameters)
/// plus a sidecar CSV of the tiles, and optionally a GIF cycling through
/// every member. Images are resolved through the manifest relative to
/// `dataset_dir`; missing ones are reported and skipped.
inline ReportResult write_cluster_reports(const std::vector<std::vector<std::string>>& clusters,
                                          const synth::Manifest& manifest, const std::string& dataset_dir,
                                          const std::string& out_dir, const ReportOptions& options = {}) {
    namespace fs = std::filesystem;
    options.validate();
    fs::create_directories(out_dir);
    const auto index = manifest.index();
    std::vector<std::size_t> param_cols;
    for (const auto& p : options.params) param_cols.push_back(manifest.param_index(p));

    ReportResult result;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        struct Tile {
            std::string id;
            GrayImage img;
            const synth::ManifestRow* row;
        };
        std::vector<Tile> loaded;
        for (const auto& id : clusters[c]) {
            auto it = index.find(id);
            if (it == index.end()) {
                result.missing.push_back(id);
                continue;
            }
            const auto& row = manifest.rows[it->second];
            try {
                loaded.push_back({id, synth::read_pgm((fs::path(dataset_dir) / row.path).string()), &row});
            } catch (const Error&) {
                result.missing.push_back(id);
            }
        }
        const std::string stem = "cluster_" + std::to_string(c);
        csv::Table side{{"tile", "image_id"}, {}};
        side.header.insert(side.header.end(), options.params.begin(), options.params.end());
        const std::size_t shown = std::min(options.tiles, loaded.size());
        std::size_t tw = 32 * options.scale, th = 32 * options.scale;
        if (!loaded.empty()) {
            tw = loaded.front().img.width * options.scale;
            th = loaded.front().img.height * options.scale;
        }
        const std::size_t text_lines = 1 + options.params.size();
        const std::size_t pad = 4;
        const std::size_t cell_w = std::max(tw, 16 * kGlyphAdvance) + pad;
        const std::size_t cell_h = th + text_lines * kLineHeight + 2 + pad;
        const std::size_t cols = std::max<std::size_t>(1, std::min(options.columns, shown));
        const std::size_t rows = std::max<std::size_t>(1, (shown + cols - 1) / cols);
        Canvas sheet(cols * cell_w + pad, rows * cell_h + pad + kLineHeight + 2);
        draw_text(sheet, pad, pad, "CLUSTER " + std::to_string(c) + " N=" + std::to_string(clusters[c].size()));
        for (std::size_t t = 0; t < shown; ++t) {
            const auto& tile = loaded[t];
            const std::size_t x = pad + (t % cols) * cell_w;
            const std::size_t y = pad + kLineHeight + 2 + (t / cols) * cell_h;
            if (tile.img.width * options.scale != tw || tile.img.height * options.scale != th)
                throw ShapeError("cluster " + std::to_string(c) + " mixes image sizes");
            sheet.blit(tile.img, x, y, options.scale);
            draw_text(sheet, x, y + th + 2, tile.id);
            std::vector<std::string> srow{std::to_string(t), tile.id};
            for (std::size_t p = 0; p < param_cols.size(); ++p) {
                const double v = tile.row->params.at(param_cols[p]);
                draw_text(sheet, x, y + th + 2 + (p + 1) * kLineHeight,
                          detail::short_name(options.params[p]) + "=" + detail::short_number(v));
                srow.push_back(csv::fmt(v));
            }
            side.rows.push_back(std::move(srow));
        }
        const auto sheet_path = (fs::path(out_dir) / (stem + ".png")).string();
        write_png(sheet.image(), sheet_path);
        csv::write((fs::path(out_dir) / (stem + ".csv")).string(), side);
        result.sheets.push_back(sheet_path);

        if (options.gif && !loaded.empty()) {
            const std::size_t gscale = options.scale * 2;
            std::vector<GrayImage> frames;
            for (const auto& tile : loaded) {
                Canvas f(tile.img.width * gscale, tile.img.height * gscale + kLineHeight + 2);
                f.blit(tile.img, 0, 0, gscale);
                draw_text(f, 1, tile.img.height * gscale + 1, tile.id);
                frames.push_back(f.image());
            }
            const auto gif_path = (fs::path(out_dir) / (stem + ".gif")).string();
            write_bytes(gif_path, encode_gif(frames, frame_delay_cs(options.images_per_minute)));
            result.gifs.push_back(gif_path);
        }
    }
    return result;
}

}  // namespace hudd::report
