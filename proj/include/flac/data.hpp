#pragma once
// ColorGrid: a synthetic benchmark in the style of colour-biased digits.
//
// Each sample is a class glyph drawn in white over a background whose colour
// is the protected attribute. With probability q the colour is the one linked
// to the class; otherwise it is drawn uniformly from the remaining colours.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flac/tensor.hpp"

namespace flac {

struct DatasetSpec {
    int n_classes = 10;
    int n_colors = 10;
    int grid = 8;
    double q = 0.99;
    int n_per_class = 2000;
    std::uint64_t seed = 1;
    double noise_std = 0.05;
    double glyph_contrast = 1.0;  // glyph pixel = bg + contrast * (1 - bg); 1 draws pure white

    int input_dim() const { return grid * grid * 3; }

    void validate() const {
        if (n_classes < 2) throw std::invalid_argument("dataset: n_classes must be at least 2");
        if (n_colors != n_classes) throw std::invalid_argument("dataset: n_colors must equal n_classes");
        if (grid < 3) throw std::invalid_argument("dataset: grid must be at least 3");
        if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("dataset: q must lie in [0, 1]");
        if (n_per_class < 1) throw std::invalid_argument("dataset: n_per_class must be positive");
        if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
            throw std::invalid_argument("dataset: noise_std must be finite and non-negative");
        }
        if (!(glyph_contrast > 0.0 && glyph_contrast <= 1.0)) {
            throw std::invalid_argument("dataset: glyph_contrast must lie in (0, 1]");
        }
    }
};

struct ColorGridSample {
    std::vector<float> pixels;  // grid x grid x 3, row-major, channels last
    int y = 0;
    int t = 0;
    bool bias_aligned = false;
};

using Dataset = std::vector<ColorGridSample>;

// Class -> colour bijection.
inline int linked_color(int y) { return y; }

inline std::array<float, 3> palette_color(int color, int n_colors) {
    static constexpr std::array<std::array<float, 3>, 10> kPalette{{
        {0.90f, 0.10f, 0.10f},  // red
        {0.10f, 0.65f, 0.10f},  // green
        {0.10f, 0.20f, 0.90f},  // blue
        {0.90f, 0.80f, 0.10f},  // yellow
        {0.85f, 0.10f, 0.85f},  // magenta
        {0.10f, 0.80f, 0.80f},  // cyan
        {0.95f, 0.50f, 0.05f},  // orange
        {0.45f, 0.10f, 0.60f},  // purple
        {0.50f, 0.30f, 0.10f},  // brown
        {0.40f, 0.40f, 0.40f},  // grey
    }};
    if (n_colors <= static_cast<int>(kPalette.size())) return kPalette[static_cast<std::size_t>(color)];
    // Evenly spaced hues for larger palettes.
    const float h = static_cast<float>(color) / static_cast<float>(n_colors) * 6.0f;
    const float x = 1.0f - std::abs(std::fmod(h, 2.0f) - 1.0f);
    const int sector = static_cast<int>(h) % 6;
    std::array<float, 3> rgb{};
    switch (sector) {
        case 0: rgb = {1, x, 0}; break;
        case 1: rgb = {x, 1, 0}; break;
        case 2: rgb = {0, 1, x}; break;
        case 3: rgb = {0, x, 1}; break;
        case 4: rgb = {x, 0, 1}; break;
        default: rgb = {1, 0, x}; break;
    }
    for (auto& c : rgb) c = 0.1f + 0.8f * c;
    return rgb;
}

namespace detail {

// 5x7 digit bitmaps, one string per row.
inline constexpr std::array<std::array<const char*, 7>, 10> kDigitFont{{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

}  // namespace detail

// Binary foreground mask of a class: digit glyphs for the first ten classes
// (nearest-neighbour scaled into the grid), fixed pseudo-random masks beyond.
inline std::vector<std::uint8_t> class_glyph(int y, int grid) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid * grid), 0);
    if (y < 10) {
        const auto& font = detail::kDigitFont[static_cast<std::size_t>(y)];
        if (grid >= 7) {
            const int top = (grid - 7) / 2;
            const int left = (grid - 5) / 2;
            for (int r = 0; r < 7; ++r)
                for (int c = 0; c < 5; ++c)
                    if (font[static_cast<std::size_t>(r)][c] == '#')
                        mask[static_cast<std::size_t>((r + top) * grid + c + left)] = 1;
        } else {
            for (int r = 0; r < grid; ++r)
                for (int c = 0; c < grid; ++c)
                    if (font[static_cast<std::size_t>(r * 7 / grid)][c * 5 / grid] == '#')
                        mask[static_cast<std::size_t>(r * grid + c)] = 1;
        }
        return mask;
    }
    std::mt19937_64 rng(0x5eed0000ULL + static_cast<std::uint64_t>(y));
    std::bernoulli_distribution on(0.4);
    for (auto& m : mask) m = on(rng) ? 1 : 0;
    return mask;
}

// Off-link colour: uniform over the n_colors - 1 colours not linked to y.
inline int draw_unlinked_color(int y, int n_colors, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, n_colors - 2);
    const int c = pick(rng);
    return c >= linked_color(y) ? c + 1 : c;
}

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

inline ColorGridSample render_sample(const DatasetSpec& spec, int y, int t, std::mt19937_64& rng) {
    const auto glyph = class_glyph(y, spec.grid);
    const auto bg = palette_color(t, spec.n_colors);
    ColorGridSample s;
    s.y = y;
    s.t = t;
    s.bias_aligned = (t == linked_color(y));
    s.pixels.resize(static_cast<std::size_t>(spec.input_dim()));
    std::normal_distribution<double> noise(0.0, spec.noise_std > 0.0 ? spec.noise_std : 1.0);
    for (std::size_t p = 0; p < glyph.size(); ++p) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            double v = glyph[p] ? bg[ch] + spec.glyph_contrast * (1.0 - bg[ch]) : bg[ch];
            if (spec.noise_std > 0.0) v += noise(rng);
            s.pixels[p * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return s;
}

// Class-major sample list, n_per_class per class, fully determined by its DatasetSpec (seed included).
inline Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    Dataset out;
    out.reserve(static_cast<std::size_t>(spec.n_classes * spec.n_per_class));
    for (int y = 0; y < spec.n_classes; ++y) {
        for (int k = 0; k < spec.n_per_class; ++k) {
            const auto index = static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(spec.n_per_class) +
                               static_cast<std::uint64_t>(k);
            auto rng = sample_rng(spec.seed, index);
            std::uniform_real_distribution<double> coin(0.0, 1.0);
            const int t = coin(rng) < spec.q ? linked_color(y) : draw_unlinked_color(y, spec.n_colors, rng);
            out.push_back(render_sample(spec, y, t, rng));
        }
    }
    return out;
}

// Colour-stratified variant for evaluation splits: within each class the k-th
// sample takes colour k mod n_colors (uniform), or cycles over the unlinked
// colours when conflict_only. Per-class colour counts differ by at most one.
inline Dataset generate_stratified(const DatasetSpec& spec, bool conflict_only) {
    spec.validate();
    Dataset out;
    out.reserve(static_cast<std::size_t>(spec.n_classes * spec.n_per_class));
    for (int y = 0; y < spec.n_classes; ++y) {
        for (int k = 0; k < spec.n_per_class; ++k) {
            const auto index = static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(spec.n_per_class) +
                               static_cast<std::uint64_t>(k);
            auto rng = sample_rng(spec.seed, index);
            int t = k % spec.n_colors;
            if (conflict_only) {
                t = k % (spec.n_colors - 1);
                if (t >= linked_color(y)) ++t;
            }
            out.push_back(render_sample(spec, y, t, rng));
        }
    }
    return out;
}

struct SplitSizes {
    int test_per_class = 500;
    int bias_per_class = 500;  // attribute-labelled split for the bias-capturing model
};

struct ProtocolSplits {
    Dataset train;
    Dataset test_unbiased;       // q = 1 / n_colors: colour independent of class
    Dataset test_bias_conflict;  // only colours not linked to the class
    Dataset bias_train;          // disjoint, colour-balanced, carries t for attribute supervision
};

inline DatasetSpec derived_spec(const DatasetSpec& spec, double q, int per_class, std::uint64_t salt) {
    DatasetSpec d = spec;
    d.q = q;
    d.n_per_class = per_class;
    d.seed = spec.seed * 0x9E3779B97F4A7C15ULL + salt;
    return d;
}

inline ProtocolSplits split_for_protocol(const DatasetSpec& spec, const SplitSizes& sizes = {}) {
    spec.validate();
    const double uniform_q = 1.0 / static_cast<double>(spec.n_colors);
    ProtocolSplits out;
    out.train = generate(spec);
    out.test_unbiased = generate_stratified(derived_spec(spec, uniform_q, sizes.test_per_class, 1), false);
    out.test_bias_conflict = generate_stratified(derived_spec(spec, 0.0, sizes.test_per_class, 2), true);
    out.bias_train = generate_stratified(derived_spec(spec, uniform_q, sizes.bias_per_class, 3), false);
    return out;
}

inline double empirical_bias_ratio(std::span<const ColorGridSample> samples) {
    if (samples.empty()) throw std::invalid_argument("empirical_bias_ratio: empty sample list");
    const auto aligned = std::count_if(samples.begin(), samples.end(),
                                       [](const ColorGridSample& s) { return s.bias_aligned; });
    return static_cast<double>(aligned) / static_cast<double>(samples.size());
}

// Rows of pixels for the given sample positions as an N x input_dim tensor.
inline Tensor pixel_batch(std::span<const ColorGridSample> samples, std::span<const std::size_t> rows) {
    if (rows.empty()) throw std::invalid_argument("pixel_batch: empty batch");
    const std::size_t dim = samples[rows[0]].pixels.size();
    std::vector<double> data(rows.size() * dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& px = samples[rows[r]].pixels;
        std::copy(px.begin(), px.end(), data.begin() + static_cast<std::ptrdiff_t>(r * dim));
    }
    return Tensor::matrix(rows.size(), dim, std::move(data));
}

// ---- file format -------------------------------------------------------------------
//
// Little-endian: "CGRD", version u32, n u64, grid u32, n_classes u32, then per
// sample the pixels as f32, y u16, t u16, bias_aligned u8.

inline constexpr std::uint32_t kDatasetVersion = 1;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T value) {
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> bytes{};
    if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw IoError("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace detail

inline void write_dataset(std::ostream& os, std::span<const ColorGridSample> samples, int grid, int n_classes) {
    os.write("CGRD", 4);
    detail::put_le<std::uint32_t>(os, kDatasetVersion);
    detail::put_le<std::uint64_t>(os, samples.size());
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(grid));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(n_classes));
    const std::size_t dim = static_cast<std::size_t>(grid * grid * 3);
    for (const auto& s : samples) {
        if (s.pixels.size() != dim) throw IoError("write_dataset: sample has wrong pixel count");
        for (float v : s.pixels) detail::put_le<float>(os, v);
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.y));
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.t));
        detail::put_le<std::uint8_t>(os, s.bias_aligned ? 1 : 0);
    }
    if (!os) throw IoError("write_dataset: stream failure");
}

struct LoadedDataset {
    Dataset samples;
    int grid = 0;
    int n_classes = 0;
};

inline LoadedDataset read_dataset(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "CGRD", 4) != 0) throw IoError("read_dataset: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kDatasetVersion) throw IoError("read_dataset: unsupported version " + std::to_string(version));
    const auto n = detail::get_le<std::uint64_t>(is);
    LoadedDataset out;
    out.grid = static_cast<int>(detail::get_le<std::uint32_t>(is));
    out.n_classes = static_cast<int>(detail::get_le<std::uint32_t>(is));
    const std::size_t dim = static_cast<std::size_t>(out.grid * out.grid * 3);
    out.samples.resize(n);
    for (auto& s : out.samples) {
        s.pixels.resize(dim);
        for (auto& v : s.pixels) v = detail::get_le<float>(is);
        s.y = detail::get_le<std::uint16_t>(is);
        s.t = detail::get_le<std::uint16_t>(is);
        s.bias_aligned = detail::get_le<std::uint8_t>(is) != 0;
    }
    return out;
}

inline void save_dataset(const std::filesystem::path& path, std::span<const ColorGridSample> samples, int grid,
                         int n_classes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_dataset(os, samples, grid, n_classes);
}

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_dataset(is);
}

inline void write_manifest_csv(std::ostream& os, std::span<const ColorGridSample> samples) {
    os << "index,y,t,bias_aligned\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        os << i << ',' << samples[i].y << ',' << samples[i].t << ',' << (samples[i].bias_aligned ? 1 : 0) << '\n';
    }
}

}  // namespace flac
