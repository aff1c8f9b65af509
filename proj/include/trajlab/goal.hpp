#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/nn/layers.hpp"
#include "trajlab/random.hpp"
#include "trajlab/tensor.hpp"

namespace trajlab {

/// Pixel lattice over the world plane. Pixel (row, col) has its centre at
/// origin + (col * resolution, row * resolution); x runs along columns.
struct GridSpec {
    std::size_t height = 0;
    std::size_t width = 0;
    Vec2 origin{0.0, 0.0};
    double resolution = 1.0;

    struct Pixel {
        std::size_t row = 0;
        std::size_t col = 0;
        friend bool operator==(const Pixel&, const Pixel&) = default;
    };

    void validate() const {
        if (height == 0 || width == 0) throw std::invalid_argument("GridSpec: empty grid");
        if (!(resolution > 0.0)) throw std::invalid_argument("GridSpec: resolution must be positive");
    }

    double min_x() const noexcept { return origin[0] - 0.5 * resolution; }
    double min_y() const noexcept { return origin[1] - 0.5 * resolution; }
    double max_x() const noexcept { return origin[0] + (static_cast<double>(width) - 0.5) * resolution; }
    double max_y() const noexcept { return origin[1] + (static_cast<double>(height) - 0.5) * resolution; }

    bool contains(const Vec2& p) const noexcept {
        return p[0] >= min_x() && p[0] <= max_x() && p[1] >= min_y() && p[1] <= max_y();
    }

    Vec2 clamp(const Vec2& p) const noexcept {
        return {std::clamp(p[0], min_x(), max_x()), std::clamp(p[1], min_y(), max_y())};
    }

    Vec2 pixel_center(std::size_t row, std::size_t col) const noexcept {
        return {origin[0] + static_cast<double>(col) * resolution, origin[1] + static_cast<double>(row) * resolution};
    }
    Vec2 pixel_center(Pixel p) const noexcept { return pixel_center(p.row, p.col); }

    /// Continuous pixel coordinates (col, row) of a world point.
    std::array<double, 2> to_pixel_coords(const Vec2& p) const noexcept {
        return {(p[0] - origin[0]) / resolution, (p[1] - origin[1]) / resolution};
    }

    Pixel to_pixel(const Vec2& p) const {
        if (!contains(p)) throw std::out_of_range("position outside grid extent");
        const auto c = to_pixel_coords(p);
        const auto col = static_cast<std::size_t>(std::clamp(std::lround(c[0]), 0L, static_cast<long>(width) - 1));
        const auto row = static_cast<std::size_t>(std::clamp(std::lround(c[1]), 0L, static_cast<long>(height) - 1));
        return {row, col};
    }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// T probability maps over one grid.
struct HeatMapStack {
    GridSpec grid;
    Planes maps;
    bool normalized = false;

    std::size_t channels() const noexcept { return maps.channels; }
};

/// C class-score channels over one grid.
struct SemanticGrid {
    GridSpec grid;
    Planes classes;

    std::size_t channels() const noexcept { return classes.channels; }
};

struct GoalSet {
    std::vector<Vec2> diverse;
    Vec2 common{0.0, 0.0};
};

// ------------------------------------------------------------- rasterizing

/// Isotropic Gaussian at pixel centres, normalised to sum 1.
inline Matrix rasterize_gaussian(const Vec2& pos, const GridSpec& grid, double sigma_px) {
    grid.validate();
    if (!(sigma_px > 0.0)) throw std::invalid_argument("rasterize_gaussian: sigma must be positive");
    if (!grid.contains(pos)) throw std::out_of_range("rasterize_gaussian: position outside grid extent");
    const auto c = grid.to_pixel_coords(pos);
    const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
    Matrix m(grid.height, grid.width);
    // separable: exp(-(dx^2 + dy^2)/2s^2) = gx * gy
    std::vector<double> gx(grid.width), gy(grid.height);
    for (std::size_t q = 0; q < grid.width; ++q) {
        const double d = static_cast<double>(q) - c[0];
        gx[q] = std::exp(-d * d * inv);
    }
    for (std::size_t r = 0; r < grid.height; ++r) {
        const double d = static_cast<double>(r) - c[1];
        gy[r] = std::exp(-d * d * inv);
    }
    double total = 0.0;
    for (std::size_t r = 0; r < grid.height; ++r)
        for (std::size_t q = 0; q < grid.width; ++q) total += m(r, q) = gy[r] * gx[q];
    if (total <= 0.0) {
        // sigma far below a pixel: all mass on the nearest pixel
        const auto px = grid.to_pixel(pos);
        m(px.row, px.col) = 1.0;
        return m;
    }
    m *= 1.0 / total;
    return m;
}

/// Rescales a map so its peak is 1 (used for network inputs and BCE targets).
inline void peak_normalize(std::span<double> map) {
    const double peak = *std::max_element(map.begin(), map.end());
    if (peak > 0.0)
        for (double& v : map) v /= peak;
}

/// One peak-normalised Gaussian channel per position. Positions outside the
/// grid are clamped to its border.
inline Planes rasterize_positions(const Matrix& positions, const GridSpec& grid, double sigma_px) {
    Planes out(positions.rows(), grid.height, grid.width);
    for (std::size_t t = 0; t < positions.rows(); ++t) {
        const Matrix m = rasterize_gaussian(grid.clamp({positions(t, 0), positions(t, 1)}), grid, sigma_px);
        std::span<double> plane = out.plane(t);
        std::copy(m.flat().begin(), m.flat().end(), plane.begin());
        peak_normalize(plane);
    }
    return out;
}

// ------------------------------------------------------- semantic grid file

class GridFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Semantic grid file, little-endian:
///   8 bytes "TRJLSEMG", u32 version (1), u32 H, u32 W, u32 C,
///   f64 origin_x, f64 origin_y, f64 resolution,
///   C*H*W float32 payload, channel-major, each channel row-major with row 0
///   at the lowest y.
inline void write_semantic_grid(const std::filesystem::path& path, const SemanticGrid& sem) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw GridFileError("cannot open " + path.string() + " for writing");
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    auto put64 = [&](double d) {
        const auto v = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    os.write("TRJLSEMG", 8);
    put32(1);
    put32(static_cast<std::uint32_t>(sem.grid.height));
    put32(static_cast<std::uint32_t>(sem.grid.width));
    put32(static_cast<std::uint32_t>(sem.classes.channels));
    put64(sem.grid.origin[0]);
    put64(sem.grid.origin[1]);
    put64(sem.grid.resolution);
    for (double v : sem.classes.data) put32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (!os) throw GridFileError("write failed for " + path.string());
}

inline SemanticGrid read_semantic_grid(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw GridFileError("cannot open semantic grid " + path.string());
    auto bytes = [&](std::size_t n) {
        std::array<unsigned char, 8> b{};
        if (!is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n))) {
            throw GridFileError("semantic grid truncated: " + path.string());
        }
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    };
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != "TRJLSEMG") throw GridFileError("bad semantic grid magic");
    if (bytes(4) != 1) throw GridFileError("unsupported semantic grid version");
    SemanticGrid sem;
    sem.grid.height = bytes(4);
    sem.grid.width = bytes(4);
    const std::size_t c = bytes(4);
    sem.grid.origin[0] = std::bit_cast<double>(bytes(8));
    sem.grid.origin[1] = std::bit_cast<double>(bytes(8));
    sem.grid.resolution = std::bit_cast<double>(bytes(8));
    sem.grid.validate();
    if (c < 1) throw GridFileError("semantic grid needs at least one channel");
    sem.classes = Planes(c, sem.grid.height, sem.grid.width);
    for (double& v : sem.classes.data) v = std::bit_cast<float>(static_cast<std::uint32_t>(bytes(4)));
    return sem;
}

// ----------------------------------------------------------------- goal net

struct GoalNetConfig {
    std::size_t semantic_channels = 2;
    std::size_t history_frames = 8;
    std::size_t future_frames = 12;
    std::size_t channels1 = 8;
    std::size_t channels2 = 16;
};

/// Encoder-decoder with skips: two down blocks, a bottleneck, two up blocks,
/// and a 1x1 head producing one logit map per future frame.
class GoalNet {
public:
    struct Cache {
        Planes input;
        Planes e1_pre, e1, p1, e2_pre, e2, p2, b_pre, b, u2, cat2, d2_pre, d2, u1, cat1, d1_pre, d1;
        Planes logits;
    };

    GoalNet() = default;
    explicit GoalNet(GoalNetConfig cfg)
        : cfg_(cfg),
          enc1_(cfg.semantic_channels + cfg.history_frames, cfg.channels1, 3, "goal.enc1"),
          enc2_(cfg.channels1, cfg.channels2, 3, "goal.enc2"),
          mid_(cfg.channels2, cfg.channels2, 3, "goal.mid"),
          dec2_(2 * cfg.channels2, cfg.channels1, 3, "goal.dec2"),
          dec1_(2 * cfg.channels1, cfg.channels1, 3, "goal.dec1"),
          head_(cfg.channels1, cfg.future_frames, 1, "goal.head") {}

    const GoalNetConfig& config() const noexcept { return cfg_; }

    void init(NoiseStream& rng) {
        for (nn::Conv2d* c : layers()) c->init(rng);
    }

    Planes forward(const Planes& input, Cache* cache = nullptr) const {
        using nn::Activation;
        Cache local;
        Cache& c = cache ? *cache : local;
        c.input = input;
        c.e1_pre = enc1_.forward(input);
        c.e1 = nn::activation_forward(Activation::silu, c.e1_pre);
        c.p1 = nn::avg_pool2(c.e1);
        c.e2_pre = enc2_.forward(c.p1);
        c.e2 = nn::activation_forward(Activation::silu, c.e2_pre);
        c.p2 = nn::avg_pool2(c.e2);
        c.b_pre = mid_.forward(c.p2);
        c.b = nn::activation_forward(Activation::silu, c.b_pre);
        c.u2 = nn::upsample2(c.b, c.e2.height, c.e2.width);
        c.cat2 = nn::concat_channels(c.u2, c.e2);
        c.d2_pre = dec2_.forward(c.cat2);
        c.d2 = nn::activation_forward(Activation::silu, c.d2_pre);
        c.u1 = nn::upsample2(c.d2, c.e1.height, c.e1.width);
        c.cat1 = nn::concat_channels(c.u1, c.e1);
        c.d1_pre = dec1_.forward(c.cat1);
        c.d1 = nn::activation_forward(Activation::silu, c.d1_pre);
        c.logits = head_.forward(c.d1);
        return c.logits;
    }

    /// Accumulates parameter gradients from dL/dlogits.
    void backward(const Cache& c, const Planes& dlogits) {
        using nn::Activation;
        Planes g = head_.backward(c.d1, dlogits);
        g = nn::activation_backward(Activation::silu, c.d1_pre, g);
        g = dec1_.backward(c.cat1, g);
        auto [du1, de1_skip] = nn::split_channels(g, c.u1.channels);
        g = nn::upsample2_backward(du1, c.d2.height, c.d2.width);
        g = nn::activation_backward(Activation::silu, c.d2_pre, g);
        g = dec2_.backward(c.cat2, g);
        auto [du2, de2_skip] = nn::split_channels(g, c.u2.channels);
        g = nn::upsample2_backward(du2, c.b.height, c.b.width);
        g = nn::activation_backward(Activation::silu, c.b_pre, g);
        g = mid_.backward(c.p2, g);
        Planes de2 = nn::avg_pool2_backward(g, c.e2.height, c.e2.width);
        for (std::size_t i = 0; i < de2.data.size(); ++i) de2.data[i] += de2_skip.data[i];
        g = nn::activation_backward(Activation::silu, c.e2_pre, de2);
        g = enc2_.backward(c.p1, g);
        Planes de1 = nn::avg_pool2_backward(g, c.e1.height, c.e1.width);
        for (std::size_t i = 0; i < de1.data.size(); ++i) de1.data[i] += de1_skip.data[i];
        g = nn::activation_backward(Activation::silu, c.e1_pre, de1);
        enc1_.backward(c.input, g);
    }

    nn::ParameterList parameters() {
        nn::ParameterList p;
        for (nn::Conv2d* c : layers()) nn::append(p, c->parameters());
        return p;
    }

private:
    std::array<nn::Conv2d*, 6> layers() { return {&enc1_, &enc2_, &mid_, &dec2_, &dec1_, &head_}; }

    GoalNetConfig cfg_;
    nn::Conv2d enc1_, enc2_, mid_, dec2_, dec1_, head_;
};

/// Stacks semantic classes and history heat-maps into the goal-net input.
inline Planes goal_net_input(const SemanticGrid& sem, const HeatMapStack& hist) {
    if (!(sem.grid == hist.grid)) throw std::invalid_argument("goal net: semantic and history grids differ");
    return nn::concat_channels(sem.classes, hist.maps);
}

/// Per-pixel probabilities (logistic of the logits) for every future frame.
/// The last channel is the goal map.
inline HeatMapStack predict_heatmaps(const SemanticGrid& sem, const HeatMapStack& hist, const GoalNet& net,
                                     GoalNet::Cache* cache = nullptr) {
    HeatMapStack out{sem.grid, net.forward(goal_net_input(sem, hist), cache), false};
    for (double& v : out.maps.data) v = nn::sigmoid(v);
    return out;
}

// ------------------------------------------------------------ goal selection

/// Index of the largest entry; ties go to the lowest row-major index.
inline std::size_t argmax_index(std::span<const double> map) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.size(); ++i)
        if (map[i] > map[best]) best = i;
    return best;
}

struct TtstOptions {
    std::size_t samples = 1000;
    bool cluster = true;
    int iterations = 20;
};

namespace detail {

inline double dist2(const Vec2& a, const Vec2& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1];
    return dx * dx + dy * dy;
}

}  // namespace detail

/// k-means with seeded farthest-point initialisation and a fixed number of
/// Lloyd iterations. Empty clusters keep their previous centre.
inline std::vector<Vec2> kmeans(const std::vector<Vec2>& points, std::size_t k, int iterations, NoiseStream& rng) {
    if (points.empty() || k == 0) throw std::invalid_argument("kmeans: need points and k >= 1");
    std::vector<Vec2> centers;
    centers.reserve(k);
    centers.push_back(points[rng.index_below(points.size())]);
    std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
    while (centers.size() < k) {
        std::size_t far = 0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            nearest[i] = std::min(nearest[i], detail::dist2(points[i], centers.back()));
            if (nearest[i] > nearest[far]) far = i;
        }
        centers.push_back(points[far]);
    }
    std::vector<std::size_t> assign(points.size());
    for (int it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < points.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < k; ++j)
                if (detail::dist2(points[i], centers[j]) < detail::dist2(points[i], centers[best])) best = j;
            assign[i] = best;
        }
        std::vector<Vec2> sum(k, Vec2{0.0, 0.0});
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < points.size(); ++i) {
            sum[assign[i]][0] += points[i][0];
            sum[assign[i]][1] += points[i][1];
            ++count[assign[i]];
        }
        for (std::size_t j = 0; j < k; ++j)
            if (count[j] > 0) centers[j] = {sum[j][0] / count[j], sum[j][1] / count[j]};
    }
    return centers;
}

/// Draws `count` pixels from the categorical distribution given by `map`
/// (non-negative, any positive total) and returns their centres.
inline std::vector<Vec2> sample_pixels(std::span<const double> map, const GridSpec& grid, std::size_t count,
                                       NoiseStream& rng) {
    std::vector<double> cdf(map.size());
    double total = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (!(map[i] >= 0.0) || !std::isfinite(map[i])) throw std::invalid_argument("goal map has invalid entries");
        total += map[i];
        cdf[i] = total;
    }
    if (!(total > 0.0)) throw std::invalid_argument("goal map is degenerate (zero mass)");
    std::vector<Vec2> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        const double u = rng.uniform() * total;
        // first pixel whose cumulative mass exceeds u; it always has mass > 0
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
        if (it == cdf.end()) {
            idx = map.size() - 1;
            while (map[idx] == 0.0) --idx;
        }
        out.push_back(grid.pixel_center(idx / grid.width, idx % grid.width));
    }
    return out;
}

/// Common goal at the argmax pixel; N diverse goals by categorical sampling,
/// or by clustering TTST oversamples when `ttst` is set.
inline GoalSet select_goals(std::span<const double> goal_map, const GridSpec& grid, std::size_t n,
                            const std::optional<TtstOptions>& ttst, NoiseStream& rng) {
    grid.validate();
    if (goal_map.size() != grid.height * grid.width) throw std::invalid_argument("select_goals: map/grid mismatch");
    if (n < 1) throw std::invalid_argument("select_goals: N must be >= 1");
    GoalSet goals;
    double total = 0.0;
    for (double v : goal_map) total += v;
    if (!(total > 0.0)) throw std::invalid_argument("goal map is degenerate (zero mass)");
    const std::size_t best = argmax_index(goal_map);
    goals.common = grid.pixel_center(best / grid.width, best % grid.width);
    if (!ttst) {
        goals.diverse = sample_pixels(goal_map, grid, n, rng);
        return goals;
    }
    if (ttst->samples < n) throw std::invalid_argument("select_goals: TTST sample count must be >= N");
    std::vector<Vec2> pool = sample_pixels(goal_map, grid, ttst->samples, rng);
    if (!ttst->cluster) {
        pool.resize(n);
        goals.diverse = std::move(pool);
        return goals;
    }
    goals.diverse = kmeans(pool, n, ttst->iterations, rng);
    return goals;
}

// ------------------------------------------------------------- soft argmax

/// Expected pixel-centre position under the normalised map. Differentiable
/// stand-in for the goal estimate when it feeds the trajectory branch.
inline Vec2 soft_argmax(std::span<const double> map, const GridSpec& grid) {
    double total = 0.0;
    Vec2 g{0.0, 0.0};
    for (std::size_t i = 0; i < map.size(); ++i) {
        const Vec2 c = grid.pixel_center(i / grid.width, i % grid.width);
        g[0] += map[i] * c[0];
        g[1] += map[i] * c[1];
        total += map[i];
    }
    if (!(total > 0.0)) throw std::invalid_argument("soft_argmax: zero mass");
    return {g[0] / total, g[1] / total};
}

/// dL/dmap given dL/dgoal.
inline std::vector<double> soft_argmax_backward(std::span<const double> map, const GridSpec& grid,
                                                const Vec2& dgoal) {
    double total = 0.0;
    for (double v : map) total += v;
    const Vec2 g = soft_argmax(map, grid);
    std::vector<double> d(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) {
        const Vec2 c = grid.pixel_center(i / grid.width, i % grid.width);
        d[i] = (dgoal[0] * (c[0] - g[0]) + dgoal[1] * (c[1] - g[1])) / total;
    }
    return d;
}

}  // namespace trajlab
