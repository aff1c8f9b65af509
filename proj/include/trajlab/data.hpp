#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/goal.hpp"
#include "trajlab/random.hpp"
#include "trajlab/tensor.hpp"

namespace trajlab {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One agent's observations, sorted by frame.
struct Track {
    std::int64_t agent = 0;
    std::vector<std::int64_t> frames;
    std::vector<Vec2> positions;

    std::size_t size() const noexcept { return frames.size(); }
    friend bool operator==(const Track&, const Track&) = default;
};

struct ParsedTracks {
    std::vector<Track> tracks;  // sorted by agent id
    std::vector<std::string> warnings;
};

/// One training/evaluation sample.
struct TrajectoryWindow {
    std::string scene;
    std::int64_t agent = 0;
    Matrix history;  // t_h x 2, oldest first
    Matrix future;   // t_f x 2
    std::int64_t frame_base = 0;  // frame of the first history row

    Vec2 current() const { return {history(history.rows() - 1, 0), history(history.rows() - 1, 1)}; }
    Vec2 final_position() const { return {future(future.rows() - 1, 0), future(future.rows() - 1, 1)}; }
};

// --------------------------------------------------------------- parsing

namespace detail {

inline bool parse_number(std::string_view tok, double& out) {
    const char* b = tok.data();
    const char* e = tok.data() + tok.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc{} && p == e && std::isfinite(out);
}

inline std::int64_t integral_id(double v, const std::string& where) {
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-6) throw DataError(where + ": expected an integral id, got " + std::to_string(v));
    return static_cast<std::int64_t>(r);
}

}  // namespace detail

/// Reads whitespace-separated "frame agent x y" lines. Blank lines and lines
/// starting with '#' are skipped.
inline ParsedTracks parse_trajectory_stream(std::istream& is, const std::string& source) {
    std::map<std::int64_t, std::map<std::int64_t, Vec2>> by_agent;
    std::string line;
    std::size_t lineno = 0;
    ParsedTracks out;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(t);
        if (tok.empty() || tok[0][0] == '#') continue;
        const std::string where = source + ":" + std::to_string(lineno);
        if (tok.size() != 4) throw DataError(where + ": expected 4 fields, found " + std::to_string(tok.size()));
        double v[4];
        for (int i = 0; i < 4; ++i) {
            if (!detail::parse_number(tok[static_cast<std::size_t>(i)], v[i])) {
                throw DataError(where + ": cannot parse number '" + tok[static_cast<std::size_t>(i)] + "'");
            }
        }
        const std::int64_t frame = detail::integral_id(v[0], where);
        const std::int64_t agent = detail::integral_id(v[1], where);
        auto [it, inserted] = by_agent[agent].emplace(frame, Vec2{v[2], v[3]});
        if (!inserted) {
            throw DataError(where + ": duplicate (frame " + std::to_string(frame) + ", agent " +
                            std::to_string(agent) + ")");
        }
    }
    if (by_agent.empty()) out.warnings.push_back(source + ": no trajectory rows");
    for (const auto& [agent, frames] : by_agent) {
        Track t;
        t.agent = agent;
        for (const auto& [f, p] : frames) {
            t.frames.push_back(f);
            t.positions.push_back(p);
        }
        out.tracks.push_back(std::move(t));
    }
    return out;
}

inline ParsedTracks parse_trajectory_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open trajectory file " + path.string());
    return parse_trajectory_stream(is, path.string());
}

/// Writes tracks in frame order with round-trip precision.
inline void write_trajectory_stream(std::ostream& os, const std::vector<Track>& tracks) {
    std::vector<std::tuple<std::int64_t, std::int64_t, Vec2>> rows;
    for (const Track& t : tracks)
        for (std::size_t i = 0; i < t.size(); ++i) rows.emplace_back(t.frames[i], t.agent, t.positions[i]);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
    });
    os << std::setprecision(17);
    for (const auto& [f, a, p] : rows) os << f << '\t' << a << '\t' << p[0] << '\t' << p[1] << '\n';
}

inline void write_trajectory_file(const std::filesystem::path& path, const std::vector<Track>& tracks) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_trajectory_stream(os, tracks);
}

// -------------------------------------------------------------- windowing

/// Splits a track wherever consecutive frames are not exactly frame_step apart.
inline std::vector<Track> split_contiguous(const Track& t, std::int64_t frame_step) {
    std::vector<Track> parts;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (parts.empty() || t.frames[i] - parts.back().frames.back() != frame_step) {
            parts.push_back(Track{t.agent, {}, {}});
        }
        parts.back().frames.push_back(t.frames[i]);
        parts.back().positions.push_back(t.positions[i]);
    }
    return parts;
}

inline std::size_t window_count(std::size_t length, std::size_t t_h, std::size_t t_f, std::size_t stride) {
    if (length < t_h + t_f) return 0;
    return (length - t_h - t_f) / stride + 1;
}

struct WindowOptions {
    std::size_t t_h = 8;
    std::size_t t_f = 12;
    std::size_t stride = 1;
    std::int64_t frame_step = 10;
};

inline std::vector<TrajectoryWindow> make_windows(const std::vector<Track>& tracks, const WindowOptions& opt,
                                                  const std::string& scene = {}) {
    if (opt.t_h < 1 || opt.t_f < 1 || opt.stride < 1) throw std::invalid_argument("make_windows: sizes must be >= 1");
    std::vector<TrajectoryWindow> out;
    for (const Track& track : tracks) {
        for (const Track& seg : split_contiguous(track, opt.frame_step)) {
            const std::size_t n = window_count(seg.size(), opt.t_h, opt.t_f, opt.stride);
            for (std::size_t w = 0; w < n; ++w) {
                const std::size_t s = w * opt.stride;
                TrajectoryWindow win{scene, seg.agent, Matrix(opt.t_h, 2), Matrix(opt.t_f, 2), seg.frames[s]};
                for (std::size_t i = 0; i < opt.t_h; ++i) {
                    win.history(i, 0) = seg.positions[s + i][0];
                    win.history(i, 1) = seg.positions[s + i][1];
                }
                for (std::size_t i = 0; i < opt.t_f; ++i) {
                    win.future(i, 0) = seg.positions[s + opt.t_h + i][0];
                    win.future(i, 1) = seg.positions[s + opt.t_h + i][1];
                }
                out.push_back(std::move(win));
            }
        }
    }
    return out;
}

struct SceneSplit {
    std::vector<TrajectoryWindow> train;
    std::vector<TrajectoryWindow> test;
    std::vector<std::string> warnings;
};

/// Test = every window of `held_out`; train = everything else.
inline SceneSplit leave_one_scene_out(const std::vector<std::string>& scenes,
                                      const std::vector<TrajectoryWindow>& windows, const std::string& held_out) {
    if (std::find(scenes.begin(), scenes.end(), held_out) == scenes.end()) {
        throw DataError("unknown scene '" + held_out + "'");
    }
    SceneSplit split;
    for (const TrajectoryWindow& w : windows) (w.scene == held_out ? split.test : split.train).push_back(w);
    if (split.test.empty()) split.warnings.push_back("held-out scene '" + held_out + "' has no windows");
    return split;
}

// ------------------------------------------------------------- synthetic

enum class SceneLayout { corridor, open };

/// Plus-shaped corridor (or an obstacle-free square) with goal anchors at
/// the arm ends. Agents enter from the bottom arm.
struct SyntheticSceneConfig {
    SceneLayout layout = SceneLayout::corridor;
    std::size_t grid_size = 32;
    double resolution = 0.5;
    std::size_t anchors = 3;      // M
    std::size_t track_frames = 20;
    std::int64_t frame_step = 10;
    double speed_mean = 0.6;      // m / frame
    double speed_std = 0.04;
    double heading_std = 0.05;    // rad-equivalent lateral jitter per frame
    double max_lateral = 0.8;     // m
};

struct SyntheticDataset {
    std::vector<Track> tracks;
    SemanticGrid semantic;
    std::vector<Vec2> anchors;
    std::vector<std::size_t> choice;  // anchor index per agent
};

namespace detail {

struct Polyline {
    std::vector<Vec2> pts;
    std::vector<double> cum;  // arc length at each vertex

    explicit Polyline(std::vector<Vec2> p) : pts(std::move(p)) {
        cum.push_back(0.0);
        for (std::size_t i = 1; i < pts.size(); ++i) cum.push_back(cum.back() + std::sqrt(dist2(pts[i], pts[i - 1])));
    }
    double length() const { return cum.back(); }

    /// Point and unit tangent at arc length s.
    std::pair<Vec2, Vec2> at(double s) const {
        s = std::clamp(s, 0.0, length());
        std::size_t i = 1;
        while (i + 1 < pts.size() && cum[i] < s) ++i;
        const double seg = cum[i] - cum[i - 1];
        const double u = seg > 0.0 ? (s - cum[i - 1]) / seg : 0.0;
        const Vec2 d{pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]};
        const double n = std::hypot(d[0], d[1]);
        const Vec2 tangent = n > 0.0 ? Vec2{d[0] / n, d[1] / n} : Vec2{0.0, 1.0};
        return {Vec2{pts[i - 1][0] + u * d[0], pts[i - 1][1] + u * d[1]}, tangent};
    }
};

}  // namespace detail

class SyntheticScene {
public:
    explicit SyntheticScene(const SyntheticSceneConfig& cfg) : cfg_(cfg) {
        if (cfg.grid_size < 8) throw std::invalid_argument("synthetic scene: grid too small");
        if (cfg.anchors < 1) throw std::invalid_argument("synthetic scene: need at least one anchor");
        if (cfg.track_frames < 2) throw std::invalid_argument("synthetic scene: need at least two frames per track");
        grid_ = GridSpec{cfg.grid_size, cfg.grid_size, {0.5 * cfg.resolution, 0.5 * cfg.resolution}, cfg.resolution};
        const double size = static_cast<double>(cfg.grid_size) * cfg.resolution;
        const double mid = grid_.pixel_center(cfg.grid_size / 2, cfg.grid_size / 2)[0];
        const double edge_lo = grid_.pixel_center(0, 2)[0];
        const double edge_hi = grid_.pixel_center(0, cfg.grid_size - 3)[0];
        waypoint_ = {mid, mid};
        entry_y_ = grid_.pixel_center(1, 0)[1];
        entry_half_width_ = 0.0625 * size;
        arm_lo_ = mid - 0.15625 * size;
        arm_hi_ = mid + 0.15625 * size;

        if (cfg.layout == SceneLayout::corridor) {
            const std::vector<Vec2> left{{edge_lo, mid}}, right{{edge_hi, mid}}, top{{mid, edge_hi}};
            switch (cfg.anchors) {
                case 1: anchors_ = top; break;
                case 2: anchors_ = {left[0], right[0]}; break;
                case 3: anchors_ = {left[0], top[0], right[0]}; break;
                default:
                    throw DataError("unreachable anchor configuration: corridor layout has 3 arm ends, M = " +
                                    std::to_string(cfg.anchors));
            }
        } else {
            // anchors spread on the upper half of a circle around the centre
            const double radius = mid - edge_lo;
            for (std::size_t m = 0; m < cfg.anchors; ++m) {
                const double theta =
                    cfg.anchors == 1 ? std::numbers::pi / 2 : std::numbers::pi * (0.15 + 0.7 * static_cast<double>(m) / (cfg.anchors - 1));
                anchors_.push_back(grid_.pixel_center(grid_.to_pixel(
                    {mid + radius * std::cos(theta), mid + radius * std::sin(theta)})));
            }
        }
        for (const Vec2& a : anchors_) {
            if (!walkable(a)) throw DataError("unreachable anchor configuration: anchor inside an obstacle");
        }
    }

    const GridSpec& grid() const noexcept { return grid_; }
    const std::vector<Vec2>& anchors() const noexcept { return anchors_; }

    bool obstacle(const Vec2& p) const {
        if (cfg_.layout == SceneLayout::open) return false;
        const bool in_x_arm = p[0] >= arm_lo_ && p[0] <= arm_hi_;
        const bool in_y_arm = p[1] >= arm_lo_ && p[1] <= arm_hi_;
        return !(in_x_arm || in_y_arm);
    }

    bool walkable(const Vec2& p) const { return grid_.contains(p) && !obstacle(p); }

    SemanticGrid semantic() const {
        SemanticGrid sem{grid_, Planes(2, grid_.height, grid_.width)};
        for (std::size_t r = 0; r < grid_.height; ++r)
            for (std::size_t c = 0; c < grid_.width; ++c) {
                const bool blocked = obstacle(grid_.pixel_center(r, c));
                sem.classes.at(0, r, c) = blocked ? 0.0 : 1.0;
                sem.classes.at(1, r, c) = blocked ? 1.0 : 0.0;
            }
        return sem;
    }

    /// One agent walking from the entry arm to `anchor`, reaching it on the
    /// last frame.
    std::vector<Vec2> walk(std::size_t anchor, NoiseStream& rng) const {
        const std::size_t steps = cfg_.track_frames - 1;
        for (int attempt = 0; attempt < 100; ++attempt) {
            const Vec2 entry{waypoint_[0] + entry_half_width_ * (2.0 * rng.uniform() - 1.0), entry_y_};
            std::vector<Vec2> pts{entry};
            if (!segment_clear(entry, anchors_[anchor])) pts.push_back(waypoint_);
            pts.push_back(anchors_[anchor]);
            const detail::Polyline path(pts);

            double speed = cfg_.speed_mean + cfg_.speed_std * rng.normal();
            speed = std::clamp(speed, 0.05, path.length() / static_cast<double>(steps));
            const double travel = speed * static_cast<double>(steps);
            const double start = path.length() - travel;

            // per-step progress with multiplicative jitter, rescaled to `travel`
            std::vector<double> inc(steps);
            double total = 0.0;
            for (double& v : inc) total += v = std::max(0.2, 1.0 + cfg_.speed_std * rng.normal());
            std::vector<double> lateral(steps + 1, 0.0);
            for (std::size_t t = 1; t <= steps; ++t) lateral[t] = lateral[t - 1] + cfg_.heading_std * speed * rng.normal();
            const double drift = lateral[steps];

            std::vector<Vec2> out;
            out.reserve(steps + 1);
            double s = start;
            bool ok = true;
            for (std::size_t t = 0; t <= steps; ++t) {
                if (t > 0) s += travel * inc[t - 1] / total;
                if (t == steps) s = path.length();
                // bridge: lateral offset is zero at both ends
                const double off = std::clamp(lateral[t] - drift * static_cast<double>(t) / steps, -cfg_.max_lateral,
                                              cfg_.max_lateral);
                auto [p, tan] = path.at(s);
                const Vec2 q{p[0] - off * tan[1], p[1] + off * tan[0]};
                if (!walkable(q)) {
                    ok = false;
                    break;
                }
                out.push_back(q);
            }
            if (ok) return out;
        }
        throw DataError("unreachable anchor configuration: no obstacle-free walk found");
    }

private:
    bool segment_clear(const Vec2& a, const Vec2& b) const {
        const double len = std::sqrt(detail::dist2(a, b));
        const auto n = static_cast<std::size_t>(std::ceil(len / (0.25 * cfg_.resolution))) + 1;
        for (std::size_t i = 0; i <= n; ++i) {
            const double u = static_cast<double>(i) / static_cast<double>(n);
            if (!walkable({a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])})) return false;
        }
        return true;
    }

    SyntheticSceneConfig cfg_;
    GridSpec grid_;
    std::vector<Vec2> anchors_;
    Vec2 waypoint_{0.0, 0.0};
    double entry_y_ = 0.0;
    double entry_half_width_ = 0.0;
    double arm_lo_ = 0.0;
    double arm_hi_ = 0.0;
};

/// Agent i uses anchor choice from `rng` and its walk from rng.fork(i), so
/// regenerating with the same seed is byte-identical.
inline SyntheticDataset generate_synthetic(const SyntheticSceneConfig& cfg, std::size_t n_agents, NoiseStream& rng) {
    if (n_agents < 1) throw std::invalid_argument("generate_synthetic: need at least one agent");
    const SyntheticScene scene(cfg);
    SyntheticDataset ds;
    ds.semantic = scene.semantic();
    ds.anchors = scene.anchors();
    ds.tracks.reserve(n_agents);
    for (std::size_t i = 0; i < n_agents; ++i) {
        const std::size_t m = rng.index_below(ds.anchors.size());
        NoiseStream walker = rng.fork(i);
        Track t;
        t.agent = static_cast<std::int64_t>(i + 1);
        t.positions = scene.walk(m, walker);
        for (std::size_t f = 0; f < t.positions.size(); ++f) {
            t.frames.push_back(static_cast<std::int64_t>(i + f) * cfg.frame_step);
        }
        ds.choice.push_back(m);
        ds.tracks.push_back(std::move(t));
    }
    return ds;
}

}  // namespace trajlab
