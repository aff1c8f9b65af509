#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajlab/goal.hpp"
#include "trajlab/sampler.hpp"
#include "trajlab/train.hpp"

namespace trajlab {

// ----------------------------------------------------------------- metrics

inline void check_metric_shapes(const Matrix& pred, const Matrix& gt) {
    if (!pred.same_shape(gt) || pred.cols() != 2 || pred.rows() == 0) {
        throw std::invalid_argument("metric shape mismatch: pred " + pred.shape_string() + ", gt " + gt.shape_string());
    }
}

/// Mean Euclidean distance over frames.
inline double ade(const Matrix& pred, const Matrix& gt) {
    check_metric_shapes(pred, gt);
    double sum = 0.0;
    for (std::size_t t = 0; t < pred.rows(); ++t) sum += std::hypot(pred(t, 0) - gt(t, 0), pred(t, 1) - gt(t, 1));
    return sum / static_cast<double>(pred.rows());
}

/// Euclidean distance at the final frame.
inline double fde(const Matrix& pred, const Matrix& gt) {
    check_metric_shapes(pred, gt);
    const std::size_t t = pred.rows() - 1;
    return std::hypot(pred(t, 0) - gt(t, 0), pred(t, 1) - gt(t, 1));
}

struct BestOfN {
    double ade = 0.0;
    double fde = 0.0;
};

/// Minimum ADE and minimum FDE over the set, minimised independently.
inline BestOfN best_of_n(const std::vector<Matrix>& preds, const Matrix& gt) {
    if (preds.empty()) throw std::invalid_argument("best_of_n: empty prediction set");
    BestOfN b{ade(preds.front(), gt), fde(preds.front(), gt)};
    for (std::size_t i = 1; i < preds.size(); ++i) {
        b.ade = std::min(b.ade, ade(preds[i], gt));
        b.fde = std::min(b.fde, fde(preds[i], gt));
    }
    return b;
}

// ---------------------------------------------------------------- samplers

/// Which reverse process produces the N predictions.
///   tree     d-DDPM trunk (K_t steps) + DDIM branches
///   standard N full chains of one rule
///   staged   explicit trunk/branch rules, trunk length K_t
struct SamplerChoice {
    enum class Kind { tree, standard, staged };
    Kind kind = Kind::tree;
    StepRule rule = StepRule::ddim;
    StepRule trunk = StepRule::d_ddpm;
    StepRule branch = StepRule::ddim;

    std::string name() const {
        switch (kind) {
            case Kind::tree: return "ts";
            case Kind::standard: return std::string(to_string(rule));
            case Kind::staged: return std::string(to_string(trunk)) + "/" + std::string(to_string(branch));
        }
        return "?";
    }
};

/// "ts", "ddpm", "d_ddpm", "ddim", or "<trunk>/<branch>".
inline SamplerChoice parse_sampler_choice(const std::string& s) {
    SamplerChoice c;
    if (s == "ts" || s == "tree") return c;
    if (const auto slash = s.find('/'); slash != std::string::npos) {
        c.kind = SamplerChoice::Kind::staged;
        c.trunk = parse_step_rule(s.substr(0, slash));
        c.branch = parse_step_rule(s.substr(slash + 1));
        return c;
    }
    c.kind = SamplerChoice::Kind::standard;
    c.rule = parse_step_rule(s);
    return c;
}

inline std::size_t expected_evaluations(const SamplerChoice& c, const SamplerConfig& cfg) {
    switch (c.kind) {
        case SamplerChoice::Kind::tree: return tree_evaluations(cfg);
        case SamplerChoice::Kind::standard: return standard_evaluations(cfg, c.rule);
        case SamplerChoice::Kind::staged: return make_staged_plan(cfg, c.trunk, c.branch, cfg.K_t).evaluations(cfg.N);
    }
    return 0;
}

// --------------------------------------------------------------- prediction

struct PredictOptions {
    SamplerConfig sampler;
    SamplerChoice choice;
    std::optional<TtstOptions> ttst = TtstOptions{};
    BranchExecution execution = BranchExecution::sequential;
};

/// N world-frame trajectories for one window plus how they were produced.
struct PredictionSet {
    std::string scene;
    std::int64_t agent = 0;
    std::int64_t frame_base = 0;
    std::vector<Matrix> trajectories;
    GoalSet goals;
    std::string sampler;
    SamplerConfig config;
    std::size_t evaluations = 0;
    double wall_ms = 0.0;
};

/// Goal map for the window (probabilities of the final future frame).
inline std::vector<double> predict_goal_map(const TrajectoryModel& model, const SemanticGrid& sem,
                                            const TrajectoryWindow& w) {
    const HeatMapStack maps = predict_heatmaps(sem, model.history_maps(w, sem.grid), model.goal_net());
    const auto last = maps.maps.plane(maps.maps.channels - 1);
    return {last.begin(), last.end()};
}

/// Goal selection draws from fork(0) of `seed`, the sampler from fork(1),
/// so goals do not depend on the sampler choice.
inline PredictionSet predict_window(const TrajectoryModel& model, const SemanticGrid& sem, const TrajectoryWindow& w,
                                    const PredictOptions& opt, std::uint64_t seed) {
    opt.sampler.validate();
    if (opt.sampler.horizon != model.config().t_f) throw std::invalid_argument("predict: horizon does not match t_f");
    const auto t0 = std::chrono::steady_clock::now();
    const NoiseStream root(seed);
    NoiseStream goal_rng = root.fork(0);
    NoiseStream sample_rng = root.fork(1);

    PredictionSet out;
    out.scene = w.scene;
    out.agent = w.agent;
    out.frame_base = w.frame_base;
    out.sampler = opt.choice.name();
    out.config = opt.sampler;
    out.goals = select_goals(predict_goal_map(model, sem, w), sem.grid, opt.sampler.N, opt.ttst, goal_rng);

    const ConditionEncoder& enc = model.encoder();
    const ConditionFeature f_common = enc.encode(w.history, out.goals.common, FeatureKind::common);
    std::vector<ConditionFeature> f_diverse;
    f_diverse.reserve(out.goals.diverse.size());
    for (const Vec2& g : out.goals.diverse) f_diverse.push_back(enc.encode(w.history, g, FeatureKind::diverse));

    SampleResult r;
    switch (opt.choice.kind) {
        case SamplerChoice::Kind::tree:
            r = tree_sample(model.denoiser(), f_common, f_diverse, opt.sampler, model.schedule(), sample_rng,
                            opt.execution);
            break;
        case SamplerChoice::Kind::standard:
            r = sample_standard(model.denoiser(), f_diverse, opt.sampler, model.schedule(), sample_rng, opt.choice.rule);
            break;
        case SamplerChoice::Kind::staged:
            r = staged_sample(model.denoiser(), f_common, f_diverse,
                              make_staged_plan(opt.sampler, opt.choice.trunk, opt.choice.branch, opt.sampler.K_t),
                              opt.sampler.horizon, model.schedule(), sample_rng, opt.execution);
            break;
    }
    out.evaluations = r.evaluations;
    out.trajectories.reserve(r.trajectories.size());
    for (const TrajectoryTensor& y : r.trajectories) out.trajectories.push_back(model.to_world(y.values, w.current()));
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// Per-window seed used by evaluate and bench so every sampler sees the same goals.
inline std::uint64_t window_seed(std::uint64_t seed, std::size_t index) {
    return NoiseStream(seed).fork(index).next_u64();
}

struct EvalWindow {
    const TrajectoryWindow* window = nullptr;
    const SemanticGrid* semantic = nullptr;
};

struct EvalSummary {
    double ade = 0.0;  // mean over windows of best-of-N ADE
    double fde = 0.0;
    std::size_t windows = 0;
    std::size_t evaluations = 0;  // per window
    double ms = 0.0;              // mean wall time per window
};

inline EvalSummary evaluate(const TrajectoryModel& model, const std::vector<EvalWindow>& windows,
                            const PredictOptions& opt, std::uint64_t seed,
                            std::vector<PredictionSet>* predictions = nullptr) {
    if (windows.empty()) throw std::invalid_argument("evaluate: no windows");
    EvalSummary s;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        PredictionSet p = predict_window(model, *windows[i].semantic, *windows[i].window, opt, window_seed(seed, i));
        const BestOfN b = best_of_n(p.trajectories, windows[i].window->future);
        s.ade += b.ade;
        s.fde += b.fde;
        s.ms += p.wall_ms;
        if (i == 0) s.evaluations = p.evaluations;
        if (p.evaluations != s.evaluations) throw std::logic_error("evaluate: evaluation count varies across windows");
        if (predictions) predictions->push_back(std::move(p));
    }
    s.windows = windows.size();
    const auto n = static_cast<double>(windows.size());
    s.ade /= n;
    s.fde /= n;
    s.ms /= n;
    return s;
}

// -------------------------------------------------------------------- bench

struct BenchRow {
    std::string sampler;
    SamplerConfig config;
    double ade = 0.0;
    double fde = 0.0;
    std::size_t evals = 0;
    double ms = 0.0;  // median over repeats of mean per-window wall time
};

struct BenchEntry {
    SamplerChoice choice;
    SamplerConfig config;
};

/// DDPM, DDIM and tree sampling at K_t in {5, 20, 50}, then the stage
/// combinations d_ddpm/ddpm, d_ddpm/d_ddpm, ddim/ddim and d_ddpm/ddim.
inline std::vector<BenchEntry> default_bench_grid(const SamplerConfig& base) {
    auto with_kt = [&](int kt) {
        SamplerConfig c = base;
        c.K_t = std::min(kt, base.K);
        return c;
    };
    std::vector<BenchEntry> grid;
    grid.push_back({parse_sampler_choice("ddpm"), with_kt(0)});
    grid.push_back({parse_sampler_choice("ddim"), with_kt(0)});
    for (int kt : {5, 20, 50}) grid.push_back({parse_sampler_choice("ts"), with_kt(kt)});
    grid.push_back({parse_sampler_choice("d_ddpm/ddpm"), with_kt(base.K_t)});
    grid.push_back({parse_sampler_choice("d_ddpm/d_ddpm"), with_kt(base.K_t)});
    grid.push_back({parse_sampler_choice("ddim/ddim"), with_kt(std::max(1, base.K_t * base.K_I / base.K))});
    grid.push_back({parse_sampler_choice("d_ddpm/ddim"), with_kt(base.K_t)});
    return grid;
}

/// One row per entry. Each row runs once as warmup, then `repeats` timed
/// passes; accuracy comes from the first timed pass (all passes are
/// identical given the seed).
inline std::vector<BenchRow> bench_samplers(const TrajectoryModel& model, const std::vector<EvalWindow>& windows,
                                            const std::vector<BenchEntry>& grid, const PredictOptions& base,
                                            std::uint64_t seed, std::size_t repeats = 5) {
    if (repeats < 5) throw std::invalid_argument("bench: need at least 5 timed repeats");
    std::vector<BenchRow> rows;
    for (const BenchEntry& e : grid) {
        PredictOptions opt = base;
        opt.sampler = e.config;
        opt.choice = e.choice;
        evaluate(model, windows, opt, seed);
        std::vector<double> times;
        EvalSummary first;
        for (std::size_t r = 0; r < repeats; ++r) {
            const EvalSummary s = evaluate(model, windows, opt, seed);
            if (r == 0) first = s;
            times.push_back(s.ms);
        }
        std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
        const std::size_t expected = expected_evaluations(e.choice, e.config);
        if (first.evaluations != expected) {
            throw std::logic_error("bench: " + e.choice.name() + " ran " + std::to_string(first.evaluations) +
                                   " evaluations, closed form gives " + std::to_string(expected));
        }
        rows.push_back({e.choice.name(), e.config, first.ade, first.fde, first.evaluations, times[times.size() / 2]});
    }
    return rows;
}

inline constexpr const char* kBenchHeader = "sampler,K,K_I,K_t,eta,N,ade,fde,evals,ms";

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << kBenchHeader << '\n';
    for (const BenchRow& r : rows) {
        const bool uses_kt = r.sampler != "ddpm" && r.sampler != "ddim" && r.sampler != "d_ddpm";
        os << r.sampler << ',' << r.config.K << ',' << r.config.K_I << ',' << (uses_kt ? r.config.K_t : 0) << ','
           << r.config.eta << ',' << r.config.N << ',' << std::setprecision(6) << r.ade << ',' << r.fde << ','
           << r.evals << ',' << std::setprecision(4) << r.ms << '\n';
    }
}

inline constexpr const char* kEvalHeader = "sampler,windows,N,ade,fde,evals,ms";

inline void write_eval_csv(std::ostream& os, const std::string& sampler, const SamplerConfig& cfg,
                           const EvalSummary& s) {
    os << kEvalHeader << '\n'
       << sampler << ',' << s.windows << ',' << cfg.N << ',' << std::setprecision(6) << s.ade << ',' << s.fde << ','
       << s.evaluations << ',' << std::setprecision(4) << s.ms << '\n';
}

// --------------------------------------------------------------- JSON export

inline nlohmann::json to_json(const PredictionSet& p) {
    nlohmann::json trajs = nlohmann::json::array();
    for (const Matrix& m : p.trajectories) {
        nlohmann::json t = nlohmann::json::array();
        for (std::size_t r = 0; r < m.rows(); ++r) t.push_back({m(r, 0), m(r, 1)});
        trajs.push_back(std::move(t));
    }
    return {{"scene", p.scene},
            {"agent", p.agent},
            {"frame_base", p.frame_base},
            {"sampler", p.sampler},
            {"evaluations", p.evaluations},
            {"trajectories", std::move(trajs)}};
}

/// Timing is left out so that identical runs produce identical files.
inline void write_predictions_json(const std::filesystem::path& path, const std::vector<PredictionSet>& preds) {
    nlohmann::json doc = nlohmann::json::array();
    for (const PredictionSet& p : preds) doc.push_back(to_json(p));
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << doc.dump(1) << '\n';
}

}  // namespace trajlab
