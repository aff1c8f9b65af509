#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/config.hpp"
#include "trajlab/data.hpp"
#include "trajlab/eval.hpp"
#include "trajlab/goal.hpp"
#include "trajlab/nn/checkpoint.hpp"
#include "trajlab/train.hpp"

namespace trajlab {

/// A required input file or directory does not exist.
class MissingInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------- dataset on disk
//
// A dataset directory holds, per scene:
//   <scene>.txt      trajectories, "frame agent x y" per line
//   <scene>.sem      semantic grid (optional; an open grid is fitted if absent)
//   <scene>.anchors  known goal anchors, "x y" per line (optional)

struct SceneData {
    std::string name;
    std::vector<Track> tracks;
    SemanticGrid semantic;
    std::vector<Vec2> anchors;
};

struct Dataset {
    std::vector<SceneData> scenes;  // sorted by name
    std::vector<std::string> warnings;

    std::vector<std::string> names() const {
        std::vector<std::string> n;
        for (const SceneData& s : scenes) n.push_back(s.name);
        return n;
    }
    const SceneData& scene(const std::string& name) const {
        for (const SceneData& s : scenes)
            if (s.name == name) return s;
        throw DataError("unknown scene '" + name + "'");
    }
};

inline void write_anchors(const std::filesystem::path& path, const std::vector<Vec2>& anchors) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << std::setprecision(17);
    for (const Vec2& a : anchors) os << a[0] << ' ' << a[1] << '\n';
}

inline std::vector<Vec2> read_anchors(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("cannot open " + path.string());
    std::vector<Vec2> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        Vec2 a{};
        if (!(ls >> a[0] >> a[1])) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'x y'");
        out.push_back(a);
    }
    return out;
}

/// All-walkable two-channel grid covering the tracks plus a 2 m margin; the
/// size is rounded up to a multiple of 4 so both pooling levels are exact.
inline SemanticGrid fit_open_grid(const std::vector<Track>& tracks, double resolution) {
    if (!(resolution > 0.0)) throw std::invalid_argument("grid resolution must be positive");
    Vec2 lo{1e300, 1e300}, hi{-1e300, -1e300};
    for (const Track& t : tracks)
        for (const Vec2& p : t.positions)
            for (int d = 0; d < 2; ++d) {
                lo[d] = std::min(lo[d], p[d]);
                hi[d] = std::max(hi[d], p[d]);
            }
    if (tracks.empty() || lo[0] > hi[0]) lo = hi = Vec2{0.0, 0.0};
    const double margin = 2.0;
    auto cells = [&](int d) {
        const auto n = static_cast<std::size_t>(std::ceil((hi[d] - lo[d] + 2 * margin) / resolution));
        return std::max<std::size_t>(4, (n + 3) / 4 * 4);
    };
    SemanticGrid g;
    g.grid = GridSpec{cells(1), cells(0), Vec2{lo[0] - margin, lo[1] - margin}, resolution};
    g.classes = Planes(2, g.grid.height, g.grid.width);
    std::fill(g.classes.plane(0).begin(), g.classes.plane(0).end(), 1.0);
    return g;
}

inline double scene_scale(const RunConfig& cfg, const std::string& scene) {
    std::string_view rest = cfg.data.scene_scales;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        const auto colon = item.find(':');
        if (colon == std::string_view::npos) throw ConfigError("data.scene_scales: expected name:factor");
        if (item.substr(0, colon) != scene) continue;
        double v = 0.0;
        const std::string_view num = item.substr(colon + 1);
        const auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
        if (ec != std::errc() || p != num.data() + num.size() || !(v > 0.0)) {
            throw ConfigError("data.scene_scales: bad factor for '" + scene + "'");
        }
        return v;
    }
    return cfg.data.scale;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<SceneData>& scenes) {
    std::filesystem::create_directories(dir);
    for (const SceneData& s : scenes) {
        write_trajectory_file(dir / (s.name + ".txt"), s.tracks);
        write_semantic_grid(dir / (s.name + ".sem"), s.semantic);
        if (!s.anchors.empty()) write_anchors(dir / (s.name + ".anchors"), s.anchors);
    }
}

inline Dataset load_dataset(const RunConfig& cfg) {
    const std::filesystem::path dir = cfg.data.dir;
    if (!std::filesystem::is_directory(dir)) throw MissingInputError("dataset directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw MissingInputError("no <scene>.txt files in " + dir.string());

    Dataset ds;
    for (const auto& f : files) {
        SceneData s;
        s.name = f.stem().string();
        ParsedTracks parsed = parse_trajectory_file(f);
        for (auto& w : parsed.warnings) ds.warnings.push_back(std::move(w));
        s.tracks = std::move(parsed.tracks);
        const double scale = scene_scale(cfg, s.name);
        if (scale != 1.0)
            for (Track& t : s.tracks)
                for (Vec2& p : t.positions) p = {p[0] * scale, p[1] * scale};
        const auto sem = dir / (s.name + ".sem");
        if (std::filesystem::exists(sem)) {
            s.semantic = read_semantic_grid(sem);
        } else {
            s.semantic = fit_open_grid(s.tracks, cfg.data.grid_resolution);
            ds.warnings.push_back(s.name + ": no semantic grid, using an open grid fitted to the tracks");
        }
        if (const auto anchors = dir / (s.name + ".anchors"); std::filesystem::exists(anchors)) {
            s.anchors = read_anchors(anchors);
        }
        ds.scenes.push_back(std::move(s));
    }
    return ds;
}

// ------------------------------------------------------------ config mapping

inline SyntheticSceneConfig synthetic_config(const RunConfig& cfg) {
    SyntheticSceneConfig s;
    if (cfg.synthetic.layout == "corridor") {
        s.layout = SceneLayout::corridor;
    } else if (cfg.synthetic.layout == "open") {
        s.layout = SceneLayout::open;
    } else {
        throw ConfigError("synthetic.layout must be corridor or open");
    }
    s.grid_size = cfg.synthetic.grid_size;
    s.resolution = cfg.synthetic.resolution;
    s.anchors = cfg.synthetic.anchors;
    s.track_frames = cfg.synthetic.track_frames;
    s.frame_step = cfg.data.frame_step;
    s.speed_mean = cfg.synthetic.speed_mean;
    s.speed_std = cfg.synthetic.speed_std;
    s.heading_std = cfg.synthetic.heading_std;
    s.max_lateral = cfg.synthetic.max_lateral;
    return s;
}

inline ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig m;
    m.t_h = cfg.data.t_h;
    m.t_f = cfg.data.t_f;
    m.K = cfg.schedule.K;
    m.beta_start = cfg.schedule.beta_start;
    m.beta_end = cfg.schedule.beta_end;
    m.encoder = EncoderConfig{cfg.model.encoder_hidden, cfg.model.feature_dim, cfg.model.position_scale,
                              cfg.model.agent_centric};
    m.embed_dim = cfg.model.embed_dim;
    m.width = cfg.model.width;
    m.blocks = cfg.model.blocks;
    m.goal.channels1 = cfg.model.goal_channels1;
    m.goal.channels2 = cfg.model.goal_channels2;
    m.traj_scale = cfg.model.traj_scale;
    m.sigma_px = cfg.model.sigma_px;
    return m;
}

inline TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.lambda = cfg.train.lambda;
    t.epochs = cfg.train.epochs;
    t.batch_size = cfg.train.batch_size;
    t.lr = cfg.train.lr;
    t.lr_decay = cfg.train.lr_decay;
    t.seed = cfg.run.seed;
    t.teacher_forcing = cfg.train.teacher_forcing;
    t.stop_goal_gradient = cfg.train.stop_goal_gradient;
    t.diffusion_draws = cfg.train.diffusion_draws;
    t.validate();
    return t;
}

inline PredictOptions predict_options(const RunConfig& cfg) {
    PredictOptions o;
    o.sampler = SamplerConfig{cfg.schedule.K, cfg.sampler.K_I, cfg.sampler.K_t, cfg.sampler.eta, cfg.sampler.N,
                              cfg.data.t_f};
    o.sampler.validate();
    o.choice = parse_sampler_choice(cfg.sampler.rule);
    if (cfg.goal.ttst) {
        o.ttst = TtstOptions{cfg.goal.ttst_samples, cfg.goal.cluster, cfg.goal.kmeans_iterations};
    } else {
        o.ttst.reset();
    }
    o.execution = cfg.sampler.parallel ? BranchExecution::parallel : BranchExecution::sequential;
    return o;
}

inline WindowOptions window_options(const RunConfig& cfg) {
    return {cfg.data.t_h, cfg.data.t_f, cfg.data.stride, cfg.data.frame_step};
}

// ------------------------------------------------------------------- splits

struct PreparedSplit {
    std::string held_out;
    std::vector<TrajectoryWindow> train;
    std::vector<TrajectoryWindow> test;
    std::map<std::string, const SemanticGrid*> grids;
    std::vector<std::string> warnings;

    std::vector<TrainingSample> training_samples() const {
        std::vector<TrainingSample> out;
        for (const TrajectoryWindow& w : train) out.push_back({&w, grids.at(w.scene)});
        return out;
    }

    /// At most `limit` test windows (0: all), spread evenly over the split.
    std::vector<EvalWindow> eval_windows(std::size_t limit) const {
        std::vector<EvalWindow> out;
        const std::size_t n = test.size();
        const std::size_t take = limit == 0 ? n : std::min(limit, n);
        for (std::size_t i = 0; i < take; ++i) {
            const TrajectoryWindow& w = test[i * n / take];
            out.push_back({&w, grids.at(w.scene)});
        }
        return out;
    }
};

inline PreparedSplit prepare_split(const Dataset& ds, const RunConfig& cfg) {
    PreparedSplit split;
    const auto names = ds.names();
    split.held_out = cfg.data.held_out.empty() ? names.back() : cfg.data.held_out;
    std::vector<TrajectoryWindow> windows;
    for (const SceneData& s : ds.scenes) {
        auto w = make_windows(s.tracks, window_options(cfg), s.name);
        windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
        split.grids[s.name] = &s.semantic;
    }
    SceneSplit ss = leave_one_scene_out(names, windows, split.held_out);
    split.train = std::move(ss.train);
    split.test = std::move(ss.test);
    split.warnings = std::move(ss.warnings);
    return split;
}

// --------------------------------------------------------------------- runs

inline std::filesystem::path checkpoint_path(const RunConfig& cfg) {
    return cfg.run.checkpoint.empty() ? std::filesystem::path(cfg.run.output_dir) / "model.ckpt"
                                      : std::filesystem::path(cfg.run.checkpoint);
}

/// Resolved configuration written beside every run's outputs.
inline std::filesystem::path write_snapshot(const RunConfig& cfg, const std::string& command) {
    const std::filesystem::path dir = cfg.run.output_dir;
    std::filesystem::create_directories(dir);
    const auto path = dir / (command + ".config.ini");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    cfg.write(os);
    return path;
}

inline TrajectoryModel load_model(const RunConfig& cfg) {
    const auto path = checkpoint_path(cfg);
    if (!std::filesystem::exists(path)) throw MissingInputError("checkpoint not found: " + path.string());
    TrajectoryModel model(model_config(cfg));
    model.load(nn::load_checkpoint(path));
    return model;
}

/// Scene i is generated from fork(i) of the run seed.
inline std::vector<SceneData> run_synth_data(const RunConfig& cfg, std::ostream& log) {
    if (cfg.synthetic.scenes < 1) throw ConfigError("synthetic.scenes must be >= 1");
    const SyntheticSceneConfig sc = synthetic_config(cfg);
    const NoiseStream root(cfg.run.seed);
    std::vector<SceneData> scenes;
    for (std::size_t i = 0; i < cfg.synthetic.scenes; ++i) {
        NoiseStream rng = root.fork(i);
        SyntheticDataset d = generate_synthetic(sc, cfg.synthetic.agents, rng);
        scenes.push_back({"scene" + std::to_string(i), std::move(d.tracks), std::move(d.semantic),
                          std::move(d.anchors)});
    }
    write_dataset(cfg.data.dir, scenes);
    write_snapshot(cfg, "synth-data");
    log << "wrote " << scenes.size() << " scenes x " << cfg.synthetic.agents << " agents to " << cfg.data.dir << '\n';
    return scenes;
}

inline std::string format_number(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline constexpr const char* kMetricsHeader = "epoch,l_goal,l_traj,l_total,lr";

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
    os << m.epoch << ',' << format_number(m.l_goal) << ',' << format_number(m.l_traj) << ','
       << format_number(m.l_total) << ',' << format_number(m.lr) << '\n';
}

inline std::vector<EpochMetrics> run_train(const RunConfig& cfg, std::ostream& log) {
    const TrainConfig tc = train_config(cfg);
    const Dataset ds = load_dataset(cfg);
    for (const auto& w : ds.warnings) log << "warning: " << w << '\n';
    const PreparedSplit split = prepare_split(ds, cfg);
    for (const auto& w : split.warnings) log << "warning: " << w << '\n';
    const std::vector<TrainingSample> data = split.training_samples();
    if (data.empty()) throw DataError("no training windows (held out '" + split.held_out + "')");

    const std::filesystem::path out = cfg.run.output_dir;
    write_snapshot(cfg, "train");
    TrajectoryModel model(model_config(cfg));
    const NoiseStream root(cfg.run.seed);
    model.init(root.fork(0).next_u64());
    nn::Adam opt(nn::AdamOptions{tc.lr});
    const NoiseStream train_rng = root.fork(1);

    std::ofstream metrics(out / "metrics.csv");
    if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
    metrics << kMetricsHeader << '\n';
    std::vector<EpochMetrics> history;
    for (std::size_t e = 1; e <= tc.epochs; ++e) {
        const EpochMetrics m = train_epoch(model, data, tc, opt, e, train_rng);
        write_metrics_row(metrics, m);
        metrics.flush();
        log << "epoch " << e << "/" << tc.epochs << "  l_goal " << m.l_goal << "  l_traj " << m.l_traj << "  lr "
            << m.lr << '\n';
        history.push_back(m);
    }
    nn::Checkpoint ck = model.to_checkpoint();
    ck.meta["epochs"] = std::to_string(tc.epochs);
    nn::save_checkpoint(checkpoint_path(cfg), ck);
    log << "saved " << checkpoint_path(cfg).string() << '\n';
    return history;
}

inline std::vector<PredictionSet> run_predict(const RunConfig& cfg, std::ostream& log) {
    const PredictOptions opt = predict_options(cfg);
    const TrajectoryModel model = load_model(cfg);
    const Dataset ds = load_dataset(cfg);
    const PreparedSplit split = prepare_split(ds, cfg);
    const auto windows = split.eval_windows(cfg.eval.max_windows);
    if (windows.empty()) throw DataError("no test windows in held-out scene '" + split.held_out + "'");
    write_snapshot(cfg, "predict");
    std::vector<PredictionSet> preds;
    evaluate(model, windows, opt, cfg.run.seed, &preds);
    const auto path = std::filesystem::path(cfg.run.output_dir) / "predictions.json";
    write_predictions_json(path, preds);
    log << "wrote " << preds.size() << " prediction sets to " << path.string() << '\n';
    return preds;
}

inline EvalSummary run_eval(const RunConfig& cfg, std::ostream& log) {
    const PredictOptions opt = predict_options(cfg);
    const TrajectoryModel model = load_model(cfg);
    const Dataset ds = load_dataset(cfg);
    const PreparedSplit split = prepare_split(ds, cfg);
    const auto windows = split.eval_windows(cfg.eval.max_windows);
    if (windows.empty()) throw DataError("no test windows in held-out scene '" + split.held_out + "'");
    write_snapshot(cfg, "eval");
    const EvalSummary s = evaluate(model, windows, opt, cfg.run.seed);
    const auto path = std::filesystem::path(cfg.run.output_dir) / "eval.csv";
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_eval_csv(os, opt.choice.name(), opt.sampler, s);
    log << opt.choice.name() << ": ADE_" << opt.sampler.N << " " << s.ade << "  FDE_" << opt.sampler.N << " "
        << s.fde << " over " << s.windows << " windows\n";
    return s;
}

inline std::vector<BenchRow> run_bench(const RunConfig& cfg, std::ostream& log) {
    const PredictOptions opt = predict_options(cfg);
    const TrajectoryModel model = load_model(cfg);
    const Dataset ds = load_dataset(cfg);
    const PreparedSplit split = prepare_split(ds, cfg);
    const auto windows = split.eval_windows(cfg.eval.bench_windows);
    if (windows.empty()) throw DataError("no test windows in held-out scene '" + split.held_out + "'");
    write_snapshot(cfg, "bench");
    const auto rows =
        bench_samplers(model, windows, default_bench_grid(opt.sampler), opt, cfg.run.seed, cfg.eval.bench_repeats);
    const auto path = std::filesystem::path(cfg.run.output_dir) / "bench.csv";
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_bench_csv(os, rows);
    write_bench_csv(log, rows);
    return rows;
}

}  // namespace trajlab
