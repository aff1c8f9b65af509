#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace trajlab {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every tunable of a run. Defaults are desk scale; reference values used at
/// full scale are noted beside the keys.
struct RunConfig {
    struct Run {
        std::uint64_t seed = 0;
        std::string output_dir = "runs/default";
        std::string checkpoint;  // empty: <output_dir>/model.ckpt
    } run;
    struct Schedule {
        int K = 100;
        double beta_start = 1e-4;
        double beta_end = 0.05;
    } schedule;
    struct Sampler {
        std::string rule = "ts";  // ts | ddpm | d_ddpm | ddim | <trunk>/<branch>
        int K_I = 20;
        int K_t = 20;
        double eta = 1.0;  // 0 or 1 at full scale
        std::size_t N = 20;
        bool parallel = false;
    } sampler;
    struct Model {
        std::size_t encoder_hidden = 64;
        std::size_t feature_dim = 64;
        std::size_t embed_dim = 32;
        std::size_t width = 64;
        std::size_t blocks = 3;
        std::size_t goal_channels1 = 8;
        std::size_t goal_channels2 = 16;
        double traj_scale = 5.0;
        double position_scale = 5.0;
        bool agent_centric = true;
        double sigma_px = 4.0;
    } model;
    struct Train {
        double lambda = 20.0;  // 20 for ETH/UCY, 40 for SDD at full scale
        std::size_t epochs = 200;  // 270 at full scale
        std::size_t batch_size = 32;
        double lr = 1e-3;
        double lr_decay = 0.99;
        bool teacher_forcing = true;
        bool stop_goal_gradient = true;
        std::size_t diffusion_draws = 1;
    } train;
    struct Data {
        std::string dir = "data/synthetic";
        std::string held_out;  // empty: last scene in name order
        std::size_t t_h = 8;
        std::size_t t_f = 12;
        std::size_t stride = 1;
        std::int64_t frame_step = 10;
        double scale = 1.0;          // coordinate multiplier applied on load
        std::string scene_scales;    // per-scene overrides, "name:factor,name:factor"
        double grid_resolution = 0.5;  // for scenes without a semantic grid file
    } data;
    struct Synthetic {
        std::string layout = "corridor";  // corridor | open
        std::size_t scenes = 2;
        std::size_t agents = 2000;  // per scene
        std::size_t grid_size = 32;
        double resolution = 0.5;
        std::size_t anchors = 3;
        std::size_t track_frames = 20;
        double speed_mean = 0.6;
        double speed_std = 0.04;
        double heading_std = 0.05;
        double max_lateral = 0.8;
    } synthetic;
    struct Goal {
        bool ttst = true;
        std::size_t ttst_samples = 1000;
        bool cluster = true;
        int kmeans_iterations = 20;
    } goal;
    struct Eval {
        std::size_t max_windows = 200;  // 0: all test windows
        std::size_t bench_repeats = 5;
        std::size_t bench_windows = 20;
    } eval;

    RunConfig() { build_fields(); }
    RunConfig(const RunConfig& o) : run(o.run), schedule(o.schedule), sampler(o.sampler), model(o.model),
        train(o.train), data(o.data), synthetic(o.synthetic), goal(o.goal), eval(o.eval) {
        build_fields();
    }
    RunConfig& operator=(const RunConfig& o) {
        run = o.run;
        schedule = o.schedule;
        sampler = o.sampler;
        model = o.model;
        train = o.train;
        data = o.data;
        synthetic = o.synthetic;
        goal = o.goal;
        eval = o.eval;
        return *this;
    }

    /// Sets "section.key" from its text form.
    void set(std::string_view dotted, std::string_view value) {
        const auto dot = dotted.find('.');
        if (dot == std::string_view::npos) throw ConfigError("expected section.key, got '" + std::string(dotted) + "'");
        set(dotted.substr(0, dot), dotted.substr(dot + 1), value);
    }

    void set(std::string_view section, std::string_view key, std::string_view value) {
        Field* f = find(section, key);
        if (!f) throw ConfigError("unknown config key '" + std::string(section) + "." + std::string(key) + "'");
        try {
            f->set(trim(value));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
        }
    }

    std::string get(std::string_view dotted) const {
        const auto dot = dotted.find('.');
        const Field* f = dot == std::string_view::npos ? nullptr
                                                       : const_cast<RunConfig*>(this)->find(dotted.substr(0, dot),
                                                                                           dotted.substr(dot + 1));
        if (!f) throw ConfigError("unknown config key '" + std::string(dotted) + "'");
        return f->get();
    }

    /// "section.key=value".
    void apply_override(std::string_view assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string_view::npos) throw ConfigError("override must be section.key=value: '" +
                                                            std::string(assignment) + "'");
        set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
    }

    /// Reads "[section]" headers and "key = value" lines; '#' starts a comment.
    void parse(std::istream& is, const std::string& source) {
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string_view l = trim(line);
            if (l.empty()) continue;
            const std::string where = source + ":" + std::to_string(lineno);
            if (l.front() == '[') {
                if (l.back() != ']') throw ConfigError(where + ": malformed section header");
                section = std::string(trim(l.substr(1, l.size() - 2)));
                if (!has_section(section)) throw ConfigError(where + ": unknown section [" + section + "]");
                continue;
            }
            const auto eq = l.find('=');
            if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
            if (section.empty()) throw ConfigError(where + ": key outside of a section");
            try {
                set(section, trim(l.substr(0, eq)), l.substr(eq + 1));
            } catch (const ConfigError& e) {
                throw ConfigError(where + ": " + e.what());
            }
        }
    }

    void load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw std::filesystem::filesystem_error("cannot open config", path,
                                                         std::make_error_code(std::errc::no_such_file_or_directory));
        parse(is, path.string());
    }

    /// TRAJLAB_SEED, when set, replaces run.seed.
    void apply_environment() {
        if (const char* s = std::getenv("TRAJLAB_SEED"); s && *s) set("run", "seed", s);
    }

    /// Resolved config in the same syntax parse() reads.
    void write(std::ostream& os) const {
        std::string section;
        for (const Field& f : fields_) {
            if (f.section != section) {
                if (!section.empty()) os << '\n';
                section = f.section;
                os << '[' << section << "]\n";
            }
            os << f.key << " = " << f.get() << '\n';
        }
    }

    std::string snapshot() const {
        std::ostringstream os;
        write(os);
        return os.str();
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const Field& f : fields_) out.push_back(f.section + "." + f.key);
        return out;
    }

private:
    struct Field {
        std::string section;
        std::string key;
        std::function<void(std::string_view)> set;
        std::function<std::string()> get;
    };

    static std::string_view trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    template <class T>
    static T parse_value(std::string_view s) {
        if constexpr (std::is_same_v<T, bool>) {
            if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
            if (s == "false" || s == "0" || s == "no" || s == "off") return false;
            throw ConfigError("expected a boolean, got '" + std::string(s) + "'");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
            return std::string(s);
        } else {
            T v{};
            const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
                throw ConfigError("invalid number '" + std::string(s) + "'");
            }
            if constexpr (std::is_floating_point_v<T>) {
                if (!std::isfinite(v)) throw ConfigError("non-finite number '" + std::string(s) + "'");
            }
            return v;
        }
    }

    template <class T>
    static std::string format_value(const T& v) {
        if constexpr (std::is_same_v<T, bool>) {
            return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
            return v.empty() ? "\"\"" : v;
        } else {
            char buf[64];
            const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
            return std::string(buf, p);
        }
    }

    template <class T>
    void add(const char* section, const char* key, T& member) {
        fields_.push_back({section, key, [&member](std::string_view s) { member = parse_value<T>(s); },
                           [&member] { return format_value(member); }});
    }

    void build_fields() {
        fields_.clear();
        add("run", "seed", run.seed);
        add("run", "output_dir", run.output_dir);
        add("run", "checkpoint", run.checkpoint);
        add("schedule", "K", schedule.K);
        add("schedule", "beta_start", schedule.beta_start);
        add("schedule", "beta_end", schedule.beta_end);
        add("sampler", "rule", sampler.rule);
        add("sampler", "K_I", sampler.K_I);
        add("sampler", "K_t", sampler.K_t);
        add("sampler", "eta", sampler.eta);
        add("sampler", "N", sampler.N);
        add("sampler", "parallel", sampler.parallel);
        add("model", "encoder_hidden", model.encoder_hidden);
        add("model", "feature_dim", model.feature_dim);
        add("model", "embed_dim", model.embed_dim);
        add("model", "width", model.width);
        add("model", "blocks", model.blocks);
        add("model", "goal_channels1", model.goal_channels1);
        add("model", "goal_channels2", model.goal_channels2);
        add("model", "traj_scale", model.traj_scale);
        add("model", "position_scale", model.position_scale);
        add("model", "agent_centric", model.agent_centric);
        add("model", "sigma_px", model.sigma_px);
        add("train", "lambda", train.lambda);
        add("train", "epochs", train.epochs);
        add("train", "batch_size", train.batch_size);
        add("train", "lr", train.lr);
        add("train", "lr_decay", train.lr_decay);
        add("train", "teacher_forcing", train.teacher_forcing);
        add("train", "stop_goal_gradient", train.stop_goal_gradient);
        add("train", "diffusion_draws", train.diffusion_draws);
        add("data", "dir", data.dir);
        add("data", "held_out", data.held_out);
        add("data", "t_h", data.t_h);
        add("data", "t_f", data.t_f);
        add("data", "stride", data.stride);
        add("data", "frame_step", data.frame_step);
        add("data", "scale", data.scale);
        add("data", "scene_scales", data.scene_scales);
        add("data", "grid_resolution", data.grid_resolution);
        add("synthetic", "layout", synthetic.layout);
        add("synthetic", "scenes", synthetic.scenes);
        add("synthetic", "agents", synthetic.agents);
        add("synthetic", "grid_size", synthetic.grid_size);
        add("synthetic", "resolution", synthetic.resolution);
        add("synthetic", "anchors", synthetic.anchors);
        add("synthetic", "track_frames", synthetic.track_frames);
        add("synthetic", "speed_mean", synthetic.speed_mean);
        add("synthetic", "speed_std", synthetic.speed_std);
        add("synthetic", "heading_std", synthetic.heading_std);
        add("synthetic", "max_lateral", synthetic.max_lateral);
        add("goal", "ttst", goal.ttst);
        add("goal", "ttst_samples", goal.ttst_samples);
        add("goal", "cluster", goal.cluster);
        add("goal", "kmeans_iterations", goal.kmeans_iterations);
        add("eval", "max_windows", eval.max_windows);
        add("eval", "bench_repeats", eval.bench_repeats);
        add("eval", "bench_windows", eval.bench_windows);
    }

    Field* find(std::string_view section, std::string_view key) {
        for (Field& f : fields_)
            if (f.section == section && f.key == key) return &f;
        return nullptr;
    }

    bool has_section(std::string_view section) const {
        for (const Field& f : fields_)
            if (f.section == section) return true;
        return false;
    }

    std::vector<Field> fields_;
};

}  // namespace trajlab
