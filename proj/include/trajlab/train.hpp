#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/condition.hpp"
#include "trajlab/data.hpp"
#include "trajlab/denoiser.hpp"
#include "trajlab/goal.hpp"
#include "trajlab/nn/adam.hpp"
#include "trajlab/nn/checkpoint.hpp"
#include "trajlab/sampler.hpp"
#include "trajlab/schedule.hpp"

namespace trajlab {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ losses

inline constexpr double kBceClip = 1e-7;

/// Mean binary cross-entropy over every pixel of every channel. Predictions
/// are clamped to [1e-7, 1 - 1e-7].
inline double goal_loss(const Planes& pred, const Planes& target) {
    if (!pred.same_shape(target)) throw std::invalid_argument("goal_loss: shape mismatch");
    if (pred.data.empty()) throw std::invalid_argument("goal_loss: empty maps");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double p = std::clamp(pred.data[i], kBceClip, 1.0 - kBceClip);
        const double t = target.data[i];
        sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    return sum / static_cast<double>(pred.data.size());
}

inline double goal_loss(const HeatMapStack& pred, const HeatMapStack& target) {
    if (!(pred.grid == target.grid)) throw std::invalid_argument("goal_loss: grid mismatch");
    return goal_loss(pred.maps, target.maps);
}

/// BCE of sigmoid(logits) against target, and its gradient w.r.t. the
/// logits. The gradient is zero where the clamp is active.
inline double goal_loss_from_logits(const Planes& logits, const Planes& target, Planes* dlogits) {
    if (!logits.same_shape(target)) throw std::invalid_argument("goal_loss: shape mismatch");
    const double inv_n = 1.0 / static_cast<double>(logits.data.size());
    double sum = 0.0;
    if (dlogits) *dlogits = Planes(logits.channels, logits.height, logits.width);
    for (std::size_t i = 0; i < logits.data.size(); ++i) {
        const double raw = nn::sigmoid(logits.data[i]);
        const double p = std::clamp(raw, kBceClip, 1.0 - kBceClip);
        const double t = target.data[i];
        sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        if (dlogits) dlogits->data[i] = (p == raw) ? (p - t) * inv_n : 0.0;
    }
    return sum * inv_n;
}

/// L_traj + lambda * L_goal.
inline double combined_loss(double l_traj, double l_goal, double lambda) {
    if (l_traj < 0.0 || l_goal < 0.0 || lambda < 0.0) throw std::invalid_argument("combined_loss: negative input");
    return l_traj + lambda * l_goal;
}

struct DiffusionDraw {
    int k = 1;
    Matrix eps;
};

/// k ~ U{1..K}, eps ~ N(0, I).
inline DiffusionDraw draw_diffusion(const NoiseSchedule& s, std::size_t horizon, NoiseStream& rng) {
    DiffusionDraw d;
    d.k = static_cast<int>(rng.index_below(static_cast<std::size_t>(s.steps()))) + 1;
    d.eps = rng.normal_matrix(horizon, 2);
    return d;
}

/// Mean squared error between predicted and drawn noise for one sample.
template <class Feature, NoisePredictor<Feature> Predictor>
double diffusion_loss(const TrajectoryTensor& y0, const Feature& f, const Predictor& predictor,
                      const NoiseSchedule& s, NoiseStream& rng) {
    const DiffusionDraw d = draw_diffusion(s, y0.values.rows(), rng);
    const TrajectoryTensor yk = forward_noise(y0, d.k, d.eps, s);
    const Matrix pred = predictor(d.k, yk.values, f);
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - d.eps[i];
        sum += e * e;
    }
    return sum / static_cast<double>(pred.size());
}

// ------------------------------------------------------------------- model

struct ModelConfig {
    std::size_t t_h = 8;
    std::size_t t_f = 12;
    int K = 100;
    double beta_start = 1e-4;
    double beta_end = 0.05;
    EncoderConfig encoder;
    std::size_t embed_dim = 32;
    std::size_t width = 64;
    std::size_t blocks = 3;
    GoalNetConfig goal;
    double traj_scale = 5.0;  // meters per diffusion unit
    double sigma_px = 4.0;
};

/// Goal net, condition encoder, denoiser and their shared schedule.
class TrajectoryModel {
public:
    explicit TrajectoryModel(const ModelConfig& cfg)
        : cfg_(cfg),
          schedule_(make_linear_schedule(cfg.K, cfg.beta_start, cfg.beta_end)),
          goal_net_(with_frames(cfg)),
          encoder_(cfg.encoder),
          denoiser_(DenoiserConfig{cfg.t_f, cfg.encoder.feature_dim, cfg.embed_dim, cfg.width, cfg.blocks}) {}

    TrajectoryModel(const TrajectoryModel& o)
        : cfg_(o.cfg_), schedule_(o.schedule_), goal_net_(o.goal_net_), encoder_(o.encoder_), denoiser_(o.denoiser_) {}
    TrajectoryModel& operator=(const TrajectoryModel&) = delete;

    void init(std::uint64_t seed) {
        NoiseStream rng(seed);
        NoiseStream g = rng.fork(0), e = rng.fork(1), d = rng.fork(2);
        goal_net_.init(g);
        encoder_.init(e);
        denoiser_.init(d);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    GoalNet& goal_net() noexcept { return goal_net_; }
    const GoalNet& goal_net() const noexcept { return goal_net_; }
    ConditionEncoder& encoder() noexcept { return encoder_; }
    const ConditionEncoder& encoder() const noexcept { return encoder_; }
    Denoiser& denoiser() noexcept { return denoiser_; }
    const Denoiser& denoiser() const noexcept { return denoiser_; }

    nn::ParameterList goal_parameters() { return goal_net_.parameters(); }
    nn::ParameterList trajectory_parameters() {
        nn::ParameterList p = encoder_.parameters();
        nn::append(p, denoiser_.parameters());
        return p;
    }
    nn::ParameterList parameters() {
        nn::ParameterList p = goal_parameters();
        nn::append(p, trajectory_parameters());
        return p;
    }

    nn::Checkpoint to_checkpoint() {
        nn::Checkpoint ck;
        nn::store_parameters(ck, parameters());
        ck.meta = describe();
        return ck;
    }

    /// Restores parameters; architecture metadata must match this model.
    void load(const nn::Checkpoint& ck) {
        for (const auto& [k, v] : describe()) {
            auto it = ck.meta.find(k);
            if (it == ck.meta.end() || it->second != v) {
                throw nn::CheckpointError("checkpoint/config mismatch on '" + k + "': checkpoint " +
                                          (it == ck.meta.end() ? std::string("<missing>") : it->second) +
                                          ", config " + v);
            }
        }
        nn::restore_parameters(ck, parameters());
    }

    std::map<std::string, std::string> describe() const {
        auto num = [](double v) {
            std::ostringstream os;
            os << std::setprecision(17) << v;
            return os.str();
        };
        return {{"t_h", std::to_string(cfg_.t_h)},
                {"t_f", std::to_string(cfg_.t_f)},
                {"K", std::to_string(cfg_.K)},
                {"beta_start", num(cfg_.beta_start)},
                {"beta_end", num(cfg_.beta_end)},
                {"encoder_hidden", std::to_string(cfg_.encoder.hidden)},
                {"feature_dim", std::to_string(cfg_.encoder.feature_dim)},
                {"position_scale", num(cfg_.encoder.position_scale)},
                {"agent_centric", cfg_.encoder.agent_centric ? "1" : "0"},
                {"embed_dim", std::to_string(cfg_.embed_dim)},
                {"width", std::to_string(cfg_.width)},
                {"blocks", std::to_string(cfg_.blocks)},
                {"goal_channels1", std::to_string(cfg_.goal.channels1)},
                {"goal_channels2", std::to_string(cfg_.goal.channels2)},
                {"semantic_channels", std::to_string(cfg_.goal.semantic_channels)},
                {"traj_scale", num(cfg_.traj_scale)},
                {"sigma_px", num(cfg_.sigma_px)}};
    }

    /// Future displacement from the current position, in diffusion units.
    TrajectoryTensor target_trajectory(const TrajectoryWindow& w) const {
        const Vec2 c = w.current();
        TrajectoryTensor y{Matrix(w.future.rows(), 2), 0};
        for (std::size_t t = 0; t < w.future.rows(); ++t) {
            y.values(t, 0) = (w.future(t, 0) - c[0]) / cfg_.traj_scale;
            y.values(t, 1) = (w.future(t, 1) - c[1]) / cfg_.traj_scale;
        }
        return y;
    }

    /// Inverse of target_trajectory.
    Matrix to_world(const Matrix& y, const Vec2& current) const {
        Matrix out(y.rows(), 2);
        for (std::size_t t = 0; t < y.rows(); ++t) {
            out(t, 0) = current[0] + cfg_.traj_scale * y(t, 0);
            out(t, 1) = current[1] + cfg_.traj_scale * y(t, 1);
        }
        return out;
    }

    HeatMapStack history_maps(const TrajectoryWindow& w, const GridSpec& grid) const {
        return {grid, rasterize_positions(w.history, grid, cfg_.sigma_px), false};
    }
    HeatMapStack future_maps(const TrajectoryWindow& w, const GridSpec& grid) const {
        return {grid, rasterize_positions(w.future, grid, cfg_.sigma_px), false};
    }

private:
    static GoalNetConfig with_frames(const ModelConfig& cfg) {
        GoalNetConfig g = cfg.goal;
        g.history_frames = cfg.t_h;
        g.future_frames = cfg.t_f;
        return g;
    }

    ModelConfig cfg_;
    NoiseSchedule schedule_;
    GoalNet goal_net_;
    ConditionEncoder encoder_;
    Denoiser denoiser_;
};

// ---------------------------------------------------------------- training

struct TrainConfig {
    double lambda = 20.0;
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double lr_decay = 0.99;
    std::uint64_t seed = 0;
    bool teacher_forcing = true;
    bool stop_goal_gradient = true;
    // (k, eps) draws averaged into each sample's L_traj; the trajectory branch
    // is cheap next to the goal net, so extra draws cut gradient variance
    std::size_t diffusion_draws = 1;

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("train: lambda must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
        if (diffusion_draws < 1) throw std::invalid_argument("train: diffusion_draws must be >= 1");
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
        if (!(lr_decay > 0.0)) throw std::invalid_argument("train: lr_decay must be positive");
    }
};

/// A window paired with the semantic grid of its scene.
struct TrainingSample {
    const TrajectoryWindow* window = nullptr;
    const SemanticGrid* semantic = nullptr;
};

struct SampleLosses {
    double traj = 0.0;
    double goal = 0.0;
};

/// Which loss terms to backpropagate, and with what weight.
struct LossWeights {
    double traj = 1.0;
    double goal = 1.0;  // multiplies L_goal; pass lambda for the combined loss
};

/// Forward + backward for one sample. Gradients of
/// weights.traj * L_traj + weights.goal * L_goal are accumulated into the
/// model parameters; the unweighted losses are returned. L_traj is the mean
/// over `draws`.
///
/// With teacher forcing the trajectory branch sees the ground-truth goal.
/// Without it, the goal is the soft-argmax of the predicted goal map, and
/// trajectory-loss gradients reach the goal net unless stop_goal_gradient.
inline SampleLosses accumulate_sample(TrajectoryModel& model, const TrainingSample& sample, const TrainConfig& cfg,
                                      std::span<const DiffusionDraw> draws, const LossWeights& weights) {
    if (draws.empty()) throw std::invalid_argument("accumulate_sample: no diffusion draws");
    const TrajectoryWindow& w = *sample.window;
    const SemanticGrid& sem = *sample.semantic;
    SampleLosses out;

    GoalNet::Cache gcache;
    const Planes logits = model.goal_net().forward(goal_net_input(sem, model.history_maps(w, sem.grid)), &gcache);
    Planes dlogits;
    out.goal = goal_loss_from_logits(logits, model.future_maps(w, sem.grid).maps, &dlogits);
    for (double& v : dlogits.data) v *= weights.goal;

    const std::size_t last = logits.channels - 1;
    std::vector<double> goal_probs;
    Vec2 goal = w.final_position();
    if (!cfg.teacher_forcing) {
        const auto lp = logits.plane(last);
        goal_probs.resize(lp.size());
        for (std::size_t i = 0; i < lp.size(); ++i) goal_probs[i] = nn::sigmoid(lp[i]);
        goal = soft_argmax(goal_probs, sem.grid);
    }

    ConditionEncoder::Cache ecache;
    const ConditionFeature f = model.encoder().encode(w.history, goal, FeatureKind::diverse, &ecache);
    const TrajectoryTensor y0 = model.target_trajectory(w);
    const double per_draw = 1.0 / static_cast<double>(draws.size());
    std::vector<double> df(f.vector.size(), 0.0);
    for (const DiffusionDraw& draw : draws) {
        const TrajectoryTensor yk = forward_noise(y0, draw.k, draw.eps, model.schedule());
        Denoiser::Cache dcache;
        const Matrix pred = model.denoiser().predict_noise(draw.k, yk.values, f.vector, &dcache);
        Matrix deps(pred.rows(), pred.cols());
        const double inv_n = per_draw / static_cast<double>(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double e = pred[i] - draw.eps[i];
            out.traj += e * e * inv_n;
            deps[i] = weights.traj * 2.0 * e * inv_n;
        }
        if (weights.traj != 0.0) {
            const std::vector<double> d = model.denoiser().backward(dcache, deps);
            for (std::size_t i = 0; i < df.size(); ++i) df[i] += d[i];
        }
    }

    if (weights.traj != 0.0) {
        const Vec2 dgoal = model.encoder().backward(ecache, df);
        if (!cfg.teacher_forcing && !cfg.stop_goal_gradient) {
            const std::vector<double> dprob = soft_argmax_backward(goal_probs, sem.grid, dgoal);
            std::span<double> dl = dlogits.plane(last);
            for (std::size_t i = 0; i < dl.size(); ++i) dl[i] += dprob[i] * goal_probs[i] * (1.0 - goal_probs[i]);
        }
    }
    if (weights.goal != 0.0 || (!cfg.teacher_forcing && !cfg.stop_goal_gradient && weights.traj != 0.0)) {
        model.goal_net().backward(gcache, dlogits);
    }
    return out;
}

inline SampleLosses accumulate_sample(TrajectoryModel& model, const TrainingSample& sample, const TrainConfig& cfg,
                                      const DiffusionDraw& draw, const LossWeights& weights) {
    return accumulate_sample(model, sample, cfg, std::span<const DiffusionDraw>(&draw, 1), weights);
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double l_goal = 0.0;
    double l_traj = 0.0;
    double l_total = 0.0;
    double lr = 0.0;
};

/// One pass over `data` in shuffled mini-batches, one Adam step per batch,
/// then lr *= lr_decay. Draws come from rng.fork(epoch) only.
inline EpochMetrics train_epoch(TrajectoryModel& model, const std::vector<TrainingSample>& data,
                                const TrainConfig& cfg, nn::Adam& opt, std::size_t epoch, const NoiseStream& rng) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_epoch: no training data");
    NoiseStream erng = rng.fork(epoch);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), erng.engine());

    const nn::ParameterList params = model.parameters();
    EpochMetrics m{epoch, 0.0, 0.0, 0.0, opt.options().lr};
    const std::size_t batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::vector<DiffusionDraw> draws;
    for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t lo = b * cfg.batch_size;
        const std::size_t hi = std::min(data.size(), lo + cfg.batch_size);
        const double scale = 1.0 / static_cast<double>(hi - lo);
        const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b);
        nn::zero_grads(params);
        double bt = 0.0, bg = 0.0;
        try {
            for (std::size_t i = lo; i < hi; ++i) {
                draws.clear();
                for (std::size_t d = 0; d < cfg.diffusion_draws; ++d)
                    draws.push_back(draw_diffusion(model.schedule(), model.config().t_f, erng));
                const SampleLosses l =
                    accumulate_sample(model, data[order[i]], cfg, draws, {scale, scale * cfg.lambda});
                bt += l.traj;
                bg += l.goal;
            }
        } catch (const std::domain_error& e) {
            // layers reject non-finite activations before a loss exists
            throw TrainingError("non-finite loss in " + where + ": " + e.what());
        }
        if (!std::isfinite(bt) || !std::isfinite(bg)) throw TrainingError("non-finite loss in " + where);
        try {
            opt.update(params);
        } catch (const std::domain_error& e) {
            throw TrainingError(std::string(e.what()) + " (" + where + ")");
        }
        m.l_traj += bt;
        m.l_goal += bg;
    }
    m.l_traj /= static_cast<double>(data.size());
    m.l_goal /= static_cast<double>(data.size());
    m.l_total = combined_loss(m.l_traj, m.l_goal, cfg.lambda);
    opt.options().lr *= cfg.lr_decay;
    return m;
}

/// Diffusion loss over a fixed set of draws (seeded by `seed`), with the
/// ground-truth goal. Used to track validation progress across epochs.
inline double validation_diffusion_loss(const TrajectoryModel& model, const std::vector<TrajectoryWindow>& windows,
                                        std::uint64_t seed) {
    if (windows.empty()) return 0.0;
    NoiseStream rng(seed);
    double total = 0.0;
    for (const TrajectoryWindow& w : windows) {
        const ConditionFeature f = model.encoder().encode(w.history, w.final_position(), FeatureKind::diverse);
        total += diffusion_loss(model.target_trajectory(w), f, model.denoiser(), model.schedule(), rng);
    }
    return total / static_cast<double>(windows.size());
}

}  // namespace trajlab
