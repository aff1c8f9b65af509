#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/nn/layers.hpp"
#include "trajlab/tensor.hpp"

namespace trajlab {

/// Per-frame [D(2), X(2), V(2), A(2)]: goal offset x_t - g, position,
/// velocity, acceleration. One row per history frame.
struct AugmentedState {
    static constexpr std::size_t kWidth = 8;
    Matrix rows;
};

/// Builds the augmented history. V_t = x_t - x_{t-1} and A_t = V_t - V_{t-1},
/// with the first row of each copied from the second.
inline AugmentedState augment_state(const Matrix& history, const Vec2& goal) {
    if (history.cols() != 2) throw std::invalid_argument("augment_state: history must be t_h x 2");
    const std::size_t th = history.rows();
    if (th < 2) throw std::invalid_argument("augment_state: need at least two history frames");
    Matrix vel(th, 2), acc(th, 2);
    for (std::size_t t = 1; t < th; ++t)
        for (std::size_t d = 0; d < 2; ++d) vel(t, d) = history(t, d) - history(t - 1, d);
    for (std::size_t d = 0; d < 2; ++d) vel(0, d) = vel(1, d);
    for (std::size_t t = 1; t < th; ++t)
        for (std::size_t d = 0; d < 2; ++d) acc(t, d) = vel(t, d) - vel(t - 1, d);
    for (std::size_t d = 0; d < 2; ++d) acc(0, d) = acc(1, d);

    AugmentedState s{Matrix(th, AugmentedState::kWidth)};
    for (std::size_t t = 0; t < th; ++t) {
        for (std::size_t d = 0; d < 2; ++d) {
            s.rows(t, d) = history(t, d) - goal[d];
            s.rows(t, 2 + d) = history(t, d);
            s.rows(t, 4 + d) = vel(t, d);
            s.rows(t, 6 + d) = acc(t, d);
        }
    }
    return s;
}

/// Shifts history and goal so the last observed position is the origin.
inline std::pair<Matrix, Vec2> to_agent_frame(const Matrix& history, const Vec2& goal) {
    const std::size_t last = history.rows() - 1;
    const Vec2 origin{history(last, 0), history(last, 1)};
    Matrix h = history;
    for (std::size_t t = 0; t < h.rows(); ++t) {
        h(t, 0) -= origin[0];
        h(t, 1) -= origin[1];
    }
    return {std::move(h), Vec2{goal[0] - origin[0], goal[1] - origin[1]}};
}

enum class FeatureKind { common, diverse };

struct ConditionFeature {
    std::vector<double> vector;
    FeatureKind kind = FeatureKind::diverse;
    Vec2 goal{0.0, 0.0};

    friend bool operator==(const ConditionFeature&, const ConditionFeature&) = default;
};

struct EncoderConfig {
    std::size_t hidden = 64;
    std::size_t feature_dim = 64;
    double position_scale = 5.0;  // meters per input unit
    bool agent_centric = true;
};

/// Recurrent encoder over augmented states, shared by common and diverse goals.
class ConditionEncoder {
public:
    struct Cache {
        Matrix input;  // scaled augmented rows
        std::vector<nn::LstmCell::Cache> steps;
    };

    ConditionEncoder() = default;
    explicit ConditionEncoder(EncoderConfig cfg)
        : cfg_(cfg),
          lstm_(AugmentedState::kWidth, cfg.hidden, "encoder.lstm"),
          proj_(cfg.hidden, cfg.feature_dim, "encoder.proj") {}

    const EncoderConfig& config() const noexcept { return cfg_; }
    std::size_t feature_dim() const noexcept { return cfg_.feature_dim; }

    void init(NoiseStream& rng) {
        lstm_.init(rng);
        proj_.init(rng);
    }

    /// Encoder input for one (history, goal): augmented, optionally
    /// agent-centred, then divided by position_scale.
    Matrix prepare(const Matrix& history, const Vec2& goal) const {
        AugmentedState s = cfg_.agent_centric ? [&] {
            auto [h, g] = to_agent_frame(history, goal);
            return augment_state(h, g);
        }()
                                              : augment_state(history, goal);
        s.rows *= 1.0 / cfg_.position_scale;
        return std::move(s.rows);
    }

    ConditionFeature encode(const Matrix& history, const Vec2& goal, FeatureKind kind, Cache* cache = nullptr) const {
        Cache local;
        Cache& c = cache ? *cache : local;
        c.input = prepare(history, goal);
        c.steps = lstm_.forward(c.input);
        ConditionFeature f{proj_.forward(c.steps.back().h), kind, goal};
        for (double v : f.vector) {
            if (!std::isfinite(v)) throw std::domain_error("ConditionEncoder: non-finite activation");
        }
        return f;
    }

    /// Accumulates parameter gradients for dL/df; returns dL/dgoal.
    Vec2 backward(const Cache& cache, std::span<const double> dfeature) {
        std::vector<double> dh(cfg_.hidden);
        proj_.backward(cache.steps.back().h, dfeature, dh);
        const Matrix dinput = lstm_.backward(cache.steps, dh);
        // D_t = (x_t - g) / scale, and the agent-frame shift cancels inside D.
        Vec2 dgoal{0.0, 0.0};
        for (std::size_t t = 0; t < dinput.rows(); ++t) {
            dgoal[0] -= dinput(t, 0) / cfg_.position_scale;
            dgoal[1] -= dinput(t, 1) / cfg_.position_scale;
        }
        return dgoal;
    }

    nn::ParameterList parameters() {
        nn::ParameterList p = lstm_.parameters();
        nn::append(p, proj_.parameters());
        return p;
    }

private:
    EncoderConfig cfg_;
    nn::Lstm lstm_;
    nn::Dense proj_;
};

}  // namespace trajlab
