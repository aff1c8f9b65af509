#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "trajlab/condition.hpp"
#include "trajlab/nn/parameter.hpp"
#include "trajlab/random.hpp"
#include "trajlab/tensor.hpp"
#include "trajlab/train.hpp"

namespace trajlab::test {

/// Result of a central-difference check over one parameter tensor or input.
struct GradReport {
    std::string name;
    double relative_error = 0.0;  // |g_a - g_n| / max(|g_a|, |g_n|, 1e-8), 2-norms
};

inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

/// Compares gradients accumulated by `backward` (called once after zeroing)
/// with central differences of `loss` at step h, for every parameter.
inline std::vector<GradReport> check_parameter_gradients(const nn::ParameterList& params,
                                                         const std::function<double()>& loss,
                                                         const std::function<void()>& backward, double h = 1e-5) {
    nn::zero_grads(params);
    backward();
    std::vector<GradReport> out;
    for (nn::Parameter* p : params) {
        std::vector<double> analytic(p->grad.flat().begin(), p->grad.flat().end());
        std::vector<double> numeric(p->value.size());
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double up = loss();
            p->value[i] = saved - h;
            const double down = loss();
            p->value[i] = saved;
            numeric[i] = (up - down) / (2.0 * h);
        }
        out.push_back({p->name, relative_error(analytic, numeric)});
    }
    return out;
}

/// Central differences of `loss` with respect to the entries of `x`.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& loss,
                                            double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = loss();
        x[i] = saved - h;
        const double down = loss();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double worst(const std::vector<GradReport>& r) {
    double w = 0.0;
    for (const auto& g : r) w = std::max(w, g.relative_error);
    return w;
}

/// Fixed random weights for an upstream gradient, so that a scalar loss
/// L = sum(w * y) exercises every output.
inline std::vector<double> random_weights(std::size_t n, NoiseStream& rng) {
    std::vector<double> w(n);
    for (double& v : w) v = rng.normal();
    return w;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Smooth deterministic noise predictor for sampler tests. Reads the
/// feature's first entry so different features steer different outputs.
struct StubDenoiser {
    double gain = 0.3;
    mutable std::atomic<std::size_t> calls{0};

    Matrix operator()(int k, const Matrix& y, const ConditionFeature& f) const {
        ++calls;
        Matrix out(y.rows(), y.cols());
        const double bias = f.vector.empty() ? 0.0 : f.vector[0];
        for (std::size_t i = 0; i < y.size(); ++i) {
            out[i] = std::tanh(gain * y[i] + 0.01 * k + bias + 0.05 * static_cast<double>(i));
        }
        return out;
    }
};

inline ConditionFeature stub_feature(double v, FeatureKind kind = FeatureKind::diverse) {
    return {{v, 0.0}, kind, {v, -v}};
}

inline std::vector<ConditionFeature> stub_features(std::size_t n, NoiseStream& rng) {
    std::vector<ConditionFeature> f;
    for (std::size_t i = 0; i < n; ++i) f.push_back(stub_feature(rng.normal()));
    return f;
}

/// Schedule with random betas in [1e-4, 0.3).
inline NoiseSchedule random_schedule(int K, NoiseStream& rng) {
    std::vector<double> betas(static_cast<std::size_t>(K));
    for (double& b : betas) b = 1e-4 + 0.3 * rng.uniform();
    return NoiseSchedule(std::move(betas));
}

/// Small model for gradient and decoupling checks.
inline ModelConfig tiny_model_config() {
    ModelConfig m;
    m.t_h = 4;
    m.t_f = 3;
    m.K = 10;
    m.encoder = EncoderConfig{5, 6, 2.0, true};
    m.embed_dim = 4;
    m.width = 7;
    m.blocks = 2;
    m.goal.channels1 = 2;
    m.goal.channels2 = 3;
    m.sigma_px = 1.5;
    return m;
}

/// An 8x8 grid at 1 m/px with a random two-channel semantic map, and a
/// window whose positions stay inside it.
struct TinyScene {
    SemanticGrid semantic;
    TrajectoryWindow window;
};

inline TinyScene tiny_scene(const ModelConfig& m, NoiseStream& rng) {
    TinyScene s;
    s.semantic.grid = GridSpec{8, 8, Vec2{0.5, 0.5}, 1.0};
    s.semantic.classes = Planes(2, 8, 8);
    for (double& v : s.semantic.classes.data) v = rng.uniform();
    s.window.scene = "tiny";
    s.window.history = Matrix(m.t_h, 2);
    s.window.future = Matrix(m.t_f, 2);
    Vec2 p{2.0 + 2.0 * rng.uniform(), 2.0 + 2.0 * rng.uniform()};
    for (std::size_t t = 0; t < m.t_h + m.t_f; ++t) {
        p = {p[0] + 0.4 + 0.1 * rng.normal(), p[1] + 0.2 + 0.1 * rng.normal()};
        Matrix& dst = t < m.t_h ? s.window.history : s.window.future;
        const std::size_t r = t < m.t_h ? t : t - m.t_h;
        dst(r, 0) = p[0];
        dst(r, 1) = p[1];
    }
    return s;
}

}  // namespace trajlab::test
