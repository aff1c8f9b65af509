#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/condition.hpp"
#include "trajlab/nn/layers.hpp"
#include "trajlab/sampler.hpp"

namespace trajlab {

struct DenoiserConfig {
    std::size_t horizon = 12;
    std::size_t feature_dim = 64;
    std::size_t embed_dim = 32;
    std::size_t width = 64;
    std::size_t blocks = 3;
};

/// Noise predictor eps(k, Y^k, f): concatenates the flattened trajectory, a
/// sinusoidal step embedding and the condition feature, then runs an input
/// projection, residual MLP blocks and an output projection.
class Denoiser {
public:
    struct Cache {
        std::vector<double> input;
        std::vector<double> h0;
        std::vector<std::vector<double>> block_in, block_pre, block_act;
        std::vector<double> out_in;
        std::vector<double> out_pre;
    };

    Denoiser() = default;
    explicit Denoiser(DenoiserConfig cfg) : cfg_(cfg), embed_(cfg.embed_dim) {
        const std::size_t in = cfg.horizon * 2 + cfg.embed_dim + cfg.feature_dim;
        in_proj_ = nn::Dense(in, cfg.width, "denoiser.in");
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            block_a_.emplace_back(cfg.width, cfg.width, "denoiser.block" + std::to_string(b) + ".a");
            block_b_.emplace_back(cfg.width, cfg.width, "denoiser.block" + std::to_string(b) + ".b");
        }
        out_proj_ = nn::Dense(cfg.width, cfg.horizon * 2, "denoiser.out");
    }

    const DenoiserConfig& config() const noexcept { return cfg_; }
    const nn::StepEmbedding& embedding() const noexcept { return embed_; }

    void init(NoiseStream& rng) {
        in_proj_.init(rng);
        for (std::size_t b = 0; b < block_a_.size(); ++b) {
            block_a_[b].init(rng);
            block_b_[b].init(rng);
        }
        out_proj_.init(rng);
    }

    Matrix predict_noise(int k, const Matrix& yk, const std::vector<double>& feature, Cache* cache = nullptr) const {
        using nn::Activation;
        if (k < 1) throw std::out_of_range("predict_noise: step index must be >= 1");
        if (yk.rows() != cfg_.horizon || yk.cols() != 2) {
            throw std::invalid_argument("predict_noise: trajectory shape " + yk.shape_string());
        }
        if (feature.size() != cfg_.feature_dim) throw std::invalid_argument("predict_noise: feature width mismatch");
        Cache local;
        Cache& c = cache ? *cache : local;
        c.input.assign(yk.flat().begin(), yk.flat().end());
        const std::vector<double> e = embed_(k);
        c.input.insert(c.input.end(), e.begin(), e.end());
        c.input.insert(c.input.end(), feature.begin(), feature.end());

        const std::vector<double> pre0 = in_proj_.forward(c.input);
        c.h0 = pre0;
        std::vector<double> h(pre0.size());
        nn::activation_forward(Activation::silu, pre0, h);
        c.block_in.assign(block_a_.size(), {});
        c.block_pre.assign(block_a_.size(), {});
        c.block_act.assign(block_a_.size(), {});
        for (std::size_t b = 0; b < block_a_.size(); ++b) {
            c.block_in[b] = h;
            c.block_pre[b] = block_a_[b].forward(h);
            c.block_act[b].resize(cfg_.width);
            nn::activation_forward(Activation::silu, c.block_pre[b], c.block_act[b]);
            const std::vector<double> r = block_b_[b].forward(c.block_act[b]);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += r[i];
        }
        c.out_in = h;
        Matrix out(cfg_.horizon, 2, out_proj_.forward(h));
        if (!out.all_finite()) throw std::domain_error("predict_noise: non-finite output at step " + std::to_string(k));
        return out;
    }

    Matrix predict_noise(int k, const TrajectoryTensor& yk, const ConditionFeature& f) const {
        return predict_noise(k, yk.values, f.vector);
    }

    /// NoisePredictor adaptor for the samplers.
    Matrix operator()(int k, const Matrix& yk, const ConditionFeature& f) const {
        return predict_noise(k, yk, f.vector);
    }

    /// Accumulates parameter gradients for dL/deps; returns dL/dfeature.
    std::vector<double> backward(const Cache& c, const Matrix& deps) {
        using nn::Activation;
        std::vector<double> dh(cfg_.width);
        out_proj_.backward(c.out_in, deps.flat(), dh);
        std::vector<double> dact(cfg_.width), dpre(cfg_.width), dblock(cfg_.width);
        for (std::size_t b = block_a_.size(); b-- > 0;) {
            block_b_[b].backward(c.block_act[b], dh, dact);
            nn::activation_backward(Activation::silu, c.block_pre[b], dact, dpre);
            block_a_[b].backward(c.block_in[b], dpre, dblock);
            for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dblock[i];
        }
        std::vector<double> dpre0(cfg_.width);
        nn::activation_backward(Activation::silu, c.h0, dh, dpre0);
        std::vector<double> dinput(c.input.size());
        in_proj_.backward(c.input, dpre0, dinput);
        const std::size_t offset = cfg_.horizon * 2 + cfg_.embed_dim;
        return {dinput.begin() + static_cast<std::ptrdiff_t>(offset), dinput.end()};
    }

    nn::ParameterList parameters() {
        nn::ParameterList p = in_proj_.parameters();
        for (std::size_t b = 0; b < block_a_.size(); ++b) {
            nn::append(p, block_a_[b].parameters());
            nn::append(p, block_b_[b].parameters());
        }
        nn::append(p, out_proj_.parameters());
        return p;
    }

private:
    DenoiserConfig cfg_;
    nn::StepEmbedding embed_{32};
    nn::Dense in_proj_;
    std::vector<nn::Dense> block_a_, block_b_;
    nn::Dense out_proj_;
};

}  // namespace trajlab
