#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajlab {

/// Diffusion noise schedule with 1-based step indices k = 1..K.
///
/// alpha_bar(0) is defined as 1 so the first reverse step is well posed.
/// Tables are filled once at construction and never change.
class NoiseSchedule {
public:
    /// Builds the derived tables from an explicit beta sequence.
    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        if (betas_.empty()) {
            throw std::invalid_argument("NoiseSchedule: need at least one step");
        }
        alphas_.reserve(betas_.size());
        alpha_bars_.reserve(betas_.size());
        double running = 1.0;
        for (double b : betas_) {
            if (!(b >= 0.0 && b < 1.0)) {
                throw std::invalid_argument("NoiseSchedule: beta must lie in [0,1), got " + std::to_string(b));
            }
            const double a = 1.0 - b;
            running *= a;
            alphas_.push_back(a);
            alpha_bars_.push_back(running);
        }
    }

    int steps() const noexcept { return static_cast<int>(betas_.size()); }

    double beta(int k) const { return betas_[index(k)]; }
    double alpha(int k) const { return alphas_[index(k)]; }
    /// Cumulative product up to k; k = 0 returns 1.
    double alpha_bar(int k) const {
        if (k == 0) return 1.0;
        return alpha_bars_[index(k)];
    }

    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alphas() const noexcept { return alphas_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

    void check_step(int k, int lowest = 1) const {
        if (k < lowest || k > steps()) {
            throw std::out_of_range("step index " + std::to_string(k) + " outside [" + std::to_string(lowest) +
                                    ", " + std::to_string(steps()) + "]");
        }
    }

private:
    std::size_t index(int k) const {
        check_step(k);
        return static_cast<std::size_t>(k - 1);
    }

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) {
        throw std::invalid_argument("make_linear_schedule: K must be >= 1");
    }
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    if (steps == 1) {
        betas[0] = beta_start;
    } else {
        const double span = beta_end - beta_start;
        for (int i = 0; i < steps; ++i) {
            betas[static_cast<std::size_t>(i)] = beta_start + span * static_cast<double>(i) / (steps - 1);
        }
        betas.back() = beta_end;
    }
    return NoiseSchedule(std::move(betas));
}

/// DDPM posterior variance ((1 - abar_{k-1}) / (1 - abar_k)) * beta_k.
inline double posterior_variance(const NoiseSchedule& s, int k) {
    s.check_step(k);
    const double ab = s.alpha_bar(k);
    const double ab_prev = s.alpha_bar(k - 1);
    if (ab >= 1.0) return 0.0;
    return std::max(0.0, (1.0 - ab_prev) / (1.0 - ab) * s.beta(k));
}

}  // namespace trajlab
