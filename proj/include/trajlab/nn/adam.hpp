#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajlab/nn/parameter.hpp"

namespace trajlab::nn {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moments are keyed by position in the
/// parameter list, so the same list (same order) must be passed every step.
class Adam {
public:
    explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

    AdamOptions& options() noexcept { return opts_; }
    const AdamOptions& options() const noexcept { return opts_; }
    long long step_count() const noexcept { return step_; }

    /// One update. Throws std::domain_error naming the first parameter with a
    /// non-finite gradient; no parameter is touched in that case.
    void update(const ParameterList& params) {
        for (const Parameter* p : params) {
            if (!p->grad.all_finite()) {
                throw std::domain_error("Adam: non-finite gradient in '" + p->name + "'");
            }
        }
        if (m_.empty()) {
            for (const Parameter* p : params) {
                m_.emplace_back(p->value.rows(), p->value.cols());
                v_.emplace_back(p->value.rows(), p->value.cols());
            }
        }
        if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
        ++step_;
        const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
        for (std::size_t j = 0; j < params.size(); ++j) {
            Parameter& p = *params[j];
            Matrix& m = m_[j];
            Matrix& v = v_[j];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
                const double mhat = m[i] / c1;
                const double vhat = v[i] / c2;
                p.value[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
    }

private:
    AdamOptions opts_;
    long long step_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

}  // namespace trajlab::nn
