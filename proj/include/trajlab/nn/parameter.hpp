#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "trajlab/random.hpp"
#include "trajlab/tensor.hpp"

namespace trajlab::nn {

/// Learnable array plus its gradient accumulator (always the same shape).
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, std::size_t rows, std::size_t cols)
        : name(std::move(n)), value(rows, cols), grad(rows, cols) {}

    void zero_grad() { grad.fill(0.0); }

    /// U(-bound, bound) with bound = 1 / sqrt(fan_in).
    void init_uniform(NoiseStream& rng, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& v : value.flat()) v = (2.0 * rng.uniform() - 1.0) * bound;
    }
};

/// Non-owning view over a module's parameters, in a fixed order.
using ParameterList = std::vector<Parameter*>;

inline void zero_grads(const ParameterList& params) {
    for (Parameter* p : params) p->zero_grad();
}

inline void zero_values(const ParameterList& params) {
    for (Parameter* p : params) p->value.fill(0.0);
}

inline std::size_t parameter_count(const ParameterList& params) {
    std::size_t n = 0;
    for (const Parameter* p : params) n += p->value.size();
    return n;
}

inline void append(ParameterList& to, const ParameterList& from) {
    to.reserve(to.size() + from.size());
    for (Parameter* p : from) to.push_back(p);
}

}  // namespace trajlab::nn
