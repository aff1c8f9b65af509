#pragma once

#include <cstdint>
#include <random>

#include "trajlab/tensor.hpp"

namespace trajlab {

/// Seeded source of standard-normal and uniform draws.
///
/// Children created with fork() are keyed by (seed, index) only, so a
/// branch's stream does not depend on how many draws the parent or its
/// siblings have made. That is what lets branches run in any order or in
/// parallel and still reproduce a sequential run.
class NoiseStream {
public:
    explicit NoiseStream(std::uint64_t seed = 0) : seed_(seed), engine_(make_engine(seed, 0, 0)) {}

    std::uint64_t seed() const noexcept { return seed_; }

    NoiseStream fork(std::uint64_t index) const {
        NoiseStream child;
        child.seed_ = derive_seed(seed_, index);
        child.engine_ = make_engine(child.seed_, 0, 0);
        return child;
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    /// Index in [0, n). Uses rejection so every index is equally likely.
    std::size_t index_below(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(engine_);
    }

    Matrix normal_matrix(std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (double& v : m.flat()) v = normal();
        return m;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
        // splitmix64 finalizer over a combined key
        std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::mt19937_64 make_engine(std::uint64_t seed, std::uint32_t a, std::uint32_t b) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b};
        return std::mt19937_64(seq);
    }

    std::uint64_t seed_ = 0;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace trajlab
