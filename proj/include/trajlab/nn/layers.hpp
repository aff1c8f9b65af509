#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "trajlab/nn/parameter.hpp"

namespace trajlab::nn {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline void require_finite(std::span<const double> v, const char* where) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::domain_error(std::string(where) + ": non-finite input");
    }
}

}  // namespace detail

// ---------------------------------------------------------------- activations

enum class Activation { identity, relu, tanh, sigmoid, silu };

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::tanh: return std::tanh(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::silu: return x * sigmoid(x);
    }
    return x;
}

/// d activate(x) / dx, evaluated at the pre-activation x.
inline double activate_derivative(Activation a, double x) {
    switch (a) {
        case Activation::identity: return 1.0;
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::sigmoid: {
            const double s = sigmoid(x);
            return s * (1.0 - s);
        }
        case Activation::silu: {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }
    }
    return 1.0;
}

inline void activation_forward(Activation a, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(a, x[i]);
}

/// dx = dy * f'(x); x is the pre-activation.
inline void activation_backward(Activation a, std::span<const double> x, std::span<const double> dy,
                                std::span<double> dx) {
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * activate_derivative(a, x[i]);
}

// ---------------------------------------------------------------------- dense

/// y = W x + b with W stored out x in.
class Dense {
public:
    Dense() = default;
    Dense(std::size_t in, std::size_t out, const std::string& name)
        : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {}

    std::size_t in_features() const noexcept { return weight.value.cols(); }
    std::size_t out_features() const noexcept { return weight.value.rows(); }

    void init(NoiseStream& rng) {
        weight.init_uniform(rng, in_features());
        bias.init_uniform(rng, in_features());
    }

    void forward(std::span<const double> x, std::span<double> y) const {
        detail::require(x.size() == in_features() && y.size() == out_features(), "Dense::forward: shape mismatch");
        detail::require_finite(x, "Dense::forward");
        const std::size_t in = in_features();
        for (std::size_t o = 0; o < out_features(); ++o) {
            const double* w = weight.value.data() + o * in;
            double acc = bias.value[o];
            for (std::size_t i = 0; i < in; ++i) acc += w[i] * x[i];
            y[o] = acc;
        }
    }

    std::vector<double> forward(std::span<const double> x) const {
        std::vector<double> y(out_features());
        forward(x, y);
        return y;
    }

    /// Accumulates dW, db; writes dx when it is non-empty.
    void backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
        detail::require(x.size() == in_features() && dy.size() == out_features(), "Dense::backward: shape mismatch");
        const std::size_t in = in_features();
        if (!dx.empty()) {
            detail::require(dx.size() == in, "Dense::backward: dx shape mismatch");
            std::fill(dx.begin(), dx.end(), 0.0);
        }
        for (std::size_t o = 0; o < out_features(); ++o) {
            const double g = dy[o];
            bias.grad[o] += g;
            double* gw = weight.grad.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
            if (!dx.empty()) {
                const double* w = weight.value.data() + o * in;
                for (std::size_t i = 0; i < in; ++i) dx[i] += g * w[i];
            }
        }
    }

    ParameterList parameters() { return {&weight, &bias}; }

    Parameter weight;
    Parameter bias;
};

// ------------------------------------------------------------------------ lstm

/// Gated recurrent cell with input/forget/cell/output gates.
/// Weights are (4H) x (I + H), rows grouped i, f, g, o.
class LstmCell {
public:
    struct Cache {
        std::vector<double> input;   // [x; h_prev]
        std::vector<double> c_prev;
        std::vector<double> i, f, g, o;
        std::vector<double> c, tanh_c, h;
    };

    LstmCell() = default;
    LstmCell(std::size_t input_size, std::size_t hidden, const std::string& name)
        : gates_(input_size + hidden, 4 * hidden, name + ".gates"), input_size_(input_size), hidden_(hidden) {}

    std::size_t input_size() const noexcept { return input_size_; }
    std::size_t hidden_size() const noexcept { return hidden_; }

    void init(NoiseStream& rng) {
        gates_.init(rng);
        // forget-gate bias starts at 1 so early gradients are not cut off
        for (std::size_t j = 0; j < hidden_; ++j) gates_.bias.value[hidden_ + j] = 1.0;
    }

    Cache step(std::span<const double> x, std::span<const double> h_prev, std::span<const double> c_prev) const {
        detail::require(x.size() == input_size_ && h_prev.size() == hidden_ && c_prev.size() == hidden_,
                        "LstmCell::step: shape mismatch");
        Cache k;
        k.input.assign(x.begin(), x.end());
        k.input.insert(k.input.end(), h_prev.begin(), h_prev.end());
        k.c_prev.assign(c_prev.begin(), c_prev.end());
        const std::vector<double> z = gates_.forward(k.input);
        const std::size_t H = hidden_;
        k.i.resize(H);
        k.f.resize(H);
        k.g.resize(H);
        k.o.resize(H);
        k.c.resize(H);
        k.tanh_c.resize(H);
        k.h.resize(H);
        for (std::size_t j = 0; j < H; ++j) {
            k.i[j] = sigmoid(z[j]);
            k.f[j] = sigmoid(z[H + j]);
            k.g[j] = std::tanh(z[2 * H + j]);
            k.o[j] = sigmoid(z[3 * H + j]);
            k.c[j] = k.f[j] * c_prev[j] + k.i[j] * k.g[j];
            k.tanh_c[j] = std::tanh(k.c[j]);
            k.h[j] = k.o[j] * k.tanh_c[j];
        }
        return k;
    }

    /// Given dL/dh and dL/dc at this step's outputs, accumulates weight
    /// gradients and returns dL/dx, dL/dh_prev, dL/dc_prev.
    void step_backward(const Cache& k, std::span<const double> dh, std::span<const double> dc, std::span<double> dx,
                       std::span<double> dh_prev, std::span<double> dc_prev) {
        const std::size_t H = hidden_;
        std::vector<double> dz(4 * H);
        for (std::size_t j = 0; j < H; ++j) {
            const double dct = dc[j] + dh[j] * k.o[j] * (1.0 - k.tanh_c[j] * k.tanh_c[j]);
            const double do_ = dh[j] * k.tanh_c[j];
            const double di = dct * k.g[j];
            const double df = dct * k.c_prev[j];
            const double dg = dct * k.i[j];
            dc_prev[j] = dct * k.f[j];
            dz[j] = di * k.i[j] * (1.0 - k.i[j]);
            dz[H + j] = df * k.f[j] * (1.0 - k.f[j]);
            dz[2 * H + j] = dg * (1.0 - k.g[j] * k.g[j]);
            dz[3 * H + j] = do_ * k.o[j] * (1.0 - k.o[j]);
        }
        std::vector<double> dinput(input_size_ + H);
        gates_.backward(k.input, dz, dinput);
        std::copy_n(dinput.begin(), input_size_, dx.begin());
        std::copy_n(dinput.begin() + static_cast<std::ptrdiff_t>(input_size_), H, dh_prev.begin());
    }

    ParameterList parameters() { return gates_.parameters(); }

private:
    Dense gates_;
    std::size_t input_size_ = 0;
    std::size_t hidden_ = 0;
};

/// Runs an LstmCell over the rows of a sequence from a zero state.
class Lstm {
public:
    Lstm() = default;
    Lstm(std::size_t input_size, std::size_t hidden, const std::string& name) : cell_(input_size, hidden, name) {}

    std::size_t hidden_size() const noexcept { return cell_.hidden_size(); }
    std::size_t input_size() const noexcept { return cell_.input_size(); }
    void init(NoiseStream& rng) { cell_.init(rng); }

    /// Returns the per-step caches; the final hidden state is caches.back().h.
    std::vector<LstmCell::Cache> forward(const Matrix& sequence) const {
        detail::require(sequence.rows() >= 1, "Lstm::forward: empty sequence");
        detail::require(sequence.cols() == input_size(), "Lstm::forward: feature width mismatch");
        std::vector<LstmCell::Cache> caches;
        caches.reserve(sequence.rows());
        std::vector<double> h(hidden_size(), 0.0), c(hidden_size(), 0.0);
        for (std::size_t t = 0; t < sequence.rows(); ++t) {
            caches.push_back(cell_.step(sequence.row(t), h, c));
            h = caches.back().h;
            c = caches.back().c;
        }
        return caches;
    }

    /// Backpropagates dL/dh_final through time; returns dL/dsequence.
    Matrix backward(const std::vector<LstmCell::Cache>& caches, std::span<const double> dh_final) {
        const std::size_t H = hidden_size();
        Matrix dseq(caches.size(), input_size());
        std::vector<double> dh(dh_final.begin(), dh_final.end()), dc(H, 0.0);
        std::vector<double> dh_prev(H), dc_prev(H);
        for (std::size_t t = caches.size(); t-- > 0;) {
            cell_.step_backward(caches[t], dh, dc, dseq.row(t), dh_prev, dc_prev);
            dh.swap(dh_prev);
            dc.swap(dc_prev);
        }
        return dseq;
    }

    ParameterList parameters() { return cell_.parameters(); }

private:
    LstmCell cell_;
};

// ---------------------------------------------------------------------- conv2d

/// Square-kernel 2D convolution, stride 1, zero "same" padding.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, const std::string& name)
        : weight(name + ".weight", out_channels, in_channels * kernel * kernel),
          bias(name + ".bias", out_channels, 1),
          in_(in_channels),
          out_(out_channels),
          k_(kernel) {
        detail::require(kernel % 2 == 1, "Conv2d: kernel size must be odd");
    }

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }

    void init(NoiseStream& rng) {
        weight.init_uniform(rng, in_ * k_ * k_);
        bias.init_uniform(rng, in_ * k_ * k_);
    }

    Planes forward(const Planes& x) const {
        detail::require(x.channels == in_, "Conv2d::forward: channel mismatch");
        detail::require_finite(x.data, "Conv2d::forward");
        const std::size_t hw = x.height * x.width;
        const RowMatrix& cols = im2col(x);
        Planes y(out_, x.height, x.width);
        Eigen::Map<RowMatrix> ym(y.data.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(hw));
        ym.noalias() = weights() * cols;
        for (std::size_t co = 0; co < out_; ++co) ym.row(static_cast<Eigen::Index>(co)).array() += bias.value[co];
        return y;
    }

    /// Accumulates dW, db; returns dL/dx.
    Planes backward(const Planes& x, const Planes& dy) {
        detail::require(dy.channels == out_ && dy.height == x.height && dy.width == x.width,
                        "Conv2d::backward: shape mismatch");
        const std::size_t hw = x.height * x.width;
        Eigen::Map<const RowMatrix> g(dy.data.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(hw));
        const RowMatrix& cols = im2col(x);
        Eigen::Map<RowMatrix> dw(weight.grad.data(), static_cast<Eigen::Index>(out_),
                                 static_cast<Eigen::Index>(in_ * k_ * k_));
        dw.noalias() += g * cols.transpose();
        for (std::size_t co = 0; co < out_; ++co) bias.grad[co] += g.row(static_cast<Eigen::Index>(co)).sum();
        thread_local RowMatrix dcols;
        dcols.noalias() = weights().transpose() * g;
        return col2im(dcols, x.height, x.width);
    }

    ParameterList parameters() { return {&weight, &bias}; }

    Parameter weight;
    Parameter bias;

private:
    using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Eigen::Map<const RowMatrix> weights() const {
        return {weight.value.data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_ * k_ * k_)};
    }

    // Calls fn(tap_row, ci, oy, ox) for every kernel tap.
    template <class Fn>
    void for_each_tap(Fn&& fn) const {
        const auto half = static_cast<std::ptrdiff_t>(k_ / 2);
        for (std::size_t ci = 0; ci < in_; ++ci)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx)
                    fn((ci * k_ + ky) * k_ + kx, ci, static_cast<std::ptrdiff_t>(ky) - half,
                       static_cast<std::ptrdiff_t>(kx) - half);
    }

    // Row (ci, ky, kx) holds the input plane shifted by the tap offset, zero
    // padded. The buffer is per-thread scratch, reused to avoid reallocation.
    const RowMatrix& im2col(const Planes& x) const {
        const auto H = static_cast<std::ptrdiff_t>(x.height), W = static_cast<std::ptrdiff_t>(x.width);
        thread_local RowMatrix cols;
        cols.resize(static_cast<Eigen::Index>(in_ * k_ * k_), H * W);
        for_each_tap([&](std::size_t row, std::size_t ci, std::ptrdiff_t oy, std::ptrdiff_t ox) {
            double* dst = cols.data() + static_cast<std::ptrdiff_t>(row) * H * W;
            const double* src = x.data.data() + static_cast<std::ptrdiff_t>(ci) * H * W;
            const std::ptrdiff_t c0 = std::max<std::ptrdiff_t>(0, -ox), c1 = std::max(c0, std::min(W, W - ox));
            const std::ptrdiff_t r0 = std::min(H, std::max<std::ptrdiff_t>(0, -oy));
            const std::ptrdiff_t r1 = std::max(r0, std::min(H, H - oy));
            // only the padding border is zeroed; the interior is overwritten
            std::fill(dst, dst + r0 * W, 0.0);
            std::fill(dst + r1 * W, dst + H * W, 0.0);
            for (std::ptrdiff_t r = r0; r < r1; ++r) {
                const double* in_row = src + (r + oy) * W + ox;
                double* out_row = dst + r * W;
                std::fill(out_row, out_row + c0, 0.0);
                for (std::ptrdiff_t c = c0; c < c1; ++c) out_row[c] = in_row[c];
                std::fill(out_row + c1, out_row + W, 0.0);
            }
        });
        return cols;
    }

    Planes col2im(const RowMatrix& cols, std::size_t height, std::size_t width) const {
        const auto H = static_cast<std::ptrdiff_t>(height), W = static_cast<std::ptrdiff_t>(width);
        Planes dx(in_, height, width);
        for_each_tap([&](std::size_t row, std::size_t ci, std::ptrdiff_t oy, std::ptrdiff_t ox) {
            const double* src = cols.data() + static_cast<std::ptrdiff_t>(row) * H * W;
            double* dst = dx.data.data() + static_cast<std::ptrdiff_t>(ci) * H * W;
            const std::ptrdiff_t c0 = std::max<std::ptrdiff_t>(0, -ox), c1 = std::min(W, W - ox);
            for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, -oy); r < std::min(H, H - oy); ++r) {
                double* out_row = dst + (r + oy) * W + ox;
                const double* in_row = src + r * W;
                for (std::ptrdiff_t c = c0; c < c1; ++c) out_row[c] += in_row[c];
            }
        });
        return dx;
    }

    std::size_t in_ = 0;
    std::size_t out_ = 0;
    std::size_t k_ = 3;
};

// ------------------------------------------------------- grid plumbing layers

inline Planes activation_forward(Activation a, const Planes& x) {
    Planes y = x;
    for (double& v : y.data) v = activate(a, v);
    return y;
}

inline Planes activation_backward(Activation a, const Planes& x, const Planes& dy) {
    Planes dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] *= activate_derivative(a, x.data[i]);
    return dx;
}

/// 2x2 average pooling; odd trailing rows/cols are dropped.
inline Planes avg_pool2(const Planes& x) {
    Planes y(x.channels, x.height / 2, x.width / 2);
    for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t r = 0; r < y.height; ++r)
            for (std::size_t q = 0; q < y.width; ++q)
                y.at(c, r, q) = 0.25 * (x.at(c, 2 * r, 2 * q) + x.at(c, 2 * r, 2 * q + 1) + x.at(c, 2 * r + 1, 2 * q) +
                                        x.at(c, 2 * r + 1, 2 * q + 1));
    return y;
}

inline Planes avg_pool2_backward(const Planes& dy, std::size_t height, std::size_t width) {
    Planes dx(dy.channels, height, width);
    for (std::size_t c = 0; c < dy.channels; ++c)
        for (std::size_t r = 0; r < dy.height; ++r)
            for (std::size_t q = 0; q < dy.width; ++q) {
                const double g = 0.25 * dy.at(c, r, q);
                dx.at(c, 2 * r, 2 * q) += g;
                dx.at(c, 2 * r, 2 * q + 1) += g;
                dx.at(c, 2 * r + 1, 2 * q) += g;
                dx.at(c, 2 * r + 1, 2 * q + 1) += g;
            }
    return dx;
}

/// Nearest-neighbour upsampling to (height, width); each source pixel covers a
/// 2x2 block, extra trailing rows/cols copy the last source row/col.
inline Planes upsample2(const Planes& x, std::size_t height, std::size_t width) {
    Planes y(x.channels, height, width);
    for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t q = 0; q < width; ++q)
                y.at(c, r, q) = x.at(c, std::min(r / 2, x.height - 1), std::min(q / 2, x.width - 1));
    return y;
}

inline Planes upsample2_backward(const Planes& dy, std::size_t height, std::size_t width) {
    Planes dx(dy.channels, height, width);
    for (std::size_t c = 0; c < dy.channels; ++c)
        for (std::size_t r = 0; r < dy.height; ++r)
            for (std::size_t q = 0; q < dy.width; ++q)
                dx.at(c, std::min(r / 2, height - 1), std::min(q / 2, width - 1)) += dy.at(c, r, q);
    return dx;
}

inline Planes concat_channels(const Planes& a, const Planes& b) {
    detail::require(a.height == b.height && a.width == b.width, "concat_channels: spatial mismatch");
    Planes y(a.channels + b.channels, a.height, a.width);
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return y;
}

/// Splits a gradient over concatenated channels back into its two parts.
inline std::pair<Planes, Planes> split_channels(const Planes& dy, std::size_t first) {
    Planes a(first, dy.height, dy.width), b(dy.channels - first, dy.height, dy.width);
    std::copy_n(dy.data.begin(), a.data.size(), a.data.begin());
    std::copy(dy.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), dy.data.end(), b.data.begin());
    return {std::move(a), std::move(b)};
}

// ------------------------------------------------------------ step embedding

/// Fixed sinusoidal embedding of the diffusion index.
class StepEmbedding {
public:
    explicit StepEmbedding(std::size_t dim = 32) : dim_(dim) {
        detail::require(dim >= 2 && dim % 2 == 0, "StepEmbedding: dimension must be even and >= 2");
    }

    std::size_t dim() const noexcept { return dim_; }

    std::vector<double> operator()(int k) const {
        std::vector<double> e(dim_);
        const std::size_t half = dim_ / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
            e[2 * i] = std::sin(k * freq);
            e[2 * i + 1] = std::cos(k * freq);
        }
        return e;
    }

private:
    std::size_t dim_;
};

}  // namespace trajlab::nn
