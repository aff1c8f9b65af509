#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "trajlab/random.hpp"
#include "trajlab/schedule.hpp"
#include "trajlab/tensor.hpp"

namespace trajlab {

/// A (t_f x 2) trajectory together with the diffusion index it sits at.
/// step_index 0 means fully denoised.
struct TrajectoryTensor {
    Matrix values;
    int step_index = 0;

    friend bool operator==(const TrajectoryTensor&, const TrajectoryTensor&) = default;
};

enum class StepRule { ddpm, d_ddpm, ddim };

inline std::string_view to_string(StepRule r) {
    switch (r) {
        case StepRule::ddpm: return "ddpm";
        case StepRule::d_ddpm: return "d_ddpm";
        case StepRule::ddim: return "ddim";
    }
    return "?";
}

inline StepRule parse_step_rule(std::string_view name) {
    if (name == "ddpm") return StepRule::ddpm;
    if (name == "d_ddpm" || name == "d-ddpm") return StepRule::d_ddpm;
    if (name == "ddim") return StepRule::ddim;
    throw std::invalid_argument("unknown sampling rule '" + std::string(name) + "'");
}

struct SamplerConfig {
    int K = 100;          // DDPM steps
    int K_I = 20;         // DDIM steps
    int K_t = 20;         // trunk steps
    double eta = 1.0;     // DDIM stochasticity
    std::size_t N = 20;   // predictions per agent
    std::size_t horizon = 12;

    void validate() const {
        if (K < 1) throw std::invalid_argument("sampler: K must be >= 1");
        if (K_t < 0 || K_t > K) throw std::invalid_argument("sampler: need 0 <= K_t <= K");
        if (K_I < 1 || K_I > K) throw std::invalid_argument("sampler: need 1 <= K_I <= K");
        if (N < 1) throw std::invalid_argument("sampler: N must be >= 1");
        if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("sampler: eta must lie in [0,1]");
        if (horizon < 1) throw std::invalid_argument("sampler: horizon must be >= 1");
    }
};

namespace detail {

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape " + a.shape_string() + " vs " + b.shape_string());
    }
}

inline void check_index(const TrajectoryTensor& y, int k, const char* what) {
    if (y.step_index != k) {
        throw std::invalid_argument(std::string(what) + ": trajectory is at step " + std::to_string(y.step_index) +
                                    ", expected " + std::to_string(k));
    }
}

inline bool is_zero(const Matrix& m) {
    return std::all_of(m.flat().begin(), m.flat().end(), [](double v) { return v == 0.0; });
}

}  // namespace detail

/// Closed-form forward process: sqrt(abar_k) * Y0 + sqrt(1 - abar_k) * eps.
inline TrajectoryTensor forward_noise(const TrajectoryTensor& y0, int k, const Matrix& eps, const NoiseSchedule& s) {
    s.check_step(k);
    detail::check_same_shape(y0.values, eps, "forward_noise");
    const double ab = s.alpha_bar(k);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    TrajectoryTensor out{Matrix(y0.values.rows(), y0.values.cols()), k};
    for (std::size_t i = 0; i < eps.size(); ++i) out.values[i] = a * y0.values[i] + b * eps[i];
    return out;
}

/// Deterministic DDPM step (noise term removed).
inline TrajectoryTensor d_ddpm_step(const TrajectoryTensor& yk, int k, const Matrix& eps_pred, const NoiseSchedule& s) {
    s.check_step(k);
    detail::check_index(yk, k, "d_ddpm_step");
    detail::check_same_shape(yk.values, eps_pred, "d_ddpm_step");
    const double alpha = s.alpha(k);
    const double one_minus_ab = 1.0 - s.alpha_bar(k);
    const double eps_coef = s.beta(k) == 0.0 ? 0.0 : (1.0 - alpha) / std::sqrt(one_minus_ab);
    const double scale = 1.0 / std::sqrt(alpha);
    TrajectoryTensor out{Matrix(yk.values.rows(), yk.values.cols()), k - 1};
    for (std::size_t i = 0; i < eps_pred.size(); ++i) {
        out.values[i] = scale * (yk.values[i] - eps_coef * eps_pred[i]);
    }
    return out;
}

/// Ancestral DDPM step: d_ddpm_step plus sqrt(posterior_variance) * z.
inline TrajectoryTensor ddpm_step(const TrajectoryTensor& yk, int k, const Matrix& eps_pred, const Matrix& z,
                                  const NoiseSchedule& s) {
    detail::check_same_shape(yk.values, z, "ddpm_step");
    if (k == 1 && !detail::is_zero(z)) {
        throw std::invalid_argument("ddpm_step: z must be zero at k = 1");
    }
    TrajectoryTensor out = d_ddpm_step(yk, k, eps_pred, s);
    const double sigma = std::sqrt(posterior_variance(s, k));
    if (sigma != 0.0) {
        for (std::size_t i = 0; i < z.size(); ++i) out.values[i] += sigma * z[i];
    }
    return out;
}

/// sigma for a DDIM jump from k_hi to k_lo:
/// sqrt(eta * (1 - abar_lo) / (1 - abar_hi) * (1 - abar_hi / abar_lo)).
inline double ddim_sigma(const NoiseSchedule& s, int k_hi, int k_lo, double eta) {
    if (eta < 0.0) throw std::invalid_argument("ddim_sigma: eta must be non-negative");
    s.check_step(k_hi);
    s.check_step(k_lo, 0);
    if (k_lo >= k_hi) throw std::invalid_argument("ddim_sigma: need k_lo < k_hi");
    const double ab_hi = s.alpha_bar(k_hi);
    const double ab_lo = s.alpha_bar(k_lo);
    if (eta == 0.0 || ab_hi >= 1.0) return 0.0;
    const double radicand = eta * (1.0 - ab_lo) / (1.0 - ab_hi) * (1.0 - ab_hi / ab_lo);
    return std::sqrt(std::max(0.0, radicand));
}

/// Single-index form used by the branch loop when the stride is 1.
inline double ddim_sigma(const NoiseSchedule& s, int k, double eta) { return ddim_sigma(s, k, k - 1, eta); }

/// Generalised DDIM update between two schedule indices.
inline TrajectoryTensor ddim_step(const TrajectoryTensor& yk, int k_hi, int k_lo, const Matrix& eps_pred,
                                  const Matrix& z, double eta, const NoiseSchedule& s) {
    if (k_lo >= k_hi) throw std::invalid_argument("ddim_step: need k_lo < k_hi");
    s.check_step(k_hi);
    s.check_step(k_lo, 0);
    detail::check_index(yk, k_hi, "ddim_step");
    detail::check_same_shape(yk.values, eps_pred, "ddim_step");
    detail::check_same_shape(yk.values, z, "ddim_step");
    const double sigma = ddim_sigma(s, k_hi, k_lo, eta);
    if ((sigma == 0.0 || k_lo == 0) && !detail::is_zero(z)) {
        throw std::invalid_argument("ddim_step: z must be zero when sigma = 0 or k_lo = 0");
    }
    const double ab_hi = s.alpha_bar(k_hi);
    const double ab_lo = s.alpha_bar(k_lo);
    const double y_coef = std::sqrt(ab_lo / ab_hi);
    const double eps_coef =
        std::sqrt(std::max(0.0, 1.0 - ab_lo - sigma * sigma)) - std::sqrt(ab_lo * (1.0 - ab_hi) / ab_hi);
    TrajectoryTensor out{Matrix(yk.values.rows(), yk.values.cols()), k_lo};
    for (std::size_t i = 0; i < eps_pred.size(); ++i) {
        out.values[i] = y_coef * yk.values[i] + eps_coef * eps_pred[i] + sigma * z[i];
    }
    return out;
}

/// floor((1 - K_t / K) * K_I), computed in integers.
inline int branch_step_count(int K, int K_I, int K_t) {
    if (K < 1 || K_t < 0 || K_t > K || K_I < 1) {
        throw std::invalid_argument("branch_step_count: need K >= 1, 0 <= K_t <= K, K_I >= 1");
    }
    return static_cast<int>((static_cast<long long>(K - K_t) * K_I) / K);
}

struct StepPair {
    int hi = 0;
    int lo = 0;
    friend bool operator==(const StepPair&, const StepPair&) = default;
};

/// Uniformly strided pairs from K - K_t down to 0. Index i of the grid is
/// round(i * (K - K_t) / K_b); with K_b <= K - K_t the stride is >= 1, so
/// the rounded grid is strictly monotone.
inline std::vector<StepPair> ddim_subsequence(int K, int K_t, int K_b) {
    const int span = K - K_t;
    if (K_b < 1) throw std::invalid_argument("ddim_subsequence: K_b must be >= 1");
    if (K_t < 0 || K_t > K) throw std::invalid_argument("ddim_subsequence: need 0 <= K_t <= K");
    if (K_b > span) throw std::invalid_argument("ddim_subsequence: K_b exceeds K - K_t");
    std::vector<int> grid(static_cast<std::size_t>(K_b) + 1);
    for (int i = 0; i <= K_b; ++i) {
        // integer round-half-up of i * span / K_b
        grid[static_cast<std::size_t>(i)] =
            static_cast<int>((2LL * i * span + K_b) / (2LL * K_b));
    }
    std::vector<StepPair> pairs;
    pairs.reserve(static_cast<std::size_t>(K_b));
    for (int i = K_b; i >= 1; --i) {
        pairs.push_back({grid[static_cast<std::size_t>(i)], grid[static_cast<std::size_t>(i - 1)]});
    }
    return pairs;
}

/// Consecutive pairs (from, from-1), ..., (to+1, to).
inline std::vector<StepPair> consecutive_steps(int from, int to) {
    std::vector<StepPair> pairs;
    for (int k = from; k > to; --k) pairs.push_back({k, k - 1});
    return pairs;
}

/// One stage of a sampler: a rule applied over an ordered list of index pairs.
struct StagePlan {
    StepRule rule = StepRule::d_ddpm;
    std::vector<StepPair> steps;
    double eta = 0.0;

    bool deterministic() const {
        return steps.empty() || rule == StepRule::d_ddpm || (rule == StepRule::ddim && eta == 0.0);
    }
};

/// Trunk stage run once, branch stage run per prediction.
struct TreePlan {
    StagePlan trunk;
    StagePlan branch;
    int K = 0;

    std::size_t evaluations(std::size_t n) const { return trunk.steps.size() + n * branch.steps.size(); }
};

/// Number of branch steps actually run: K_b, but at least one step whenever
/// the trunk stops short of index 0.
inline int effective_branch_steps(const SamplerConfig& cfg) {
    const int kb = branch_step_count(cfg.K, cfg.K_I, cfg.K_t);
    if (kb == 0 && cfg.K_t < cfg.K) return 1;
    return kb;
}

/// d-DDPM trunk over K..K-K_t+1, DDIM branch over the strided remainder.
inline TreePlan make_tree_plan(const SamplerConfig& cfg) {
    cfg.validate();
    TreePlan plan;
    plan.K = cfg.K;
    plan.trunk = {StepRule::d_ddpm, consecutive_steps(cfg.K, cfg.K - cfg.K_t), 0.0};
    const int kb = effective_branch_steps(cfg);
    plan.branch = {StepRule::ddim, kb > 0 ? ddim_subsequence(cfg.K, cfg.K_t, kb) : std::vector<StepPair>{}, cfg.eta};
    return plan;
}

/// Plan where both stages use explicit rules. For consecutive-index rules the
/// trunk covers K..K-trunk_steps; for a DDIM trunk, trunk_steps counts steps of
/// the K_I sub-sequence over [0, K] and the branch takes the rest.
inline TreePlan make_staged_plan(const SamplerConfig& cfg, StepRule trunk_rule, StepRule branch_rule,
                                 int trunk_steps) {
    cfg.validate();
    TreePlan plan;
    plan.K = cfg.K;
    if (trunk_rule == StepRule::ddim) {
        const auto full = ddim_subsequence(cfg.K, 0, cfg.K_I);
        if (trunk_steps < 0 || trunk_steps > cfg.K_I) throw std::invalid_argument("staged plan: bad trunk steps");
        const auto mid = full.begin() + trunk_steps;
        plan.trunk = {StepRule::ddim, {full.begin(), mid}, 0.0};
        const int start = trunk_steps == 0 ? cfg.K : full[static_cast<std::size_t>(trunk_steps - 1)].lo;
        if (branch_rule == StepRule::ddim) {
            plan.branch = {StepRule::ddim, {mid, full.end()}, cfg.eta};
        } else {
            plan.branch = {branch_rule, consecutive_steps(start, 0), 0.0};
        }
        return plan;
    }
    if (trunk_rule != StepRule::d_ddpm) {
        throw std::invalid_argument("staged plan: trunk must be deterministic (d_ddpm or ddim with eta = 0)");
    }
    if (trunk_steps < 0 || trunk_steps > cfg.K) throw std::invalid_argument("staged plan: bad trunk steps");
    plan.trunk = {StepRule::d_ddpm, consecutive_steps(cfg.K, cfg.K - trunk_steps), 0.0};
    if (branch_rule == StepRule::ddim) {
        SamplerConfig c = cfg;
        c.K_t = trunk_steps;
        const int kb = effective_branch_steps(c);
        plan.branch = {StepRule::ddim, kb > 0 ? ddim_subsequence(cfg.K, trunk_steps, kb) : std::vector<StepPair>{},
                       cfg.eta};
    } else {
        plan.branch = {branch_rule, consecutive_steps(cfg.K - trunk_steps, 0), 0.0};
    }
    return plan;
}

/// Callable noise predictor eps(k, Y^k, f).
template <class D, class F>
concept NoisePredictor = requires(const D& d, int k, const Matrix& y, const F& f) {
    { d(k, y, f) } -> std::convertible_to<Matrix>;
};

struct SampleResult {
    std::vector<TrajectoryTensor> trajectories;
    std::size_t evaluations = 0;
};

/// Applies every step of a stage to y. z is drawn from `noise` only where the
/// rule needs it: DDPM for k > 1, DDIM when sigma > 0 and k_lo > 0.
template <class Feature, NoisePredictor<Feature> Denoiser>
TrajectoryTensor run_stage(const Denoiser& denoiser, TrajectoryTensor y, const Feature& f, const StagePlan& stage,
                           const NoiseSchedule& s, NoiseStream* noise, std::size_t& evaluations) {
    const std::size_t rows = y.values.rows();
    const std::size_t cols = y.values.cols();
    const Matrix zero(rows, cols);
    for (const StepPair& p : stage.steps) {
        const Matrix eps = denoiser(p.hi, y.values, f);
        ++evaluations;
        switch (stage.rule) {
            case StepRule::d_ddpm:
                y = d_ddpm_step(y, p.hi, eps, s);
                break;
            case StepRule::ddpm: {
                if (p.hi > 1 && noise == nullptr) throw std::logic_error("ddpm stage needs a noise stream");
                y = ddpm_step(y, p.hi, eps, p.hi > 1 ? noise->normal_matrix(rows, cols) : zero, s);
                break;
            }
            case StepRule::ddim: {
                const double sigma = ddim_sigma(s, p.hi, p.lo, stage.eta);
                const bool draw = sigma > 0.0 && p.lo > 0;
                if (draw && noise == nullptr) throw std::logic_error("stochastic ddim stage needs a noise stream");
                y = ddim_step(y, p.hi, p.lo, eps, draw ? noise->normal_matrix(rows, cols) : zero, stage.eta, s);
                break;
            }
        }
    }
    return y;
}

enum class BranchExecution { sequential, parallel };

/// Tree sampling: one deterministic trunk conditioned on the common feature,
/// then one branch per diverse feature starting from a copy of the trunk.
/// The starting noise Y^K is the first draw of `rng`; branch n takes its z
/// draws from rng.fork(n).
template <class Feature, NoisePredictor<Feature> Denoiser>
SampleResult staged_sample(const Denoiser& denoiser, const Feature& f_common, const std::vector<Feature>& f_diverse,
                           const TreePlan& plan, std::size_t horizon, const NoiseSchedule& s, NoiseStream& rng,
                           BranchExecution mode = BranchExecution::sequential) {
    if (f_diverse.empty()) throw std::invalid_argument("tree sampling needs at least one diverse feature");
    if (plan.K != s.steps()) throw std::invalid_argument("sampler K does not match the schedule");
    if (!plan.trunk.deterministic()) throw std::invalid_argument("trunk stage must be deterministic");

    SampleResult result;
    TrajectoryTensor trunk{rng.normal_matrix(horizon, 2), plan.K};
    trunk = run_stage(denoiser, std::move(trunk), f_common, plan.trunk, s, nullptr, result.evaluations);

    const std::size_t n = f_diverse.size();
    result.trajectories.resize(n);
    std::vector<std::size_t> counts(n, 0);
    auto run_branch = [&](std::size_t i) {
        NoiseStream stream = rng.fork(i);
        result.trajectories[i] = run_stage(denoiser, trunk, f_diverse[i], plan.branch, s, &stream, counts[i]);
    };

    if (mode == BranchExecution::parallel && n > 1) {
        const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) run_branch(i);
            });
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) run_branch(i);
    }
    for (std::size_t c : counts) result.evaluations += c;
    return result;
}

template <class Feature, NoisePredictor<Feature> Denoiser>
SampleResult tree_sample(const Denoiser& denoiser, const Feature& f_common, const std::vector<Feature>& f_diverse,
                         const SamplerConfig& cfg, const NoiseSchedule& s, NoiseStream& rng,
                         BranchExecution mode = BranchExecution::sequential) {
    if (f_diverse.size() != cfg.N) throw std::invalid_argument("tree_sample: expected N diverse features");
    return staged_sample(denoiser, f_common, f_diverse, make_tree_plan(cfg), cfg.horizon, s, rng, mode);
}

/// N independent full reverse chains with one rule. Shares the starting-noise
/// and per-chain fork conventions of staged_sample so that a zero-length trunk
/// reproduces this path exactly.
template <class Feature, NoisePredictor<Feature> Denoiser>
SampleResult sample_standard(const Denoiser& denoiser, const std::vector<Feature>& features, const SamplerConfig& cfg,
                             const NoiseSchedule& s, NoiseStream& rng, StepRule rule) {
    cfg.validate();
    if (features.empty()) throw std::invalid_argument("sample_standard: need at least one feature");
    if (cfg.K != s.steps()) throw std::invalid_argument("sampler K does not match the schedule");

    const std::size_t rows = cfg.horizon;
    const Matrix start = rng.normal_matrix(rows, 2);
    const Matrix zero(rows, 2);
    const auto ddim_pairs = ddim_subsequence(cfg.K, 0, cfg.K_I);

    SampleResult result;
    result.trajectories.reserve(features.size());
    for (std::size_t n = 0; n < features.size(); ++n) {
        NoiseStream stream = rng.fork(n);
        TrajectoryTensor y{start, cfg.K};
        if (rule == StepRule::ddim) {
            for (const StepPair& p : ddim_pairs) {
                const Matrix eps = denoiser(p.hi, y.values, features[n]);
                ++result.evaluations;
                const double sigma = ddim_sigma(s, p.hi, p.lo, cfg.eta);
                const Matrix z = (sigma > 0.0 && p.lo > 0) ? stream.normal_matrix(rows, 2) : zero;
                y = ddim_step(y, p.hi, p.lo, eps, z, cfg.eta, s);
            }
        } else {
            for (int k = cfg.K; k >= 1; --k) {
                const Matrix eps = denoiser(k, y.values, features[n]);
                ++result.evaluations;
                if (rule == StepRule::ddpm) {
                    y = ddpm_step(y, k, eps, k > 1 ? stream.normal_matrix(rows, 2) : zero, s);
                } else {
                    y = d_ddpm_step(y, k, eps, s);
                }
            }
        }
        result.trajectories.push_back(std::move(y));
    }
    return result;
}

/// Closed-form denoiser evaluation counts.
inline std::size_t standard_evaluations(const SamplerConfig& cfg, StepRule rule) {
    return cfg.N * static_cast<std::size_t>(rule == StepRule::ddim ? cfg.K_I : cfg.K);
}

inline std::size_t tree_evaluations(const SamplerConfig& cfg) {
    return static_cast<std::size_t>(cfg.K_t) + cfg.N * static_cast<std::size_t>(effective_branch_steps(cfg));
}

}  // namespace trajlab
