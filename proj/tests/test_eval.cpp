#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "support.hpp"
#include "trajlab/eval.hpp"

using namespace trajlab;

namespace {

// Straightforward per-frame distance table, reduced afterwards.
std::vector<double> frame_distances(const Matrix& p, const Matrix& g) {
    std::vector<double> d;
    for (std::size_t t = 0; t < p.rows(); ++t) d.push_back(std::hypot(p(t, 0) - g(t, 0), p(t, 1) - g(t, 1)));
    return d;
}

BestOfN brute_best_of_n(const std::vector<Matrix>& preds, const Matrix& gt) {
    std::vector<double> ades, fdes;
    for (const Matrix& p : preds) {
        const auto d = frame_distances(p, gt);
        ades.push_back(std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size()));
        fdes.push_back(d.back());
    }
    return {*std::min_element(ades.begin(), ades.end()), *std::min_element(fdes.begin(), fdes.end())};
}

SamplerConfig tiny_sampler(const ModelConfig& m) {
    SamplerConfig s;
    s.K = m.K;
    s.K_I = 5;
    s.K_t = 2;
    s.N = 4;
    s.horizon = m.t_f;
    return s;
}

}  // namespace

// ----------------------------------------------------------------- metrics

TEST(Metrics, HandExample) {
    const Matrix pred{{0.0, 0.0}, {0.0, 0.0}};
    const Matrix gt{{0.0, 0.0}, {3.0, 4.0}};
    EXPECT_EQ(ade(pred, gt), 2.5);
    EXPECT_EQ(fde(pred, gt), 5.0);
    EXPECT_EQ(ade(gt, gt), 0.0);
}

TEST(Metrics, MatchBruteForce) {
    NoiseStream rng(1);
    for (int c = 0; c < 1000; ++c) {
        const std::size_t t = 1 + static_cast<std::size_t>(c % 15);
        const Matrix gt = rng.normal_matrix(t, 2);
        std::vector<Matrix> preds;
        for (int n = 0; n < 1 + c % 20; ++n) preds.push_back(rng.normal_matrix(t, 2));
        const BestOfN got = best_of_n(preds, gt);
        const BestOfN want = brute_best_of_n(preds, gt);
        EXPECT_EQ(got.ade, want.ade);
        EXPECT_EQ(got.fde, want.fde);
    }
}

TEST(Metrics, BestOfNIsMonotoneOnNestedSets) {
    NoiseStream rng(2);
    for (int c = 0; c < 200; ++c) {
        const Matrix gt = rng.normal_matrix(12, 2);
        std::vector<Matrix> preds;
        BestOfN prev{1e300, 1e300};
        for (int n = 0; n < 20; ++n) {
            preds.push_back(rng.normal_matrix(12, 2));
            const BestOfN b = best_of_n(preds, gt);
            EXPECT_LE(b.ade, prev.ade);
            EXPECT_LE(b.fde, prev.fde);
            prev = b;
        }
    }
}

TEST(Metrics, ShapeErrors) {
    EXPECT_THROW(ade(Matrix(3, 2), Matrix(4, 2)), std::invalid_argument);
    EXPECT_THROW(fde(Matrix(3, 3), Matrix(3, 3)), std::invalid_argument);
    EXPECT_THROW(ade(Matrix(0, 2), Matrix(0, 2)), std::invalid_argument);
    EXPECT_THROW(best_of_n({}, Matrix(3, 2)), std::invalid_argument);
}

// ------------------------------------------------------------ sampler names

TEST(SamplerChoice, ParsesNames) {
    EXPECT_EQ(parse_sampler_choice("ts").kind, SamplerChoice::Kind::tree);
    EXPECT_EQ(parse_sampler_choice("tree").name(), "ts");
    const SamplerChoice d = parse_sampler_choice("d-ddpm");
    EXPECT_EQ(d.kind, SamplerChoice::Kind::standard);
    EXPECT_EQ(d.rule, StepRule::d_ddpm);
    EXPECT_EQ(d.name(), "d_ddpm");
    const SamplerChoice s = parse_sampler_choice("ddim/ddpm");
    EXPECT_EQ(s.kind, SamplerChoice::Kind::staged);
    EXPECT_EQ(s.trunk, StepRule::ddim);
    EXPECT_EQ(s.branch, StepRule::ddpm);
    EXPECT_EQ(s.name(), "ddim/ddpm");
    EXPECT_THROW(parse_sampler_choice("euler"), std::invalid_argument);
    EXPECT_THROW(parse_sampler_choice("ddim/"), std::invalid_argument);
}

TEST(SamplerChoice, ExpectedEvaluationsAtDefaultConfig) {
    const SamplerConfig cfg;
    EXPECT_EQ(expected_evaluations(parse_sampler_choice("ts"), cfg), 340u);
    EXPECT_EQ(expected_evaluations(parse_sampler_choice("ddpm"), cfg), 2000u);
    EXPECT_EQ(expected_evaluations(parse_sampler_choice("d_ddpm"), cfg), 2000u);
    EXPECT_EQ(expected_evaluations(parse_sampler_choice("ddim"), cfg), 400u);
    EXPECT_EQ(expected_evaluations(parse_sampler_choice("d_ddpm/ddim"), cfg), 340u);
}

// --------------------------------------------------------------- prediction

class EvalPipeline : public ::testing::Test {
protected:
    void SetUp() override {
        model.init(3);
        NoiseStream rng(4);
        for (int i = 0; i < 3; ++i) scenes.push_back(test::tiny_scene(cfg, rng));
        for (const auto& s : scenes) windows.push_back({&s.window, &s.semantic});
        opt.sampler = tiny_sampler(cfg);
        opt.ttst = TtstOptions{50, true, 5};
    }

    ModelConfig cfg = test::tiny_model_config();
    TrajectoryModel model{cfg};
    std::vector<test::TinyScene> scenes;
    std::vector<EvalWindow> windows;
    PredictOptions opt;
};

TEST_F(EvalPipeline, PredictionCountsAndShapes) {
    for (const char* name : {"ts", "ddpm", "d_ddpm", "ddim", "d_ddpm/ddim", "ddim/ddim"}) {
        opt.choice = parse_sampler_choice(name);
        const PredictionSet p = predict_window(model, scenes[0].semantic, scenes[0].window, opt, 11);
        EXPECT_EQ(p.trajectories.size(), 4u) << name;
        EXPECT_EQ(p.evaluations, expected_evaluations(opt.choice, opt.sampler)) << name;
        EXPECT_EQ(p.sampler, opt.choice.name());
        for (const Matrix& t : p.trajectories) {
            EXPECT_EQ(t.rows(), cfg.t_f);
            EXPECT_EQ(t.cols(), 2u);
        }
    }
}

TEST_F(EvalPipeline, GoalsDoNotDependOnSampler) {
    opt.choice = parse_sampler_choice("ts");
    const PredictionSet a = predict_window(model, scenes[1].semantic, scenes[1].window, opt, 5);
    opt.choice = parse_sampler_choice("ddpm");
    const PredictionSet b = predict_window(model, scenes[1].semantic, scenes[1].window, opt, 5);
    EXPECT_EQ(a.goals.diverse, b.goals.diverse);
    EXPECT_EQ(a.goals.common, b.goals.common);
}

TEST_F(EvalPipeline, TrunkFreeTreeEqualsDdim) {
    opt.sampler.K_t = 0;
    opt.choice = parse_sampler_choice("ts");
    const EvalSummary ts = evaluate(model, windows, opt, 8);
    opt.choice = parse_sampler_choice("ddim");
    const EvalSummary ddim = evaluate(model, windows, opt, 8);
    EXPECT_EQ(ts.ade, ddim.ade);
    EXPECT_EQ(ts.fde, ddim.fde);
    EXPECT_EQ(ts.evaluations, ddim.evaluations);
}

TEST_F(EvalPipeline, EvaluateAveragesBestOfN) {
    opt.choice = parse_sampler_choice("ts");
    std::vector<PredictionSet> preds;
    const EvalSummary s = evaluate(model, windows, opt, 9, &preds);
    ASSERT_EQ(preds.size(), 3u);
    double a = 0.0, f = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const BestOfN b = best_of_n(preds[i].trajectories, scenes[i].window.future);
        a += b.ade;
        f += b.fde;
    }
    EXPECT_DOUBLE_EQ(s.ade, a / 3.0);
    EXPECT_DOUBLE_EQ(s.fde, f / 3.0);
    EXPECT_EQ(s.windows, 3u);
    EXPECT_EQ(s.evaluations, 2u + 4u * 4u);  // K_t + N * floor((K - K_t) * K_I / K)

    const EvalSummary again = evaluate(model, windows, opt, 9);
    EXPECT_EQ(again.ade, s.ade);
    EXPECT_THROW(evaluate(model, {}, opt, 9), std::invalid_argument);
}

TEST_F(EvalPipeline, BenchRowsCarryClosedFormCounts) {
    const auto grid = default_bench_grid(opt.sampler);
    ASSERT_EQ(grid.size(), 9u);
    const auto rows = bench_samplers(model, windows, grid, opt, 1, 5);
    ASSERT_EQ(rows.size(), grid.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].evals, expected_evaluations(grid[i].choice, grid[i].config));
        EXPECT_GE(rows[i].ms, 0.0);
    }
    EXPECT_THROW(bench_samplers(model, windows, grid, opt, 1, 4), std::invalid_argument);

    std::ostringstream os;
    write_bench_csv(os, rows);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, kBenchHeader);
    std::size_t n = 0;
    while (std::getline(is, line)) {
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 9);
        ++n;
    }
    EXPECT_EQ(n, rows.size());
}

TEST_F(EvalPipeline, EvalCsvAndJsonExport) {
    opt.choice = parse_sampler_choice("ddim");
    std::vector<PredictionSet> preds;
    const EvalSummary s = evaluate(model, windows, opt, 2, &preds);
    std::ostringstream os;
    write_eval_csv(os, "ddim", opt.sampler, s);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kEvalHeader);

    const nlohmann::json j = to_json(preds[0]);
    EXPECT_EQ(j.at("scene"), "tiny");
    EXPECT_EQ(j.at("sampler"), "ddim");
    EXPECT_EQ(j.at("trajectories").size(), 4u);
    EXPECT_EQ(j.at("trajectories")[0].size(), cfg.t_f);
    EXPECT_EQ(j.at("trajectories")[0][2][1].get<double>(), preds[0].trajectories[0](2, 1));
    EXPECT_FALSE(j.contains("wall_ms"));

    const auto path = std::filesystem::temp_directory_path() / "trajlab_eval_test.json";
    write_predictions_json(path, preds);
    std::ifstream is(path);
    const nlohmann::json back = nlohmann::json::parse(is);
    EXPECT_EQ(back.size(), 3u);
    std::filesystem::remove(path);
}

TEST(WindowSeed, DistinctPerIndexAndStable) {
    EXPECT_EQ(window_seed(5, 3), window_seed(5, 3));
    EXPECT_NE(window_seed(5, 3), window_seed(5, 4));
    EXPECT_NE(window_seed(5, 3), window_seed(6, 3));
}
