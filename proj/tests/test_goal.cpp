#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "trajlab/goal.hpp"

using namespace trajlab;

namespace {

GridSpec grid(std::size_t h, std::size_t w, double res = 0.5, Vec2 origin = {0.25, 0.25}) {
    return GridSpec{h, w, origin, res};
}

double sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

GoalNetConfig tiny_goal_config() {
    GoalNetConfig c;
    c.semantic_channels = 2;
    c.history_frames = 2;
    c.future_frames = 2;
    c.channels1 = 2;
    c.channels2 = 3;
    return c;
}

}  // namespace

// ----------------------------------------------------------------- grid

TEST(GridSpec, PixelRoundTripWithinHalfResolution) {
    NoiseStream rng(1);
    const GridSpec g = grid(20, 30, 0.7, {-3.0, 2.0});
    for (int i = 0; i < 1000; ++i) {
        const Vec2 p{g.min_x() + rng.uniform() * (g.max_x() - g.min_x()),
                     g.min_y() + rng.uniform() * (g.max_y() - g.min_y())};
        const Vec2 c = g.pixel_center(g.to_pixel(p));
        EXPECT_LE(std::abs(c[0] - p[0]), 0.35 + 1e-12);
        EXPECT_LE(std::abs(c[1] - p[1]), 0.35 + 1e-12);
    }
}

TEST(GridSpec, ColumnsFollowX) {
    const GridSpec g = grid(4, 6, 1.0, {0.0, 0.0});
    EXPECT_EQ(g.to_pixel({5.0, 1.0}), (GridSpec::Pixel{1, 5}));
    EXPECT_EQ(g.pixel_center(1, 5), (Vec2{5.0, 1.0}));
    EXPECT_THROW(g.to_pixel({6.6, 1.0}), std::out_of_range);
}

// ------------------------------------------------------------ rasterize

TEST(Rasterize, SumsToOneAndPeaksAtPosition) {
    NoiseStream rng(2);
    const GridSpec g = grid(16, 12);
    for (int i = 0; i < 300; ++i) {
        const Vec2 p{g.min_x() + rng.uniform() * (g.max_x() - g.min_x()),
                     g.min_y() + rng.uniform() * (g.max_y() - g.min_y())};
        const double sigma = 0.1 + 8.0 * rng.uniform();
        const Matrix m = rasterize_gaussian(p, g, sigma);
        EXPECT_NEAR(sum(m.flat()), 1.0, 1e-6);
        const std::size_t best = argmax_index(m.flat());
        const auto px = g.to_pixel(p);
        EXPECT_EQ(best, px.row * g.width + px.col);
    }
}

TEST(Rasterize, TinySigmaIsADelta) {
    const GridSpec g = grid(8, 8);
    const Matrix m = rasterize_gaussian(g.pixel_center(3, 5), g, 0.05);
    EXPECT_NEAR(m(3, 5), 1.0, 1e-12);
    EXPECT_NEAR(sum(m.flat()), 1.0, 1e-12);
}

TEST(Rasterize, RejectsOutsideAndBadSigma) {
    const GridSpec g = grid(8, 8);
    EXPECT_THROW(rasterize_gaussian({-1.0, 1.0}, g, 2.0), std::out_of_range);
    EXPECT_THROW(rasterize_gaussian({1.0, 1.0}, g, 0.0), std::invalid_argument);
}

TEST(Rasterize, PositionsArePeakNormalised) {
    const GridSpec g = grid(8, 8);
    const Planes p = rasterize_positions(Matrix{{1.0, 1.0}, {3.0, 2.0}}, g, 2.0);
    ASSERT_EQ(p.channels, 2u);
    for (std::size_t c = 0; c < 2; ++c) {
        const auto plane = p.plane(c);
        EXPECT_DOUBLE_EQ(*std::max_element(plane.begin(), plane.end()), 1.0);
    }
}

// -------------------------------------------------------- semantic file

TEST(SemanticGridFile, RoundTripAndErrors) {
    SemanticGrid sem;
    sem.grid = grid(5, 7, 0.5, {1.25, -2.0});
    sem.classes = Planes(3, 5, 7);
    for (std::size_t i = 0; i < sem.classes.data.size(); ++i) sem.classes.data[i] = static_cast<double>(i % 5) / 4.0;
    const auto dir = std::filesystem::temp_directory_path() / "trajlab_goal_test";
    std::filesystem::create_directories(dir);
    write_semantic_grid(dir / "s.sem", sem);
    const SemanticGrid back = read_semantic_grid(dir / "s.sem");
    EXPECT_EQ(back.grid, sem.grid);
    EXPECT_EQ(back.classes.data, sem.classes.data);

    {
        std::ofstream os(dir / "bad.sem", std::ios::binary);
        os << "NOTAGRID";
    }
    EXPECT_THROW(read_semantic_grid(dir / "bad.sem"), GridFileError);
    const auto size = std::filesystem::file_size(dir / "s.sem");
    std::filesystem::resize_file(dir / "s.sem", size - 3);
    EXPECT_THROW(read_semantic_grid(dir / "s.sem"), GridFileError);
    EXPECT_THROW(read_semantic_grid(dir / "missing.sem"), GridFileError);
    std::filesystem::remove_all(dir);
}

// -------------------------------------------------------------- goal net

TEST(GoalNet, ZeroParametersGiveOneHalfEverywhere) {
    const GoalNetConfig cfg = tiny_goal_config();
    GoalNet net(cfg);
    nn::zero_values(net.parameters());
    SemanticGrid sem{grid(8, 12), Planes(2, 8, 12, 0.3)};
    HeatMapStack hist{sem.grid, Planes(2, 8, 12, 1.0), false};
    const HeatMapStack out = predict_heatmaps(sem, hist, net);
    EXPECT_EQ(out.maps.channels, cfg.future_frames);
    EXPECT_EQ(out.maps.height, 8u);
    EXPECT_EQ(out.maps.width, 12u);
    for (double v : out.maps.data) EXPECT_EQ(v, 0.5);
}

TEST(GoalNet, RejectsGridMismatch) {
    GoalNet net(tiny_goal_config());
    SemanticGrid sem{grid(8, 8), Planes(2, 8, 8)};
    HeatMapStack hist{grid(8, 8, 1.0), Planes(2, 8, 8), false};
    EXPECT_THROW(predict_heatmaps(sem, hist, net), std::invalid_argument);
}

TEST(GoalNet, GradientsMatchFiniteDifferences) {
    for (int n = 0; n < 100; ++n) {
        NoiseStream rng(7000 + n);
        GoalNet net(tiny_goal_config());
        net.init(rng);
        const std::size_t h = n % 2 == 0 ? 8 : 6, w = 4 + 2 * (n % 3);
        Planes input(4, h, w);
        for (double& v : input.data) v = rng.uniform();
        const auto wts = test::random_weights(2 * h * w, rng);
        auto loss = [&] { return test::dot(wts, net.forward(input).data); };
        auto backward = [&] {
            GoalNet::Cache cache;
            net.forward(input, &cache);
            Planes d(2, h, w);
            std::copy(wts.begin(), wts.end(), d.data.begin());
            net.backward(cache, d);
        };
        EXPECT_LT(test::worst(test::check_parameter_gradients(net.parameters(), loss, backward)), 1e-4)
            << "instance " << n;
    }
}

// -------------------------------------------------------- goal selection

TEST(SelectGoals, PointMassGivesThatPixelEverywhere) {
    const GridSpec g = grid(6, 6);
    std::vector<double> map(36, 0.0);
    map[2 * 6 + 4] = 1.0;
    NoiseStream rng(3);
    for (const std::optional<TtstOptions>& ttst : {std::optional<TtstOptions>{}, std::optional{TtstOptions{}}}) {
        const GoalSet s = select_goals(map, g, 5, ttst, rng);
        EXPECT_EQ(s.common, g.pixel_center(2, 4));
        ASSERT_EQ(s.diverse.size(), 5u);
        for (const Vec2& d : s.diverse) EXPECT_EQ(d, g.pixel_center(2, 4));
    }
}

TEST(SelectGoals, CategoricalFrequenciesNineToOne) {
    const GridSpec g = grid(1, 2, 1.0, {0.0, 0.0});
    const std::vector<double> map{0.9, 0.1};
    NoiseStream rng(4);
    std::size_t first = 0, total = 0;
    for (int trial = 0; trial < 5000; ++trial) {
        for (const Vec2& d : select_goals(map, g, 2, std::nullopt, rng).diverse) {
            first += d[0] == 0.0;
            ++total;
        }
    }
    ASSERT_EQ(total, 10000u);
    // four standard deviations of a binomial proportion at n = 1e4
    EXPECT_NEAR(static_cast<double>(first) / static_cast<double>(total), 0.9, 4.0 * std::sqrt(0.09 / 1e4));
}

TEST(SelectGoals, CommonGoalInvariantUnderRescaling) {
    NoiseStream rng(5);
    const GridSpec g = grid(7, 9);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> map(63);
        for (double& v : map) v = rng.uniform();
        std::vector<double> scaled = map;
        const double c = 1e-3 + 100.0 * rng.uniform();
        for (double& v : scaled) v *= c;
        NoiseStream a(i), b(i);
        EXPECT_EQ(select_goals(map, g, 3, std::nullopt, a).common, select_goals(scaled, g, 3, std::nullopt, b).common);
    }
}

TEST(SelectGoals, TiesBreakToLowestIndex) {
    const GridSpec g = grid(2, 2);
    NoiseStream rng(6);
    EXPECT_EQ(select_goals(std::vector<double>{0.1, 0.4, 0.4, 0.1}, g, 1, std::nullopt, rng).common,
              g.pixel_center(0, 1));
}

TEST(SelectGoals, TtstWithoutClusteringAtNEqualsPlainSampling) {
    NoiseStream rng(7);
    const GridSpec g = grid(5, 5);
    std::vector<double> map(25);
    for (double& v : map) v = rng.uniform();
    NoiseStream a(99), b(99);
    const GoalSet plain = select_goals(map, g, 6, std::nullopt, a);
    const GoalSet ttst = select_goals(map, g, 6, TtstOptions{6, false, 20}, b);
    EXPECT_EQ(plain.diverse, ttst.diverse);
}

TEST(SelectGoals, TtstClustersFindBothModes) {
    const GridSpec g = grid(1, 20, 1.0, {0.0, 0.0});
    std::vector<double> map(20, 0.0);
    map[2] = map[3] = 1.0;
    map[16] = map[17] = 1.0;
    NoiseStream rng(8);
    GoalSet s = select_goals(map, g, 2, TtstOptions{}, rng);
    std::sort(s.diverse.begin(), s.diverse.end());
    EXPECT_NEAR(s.diverse[0][0], 2.5, 0.2);
    EXPECT_NEAR(s.diverse[1][0], 16.5, 0.2);
    EXPECT_EQ(TtstOptions{}.samples, 1000u);
    EXPECT_EQ(TtstOptions{}.iterations, 20);
}

TEST(SelectGoals, RejectsDegenerateInput) {
    const GridSpec g = grid(2, 2);
    NoiseStream rng(9);
    EXPECT_THROW(select_goals(std::vector<double>(4, 0.0), g, 2, std::nullopt, rng), std::invalid_argument);
    EXPECT_THROW(select_goals(std::vector<double>(3, 1.0), g, 2, std::nullopt, rng), std::invalid_argument);
    EXPECT_THROW(select_goals(std::vector<double>(4, 1.0), g, 0, std::nullopt, rng), std::invalid_argument);
    EXPECT_THROW(select_goals(std::vector<double>(4, 1.0), g, 5, TtstOptions{4, true, 20}, rng),
                 std::invalid_argument);
}

// ------------------------------------------------------------ soft argmax

TEST(SoftArgmax, CentroidAndGradient) {
    const GridSpec g = grid(4, 5, 0.5, {1.0, 2.0});
    std::vector<double> point(20, 0.0);
    point[7] = 3.0;
    EXPECT_EQ(soft_argmax(point, g), g.pixel_center(1, 2));

    for (int n = 0; n < 100; ++n) {
        NoiseStream rng(800 + n);
        std::vector<double> map(20);
        for (double& v : map) v = 0.05 + rng.uniform();
        const Vec2 w{rng.normal(), rng.normal()};
        auto loss = [&] {
            const Vec2 s = soft_argmax(map, g);
            return w[0] * s[0] + w[1] * s[1];
        };
        EXPECT_LT(test::relative_error(soft_argmax_backward(map, g, w), test::numeric_gradient(map, loss)), 1e-4);
    }
}
