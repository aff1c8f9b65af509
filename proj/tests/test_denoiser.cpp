#include <gtest/gtest.h>

#include "support.hpp"
#include "trajlab/denoiser.hpp"

using namespace trajlab;

namespace {

DenoiserConfig small_config() { return DenoiserConfig{3, 4, 4, 6, 2}; }

}  // namespace

TEST(Denoiser, ZeroParametersGiveZeroOutput) {
    Denoiser d(DenoiserConfig{});
    nn::zero_values(d.parameters());
    NoiseStream rng(1);
    const Matrix out = d.predict_noise(17, rng.normal_matrix(12, 2), std::vector<double>(64, 0.7));
    EXPECT_EQ(out, Matrix(12, 2));
}

TEST(Denoiser, DeterministicAndShapePreserving) {
    Denoiser d(DenoiserConfig{});
    NoiseStream rng(2);
    d.init(rng);
    const Matrix y = rng.normal_matrix(12, 2);
    const ConditionFeature f{std::vector<double>(64, 0.1), FeatureKind::diverse, {0.0, 0.0}};
    const Matrix a = d.predict_noise(5, {y, 5}, f);
    EXPECT_EQ(a, d(5, y, f));
    EXPECT_EQ(a.rows(), 12u);
    EXPECT_EQ(a.cols(), 2u);
}

TEST(Denoiser, StepIndexChangesOutput) {
    Denoiser d(DenoiserConfig{});
    NoiseStream rng(3);
    d.init(rng);
    const Matrix y = rng.normal_matrix(12, 2);
    const std::vector<double> f(64, -0.2);
    for (int k = 1; k < 100; ++k) {
        EXPECT_NE(d.embedding()(k), d.embedding()(k + 1));
        EXPECT_NE(d.predict_noise(k, y, f), d.predict_noise(k + 1, y, f));
    }
}

TEST(Denoiser, RejectsBadInputs) {
    Denoiser d(small_config());
    EXPECT_THROW(d.predict_noise(0, Matrix(3, 2), std::vector<double>(4)), std::out_of_range);
    EXPECT_THROW(d.predict_noise(1, Matrix(4, 2), std::vector<double>(4)), std::invalid_argument);
    EXPECT_THROW(d.predict_noise(1, Matrix(3, 2), std::vector<double>(5)), std::invalid_argument);
}

TEST(Denoiser, MeanSquaredOutputGradientsMatchFiniteDifferences) {
    for (int n = 0; n < 100; ++n) {
        NoiseStream rng(9000 + n);
        Denoiser d(small_config());
        d.init(rng);
        const Matrix y = rng.normal_matrix(3, 2);
        std::vector<double> f = test::random_weights(4, rng);
        const int k = 1 + n % 10;
        auto loss = [&] {
            const Matrix e = d.predict_noise(k, y, f);
            double s = 0.0;
            for (double v : e.flat()) s += v * v;
            return s / static_cast<double>(e.size());
        };
        std::vector<double> dfeature;
        auto backward = [&] {
            Denoiser::Cache cache;
            Matrix e = d.predict_noise(k, y, f, &cache);
            e *= 2.0 / static_cast<double>(e.size());
            dfeature = d.backward(cache, e);
        };
        EXPECT_LT(test::worst(test::check_parameter_gradients(d.parameters(), loss, backward)), 1e-4)
            << "instance " << n;
        EXPECT_LT(test::relative_error(dfeature, test::numeric_gradient(f, loss)), 1e-4) << "instance " << n;
    }
}
