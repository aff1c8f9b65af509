#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "trajlab/config.hpp"
#include "trajlab/pipeline.hpp"

using namespace trajlab;

namespace {

void parse_text(RunConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    cfg.parse(is, "test.ini");
}

struct ScopedEnv {
    explicit ScopedEnv(const char* value) {
        if (value) ::setenv("TRAJLAB_SEED", value, 1);
        else ::unsetenv("TRAJLAB_SEED");
    }
    ~ScopedEnv() { ::unsetenv("TRAJLAB_SEED"); }
};

}  // namespace

TEST(RunConfig, DefaultsMatchReferenceSettings) {
    const RunConfig cfg;
    EXPECT_EQ(cfg.schedule.K, 100);
    EXPECT_EQ(cfg.sampler.K_I, 20);
    EXPECT_EQ(cfg.sampler.K_t, 20);
    EXPECT_EQ(cfg.sampler.N, 20u);
    EXPECT_EQ(cfg.train.lambda, 20.0);
    EXPECT_EQ(cfg.model.width, 64u);
    EXPECT_EQ(cfg.data.t_h, 8u);
    EXPECT_EQ(cfg.data.t_f, 12u);
}

TEST(RunConfig, ParsesSectionsCommentsAndQuotes) {
    RunConfig cfg;
    parse_text(cfg, "# header\n[sampler]\nK_t = 5   # trunk\nrule = \"ddim\"\n\n[train]\nteacher_forcing = off\n");
    EXPECT_EQ(cfg.sampler.K_t, 5);
    EXPECT_EQ(cfg.sampler.rule, "ddim");
    EXPECT_FALSE(cfg.train.teacher_forcing);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
    auto error = [](const std::string& text) {
        RunConfig cfg;
        try {
            parse_text(cfg, text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(error("[sampler]\nKt = 5\n").find("unknown config key 'sampler.Kt'"), std::string::npos);
    EXPECT_NE(error("[nope]\n").find("test.ini:1"), std::string::npos);
    EXPECT_NE(error("[sampler]\nK_t = five\n").find("test.ini:2"), std::string::npos);
    EXPECT_NE(error("K_t = 5\n").find("outside"), std::string::npos);
    EXPECT_NE(error("[sampler]\nK_t\n").find("key = value"), std::string::npos);
    EXPECT_NE(error("[train]\nlr = inf\n").find("non-finite"), std::string::npos);
    EXPECT_NE(error("[train]\nteacher_forcing = maybe\n").find("boolean"), std::string::npos);
    EXPECT_NE(error("[train]\nepochs = -3\n").find("invalid number"), std::string::npos);
}

TEST(RunConfig, OverridesAndGetters) {
    RunConfig cfg;
    cfg.apply_override("sampler.eta=0");
    cfg.apply_override("train.lr = 0.002");
    EXPECT_EQ(cfg.sampler.eta, 0.0);
    EXPECT_EQ(cfg.get("train.lr"), "0.002");
    EXPECT_THROW(cfg.apply_override("sampler.eta"), ConfigError);
    EXPECT_THROW(cfg.apply_override("eta=1"), ConfigError);
    EXPECT_THROW(cfg.get("sampler.nope"), ConfigError);
}

TEST(RunConfig, PrecedenceFileThenEnvironmentThenOverride) {
    RunConfig cfg;
    parse_text(cfg, "[run]\nseed = 3\n");
    {
        ScopedEnv env("11");
        cfg.apply_environment();
        EXPECT_EQ(cfg.run.seed, 11u);
        cfg.apply_override("run.seed=12");
        EXPECT_EQ(cfg.run.seed, 12u);
    }
    ScopedEnv unset(nullptr);
    RunConfig other;
    other.apply_environment();
    EXPECT_EQ(other.run.seed, 0u);
    ScopedEnv bad("x7");
    EXPECT_THROW(other.apply_environment(), ConfigError);
}

TEST(RunConfig, SnapshotRoundTripsEveryKey) {
    RunConfig cfg;
    cfg.apply_override("sampler.eta=0.25");
    cfg.apply_override("data.scene_scales=eth:0.5,hotel:2");
    cfg.apply_override("train.stop_goal_gradient=false");
    cfg.apply_override("schedule.beta_end=0.0123456789012345");
    const std::string snap = cfg.snapshot();
    RunConfig back;
    parse_text(back, snap);
    EXPECT_EQ(back.snapshot(), snap);
    for (const std::string& k : cfg.keys()) EXPECT_EQ(back.get(k), cfg.get(k)) << k;

    RunConfig copy = cfg;
    EXPECT_EQ(copy.snapshot(), snap);
    copy.apply_override("sampler.N=3");
    EXPECT_EQ(cfg.sampler.N, 20u);  // fields bind to their own object
}

TEST(RunConfig, MappingToComponentConfigs) {
    RunConfig cfg;
    cfg.apply_override("schedule.K=50");
    cfg.apply_override("sampler.rule=d_ddpm/ddim");
    cfg.apply_override("sampler.K_t=10");
    cfg.apply_override("goal.ttst=false");
    cfg.apply_override("train.diffusion_draws=3");
    const ModelConfig m = model_config(cfg);
    EXPECT_EQ(m.K, 50);
    const PredictOptions p = predict_options(cfg);
    EXPECT_EQ(p.sampler.K, 50);
    EXPECT_EQ(p.sampler.K_t, 10);
    EXPECT_EQ(p.choice.kind, SamplerChoice::Kind::staged);
    EXPECT_FALSE(p.ttst.has_value());
    EXPECT_EQ(train_config(cfg).diffusion_draws, 3u);

    cfg.apply_override("sampler.K_t=60");
    EXPECT_THROW(predict_options(cfg), std::invalid_argument);
}

TEST(RunConfig, SceneScales) {
    RunConfig cfg;
    cfg.apply_override("data.scale=2");
    cfg.apply_override("data.scene_scales=eth:0.5,hotel:3");
    EXPECT_EQ(scene_scale(cfg, "eth"), 0.5);
    EXPECT_EQ(scene_scale(cfg, "hotel"), 3.0);
    EXPECT_EQ(scene_scale(cfg, "univ"), 2.0);
    cfg.apply_override("data.scene_scales=eth");
    EXPECT_THROW(scene_scale(cfg, "eth"), ConfigError);
}
