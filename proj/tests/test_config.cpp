#include <gtest/gtest.h>

#include "saml/config.hpp"

namespace {

std::string error_of(const std::string& text) {
    try {
        saml::parse_config(text, "cfg.toml");
    } catch (const saml::ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, DefaultsMirrorPublishedHyperparameters) {
    const auto c = saml::parse_config("");
    EXPECT_EQ(c.episode.alpha, 1e-4);
    EXPECT_EQ(c.episode.meta_lr, 1e-4);
    EXPECT_EQ(c.episode.lambda1, 1.0);
    EXPECT_EQ(c.episode.lambda2, 5e-3);
    EXPECT_EQ(c.episode.n_meta_train, 2u);
    EXPECT_EQ(c.episode.n_meta_test, 1u);
    EXPECT_EQ(c.episode.batch_per_domain, 5u);
    EXPECT_EQ(c.episode.iterations, 2000u);
    EXPECT_EQ(c.episode.zeta, 10.0);
    EXPECT_TRUE(c.episode.second_order);
    EXPECT_EQ(c.num_domains, 4u);
    EXPECT_EQ(c.samples_per_domain, 40u);
    EXPECT_EQ(c.image_size, 64u);
    EXPECT_EQ(c.arms.size(), 5u);
    EXPECT_EQ(c.seeds(), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
}

TEST(Config, KeysOverrideDefaults) {
    const auto c = saml::parse_config(
        "iterations = 10\nlambda1 = 2\nmeta_lr = 3e-3\narm = \"deepall\"\narms = [\"saml\", \"deepall\"]\n"
        "dtype = \"f64\"\nsecond_order = false\nnorm_mode = \"running-stats\"\n");
    EXPECT_EQ(c.episode.iterations, 10u);
    EXPECT_EQ(c.episode.lambda1, 2.0);
    EXPECT_EQ(c.episode.meta_lr, 3e-3);
    EXPECT_EQ(c.episode.arm, saml::Arm::deepall);
    EXPECT_EQ(c.arms, (std::vector<saml::Arm>{saml::Arm::saml, saml::Arm::deepall}));
    EXPECT_EQ(c.dtype, saml::Dtype::f64);
    EXPECT_FALSE(c.episode.second_order);
    EXPECT_EQ(c.net.norm_mode, saml::NormMode::running_stats);
}

TEST(Config, UnknownKeyReportsLine) {
    const auto e = error_of("iterations = 10\n\nlearning_rate = 0.1\n");
    EXPECT_NE(e.find("cfg.toml"), std::string::npos) << e;
    EXPECT_NE(e.find("line 3"), std::string::npos) << e;
    EXPECT_NE(e.find("learning_rate"), std::string::npos) << e;
}

TEST(Config, NestedTablesAreUnknownKeys) { EXPECT_NE(error_of("[model]\ndepth = 3\n").find("model"), std::string::npos); }

TEST(Config, WrongTypeReportsLine) {
    const auto e = error_of("seed = 1\niterations = \"many\"\n");
    EXPECT_NE(e.find("line 2"), std::string::npos) << e;
    EXPECT_NE(error_of("iterations = -3\n").find("non-negative"), std::string::npos);
    EXPECT_NE(error_of("arm = \"magic\"\n").find("line 1"), std::string::npos);
}

TEST(Config, MalformedTomlReportsLine) {
    const auto e = error_of("seed = 1\nalpha = = 2\n");
    EXPECT_NE(e.find("line 2"), std::string::npos) << e;
}

TEST(Config, SemanticValidation) {
    EXPECT_NE(error_of("image_size = 60\n").find("2^depth"), std::string::npos);
    EXPECT_NE(error_of("depth = 1\n").find("depth"), std::string::npos);
    EXPECT_NE(error_of("lambda1 = -1\n").find("lambda1"), std::string::npos);
    EXPECT_NE(error_of("arms = []\n").find("arms"), std::string::npos);
}

TEST(Config, ResolvedConfigRoundTrips) {
    auto c = saml::parse_config("iterations = 17\nlambda2 = 0.25\narms = [\"meta-plain\"]\nseed = 9\n");
    const std::string text = saml::to_toml(c);
    EXPECT_EQ(saml::to_toml(saml::parse_config(text)), text);
    EXPECT_NE(text.find("iterations = 17"), std::string::npos);
}
