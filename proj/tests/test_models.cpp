#include <gtest/gtest.h>

#include <filesystem>

#include "saml/autodiff.hpp"
#include "saml/checkpoint.hpp"
#include "saml/models.hpp"
#include "test_support.hpp"

using saml::Shape;
using T64 = saml::Tensor<double>;
using testing_support::random_tensor;

namespace {

saml::SegNetConfig tiny_config() {
    saml::SegNetConfig c;
    c.base_channels = 2;
    c.depth = 2;
    return c;
}

void zero_head(saml::SegNetParams<double>& p) {
    for (std::size_t i = 0; i < p.weights.size(); ++i)
        if (p.weights.names[i].rfind("head.", 0) == 0) p.weights.values[i] = T64::zeros(p.weights.values[i].shape());
}

}  // namespace

TEST(Models, SameSeedIsBitwiseIdentical) {
    auto a = saml::init_params<double>(saml::SegNetConfig{}, 7);
    auto b = saml::init_params<double>(saml::SegNetConfig{}, 7);
    EXPECT_TRUE(a.weights.same_values(b.weights));
    EXPECT_TRUE(a.running.same_values(b.running));
}

TEST(Models, DifferentSeedsDiffer) {
    auto a = saml::init_params<double>(saml::SegNetConfig{}, 7);
    auto b = saml::init_params<double>(saml::SegNetConfig{}, 8);
    EXPECT_FALSE(a.weights.same_values(b.weights));
}

TEST(Models, DepthOneIsConfigError) {
    saml::SegNetConfig c;
    c.depth = 1;
    EXPECT_THROW(saml::init_params<double>(c, 0), saml::ConfigError);
}

TEST(Models, DefaultNetworkIsDeskSized) {
    auto p = saml::init_params<float>(saml::SegNetConfig{}, 0);
    EXPECT_GT(p.weights.count(), 20000u);
    EXPECT_LT(p.weights.count(), 120000u);
}

TEST(Models, DecoderStageSizes) {
    auto p = saml::init_params<float>(saml::SegNetConfig{}, 1);
    auto x = random_tensor({1, 1, 64, 64}, 3).cast<float>();
    auto out = saml::seg_forward(p, x, saml::NormMode::train_batch_stats);
    ASSERT_EQ(out.decoder_acts.size(), 3u);
    EXPECT_EQ(out.decoder_acts[0].shape(), (Shape{1, 32, 16, 16}));
    EXPECT_EQ(out.decoder_acts[1].shape(), (Shape{1, 16, 32, 32}));
    EXPECT_EQ(out.decoder_acts[2].shape(), (Shape{1, 8, 64, 64}));
    EXPECT_EQ(out.logits.shape(), (Shape{1, 2, 64, 64}));
}

TEST(Models, OutputMatchesInputSizeForValidConfigs) {
    for (std::size_t depth : {2u, 3u})
        for (std::size_t size : {16u, 32u}) {
            saml::SegNetConfig c = tiny_config();
            c.depth = depth;
            auto p = saml::init_params<double>(c, 2);
            auto out = saml::seg_forward(p, random_tensor({2, 1, size, size}, 5), saml::NormMode::train_batch_stats);
            EXPECT_EQ(out.prob.shape(), (Shape{2, 2, size, size}));
        }
}

TEST(Models, RejectsIndivisibleInput) {
    auto p = saml::init_params<double>(tiny_config(), 2);
    EXPECT_THROW(saml::seg_forward(p, random_tensor({1, 1, 18, 16}, 5), saml::NormMode::train_batch_stats),
                 saml::ShapeError);
    EXPECT_THROW(saml::seg_forward(p, random_tensor({1, 2, 16, 16}, 5), saml::NormMode::train_batch_stats),
                 saml::ShapeError);
}

TEST(Models, ZeroHeadGivesHalfProbability) {
    auto p = saml::init_params<double>(tiny_config(), 3);
    zero_head(p);
    auto out = saml::seg_forward(p, random_tensor({2, 1, 16, 16}, 9), saml::NormMode::train_batch_stats);
    for (double v : out.prob.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Models, ProbabilitiesSumToOne) {
    auto p = saml::init_params<double>(tiny_config(), 3);
    auto out = saml::seg_forward(p, random_tensor({2, 1, 16, 16}, 9), saml::NormMode::train_batch_stats);
    const std::size_t plane = 16 * 16;
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < plane; ++i)
            EXPECT_NEAR(out.prob[n * 2 * plane + i] + out.prob[n * 2 * plane + plane + i], 1.0, 1e-5);
}

TEST(Models, IdenticalImagesGiveIdenticalRows) {
    auto p = saml::init_params<double>(tiny_config(), 4);
    auto one = random_tensor({1, 1, 16, 16}, 11);
    auto out = saml::seg_forward(p, saml::concat<double>({one, one}, 0), saml::NormMode::train_batch_stats);
    const std::size_t row = out.logits.numel() / 2;
    for (std::size_t i = 0; i < row; ++i) EXPECT_EQ(out.logits[i], out.logits[row + i]);
}

TEST(Models, TestBatchStatsIgnoreRunningStatistics) {
    auto p = saml::init_params<double>(tiny_config(), 4);
    auto x = random_tensor({2, 1, 16, 16}, 12);
    auto before = saml::seg_forward(p, x, saml::NormMode::test_batch_stats);
    auto trained = saml::seg_forward(p, random_tensor({2, 1, 16, 16}, 13, 0.0, 5.0), saml::NormMode::train_batch_stats);
    saml::update_running_stats(p, trained);
    auto after = saml::seg_forward(p, x, saml::NormMode::test_batch_stats);
    EXPECT_TRUE(before.logits.same_values(after.logits));
    auto running = saml::seg_forward(p, x, saml::NormMode::running_stats);
    EXPECT_FALSE(running.logits.same_values(after.logits));
}

TEST(Models, RunningStatsMoveTowardBatch) {
    auto p = saml::init_params<double>(tiny_config(), 4);
    auto out = saml::seg_forward(p, random_tensor({2, 1, 16, 16}, 13, 2.0, 3.0), saml::NormMode::train_batch_stats);
    saml::update_running_stats(p, out);
    const T64& stem_mean = p.running.get("stem.norm.running_mean");
    for (std::size_t c = 0; c < stem_mean.numel(); ++c)
        EXPECT_NEAR(stem_mean[c], 0.1 * out.batch_mean[0][c], 1e-12);
}

TEST(Models, DeepCopyEvolvesIndependently) {
    auto p = saml::init_params<double>(tiny_config(), 5);
    auto snapshot = p.clone();
    auto copy = p.clone();
    std::vector<T64> shifted;
    for (const auto& v : copy.weights.values) shifted.push_back(saml::shift(v, 1.0));
    copy.weights = copy.weights.with_values(shifted);
    EXPECT_TRUE(p.weights.same_values(snapshot.weights));
    EXPECT_FALSE(copy.weights.same_values(snapshot.weights));
}

TEST(Models, ForwardGradientMatchesFiniteDifferences) {
    auto p = saml::init_params<double>(tiny_config(), 6);
    auto x = random_tensor({2, 1, 16, 16}, 21);
    auto target = random_tensor({2, 2, 16, 16}, 22);
    for (const std::string name : {"stem.conv.weight", "dec0.up.conv.weight", "head.weight"}) {
        const std::size_t idx = std::find(p.weights.names.begin(), p.weights.names.end(), name) - p.weights.names.begin();
        std::function<T64(const T64&)> fn = [&](const T64& w) {
            auto q = p;
            q.weights.values[idx] = w;
            auto out = saml::seg_forward(q, x, saml::NormMode::train_batch_stats);
            return saml::sum(saml::mul(out.prob, target));
        };
        EXPECT_LT(saml::finite_difference_check(fn, p.weights.values[idx]), 1e-4) << name;
    }
}

TEST(EmbedHead, ZeroWeightsGiveZeroOutput) {
    auto phi = saml::init_embed_params<double>(6, 1);
    for (auto& v : phi.weights.values) v = T64::zeros(v.shape());
    auto out = saml::embed_forward(phi, random_tensor({6}, 2));
    EXPECT_EQ(out.shape(), (Shape{32}));
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(EmbedHead, WidthMismatchThrows) {
    auto phi = saml::init_embed_params<double>(6, 1);
    EXPECT_THROW(saml::embed_forward(phi, random_tensor({5}, 2)), saml::ShapeError);
}

TEST(EmbedHead, Deterministic) {
    auto phi = saml::init_embed_params<double>(6, 1);
    auto e = random_tensor({3, 6}, 2);
    EXPECT_TRUE(saml::embed_forward(phi, e).same_values(saml::embed_forward(phi, e)));
}

TEST(EmbedHead, GradientsMatchFiniteDifferences) {
    auto phi = saml::init_embed_params<double>(6, 1);
    auto e = random_tensor({6}, 2);
    auto w = random_tensor({32}, 3);
    std::function<T64(const T64&)> wrt_e = [&](const T64& v) { return saml::sum(saml::mul(saml::embed_forward(phi, v), w)); };
    EXPECT_LT(saml::finite_difference_check(wrt_e, e), 1e-4);
    for (std::size_t i = 0; i < 4; ++i) {
        std::function<T64(const T64&)> wrt_phi = [&](const T64& v) {
            auto q = phi.weights;
            q.values[i] = v;
            return saml::sum(saml::mul(saml::embed_forward(q, e), w));
        };
        EXPECT_LT(saml::finite_difference_check(wrt_phi, phi.weights.values[i]), 1e-4) << phi.weights.names[i];
    }
}

TEST(Checkpoint, RoundTripIsExact) {
    auto p = saml::init_params<float>(tiny_config(), 9);
    const auto path = std::filesystem::temp_directory_path() / "saml_models_ckpt.bin";
    saml::save_params(path, p);
    auto q = saml::load_params<float>(path);
    EXPECT_TRUE(p.weights.same_values(q.weights));
    EXPECT_TRUE(p.running.same_values(q.running));
    EXPECT_EQ(q.config.base_channels, 2u);
    std::filesystem::remove(path);
}

TEST(Checkpoint, DetectsCorruption) {
    saml::TensorContainer c;
    c.put("a", random_tensor({3, 2}, 1));
    std::string bytes = c.serialize();
    EXPECT_THROW(saml::TensorContainer::parse(bytes.substr(0, bytes.size() - 3)), saml::IoError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(saml::TensorContainer::parse(bad), saml::IoError);
    auto back = saml::TensorContainer::parse(bytes).get<double>("a");
    EXPECT_TRUE(back.same_values(random_tensor({3, 2}, 1)));
}
