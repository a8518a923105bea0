#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "saml/metrics.hpp"
#include "saml/synthdata.hpp"
#include "test_support.hpp"

using saml::Mask;

namespace {

Mask square(std::size_t n, std::size_t side) {
    Mask m(n, n, 0);
    const std::size_t t = (n - side) / 2;
    for (std::size_t y = t; y < t + side; ++y)
        for (std::size_t x = t; x < t + side; ++x) m.at(y, x) = 1;
    return m;
}

Mask bar(std::size_t n, std::size_t h, std::size_t w) {
    Mask m(n, n, 0);
    const std::size_t t = (n - h) / 2, l = (n - w) / 2;
    for (std::size_t y = t; y < t + h; ++y)
        for (std::size_t x = l; x < l + w; ++x) m.at(y, x) = 1;
    return m;
}

Mask disk(std::size_t n, double r) {
    Mask m(n, n, 0);
    const double c = n / 2.0;
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dy = y + 0.5 - c, dx = x + 0.5 - c;
            m.at(y, x) = dy * dy + dx * dx <= r * r;
        }
    return m;
}

// Blobs, speckle and sparse noise, so boundaries of every shape get exercised.
Mask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    Mask m(h, w, 0);
    std::uniform_int_distribution<int> kind(0, 2);
    switch (kind(rng)) {
        case 0: {
            std::uniform_real_distribution<double> u(0.1, 0.9), r(0.05, 0.45);
            const double cy = u(rng) * h, cx = u(rng) * w, ry = r(rng) * h + 0.6, rx = r(rng) * w + 0.6;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double a = (y - cy) / ry, b = (x - cx) / rx;
                    m.at(y, x) = a * a + b * b <= 1.0;
                }
            break;
        }
        case 1: {
            std::bernoulli_distribution coin(0.5);
            for (auto& v : m.data) v = coin(rng);
            break;
        }
        default: {
            std::bernoulli_distribution coin(0.03);
            for (auto& v : m.data) v = coin(rng);
        }
    }
    if (saml::count(m) == 0) m.at(h / 2, w / 2) = 1;
    return m;
}

}  // namespace

TEST(Dice, Examples) {
    const Mask a = square(16, 6);
    EXPECT_EQ(saml::dice_score(a, a), 1.0);
    Mask p(1, 4, 0), g(1, 4, 0);
    p.at(0, 0) = p.at(0, 1) = 1;
    g.at(0, 1) = g.at(0, 2) = 1;
    EXPECT_EQ(saml::dice_score(p, g), 0.5);
    Mask q(1, 4, 0);
    q.at(0, 3) = 1;
    EXPECT_EQ(saml::dice_score(p, q), 0.0);
    EXPECT_EQ(saml::dice_score(Mask(4, 4, 0), Mask(4, 4, 0)), 1.0);
    EXPECT_THROW(saml::dice_score(Mask(4, 4, 0), Mask(4, 5, 0)), saml::ShapeError);
}

TEST(Dice, SymmetricAndOneOnlyForIdentical) {
    std::mt19937_64 rng(17);
    for (int i = 0; i < 200; ++i) {
        const Mask a = random_mask(20, 24, rng), b = random_mask(20, 24, rng);
        EXPECT_EQ(saml::dice_score(a, b), saml::dice_score(b, a));
        EXPECT_EQ(saml::dice_score(a, b) == 1.0, a == b);
        Mask c = a;
        c.data[rng() % c.size()] ^= 1;
        if (saml::count(c) > 0) {
            EXPECT_LT(saml::dice_score(a, c), 1.0);
        }
    }
}

TEST(Asd, Examples) {
    const Mask a = disk(32, 9);
    EXPECT_EQ(*saml::asd(a, a), 0.0);
    Mask p(8, 8, 0), g(8, 8, 0);
    p.at(4, 1) = 1;
    g.at(4, 4) = 1;
    EXPECT_EQ(*saml::asd(p, g), 3.0);
    // 1-px margin between the rings; the four outer corners sit sqrt(2) from the inner ring.
    const double outer_to_inner = (32.0 + 4.0 * std::sqrt(2.0)) / 36.0;
    EXPECT_DOUBLE_EQ(*saml::asd(square(20, 10), square(20, 8)), 0.5 * (1.0 + outer_to_inner));
}

TEST(Asd, UndefinedForEmptyMasks) {
    EXPECT_FALSE(saml::asd(Mask(8, 8, 0), square(8, 2)).has_value());
    EXPECT_FALSE(saml::asd(square(8, 2), Mask(8, 8, 0)).has_value());
}

TEST(Asd, MatchesBruteForceExactly) {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> side(2, 64);
    for (int i = 0; i < 200; ++i) {
        const std::size_t h = side(rng), w = side(rng);
        const Mask a = random_mask(h, w, rng), b = random_mask(h, w, rng);
        const auto fast = saml::asd(a, b), slow = saml::asd_brute_force(a, b);
        ASSERT_TRUE(fast && slow);
        ASSERT_EQ(*fast, *slow) << h << "x" << w;
    }
}

TEST(Asd, SymmetricAndZeroOnlyForSameBoundary) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
        const Mask a = random_mask(24, 24, rng), b = random_mask(24, 24, rng);
        EXPECT_EQ(*saml::asd(a, b), *saml::asd(b, a));
        EXPECT_EQ(*saml::asd(a, b) == 0.0, saml::inner_boundary(a) == saml::inner_boundary(b));
    }
}

TEST(DistanceTransform, MatchesBruteForce) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        const Mask m = random_mask(13, 29, rng);
        const auto dt = saml::squared_distance_transform(m);
        for (std::size_t y = 0; y < m.height; ++y)
            for (std::size_t x = 0; x < m.width; ++x) {
                double best = INFINITY;
                for (std::size_t v = 0; v < m.height; ++v)
                    for (std::size_t u = 0; u < m.width; ++u)
                        if (m.at(v, u)) best = std::min(best, double((y - v) * (y - v) + (x - u) * (x - u)));
                ASSERT_EQ(dt.at(y, x), best);
            }
    }
}

TEST(Ipq, SquareNearQuarterPi) {
    EXPECT_NEAR(saml::ipq_measure(square(128, 64)), std::numbers::pi / 4, 0.05 * std::numbers::pi / 4);
}

TEST(Ipq, DiskCloseToHighResolutionRasterisation) {
    const double coarse = saml::ipq_measure(disk(128, 32)), fine = saml::ipq_measure(disk(1024, 256));
    EXPECT_NEAR(coarse, 0.73876, 1e-4);
    EXPECT_NEAR(coarse, fine, 0.1 * fine);
}

TEST(Ipq, Ordering) {
    const double sq = saml::ipq_measure(square(128, 64)), b = saml::ipq_measure(bar(128, 2, 64));
    EXPECT_GT(sq, b);
    // A rasterised disk pays for its staircase boundary and scores below the square.
    EXPECT_LT(saml::ipq_measure(disk(128, 32)), sq);
}

TEST(Ipq, ReciprocalOfCompactness) {
    saml::GradModeGuard off(false);
    for (const Mask& m : {square(32, 12), disk(32, 9), bar(32, 3, 20)}) {
        const auto p = testing_support::as_map<double>(m);
        EXPECT_NEAR(saml::ipq_measure(m) * saml::compactness_loss(p, 0.0).item(), 1.0, 1e-12);
        EXPECT_NEAR(saml::ipq_measure(m) * saml::compactness_loss(p).item(), 1.0, 0.05);
    }
    EXPECT_THROW(saml::ipq_measure(Mask(8, 8, 0)), saml::Error);
    EXPECT_THROW(saml::ipq_measure(Mask(8, 8, 1)), saml::Error);
}

TEST(Argmax, TiesGoToBackground) {
    saml::Tensor<float> logits({1, 2, 1, 3}, {0.f, 1.f, 2.f, 0.f, 1.f, 3.f});
    const auto m = saml::argmax_masks(logits);
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0].data, (std::vector<std::uint8_t>{0, 0, 1}));
}

TEST(Evaluate, PerfectPredictionScores) {
    std::vector<Mask> gt{square(16, 6), disk(16, 5)};
    const auto scores = saml::score_masks(gt, gt);
    saml::EvalRecord r;
    r.samples = scores;
    EXPECT_EQ(r.dice_mean(), 100.0);
    EXPECT_EQ(r.dice_std(), 0.0);
    EXPECT_EQ(r.asd_mean(), 0.0);
    EXPECT_EQ(r.n_undefined_asd(), 0u);
}

TEST(Evaluate, UndefinedAsdIsCountedNotAveraged) {
    saml::EvalRecord r;
    r.samples = saml::score_masks({Mask(16, 16, 0), square(16, 4)}, {square(16, 6), square(16, 6)});
    EXPECT_EQ(r.n_undefined_asd(), 1u);
    EXPECT_EQ(r.asd_mean(), *saml::asd(square(16, 4), square(16, 6)));
    EXPECT_FALSE(r.samples[0].ipq.has_value());
}

TEST(Evaluate, DeterministicAndOrderInvariant) {
    saml::SegNetConfig net;
    net.base_channels = 2;
    net.depth = 2;
    const auto params = saml::init_params<float>(net, 3);
    const auto ds = saml::generate_dataset({saml::default_domain_specs()[1]}, 5, 16, 16, 4);
    auto dom = saml::prepare_domain(ds.domains[0]);
    const auto a = saml::evaluate(params, dom), b = saml::evaluate(params, dom);
    EXPECT_EQ(a, b);
    std::reverse(dom.images.begin(), dom.images.end());
    std::reverse(dom.masks.begin(), dom.masks.end());
    auto c = saml::evaluate(params, dom);
    std::reverse(c.samples.begin(), c.samples.end());
    EXPECT_EQ(a.samples, c.samples);
}
