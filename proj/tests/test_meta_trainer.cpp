#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "saml/meta_trainer.hpp"

namespace fs = std::filesystem;
using T64 = saml::Tensor<double>;

namespace {

// J(theta) = L_tr(theta) + L_te(theta - alpha * L_tr'(theta)) with L = theta^2.
T64 quadratic_toy(const T64& theta, double alpha, bool second_order) {
    auto run = [&](const T64& th) {
        T64 l_tr = saml::square(th);
        T64 adapted = saml::gradient_step<double>({th}, l_tr, alpha, second_order)[0];
        return saml::add(l_tr, saml::square(adapted));
    };
    if (theta.tracked()) return run(theta);
    saml::GradModeGuard on(true);
    saml::Tape<double> tape;
    return run(tape.watch(theta)).detach();
}

double toy_gradient(double theta, double alpha, bool second_order) {
    saml::Tape<double> tape;
    T64 th = tape.watch(T64::scalar(theta));
    return saml::gradient(quadratic_toy(th, alpha, second_order), th).item();
}

saml::SegNetConfig tiny_net() {
    saml::SegNetConfig c;
    c.base_channels = 2;
    c.depth = 2;
    return c;
}

saml::EpisodeConfig tiny_episode(saml::Arm arm) {
    saml::EpisodeConfig c;
    c.arm = arm;
    c.batch_per_domain = 2;
    c.iterations = 3;
    c.meta_lr = 1e-3;
    c.phi_lr = 1e-3;
    c.alpha = 1e-2;
    c.morphology = {1, 2};
    return c;
}

const std::vector<saml::PreparedDomain>& tiny_domains() {
    static const auto domains = [] {
        auto ds = saml::generate_dataset(saml::default_domain_specs(), 6, 16, 16, 77);
        return saml::prepare_domains(ds, {0, 1, 2});
    }();
    return domains;
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("saml_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Domain splitting

TEST(SplitDomains, UniformAndDisjoint) {
    std::mt19937_64 rng(1);
    std::map<int, int> test_counts;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        auto [tr, te] = saml::split_domains({0, 1, 2}, 2, 1, rng);
        ASSERT_EQ(tr.size(), 2u);
        ASSERT_EQ(te.size(), 1u);
        ASSERT_EQ(std::count(tr.begin(), tr.end(), te[0]), 0);
        ++test_counts[te[0]];
    }
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(test_counts[d] / double(draws), 1.0 / 3.0, 0.03);
}

TEST(SplitDomains, TooFewDomains) {
    std::mt19937_64 rng(1);
    EXPECT_THROW(saml::split_domains({0, 1}, 2, 1, rng), saml::Error);
    EXPECT_THROW(saml::split_domains({0, 1, 2}, 2, 0, rng), saml::Error);
}

TEST(SampleEpisode, BatchesComeFromTheSplit) {
    std::mt19937_64 rng(3);
    auto cfg = tiny_episode(saml::Arm::saml);
    for (int i = 0; i < 20; ++i) {
        auto ep = saml::sample_episode<double>(tiny_domains(), cfg, rng);
        EXPECT_EQ(ep.train.size(), 4u);
        EXPECT_EQ(ep.test.size(), 2u);
        for (int d : ep.test.domains) EXPECT_EQ(std::count(ep.train.domains.begin(), ep.train.domains.end(), d), 0);
    }
}

TEST(SampleEpisode, SmallDomainCounts) {
    std::mt19937_64 rng(3);
    auto cfg = tiny_episode(saml::Arm::saml);
    std::vector<saml::PreparedDomain> two(tiny_domains().begin(), tiny_domains().begin() + 2);
    auto ep = saml::sample_episode<double>(two, cfg, rng);
    EXPECT_EQ(ep.train.size(), 2u);
    EXPECT_NE(ep.train.domains[0], ep.test.domains[0]);
    std::vector<saml::PreparedDomain> one(tiny_domains().begin(), tiny_domains().begin() + 1);
    ep = saml::sample_episode<double>(one, cfg, rng);
    EXPECT_EQ(ep.train.size(), 2u);
    EXPECT_EQ(ep.test.size(), 2u);
    EXPECT_FALSE(ep.train.x.same_values(ep.test.x));
}

// ---------------------------------------------------------------------------
// Inner update on the scalar toy

TEST(InnerUpdate, QuadraticToyStep) {
    saml::Tape<double> tape;
    T64 th = tape.watch(T64::scalar(1.0));
    EXPECT_NEAR(saml::gradient_step<double>({th}, saml::square(th), 0.1, true)[0].item(), 0.8, 1e-15);
    EXPECT_EQ(saml::gradient_step<double>({th}, saml::square(th), 0.0, true)[0].item(), 1.0);
}

TEST(InnerUpdate, SecondAndFirstOrderMetaGradients) {
    EXPECT_NEAR(toy_gradient(1.0, 0.1, true), 3.28, 1e-6);
    EXPECT_NEAR(toy_gradient(1.0, 0.1, false), 3.6, 1e-6);
}

TEST(InnerUpdate, ToyMetaGradientMatchesFiniteDifferences) {
    for (double theta : {1.0, -0.7, 2.5}) {
        std::function<T64(const T64&)> fn = [](const T64& t) { return quadratic_toy(t, 0.1, true); };
        EXPECT_LT(saml::finite_difference_check(fn, T64::scalar(theta)), 1e-6);
    }
}

TEST(InnerUpdate, NetworkStepLeavesThetaAndReducesLoss) {
    auto params = saml::init_params<double>(tiny_net(), 5);
    const auto snapshot = params.weights.clone();
    std::mt19937_64 rng(9);
    auto batch = saml::sample_pooled<double>(tiny_domains(), 2, rng);
    saml::Tape<double> tape;
    auto theta = params.weights.with_values(tape.watch(params.weights.values));
    auto fwd = saml::segnet_forward(params.config, params.running);
    auto inner = saml::inner_update(fwd, theta, batch, 1e-4, true);
    EXPECT_TRUE(params.weights.same_values(snapshot));
    auto zero = saml::inner_update(fwd, theta, batch, 0.0, true);
    EXPECT_TRUE(zero.adapted.detach_all().same_values(params.weights));
    saml::GradModeGuard off(false);
    const double before = saml::dice_loss(fwd(params.weights, batch.x).foreground(), batch.y).item();
    const double after = saml::dice_loss(fwd(inner.adapted.detach_all(), batch.x).foreground(), batch.y).item();
    EXPECT_LT(after, before);
}

// ---------------------------------------------------------------------------
// Meta objective

TEST(MetaObjective, ArmsComposeBitwise) {
    auto params = saml::init_params<double>(tiny_net(), 5);
    auto phi = saml::init_embed_params<double>(tiny_net().embed_width(), 6).weights;
    auto fwd = saml::segnet_forward(params.config, params.running);
    std::mt19937_64 rng(4);
    auto ep = saml::sample_episode<double>(tiny_domains(), tiny_episode(saml::Arm::saml), rng);
    auto value = [&](saml::Arm arm, double l1, double l2) {
        auto cfg = tiny_episode(arm);
        cfg.lambda1 = l1;
        cfg.lambda2 = l2;
        std::mt19937_64 local(8);
        return saml::meta_objective(fwd, params.weights, phi, ep.train, ep.test, cfg, local);
    };
    auto plain = value(saml::Arm::meta_plain, 1.0, 5e-3);
    auto full = value(saml::Arm::saml, 1.0, 5e-3);
    EXPECT_EQ(plain.value.item(), plain.seg_te.item());
    EXPECT_EQ(full.seg_te.item(), plain.seg_te.item());
    EXPECT_EQ(full.value.item(), (plain.value.item() + 1.0 * full.compact.item()) + 5e-3 * full.smooth.item());
    EXPECT_GT(full.compact.item(), 0.0);
    EXPECT_GT(full.smooth.item(), 0.0);
    EXPECT_EQ(value(saml::Arm::saml, 0.0, 0.0).value.item(), plain.value.item());
}

TEST(MetaObjective, PerfectPredictorScoresGroundTruthCompactness) {
    // The "network" reads the label straight out of its input.
    saml::ForwardFn<double> oracle = [](const saml::ParamSet<double>&, const T64& x) {
        saml::ForwardOutput<double> out;
        out.logits = saml::concat<double>({saml::scale(x, 0.0), saml::shift(saml::scale(x, 80.0), -40.0)}, 1);
        out.prob = saml::softmax_channels(out.logits);
        return out;
    };
    std::mt19937_64 rng(2);
    auto ep = saml::sample_episode<double>(tiny_domains(), tiny_episode(saml::Arm::meta_compact), rng);
    ep.test.x = ep.test.y;
    std::mt19937_64 local(1);
    auto m = saml::meta_objective(oracle, {}, {}, ep.train, ep.test, tiny_episode(saml::Arm::meta_compact), local);
    EXPECT_NEAR(m.seg_te.item(), 0.0, 1e-6);
    EXPECT_NEAR(m.compact.item(), saml::compactness_loss(ep.test.y).item(), 1e-6);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, CopyIsIndependent) {
    auto params = saml::init_params<double>(tiny_net(), 1);
    auto opt = saml::Adam<double>::for_params(params.weights, 1e-3);
    auto copy = params.weights.clone();
    auto opt_copy = opt;
    std::vector<T64> grads;
    for (const auto& v : copy.values) grads.push_back(T64::ones(v.shape()));
    copy = copy.with_values(opt_copy.update(copy.values, grads));
    EXPECT_TRUE(params.weights.same_values(saml::init_params<double>(tiny_net(), 1).weights));
    EXPECT_FALSE(copy.same_values(params.weights));
    EXPECT_EQ(opt.step, 0u);
    for (const auto& m : opt.m)
        for (double v : m.values()) EXPECT_EQ(v, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    saml::ParamSet<double> p;
    p.add("w", T64({2}, {1.0, -1.0}));
    auto opt = saml::Adam<double>::for_params(p, 0.01);
    auto next = opt.update(p.values, {T64({2}, {3.0, -0.5})});
    EXPECT_NEAR(next[0][0], 0.99, 1e-9);
    EXPECT_NEAR(next[0][1], -0.99, 1e-9);
}

TEST(Adam, ClipByNorm) {
    std::vector<T64> g{T64({2}, {30.0, 40.0})};
    EXPECT_DOUBLE_EQ(saml::clip_by_norm(g, 10.0), 50.0);
    EXPECT_NEAR(g[0][0], 6.0, 1e-12);
    EXPECT_NEAR(g[0][1], 8.0, 1e-12);
    std::vector<T64> small{T64({1}, {3.0})};
    saml::clip_by_norm(small, 10.0);
    EXPECT_EQ(small[0][0], 3.0);
}

// ---------------------------------------------------------------------------
// Training

TEST(TrainStep, DeterministicFromSeed) {
    for (auto arm : saml::all_arms()) {
        auto cfg = tiny_episode(arm);
        auto a = saml::init_train_state<double>(tiny_net(), cfg, 3);
        auto b = saml::init_train_state<double>(tiny_net(), cfg, 3);
        for (int i = 0; i < 2; ++i) EXPECT_EQ(saml::train_step(a, tiny_domains(), cfg), saml::train_step(b, tiny_domains(), cfg));
        EXPECT_TRUE(a.theta.weights.same_values(b.theta.weights)) << saml::to_string(arm);
    }
}

TEST(TrainStep, PhiOnlyMovesThroughSmoothness) {
    auto cfg = tiny_episode(saml::Arm::saml);
    cfg.lambda2 = 0.0;
    auto s = saml::init_train_state<double>(tiny_net(), cfg, 3);
    const auto phi0 = s.phi.clone();
    const auto theta0 = s.theta.weights.clone();
    saml::train_step(s, tiny_domains(), cfg);
    EXPECT_TRUE(s.phi.same_values(phi0));
    EXPECT_FALSE(s.theta.weights.same_values(theta0));
    cfg.lambda2 = 5e-3;
    saml::train_step(s, tiny_domains(), cfg);
    EXPECT_FALSE(s.phi.same_values(phi0));
}

TEST(TrainStep, RecordsMatchArm) {
    auto cfg = tiny_episode(saml::Arm::deepall);
    auto s = saml::init_train_state<double>(tiny_net(), cfg, 3);
    auto rec = saml::train_step(s, tiny_domains(), cfg);
    EXPECT_EQ(rec.iteration, 1u);
    EXPECT_EQ(rec.total, rec.l_seg_tr);
    EXPECT_EQ(rec.l_compact, 0.0);
    cfg.arm = saml::Arm::saml;
    rec = saml::train_step(s, tiny_domains(), cfg);
    EXPECT_EQ(rec.iteration, 2u);
    EXPECT_GT(rec.l_compact, 0.0);
    EXPECT_GT(rec.l_smooth, 0.0);
    EXPECT_NEAR(rec.total, rec.l_seg_tr + rec.l_seg_te + cfg.lambda1 * rec.l_compact + cfg.lambda2 * rec.l_smooth,
                1e-12);
}

TEST(TrainLoop, ZeroIterationsLeavesStateUnchanged) {
    auto cfg = tiny_episode(saml::Arm::saml);
    cfg.iterations = 0;
    auto s = saml::init_train_state<double>(tiny_net(), cfg, 3);
    auto out = saml::train_loop(s, tiny_domains(), cfg);
    EXPECT_TRUE(out.theta.weights.same_values(s.theta.weights));
    EXPECT_EQ(out.iteration, 0u);
    EXPECT_EQ(out.history.size(), 0u);
}

TEST(TrainLoop, HistoryAndCsv) {
    auto cfg = tiny_episode(saml::Arm::meta_plain);
    const auto dir = scratch("csv");
    saml::LoopOptions opt;
    opt.csv_path = dir / "loss.csv";
    opt.checkpoint_path = dir / "state.bin";
    auto out = saml::train_loop(saml::init_train_state<double>(tiny_net(), cfg, 3), tiny_domains(), cfg, opt);
    EXPECT_EQ(out.history.size(), cfg.iterations);
    const std::string csv = saml::read_file(opt.csv_path);
    EXPECT_EQ(csv.rfind("iteration,l_seg_tr,l_seg_te,l_compact,l_smooth,total\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), long(cfg.iterations) + 1);
    fs::remove_all(dir);
}

TEST(TrainLoop, ResumeMatchesUninterruptedRun) {
    auto cfg = tiny_episode(saml::Arm::saml);
    cfg.iterations = 4;
    const auto dir = scratch("resume");
    auto straight = saml::train_loop(saml::init_train_state<float>(tiny_net(), cfg, 3), tiny_domains(), cfg);

    auto half = cfg;
    half.iterations = 2;
    saml::LoopOptions opt;
    opt.checkpoint_path = dir / "state.bin";
    saml::train_loop(saml::init_train_state<float>(tiny_net(), cfg, 3), tiny_domains(), half, opt);
    auto resumed = saml::load_train_state<float>(opt.checkpoint_path);
    EXPECT_EQ(resumed.iteration, 2u);
    resumed = saml::train_loop(std::move(resumed), tiny_domains(), cfg);

    EXPECT_EQ(resumed.history, straight.history);
    EXPECT_EQ(saml::loss_csv(resumed.history), saml::loss_csv(straight.history));
    EXPECT_TRUE(resumed.theta.weights.same_values(straight.theta.weights));
    EXPECT_TRUE(resumed.theta.running.same_values(straight.theta.running));
    EXPECT_TRUE(resumed.phi.same_values(straight.phi));
    fs::remove_all(dir);
}

TEST(TrainLoop, TrainingMakesProgress) {
    // Median dice loss over the last 10% of iterations falls below that of the first 10%.
    auto cfg = tiny_episode(saml::Arm::saml);
    cfg.iterations = 60;
    cfg.meta_lr = 3e-3;
    std::vector<double> improvements;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto s = saml::train_loop(saml::init_train_state<float>(tiny_net(), cfg, seed), tiny_domains(), cfg);
        std::vector<double> first, last;
        for (const auto& r : s.history.records) {
            if (r.iteration <= 6) first.push_back(r.l_seg_tr);
            if (r.iteration > 54) last.push_back(r.l_seg_tr);
        }
        std::sort(first.begin(), first.end());
        std::sort(last.begin(), last.end());
        improvements.push_back(first[3] - last[3]);
    }
    std::sort(improvements.begin(), improvements.end());
    EXPECT_GT(improvements[2], 0.0);
}
