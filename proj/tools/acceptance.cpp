// Acceptance suite: one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saml/config.hpp"
#include "saml/gradcheck.hpp"
#include "saml/report.hpp"

namespace fs = std::filesystem;
using namespace saml;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    int id;
    std::string title;
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void print(const Verdict& v) {
    std::printf("[%s] criterion %d  %-34s %s\n", v.pass ? "PASS" : "FAIL", v.id, v.title.c_str(), v.detail.c_str());
    std::fflush(stdout);
}

void note(const std::string& s) {
    std::printf("       %s\n", s.c_str());
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
    const auto t0 = Clock::now();
    std::size_t failed = 0;
    double worst_meta = 0, worst = 0;
    const auto results = run_gradchecks([&](const GradCheckResult& r) {
        failed += !r.passed();
        (r.threshold == kMetaGradTol ? worst_meta : worst) =
            std::max(r.threshold == kMetaGradTol ? worst_meta : worst, r.max_rel_error);
        if (!r.passed()) note("failed: " + r.name + fmt(" (%.2e)", r.max_rel_error));
    });
    const double secs = seconds_since(t0);
    return {1, "gradient correctness", failed == 0 && secs < 300,
            fmt("%zu/%zu checks; worst %.1e (<1e-4), meta %.1e (<1e-5); %.1f s (<300 s)", results.size() - failed,
                results.size(), worst, worst_meta, secs)};
}

Tensor<double> as_map(const Mask& m) { return stack_grids<double>(std::vector<Mask>{m}); }

Mask centred_rect(std::size_t n, std::size_t h, std::size_t w) {
    Mask m(n, n, 0);
    for (std::size_t y = (n - h) / 2; y < (n - h) / 2 + h; ++y)
        for (std::size_t x = (n - w) / 2; x < (n - w) / 2 + w; ++x) m.at(y, x) = 1;
    return m;
}

Mask centred_disk(std::size_t n, double r) {
    Mask m(n, n, 0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dy = y + 0.5 - n / 2.0, dx = x + 0.5 - n / 2.0;
            m.at(y, x) = dy * dy + dx * dx <= r * r;
        }
    return m;
}

Verdict shape_values() {
    const auto loss = [](const Mask& m, double eps) { return compactness_loss(as_map(m), eps).item(); };
    const double target = 4.0 / std::numbers::pi;
    const double square = loss(centred_rect(128, 64, 64), kCompactEps);
    const double ones = compactness_loss(Tensor<double>::ones({64, 64}), kCompactEps).item();
    const double d16 = loss(centred_disk(128, 16), kCompactEps), d32 = loss(centred_disk(128, 32), kCompactEps);
    const double bar = loss(centred_rect(128, 1, 64), kCompactEps);
    const bool ok_square = std::abs(square / target - 1) <= 0.05;
    const bool ok_ones = std::abs(ones / 3.26e-4 - 1) <= 0.01;
    const bool ok_scale = std::abs(d16 / d32 - 1) <= 0.02;
    const bool ok_order = d32 < square && square < bar;
    note(fmt("square %.4f vs 4/pi %.4f (%+.1f%%)  all-ones %.4e  disk r16 %.4f r32 %.4f (%.1f%%)  bar %.3f",
             square, target, 100 * (square / target - 1), ones, d16, d32, 100 * (d16 / d32 - 1), bar));
    note(fmt("without the perimeter stabiliser: square %.4f (%+.1f%%), disk r16 %.4f r32 %.4f (%.1f%%)",
             loss(centred_rect(128, 64, 64), 0.0), 100 * (loss(centred_rect(128, 64, 64), 0.0) / target - 1),
             loss(centred_disk(128, 16), 0.0), loss(centred_disk(128, 32), 0.0),
             100 * (loss(centred_disk(128, 16), 0.0) / loss(centred_disk(128, 32), 0.0) - 1)));
    return {2, "analytic shape values", ok_square && ok_ones && ok_scale && ok_order,
            fmt("square %s, all-ones %s, disk scale %s, ordering disk<square<bar %s", ok_square ? "ok" : "off",
                ok_ones ? "ok" : "off", ok_scale ? "ok" : "off", ok_order ? "ok" : "violated")};
}

Verdict contrastive_identities() {
    GradModeGuard on(true);
    const auto phi0 = init_embed_params<double>(6, 3).weights;
    const auto e = gradcheck::uniform({6}, 4, -1.0, 1.0);
    const double same = contrastive_pair_loss(phi0, {e, kContour, 0}, {e, kContour, 1}, 10.0).item();
    const double diff = contrastive_pair_loss(phi0, {e, kContour, 0}, {e, kBackground, 1}, 10.0).item();

    // Far apart different-class pair: no loss and no gradient anywhere.
    Tape<double> tape;
    const ParamSet<double> phi = phi0.with_values(tape.watch(phi0.values));
    const Tensor<double> a = tape.watch(Tensor<double>::zeros({6}));
    Tensor<double> far = gradcheck::uniform({6}, 5, -1.0, 1.0);
    double d = pair_distance(phi0, Tensor<double>::zeros({6}), far).item();
    for (double scale_up = 2; d <= 15; scale_up *= 2) {
        far = scale(gradcheck::uniform({6}, 5, -1.0, 1.0), scale_up);
        d = pair_distance(phi0, Tensor<double>::zeros({6}), far).item();
    }
    const Tensor<double> b = tape.watch(far);
    const Tensor<double> sat = contrastive_pair_loss(phi, {a, kContour, 0}, {b, kBackground, 1}, 10.0);
    std::vector<Tensor<double>> wrt = phi.values;
    wrt.push_back(a);
    wrt.push_back(b);
    double grad_max = 0;
    for (const auto& g : gradient(sat, wrt))
        for (double v : g.values()) grad_max = std::max(grad_max, std::abs(v));

    // q = 5: the batch loss is the mean over its 10 unordered pairs.
    GradModeGuard off(false);
    std::vector<EmbeddingSample<double>> five;
    for (int i = 0; i < 5; ++i)
        five.push_back({gradcheck::uniform({6}, 10 + i, -3.0, 3.0), i % 2 ? kContour : kBackground, i});
    double pair_sum = 0;
    int pairs = 0;
    for (int i = 0; i < 5; ++i)
        for (int j = i + 1; j < 5; ++j, ++pairs) pair_sum += contrastive_pair_loss(phi0, five[i], five[j], 10.0).item();
    const double batch = smoothness_loss(phi0, five, 10.0).item();
    const bool ok = same == 0.0 && diff == 100.0 && sat.item() == 0.0 && grad_max == 0.0 && pairs == 10 &&
                    std::abs(batch - pair_sum / 10) <= 1e-12 * std::abs(batch);
    return {3, "contrastive identities", ok,
            fmt("same-class %.3g, different-class d=0 %.6g, d=%.1f>10 loss %.3g |grad| %.3g, q=5 mean of %d pairs "
                "%.9g vs %.9g",
                same, diff, d, sat.item(), grad_max, pairs, batch, pair_sum / 10)};
}

Verdict meta_step_oracle() {
    const double second = gradcheck::quadratic_toy_gradient(1.0, 0.1, true);
    const double first = gradcheck::quadratic_toy_gradient(1.0, 0.1, false);
    return {4, "meta-step oracle", std::abs(second - 3.28) <= 1e-6 && std::abs(first - 3.6) <= 1e-6,
            fmt("second-order %.12g (3.28), first-order %.12g (3.6)", second, first)};
}

Mask random_mask(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> side(2, 64);
    const std::size_t h = side(rng), w = side(rng);
    std::uniform_real_distribution<double> u(0, 1);
    const double density = u(rng) < 0.1 ? 0.0 : u(rng);
    Mask m(h, w, 0);
    for (auto& v : m.data) v = u(rng) < density;
    return m;
}

Verdict metric_oracles() {
    std::mt19937_64 rng(2024);
    std::size_t exact = 0, undefined = 0, props = 0;
    const std::size_t n = 200;
    for (std::size_t i = 0; i < n; ++i) {
        const Mask a = random_mask(rng);
        Mask b(a.height, a.width, 0);
        std::uniform_real_distribution<double> u(0, 1);
        const double density = u(rng);
        for (auto& v : b.data) v = u(rng) < density;
        const auto fast = asd(a, b), slow = asd_brute_force(a, b);
        exact += fast == slow;
        undefined += !fast.has_value();
        const bool dice_ok = dice_score(a, b) == dice_score(b, a) && dice_score(a, a) == 1.0 &&
                             (dice_score(a, b) == 1.0) == (a == b);
        const bool asd_ok = asd(b, a) == fast && (count(a) == 0 || asd(a, a) == 0.0);
        props += dice_ok && asd_ok;
    }
    return {5, "metric oracles", exact == n && props == n,
            fmt("asd == brute force on %zu/%zu pairs (%zu undefined), identity/symmetry on %zu/%zu", exact, n,
                undefined, props, n)};
}

// ---------------------------------------------------------------------------

struct Benchmark {
    ExperimentConfig config;
    Dataset data;
    std::vector<EvalRecord> loo;
    std::vector<EvalRecord> sweep;
    double loo_seconds = 0;
    double sweep_seconds = 0;
};

Benchmark run_benchmark(const ExperimentConfig& c, const fs::path& work, bool resume) {
    Benchmark b{c, {}, {}, {}};
    const fs::path data_dir = work / "data";
    if (resume && fs::exists(data_dir / "manifest.json")) {
        b.data = load_dataset(data_dir);
    } else {
        b.data = generate_dataset(config_domain_specs(c), c.samples_per_domain, c.image_size, c.image_size, c.seed);
        fs::create_directories(data_dir);
        save_dataset(b.data, data_dir);
    }
    write_resolved_config(work, c);
    ExperimentSettings s = c.settings();
    s.threads = worker_count();
    s.resume = resume;
    const auto ids = domain_ids(b.data);
    const auto progress = [](const RunSpec& spec, const EvalRecord& r) {
        std::printf("       run %-32s dice %6.2f  ipq %.3f\n", spec.key().c_str(), r.dice_mean(), r.ipq_mean());
        std::fflush(stdout);
    };
    auto t0 = Clock::now();
    b.loo = run_all(b.data, leave_one_out_specs(ids, c.arms, c.seeds()), s, work, progress);
    b.loo_seconds = seconds_since(t0);
    // The full-source point of the sweep is the leave-one-out run itself; reuse it.
    s.resume = true;
    t0 = Clock::now();
    const int target = c.sweep_target < 0 ? ids.back() : c.sweep_target;
    b.sweep = run_all(b.data, sweep_specs(ids, target, {Arm::deepall, Arm::saml}, c.seeds()), s, work, progress);
    b.sweep_seconds = seconds_since(t0);
    write_report(work, work / "report");
    return b;
}

double dice_of(const EvalRecord& r) { return r.dice_mean(); }

Verdict directional_generalization(const Benchmark& b) {
    const double deepall = median_of(per_seed_average(b.loo, "deepall", dice_of));
    const double plain = median_of(per_seed_average(b.loo, "meta-plain", dice_of));
    const double saml_dice = median_of(per_seed_average(b.loo, "saml", dice_of));
    std::string ablation;
    for (Arm a : b.config.arms)
        ablation += fmt(" %s %.2f", to_string(a).c_str(), median_of(per_seed_average(b.loo, to_string(a), dice_of)));
    note("median over seeds of the held-out-domain average Dice:" + ablation);
    for (int h : domain_ids(b.data)) {
        std::string row = fmt("held-out %d:", h);
        for (Arm a : b.config.arms) {
            std::vector<double> v;
            for (const auto& r : b.loo)
                if (r.held_out_domain == h && r.arm == to_string(a)) v.push_back(r.dice_mean());
            row += fmt(" %s %.2f", to_string(a).c_str(), median(v));
        }
        note(row);
    }
    const bool ok = saml_dice >= deepall + 1.0 && plain >= deepall && b.loo_seconds < 1800;
    return {6, "directional generalization", ok,
            fmt("saml %.2f vs deepall+1 %.2f, meta-plain %.2f vs deepall %.2f; %.0f s (<1800 s)", saml_dice,
                deepall + 1.0, plain, deepall, b.loo_seconds)};
}

Verdict domain_count_sweep(const Benchmark& b) {
    const auto ids = domain_ids(b.data);
    const int target = b.config.sweep_target < 0 ? ids.back() : b.config.sweep_target;
    const auto med = sweep_medians(b.sweep, target);
    const auto& s = med.at("saml");
    const auto& d = med.at("deepall");
    std::size_t inversions = 0;
    bool small = true, dominates = true;
    double prev = -INFINITY;
    std::string curve;
    for (const auto& [k, v] : s) {
        if (v < prev) {
            ++inversions;
            small = small && prev - v <= 0.5;
        }
        prev = v;
        dominates = dominates && v >= d.at(k);
        curve += fmt(" k=%zu saml %.2f deepall %.2f;", k, v, d.at(k));
    }
    note("target " + std::to_string(target) + ":" + curve);
    return {7, "domain-count sweep", inversions <= 1 && small && dominates,
            fmt("%zu inversion(s)%s, saml >= deepall at every count: %s; %.0f s", inversions,
                small ? "" : " (> 0.5)", dominates ? "yes" : "no", b.sweep_seconds)};
}

Verdict shape_quality(const Benchmark& b) {
    const double s = median_of(per_seed_average(b.loo, "saml", prediction_ipq));
    const double d = median_of(per_seed_average(b.loo, "deepall", prediction_ipq));
    return {9, "shape-quality effect", s >= d, fmt("median IPQ saml %.4f vs deepall %.4f", s, d)};
}

/// Property: the held-out domain is genuinely shifted (deepall in-domain vs held-out gap >= 2 Dice).
std::string domain_shift(const Benchmark& b, bool& pass) {
    const auto ids = domain_ids(b.data);
    ExperimentSettings s = b.config.settings();
    std::vector<double> in, out;
    for (auto seed : b.config.seeds()) {
        RunSpec spec{ids.back(), {}, Arm::deepall, seed};
        for (int d : ids)
            if (d != ids.back()) spec.sources.push_back(d);
        const auto r = b.config.dtype == Dtype::f32 ? intra_domain_reference<float>(b.data, spec, s)
                                                    : intra_domain_reference<double>(b.data, spec, s);
        in.push_back(r.in_domain.dice_mean());
        out.push_back(r.held_out.dice_mean());
    }
    const double gap = median(in) - median(out);
    pass = gap >= 2.0;
    return fmt("deepall 80/20 in-domain %.2f vs held-out domain %d %.2f: gap %.2f (>= 2)", median(in), ids.back(),
               median(out), gap);
}

Verdict determinism(const ExperimentConfig& base, const Dataset& data, const fs::path& work) {
    ExperimentSettings s = base.settings();
    s.episode.iterations = 6;
    bool csv_equal = true, resume_equal = true;
    for (Arm arm : {Arm::deepall, Arm::saml}) {
        const RunSpec spec{3, {0, 1, 2}, arm, 11};
        const fs::path a = work / "determinism" / "a", b = work / "determinism" / "b";
        run_training(data, spec, s, a);
        run_training(data, spec, s, b);
        const std::string name = "runs/" + spec.key() + ".loss.csv";
        csv_equal = csv_equal && read_file(a / name) == read_file(b / name);

        EpisodeConfig cfg = s.episode;
        cfg.arm = arm;
        const auto domains = prepare_domains(data, spec.sources);
        const auto full = train_loop(init_train_state<float>(s.net, cfg, run_seed(spec)), domains, cfg);
        EpisodeConfig half = cfg;
        half.iterations = 3;
        LoopOptions opt;
        opt.checkpoint_path = work / "determinism" / (to_string(arm) + ".ckpt");
        train_loop(init_train_state<float>(s.net, half, run_seed(spec)), domains, half, opt);
        const auto resumed = train_loop(load_train_state<float>(opt.checkpoint_path), domains, cfg);
        resume_equal = resume_equal && loss_csv(full.history) == loss_csv(resumed.history) &&
                       full.theta.weights.values.size() == resumed.theta.weights.values.size();
        for (std::size_t i = 0; i < full.theta.weights.size(); ++i) {
            const auto x = full.theta.weights.values[i].values(), y = resumed.theta.weights.values[i].values();
            resume_equal = resume_equal && std::equal(x.begin(), x.end(), y.begin(), y.end());
        }
    }
    return {8, "determinism & resumability", csv_equal && resume_equal,
            fmt("repeat runs byte-identical: %s; resumed at 3 of 6 == uninterrupted: %s", csv_equal ? "yes" : "no",
                resume_equal ? "yes" : "no")};
}

std::set<int> parse_ids(const std::string& s) {
    std::set<int> out;
    std::stringstream in(s);
    for (std::string tok; std::getline(in, tok, ',');)
        if (!tok.empty()) out.insert(std::stoi(tok));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance suite: prints one PASS/FAIL line per criterion"};
    std::string config_path = SAML_BENCHMARK_CONFIG, work_dir = "acceptance_work", known;
    bool resume = false, skip_benchmark = false;
    app.add_option("--config", config_path, "benchmark configuration")->check(CLI::ExistingFile);
    app.add_option("--work", work_dir, "scratch directory for the benchmark runs");
    app.add_flag("--resume", resume, "reuse finished benchmark runs in --work");
    app.add_flag("--skip-benchmark", skip_benchmark, "only the criteria that need no training (1-5, 8)");
    app.add_option("--known-failures", known,
                   "comma-separated criteria documented as unattainable; they still print FAIL but do not "
                   "set the exit status");
    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig config = load_config(config_path);
        const fs::path work = work_dir;
        if (!resume) fs::remove_all(work);
        fs::create_directories(work);
        const auto t0 = Clock::now();

        std::vector<Verdict> verdicts;
        const auto run = [&](Verdict v) {
            print(v);
            verdicts.push_back(std::move(v));
        };
        run(gradient_correctness());
        run(shape_values());
        run(contrastive_identities());
        run(meta_step_oracle());
        run(metric_oracles());

        bool shift_ok = true;
        if (skip_benchmark) {
            const Dataset small = generate_dataset(config_domain_specs(config), 8, config.image_size,
                                                   config.image_size, config.seed);
            run(determinism(config, small, work));
        } else {
            std::printf("       benchmark: %zu domains x %zu samples, %zu px, %zu iterations, %zu seeds, %zu arms\n",
                        config.num_domains, config.samples_per_domain, config.image_size, config.episode.iterations,
                        config.num_seeds, config.arms.size());
            std::fflush(stdout);
            const Benchmark b = run_benchmark(config, work, resume);
            run(directional_generalization(b));
            run(domain_count_sweep(b));
            run(determinism(config, b.data, work));
            run(shape_quality(b));
            const std::string shift = domain_shift(b, shift_ok);
            std::printf("[%s] property     domain shift is real               %s\n", shift_ok ? "PASS" : "FAIL",
                        shift.c_str());
        }

        std::sort(verdicts.begin(), verdicts.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
        const std::set<int> expected = parse_ids(known);
        std::size_t passed = 0;
        bool unexpected = !shift_ok;
        std::string failed;
        for (const auto& v : verdicts) {
            passed += v.pass;
            if (!v.pass) {
                failed += (failed.empty() ? "" : ",") + std::to_string(v.id);
                unexpected = unexpected || !expected.count(v.id);
            }
        }
        std::printf("summary: %zu/%zu criteria passed%s%s; %.0f s\n", passed, verdicts.size(),
                    failed.empty() ? "" : "; failed: ", failed.c_str(), seconds_since(t0));
        if (!failed.empty() && !unexpected) std::printf("all failures are documented as unattainable (%s)\n", known.c_str());
        return unexpected ? 1 : 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "acceptance suite aborted: %s\n", e.what());
        return 2;
    }
}
