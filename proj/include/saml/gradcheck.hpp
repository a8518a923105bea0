// The gradient-check suite run by `saml_lab gradcheck`: analytic gradients against central
// differences, all in 64-bit.
#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "saml/meta_trainer.hpp"

namespace saml {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0;
    double threshold = 0;
    double seconds = 0;
    bool passed() const { return max_rel_error < threshold; }
};

inline constexpr double kGradTol = 1e-4;
inline constexpr double kMetaGradTol = 1e-5;

namespace gradcheck {

using T64 = Tensor<double>;
using Fn = std::function<T64(const T64&)>;

inline T64 uniform(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return T64(std::move(shape), std::move(v));
}

/// Reduces a tensor-valued op to a scalar with fixed random weights, so every output coordinate matters.
inline Fn contracted(std::function<T64(const T64&)> op, std::uint64_t seed = 99) {
    return [op = std::move(op), seed](const T64& x) {
        T64 y = op(x);
        return sum(mul(y, uniform(y.shape(), seed, -1.0, 1.0)));
    };
}

/// For bodies that differentiate internally: outside the analytic pass they get a private tape.
inline Fn tape_aware(std::function<T64(const T64&)> body) {
    return [body = std::move(body)](const T64& x) {
        if (x.tracked()) return body(x);
        GradModeGuard on(true);
        Tape<double> tape;
        return body(tape.watch(x)).detach();
    };
}

inline T64 flatten(const ParamSet<double>& p) {
    std::vector<double> v;
    for (const auto& t : p.values) v.insert(v.end(), t.values().begin(), t.values().end());
    const std::size_t n = v.size();
    return T64({n}, std::move(v));
}

/// Differentiable inverse of flatten: slices of `flat` reshaped like `like`.
inline ParamSet<double> unflatten(const T64& flat, const ParamSet<double>& like) {
    ParamSet<double> out;
    std::size_t off = 0;
    for (std::size_t i = 0; i < like.size(); ++i) {
        const std::size_t n = like.values[i].numel();
        out.add(like.names[i], reshape(narrow(flat, 0, off, n), like.values[i].shape()));
        off += n;
    }
    return out;
}

/// J(θ) = L(θ) + L(θ − α L'(θ)) with L = θ²: the scalar toy of the inner update.
inline T64 quadratic_toy(const T64& theta, double alpha, bool second_order) {
    return tape_aware([&](const T64& th) {
        T64 l_tr = square(th);
        T64 adapted = gradient_step<double>({th}, l_tr, alpha, second_order)[0];
        return add(l_tr, square(adapted));
    })(theta);
}

inline double quadratic_toy_gradient(double theta, double alpha, bool second_order) {
    Tape<double> tape;
    T64 th = tape.watch(T64::scalar(theta));
    return gradient(quadratic_toy(th, alpha, second_order), th).item();
}

inline Mask square_mask(std::size_t n, std::size_t top, std::size_t left, std::size_t side) {
    Mask m(n, n, 0);
    for (std::size_t y = top; y < top + side; ++y)
        for (std::size_t x = left; x < left + side; ++x) m.at(y, x) = 1;
    return m;
}

/// A 64-parameter smooth segmentation net (sigmoid activations, no normalisation) for meta checks.
inline ParamSet<double> micro_params(std::uint64_t seed) {
    ParamSet<double> p;
    p.add("c1.weight", uniform({2, 1, 3, 3}, seed + 1, -0.8, 0.8));
    p.add("c1.bias", uniform({2}, seed + 2, -0.2, 0.2));
    p.add("c2.weight", uniform({2, 2, 3, 3}, seed + 3, -0.8, 0.8));
    p.add("c2.bias", uniform({2}, seed + 4, -0.2, 0.2));
    p.add("head.weight", uniform({2, 2, 1, 1}, seed + 5, -1.5, 1.5));
    p.add("head.bias", uniform({2}, seed + 6, -0.2, 0.2));
    return p;
}

inline ForwardOutput<double> micro_forward(const ParamSet<double>& p, const T64& x) {
    const auto bias = [](const T64& b) { return reshape(b, Shape{1, b.numel(), 1, 1}); };
    T64 h1 = sigmoid(add(conv2d(x, p.values[0], {1, 1}), bias(p.values[1])));
    T64 h2 = sigmoid(add(conv2d(h1, p.values[2], {1, 1}), bias(p.values[3])));
    ForwardOutput<double> out;
    out.logits = add(conv2d(h2, p.values[4], {1, 0}), bias(p.values[5]));
    out.prob = softmax_channels(out.logits);
    out.decoder_acts = {h1, h2};
    return out;
}

struct MicroEpisode {
    Batch<double> train, test;
};

inline MicroEpisode micro_episode() {
    const std::size_t n = 8;
    std::vector<Mask> masks{square_mask(n, 2, 2, 4), square_mask(n, 1, 3, 4), square_mask(n, 3, 1, 4)};
    std::vector<Image> images;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const T64 noise = uniform({n * n}, 300 + i, -0.3, 0.3);
        Image img(n, n);
        for (std::size_t k = 0; k < img.size(); ++k)
            img.data[k] = static_cast<float>((masks[i].data[k] ? 1.0 : -1.0) * (0.5 + 0.3 * i) + noise[k]);
        images.push_back(img);
    }
    return {make_batch<double>({&images[0], &images[1]}, {&masks[0], &masks[1]}, {0, 1}),
            make_batch<double>({&images[2]}, {&masks[2]}, {2})};
}

// ---------------------------------------------------------------------------

struct Check {
    std::string name;
    double threshold;
    std::function<double()> run;
};

inline std::vector<Check> all_checks() {
    std::vector<Check> checks;
    const auto add_check = [&](std::string name, double tol, std::function<double()> run) {
        checks.push_back({std::move(name), tol, std::move(run)});
    };

    add_check("elementwise arithmetic", kGradTol, [] {
        const T64 b = uniform({3, 4}, 2, 0.5, 2.0);
        return finite_difference_check<double>(contracted([&](const T64& x) {
                                                   return div(mul(add(x, b), sub(x, b)), add(square(x), b));
                                               }),
                                               uniform({3, 4}, 1));
    });
    add_check("unary functions", kGradTol, [] {
        return finite_difference_check<double>(contracted([](const T64& x) {
                                                   const T64 pos = shift(square(x), 0.5);
                                                   return add(mul(exp(scale(x, 0.5)), sigmoid(x)),
                                                              add(log(pos), mul(sqrt(pos), pow(pos, 1.5))));
                                               }),
                                               uniform({2, 3, 4}, 3));
    });
    add_check("reductions and broadcasting", kGradTol, [] {
        const T64 c = uniform({3}, 5);
        return finite_difference_check<double>(contracted([&](const T64& x) {
                                                   T64 s = add(sum_axis(x, 1, true), channel_broadcast(c, x.shape()));
                                                   return add(mul(s, mean_axis(x, 3, true)), reshape(channel_sum(x), Shape{1, 3, 1, 1}));
                                               }),
                                               uniform({2, 3, 4, 4}, 4));
    });
    add_check("matmul and transpose", kGradTol, [] {
        const T64 b = uniform({5, 4}, 7);
        return finite_difference_check<double>(
            contracted([&](const T64& a) { return matmul(transpose(matmul(a, b)), a); }), uniform({5, 5}, 6));
    });
    add_check("conv2d input and weight", kGradTol, [] {
        const T64 x = uniform({2, 3, 7, 6}, 8);
        return finite_difference_check<double>(contracted([&](const T64& w) {
                                                   return conv2d(conv2d(x, w, {2, 1}), narrow(w, 1, 0, 3), {1, 0});
                                               }),
                                               uniform({3, 3, 3, 3}, 9, -0.5, 0.5));
    });
    add_check("transposed conv, pooling, resize", kGradTol, [] {
        const T64 w = uniform({4, 2, 2, 2}, 11);
        return finite_difference_check<double>(contracted([&](const T64& x) {
                                                   T64 up = conv_transpose2d(x, w, {2, 0});
                                                   return resize_bilinear(max_pool2d(avg_pool2d(up, 1), 2), 5, 7);
                                               }),
                                               uniform({2, 4, 3, 3}, 10));
    });
    add_check("softmax and concat", kGradTol, [] {
        return finite_difference_check<double>(
            contracted([](const T64& x) { return softmax_channels(concat<double>({x, square(x)}, 1)); }),
            uniform({2, 2, 3, 3}, 12));
    });
    add_check("second order through conv", kGradTol, [] {
        const T64 x = uniform({1, 2, 5, 5}, 13), v = uniform({1, 2, 5, 5}, 14);
        return finite_difference_check<double>(tape_aware([&](const T64& w) {
                                                   T64 xl = w.tape()->watch(x);
                                                   T64 f = sum(sigmoid(conv2d(xl, w, {2, 1})));
                                                   return sum(mul(gradient(f, xl, true), v));
                                               }),
                                               uniform({3, 2, 3, 3}, 15, -1.0, 1.0));
    });
    add_check("segmentation network", kGradTol, [] {
        SegNetConfig cfg;
        cfg.base_channels = 2;
        cfg.depth = 2;
        const auto params = init_params<double>(cfg, 16);
        const T64 x = uniform({2, 1, 16, 16}, 17);
        const T64 y = stack_grids<double>(std::vector<Mask>{square_mask(16, 3, 3, 8), square_mask(16, 6, 5, 7)});
        return finite_difference_check<double>(
            [&](const T64& flat) {
                SegNetParams<double> p = params;
                p.weights = unflatten(flat, params.weights);
                return dice_loss(seg_forward(p, x, NormMode::train_batch_stats).foreground(), y);
            },
            flatten(params.weights));
    });
    add_check("dice_loss", kGradTol, [] {
        const T64 y = stack_grids<double>(std::vector<Mask>{square_mask(8, 2, 2, 4), square_mask(8, 1, 0, 5)});
        return finite_difference_check<double>([&](const T64& p) { return dice_loss(p, y); },
                                               uniform({2, 1, 8, 8}, 18, 0.05, 0.95));
    });
    add_check("compactness_loss", kGradTol, [] {
        return finite_difference_check<double>([](const T64& p) { return compactness_loss(p, 1e-5); },
                                               uniform({16, 16}, 19, 0.0, 1.0));
    });
    add_check("contrastive pair loss", kGradTol, [] {
        const auto phi = init_embed_params<double>(6, 20).weights;
        const T64 other = uniform({6}, 21);
        return finite_difference_check<double>(
            [&](const T64& e) {
                const EmbeddingSample<double> a{e, kContour, 0}, b{other, kBackground, 1}, c{other, kContour, 2};
                return add(contrastive_pair_loss(phi, a, b, 10.0), contrastive_pair_loss(phi, a, c, 10.0));
            },
            uniform({6}, 22));
    });
    add_check("smoothness loss (embedding head)", kGradTol, [] {
        const auto phi = init_embed_params<double>(5, 23).weights;
        // Enough rows that every hidden unit is active somewhere: a unit dead on all rows has an exactly
        // zero gradient, and FD roundoff over the 1e-8 denominator floor would dominate the error.
        const T64 rows = uniform({12, 5}, 24);
        std::vector<int> tags;
        for (int i = 0; i < 12; ++i) tags.push_back(i % 3 ? kContour : kBackground);
        return finite_difference_check<double>(
            [&](const T64& flat) { return smoothness_loss_rows(unflatten(flat, phi), rows, tags, 3.0); },
            flatten(phi));
    });
    add_check("smoothness through extraction and network", kGradTol, [] {
        SegNetConfig cfg;
        cfg.base_channels = 2;
        cfg.depth = 2;
        const auto params = init_params<double>(cfg, 25);
        const auto phi = init_embed_params<double>(cfg.embed_width(), 26).weights;
        const T64 x = uniform({2, 1, 32, 32}, 27);
        const std::vector<Mask> ys{square_mask(32, 8, 8, 14), square_mask(32, 4, 12, 12)};
        return finite_difference_check<double>(
            [&](const T64& flat) {
                SegNetParams<double> p = params;
                p.weights = unflatten(flat, params.weights);
                const auto out = seg_forward(p, x, NormMode::train_batch_stats);
                auto [c0, b0] = extract_embeddings(out.decoder_acts, 0, ys[0]);
                auto [c1, b1] = extract_embeddings(out.decoder_acts, 1, ys[1]);
                return smoothness_loss(phi, {c0, b1, c1, b0}, 1.0);
            },
            flatten(params.weights));
    });
    add_check("inner step, scalar toy", kMetaGradTol, [] {
        double worst = 0;
        for (double theta : {1.0, -0.7, 2.5})
            worst = std::max(worst, finite_difference_check<double>(
                                        [](const T64& t) { return quadratic_toy(t, 0.1, true); }, T64::scalar(theta)));
        return worst;
    });
    add_check("second-order meta objective, micro model", kMetaGradTol, [] {
        const auto theta0 = micro_params(40);
        const auto phi = init_embed_params<double>(4, 41).weights;
        const auto ep = micro_episode();
        EpisodeConfig cfg;
        cfg.arm = Arm::saml;
        cfg.alpha = 0.5;
        cfg.lambda1 = 0.3;
        cfg.lambda2 = 0.2;
        cfg.zeta = 1.0;
        cfg.morphology = {1, 2};
        const ForwardFn<double> forward = micro_forward;
        return finite_difference_check<double>(tape_aware([&](const T64& flat) {
                                                   const ParamSet<double> theta = unflatten(flat, theta0);
                                                   InnerResult<double> inner = inner_update(
                                                       forward, theta, ep.train, cfg.alpha, true);
                                                   std::mt19937_64 rng(42);
                                                   const auto meta = meta_objective(forward, inner.adapted, phi,
                                                                                    ep.train, ep.test, cfg, rng);
                                                   return add(inner.loss, meta.value);
                                               }),
                                               flatten(theta0));
    });
    return checks;
}

}  // namespace gradcheck

/// Runs every check, reporting each as it finishes.
inline std::vector<GradCheckResult> run_gradchecks(const std::function<void(const GradCheckResult&)>& on_result = {}) {
    std::vector<GradCheckResult> out;
    for (const auto& c : gradcheck::all_checks()) {
        const auto t0 = std::chrono::steady_clock::now();
        GradCheckResult r{c.name, 0, c.threshold, 0};
        try {
            r.max_rel_error = c.run();
        } catch (const NumericError&) {
            r.max_rel_error = std::numeric_limits<double>::infinity();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_result) on_result(r);
        out.push_back(r);
    }
    return out;
}

}  // namespace saml
