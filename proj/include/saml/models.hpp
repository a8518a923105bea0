// Segmentation network F_theta and the embedding projection head H_phi.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "saml/ops.hpp"

namespace saml {

enum class NormMode {
    train_batch_stats,  // batch statistics; running statistics are collected
    running_stats,      // stored running statistics
    test_batch_stats,   // statistics of the current (test) batch, running statistics ignored
};

inline std::string to_string(NormMode m) {
    switch (m) {
        case NormMode::train_batch_stats: return "train-batch-stats";
        case NormMode::running_stats: return "running-stats";
        case NormMode::test_batch_stats: return "test-batch-stats";
    }
    return "?";
}

inline NormMode parse_norm_mode(const std::string& s) {
    if (s == "train-batch-stats") return NormMode::train_batch_stats;
    if (s == "running-stats") return NormMode::running_stats;
    if (s == "test-batch-stats") return NormMode::test_batch_stats;
    throw ConfigError("unknown norm mode '" + s + "'");
}

struct SegNetConfig {
    std::size_t in_channels = 1;
    std::size_t base_channels = 8;
    std::size_t depth = 3;
    std::size_t num_classes = 2;
    NormMode norm_mode = NormMode::test_batch_stats;  // used at inference

    void validate() const {
        if (depth < 2) throw ConfigError("depth must be at least 2 (embeddings use the last two decoder stages)");
        if (in_channels == 0 || base_channels == 0) throw ConfigError("channel counts must be positive");
        if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    }

    std::size_t channels(std::size_t stage) const { return base_channels << stage; }

    /// Concatenated channel width of the last two decoder stages.
    std::size_t embed_width() const { return channels(0) + channels(1); }

    bool operator==(const SegNetConfig&) const = default;

    void check_input(const Shape& s) const {
        const std::size_t unit = std::size_t{1} << depth;
        if (s.size() != 4 || s[1] != in_channels)
            throw ShapeError("input must be [batch, " + std::to_string(in_channels) + ", H, W], got " + to_string(s));
        if (s[0] == 0 || s[2] == 0 || s[3] == 0 || s[2] % unit != 0 || s[3] % unit != 0)
            throw ShapeError("spatial size " + to_string(s) + " not divisible by 2^depth = " + std::to_string(unit));
    }
};

/// Ordered, named parameter tensors.
template <typename T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<T>> values;

    void add(std::string name, Tensor<T> value) {
        names.push_back(std::move(name));
        values.push_back(std::move(value));
    }
    std::size_t size() const { return values.size(); }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }
    const Tensor<T>& get(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        throw Error("no parameter named '" + name + "'");
    }
    /// Same names, fresh storage, detached from any tape.
    ParamSet clone() const {
        ParamSet out;
        out.names = names;
        for (const auto& v : values) out.values.push_back(v.clone());
        return out;
    }
    /// Untracked copies sharing storage.
    ParamSet detach_all() const {
        ParamSet out;
        out.names = names;
        for (const auto& v : values) out.values.push_back(v.detach());
        return out;
    }
    ParamSet with_values(std::vector<Tensor<T>> v) const {
        if (v.size() != values.size()) throw Error("parameter count mismatch");
        ParamSet out;
        out.names = names;
        out.values = std::move(v);
        return out;
    }
    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        out.names = names;
        for (const auto& v : values) out.values.push_back(v.template cast<U>());
        return out;
    }
    bool same_values(const ParamSet& other) const {
        if (names != other.names) return false;
        for (std::size_t i = 0; i < values.size(); ++i)
            if (!values[i].same_values(other.values[i])) return false;
        return true;
    }
};

template <typename T>
struct SegNetParams {
    SegNetConfig config;
    ParamSet<T> weights;  // trainable theta
    ParamSet<T> running;  // batch-norm running mean / variance

    SegNetParams clone() const { return {config, weights.clone(), running.clone()}; }
    template <typename U>
    SegNetParams<U> cast() const {
        return {config, weights.template cast<U>(), running.template cast<U>()};
    }
};

template <typename T>
struct ForwardOutput {
    Tensor<T> logits;                     // [N, classes, H, W]
    Tensor<T> prob;                       // softmax over classes
    std::vector<Tensor<T>> decoder_acts;  // coarse to fine, H / 2^(depth-1) ... H
    std::vector<Tensor<T>> batch_mean;    // per norm layer, detached (train-batch-stats only)
    std::vector<Tensor<T>> batch_var;     // unbiased

    /// Foreground probability channel, [N, 1, H, W].
    Tensor<T> foreground() const { return narrow(prob, 1, 1, 1); }
};

namespace detail {

inline constexpr double kBatchNormEps = 1e-5;

// Fan-in scaled uniform initializer shared by both networks.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    template <typename T>
    Tensor<T> uniform(Shape shape, double fan_in, double gain) {
        const double bound = std::sqrt(gain / fan_in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<T> v(numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng_));
        return Tensor<T>(std::move(shape), std::move(v));
    }

private:
    std::mt19937_64 rng_;
};

// Reads parameters in the order init_params created them.
template <typename T>
class Cursor {
public:
    explicit Cursor(const ParamSet<T>& set) : set_(set) {}
    const Tensor<T>& next(const Shape& expected) {
        if (i_ >= set_.size()) throw ShapeError("parameter set is missing tensors");
        const Tensor<T>& t = set_.values[i_];
        if (t.shape() != expected)
            throw ShapeError("parameter '" + set_.names[i_] + "' has shape " + to_string(t.shape()) + ", expected " +
                             to_string(expected));
        ++i_;
        return t;
    }
    bool done() const { return i_ == set_.size(); }

private:
    const ParamSet<T>& set_;
    std::size_t i_ = 0;
};

template <typename T>
struct Builder {
    ParamSet<T>& weights;
    ParamSet<T>& running;
    Initializer& init;

    void conv(const std::string& name, std::size_t co, std::size_t ci, std::size_t k) {
        weights.add(name + ".weight", init.uniform<T>({co, ci, k, k}, static_cast<double>(ci * k * k), 6.0));
    }
    void up(const std::string& name, std::size_t ci, std::size_t co) {
        // Stride-2 2x2 transposed convolution: each output pixel sees ci inputs.
        weights.add(name + ".weight", init.uniform<T>({ci, co, 2, 2}, static_cast<double>(ci), 6.0));
    }
    void norm(const std::string& name, std::size_t c) {
        weights.add(name + ".gamma", Tensor<T>::ones({c}));
        weights.add(name + ".beta", Tensor<T>::zeros({c}));
        running.add(name + ".running_mean", Tensor<T>::zeros({c}));
        running.add(name + ".running_var", Tensor<T>::ones({c}));
    }
    void block(const std::string& name, std::size_t c) {
        conv(name + ".conv1", c, c, 3);
        norm(name + ".norm1", c);
        conv(name + ".conv2", c, c, 3);
        norm(name + ".norm2", c);
    }
};

}  // namespace detail

/// Deterministic initialization: fan-in scaled uniform kernels, zero biases, unit norm scales.
template <typename T>
SegNetParams<T> init_params(const SegNetConfig& config, std::uint64_t seed) {
    config.validate();
    SegNetParams<T> p{config, {}, {}};
    detail::Initializer init(seed);
    detail::Builder<T> b{p.weights, p.running, init};
    const std::size_t depth = config.depth;
    b.conv("stem.conv", config.channels(0), config.in_channels, 3);
    b.norm("stem.norm", config.channels(0));
    for (std::size_t k = 0; k < depth; ++k) {
        const std::string e = "enc" + std::to_string(k);
        b.block(e + ".block", config.channels(k));
        b.conv(e + ".down.conv", config.channels(k + 1), config.channels(k), 3);
        b.norm(e + ".down.norm", config.channels(k + 1));
    }
    for (std::size_t i = 0; i < depth; ++i) {
        const std::size_t k = depth - 1 - i;
        const std::string d = "dec" + std::to_string(k);
        b.up(d + ".up.conv", config.channels(k + 1), config.channels(k));
        b.norm(d + ".up.norm", config.channels(k));
        b.block(d + ".block", config.channels(k));
    }
    p.weights.add("head.weight",
                  init.uniform<T>({config.num_classes, config.channels(0), 1, 1}, double(config.channels(0)), 1.0));
    p.weights.add("head.bias", Tensor<T>::zeros({config.num_classes}));
    return p;
}

/// Batch normalization over [N, C, H, W]; batch statistics use the biased variance.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, const Tensor<T>& run_mean,
                     const Tensor<T>& run_var, NormMode mode, ForwardOutput<T>* stats = nullptr) {
    const Shape& s = x.shape();
    const T eps = static_cast<T>(detail::kBatchNormEps);
    Tensor<T> centred, inv_std;
    if (mode == NormMode::running_stats) {
        centred = sub(x, channel_broadcast(run_mean, s));
        inv_std = div(Tensor<T>::ones(run_var.shape()), saml::sqrt(shift(run_var, eps)));
    } else {
        const std::size_t count = x.numel() / x.size(1);
        if (count < 2) throw ShapeError("batch statistics need more than one value per channel");
        const T inv_count = T(1) / static_cast<T>(count);
        Tensor<T> mu = scale(channel_sum(x), inv_count);
        centred = sub(x, channel_broadcast(mu, s));
        Tensor<T> var = scale(channel_sum(square(centred)), inv_count);
        inv_std = div(Tensor<T>::ones(var.shape()), saml::sqrt(shift(var, eps)));
        if (mode == NormMode::train_batch_stats && stats) {
            stats->batch_mean.push_back(mu.detach());
            stats->batch_var.push_back(
                scale(var.detach(), static_cast<T>(count) / static_cast<T>(count - 1)).detach());
        }
    }
    return add(mul(centred, channel_broadcast(mul(gamma, inv_std), s)), channel_broadcast(beta, s));
}

namespace detail {

template <typename T>
struct Runner {
    Cursor<T> w;
    Cursor<T> r;
    NormMode mode;
    ForwardOutput<T>* out;

    Tensor<T> norm(const Tensor<T>& x) {
        const std::size_t c = x.size(1);
        const Tensor<T>& gamma = w.next({c});
        const Tensor<T>& beta = w.next({c});
        const Tensor<T>& rm = r.next({c});
        const Tensor<T>& rv = r.next({c});
        return batch_norm(x, gamma, beta, rm, rv, mode, out);
    }
    Tensor<T> conv_norm_relu(const Tensor<T>& x, std::size_t co, std::size_t k, Conv2dOptions opt) {
        const Tensor<T>& kernel = w.next({co, x.size(1), k, k});
        return relu(norm(conv2d(x, kernel, opt)));
    }
    Tensor<T> block(const Tensor<T>& x) {
        const std::size_t c = x.size(1);
        Tensor<T> h = conv_norm_relu(x, c, 3, {1, 1});
        h = norm(conv2d(h, w.next({c, c, 3, 3}), {1, 1}));
        return relu(add(h, x));
    }
};

}  // namespace detail

/**
 * Runs F_theta on x [N, in_channels, H, W]. `params.weights` may hold tracked
 * tensors (theta or an adapted theta'); gradients then flow into them.
 */
template <typename T>
ForwardOutput<T> seg_forward(const SegNetParams<T>& params, const Tensor<T>& x, NormMode mode) {
    const SegNetConfig& cfg = params.config;
    cfg.check_input(x.shape());
    ForwardOutput<T> out;
    detail::Runner<T> run{detail::Cursor<T>(params.weights), detail::Cursor<T>(params.running), mode, &out};

    Tensor<T> h = run.conv_norm_relu(x, cfg.channels(0), 3, {1, 1});
    std::vector<Tensor<T>> skips;
    for (std::size_t k = 0; k < cfg.depth; ++k) {
        h = run.block(h);
        skips.push_back(h);
        h = run.conv_norm_relu(h, cfg.channels(k + 1), 3, {2, 1});
    }
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::size_t k = cfg.depth - 1 - i;
        const Tensor<T>& up = run.w.next({cfg.channels(k + 1), cfg.channels(k), 2, 2});
        h = relu(run.norm(conv_transpose2d(h, up, {2, 0})));
        h = run.block(add(h, skips[k]));
        out.decoder_acts.push_back(h);
    }
    const Tensor<T>& head_w = run.w.next({cfg.num_classes, cfg.channels(0), 1, 1});
    const Tensor<T>& head_b = run.w.next({cfg.num_classes});
    if (!run.w.done() || !run.r.done()) throw ShapeError("parameter set has unused tensors");
    out.logits = add(conv2d(h, head_w), channel_broadcast(head_b, Shape{x.size(0), cfg.num_classes, x.size(2), x.size(3)}));
    out.prob = softmax_channels(out.logits);
    return out;
}

/// Blends batch statistics collected by a train-batch-stats forward into the running buffers.
template <typename T>
void update_running_stats(SegNetParams<T>& params, const ForwardOutput<T>& out, double momentum = 0.1) {
    if (out.batch_mean.size() * 2 != params.running.size()) throw Error("forward output carries no batch statistics");
    const T m = static_cast<T>(momentum);
    for (std::size_t i = 0; i < out.batch_mean.size(); ++i) {
        for (int which = 0; which < 2; ++which) {
            Tensor<T>& slot = params.running.values[2 * i + which];
            const Tensor<T>& batch = which == 0 ? out.batch_mean[i] : out.batch_var[i];
            std::vector<T> v(slot.numel());
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = (T(1) - m) * slot[j] + m * batch[j];
            slot = Tensor<T>(slot.shape(), std::move(v));
        }
    }
}

// ---------------------------------------------------------------------------
// Embedding head: two fully connected layers, C -> 48 -> 32, ReLU between.

inline constexpr std::size_t kEmbedHidden = 48;
inline constexpr std::size_t kEmbedOut = 32;

template <typename T>
struct EmbedNetParams {
    std::size_t in_width = 0;
    ParamSet<T> weights;

    EmbedNetParams clone() const { return {in_width, weights.clone()}; }
};

template <typename T>
EmbedNetParams<T> init_embed_params(std::size_t in_width, std::uint64_t seed) {
    if (in_width == 0) throw ConfigError("embedding width must be positive");
    EmbedNetParams<T> p{in_width, {}};
    detail::Initializer init(seed);
    p.weights.add("fc1.weight", init.uniform<T>({in_width, kEmbedHidden}, double(in_width), 6.0));
    p.weights.add("fc1.bias", Tensor<T>::zeros({kEmbedHidden}));
    p.weights.add("fc2.weight", init.uniform<T>({kEmbedHidden, kEmbedOut}, double(kEmbedHidden), 1.0));
    p.weights.add("fc2.bias", Tensor<T>::zeros({kEmbedOut}));
    return p;
}

/// Projects E of shape [C] or [B, C] to [32] or [B, 32].
template <typename T>
Tensor<T> embed_forward(const ParamSet<T>& phi, const Tensor<T>& e) {
    if (phi.size() != 4) throw ShapeError("embedding head expects four parameter tensors");
    const std::size_t width = phi.values[0].size(0);
    const bool single = e.dim() == 1;
    if (!(single || e.dim() == 2) || e.shape().back() != width)
        throw ShapeError("embedding of shape " + to_string(e.shape()) + " does not match head width " +
                         std::to_string(width));
    const Tensor<T> rows = single ? reshape(e, Shape{1, width}) : e;
    const auto bias = [](const Tensor<T>& b) { return reshape(b, Shape{1, b.numel()}); };
    Tensor<T> h = relu(add(matmul(rows, phi.values[0]), bias(phi.values[1])));
    Tensor<T> out = add(matmul(h, phi.values[2]), bias(phi.values[3]));
    return single ? reshape(out, Shape{kEmbedOut}) : out;
}

template <typename T>
Tensor<T> embed_forward(const EmbedNetParams<T>& phi, const Tensor<T>& e) {
    return embed_forward(phi.weights, e);
}

}  // namespace saml
