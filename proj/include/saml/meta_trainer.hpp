// Episodic meta-training. Each iteration splits the source domains into
// meta-train and meta-test, takes a virtual gradient step on meta-train
// (theta' = theta - alpha * grad L_seg), evaluates the meta objective at theta'
// on meta-test, and updates theta (through theta') and phi jointly with Adam.
// The DeepAll baseline trains on a pooled batch from every source domain.
#pragma once

#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "saml/autodiff.hpp"
#include "saml/checkpoint.hpp"
#include "saml/models.hpp"
#include "saml/shape_losses.hpp"
#include "saml/synthdata.hpp"

namespace saml {

enum class Arm { deepall, meta_plain, meta_compact, meta_smooth, saml };

inline std::string to_string(Arm a) {
    switch (a) {
        case Arm::deepall: return "deepall";
        case Arm::meta_plain: return "meta-plain";
        case Arm::meta_compact: return "meta-compact";
        case Arm::meta_smooth: return "meta-smooth";
        case Arm::saml: return "saml";
    }
    return "?";
}

inline Arm parse_arm(const std::string& s) {
    for (Arm a : {Arm::deepall, Arm::meta_plain, Arm::meta_compact, Arm::meta_smooth, Arm::saml})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown arm '" + s + "'");
}

inline std::vector<Arm> all_arms() {
    return {Arm::deepall, Arm::meta_plain, Arm::meta_compact, Arm::meta_smooth, Arm::saml};
}

inline bool uses_compact(Arm a) { return a == Arm::meta_compact || a == Arm::saml; }
inline bool uses_smooth(Arm a) { return a == Arm::meta_smooth || a == Arm::saml; }

struct EpisodeConfig {
    double alpha = 1e-4;
    double meta_lr = 1e-4;
    double phi_lr = 1e-4;
    double lambda1 = 1.0;
    double lambda2 = 5e-3;
    std::size_t n_meta_train = 2;
    std::size_t n_meta_test = 1;
    std::size_t batch_per_domain = 5;
    std::size_t iterations = 2000;
    bool second_order = true;
    double zeta = kDefaultMargin;
    Arm arm = Arm::saml;
    double clip_norm = 10.0;
    MorphologyConfig morphology;

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0) throw ConfigError("lambda1 and lambda2 must be non-negative");
        if (n_meta_test < 1) throw ConfigError("n_meta_test must be at least 1");
        if (n_meta_train < 1) throw ConfigError("n_meta_train must be at least 1");
        if (batch_per_domain < 1) throw ConfigError("batch_per_domain must be at least 1");
        if (alpha < 0 || meta_lr <= 0 || phi_lr <= 0) throw ConfigError("learning rates must be positive");
        if (zeta <= 0) throw ConfigError("zeta must be positive");
        if (clip_norm <= 0) throw ConfigError("clip_norm must be positive");
        morphology.validate();
    }
};

// ---------------------------------------------------------------------------
// Data

/// A preprocessed source domain held in memory.
struct PreparedDomain {
    int id = 0;
    std::vector<Image> images;
    std::vector<Mask> masks;
};

inline PreparedDomain prepare_domain(const DomainDataset& d) {
    PreparedDomain p{d.spec.id, {}, {}};
    for (const auto& s : d.samples) {
        p.images.push_back(preprocess(s.image));
        p.masks.push_back(s.mask);
    }
    return p;
}

inline std::vector<PreparedDomain> prepare_domains(const Dataset& ds, const std::vector<int>& ids) {
    std::vector<PreparedDomain> out;
    for (int id : ids) out.push_back(prepare_domain(ds.domain(id)));
    return out;
}

template <typename T>
struct Batch {
    Tensor<T> x;  // [N, 1, H, W]
    Tensor<T> y;  // [N, 1, H, W]
    std::vector<Mask> masks;
    std::vector<int> domains;

    std::size_t size() const { return masks.size(); }
};

template <typename T>
Batch<T> make_batch(const std::vector<const Image*>& images, const std::vector<const Mask*>& masks,
                    std::vector<int> domains) {
    Batch<T> b{stack_grids<T>(images), stack_grids<T>(masks), {}, std::move(domains)};
    for (const Mask* m : masks) b.masks.push_back(*m);
    return b;
}

/// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
inline std::vector<std::size_t> draw_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
    if (k > n) throw Error("cannot draw " + std::to_string(k) + " of " + std::to_string(n) + " items");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
}

/// Uniformly random disjoint (meta-train, meta-test) split of `domain_ids`.
inline std::pair<std::vector<int>, std::vector<int>> split_domains(const std::vector<int>& domain_ids,
                                                                   std::size_t n_train, std::size_t n_test,
                                                                   std::mt19937_64& rng) {
    if (n_test < 1 || domain_ids.size() < n_train + n_test)
        throw Error("cannot split " + std::to_string(domain_ids.size()) + " domains into " + std::to_string(n_train) +
                    " meta-train and " + std::to_string(n_test) + " meta-test");
    const auto order = draw_indices(domain_ids.size(), n_train + n_test, rng);
    std::pair<std::vector<int>, std::vector<int>> out;
    for (std::size_t i = 0; i < n_test; ++i) out.second.push_back(domain_ids[order[i]]);
    for (std::size_t i = n_test; i < order.size(); ++i) out.first.push_back(domain_ids[order[i]]);
    return out;
}

template <typename T>
struct Episode {
    Batch<T> train;
    Batch<T> test;
};

namespace detail {

template <typename T>
Batch<T> gather_batch(const std::vector<const PreparedDomain*>& domains,
                      const std::vector<std::vector<std::size_t>>& picks) {
    std::vector<const Image*> images;
    std::vector<const Mask*> masks;
    std::vector<int> ids;
    for (std::size_t d = 0; d < domains.size(); ++d)
        for (std::size_t i : picks[d]) {
            images.push_back(&domains[d]->images[i]);
            masks.push_back(&domains[d]->masks[i]);
            ids.push_back(domains[d]->id);
        }
    return make_batch<T>(images, masks, std::move(ids));
}

inline const PreparedDomain* find_domain(const std::vector<PreparedDomain>& domains, int id) {
    for (const auto& d : domains)
        if (d.id == id) return &d;
    throw Error("unknown domain " + std::to_string(id));
}

}  // namespace detail

/**
 * Draws one episode. With fewer source domains than the configured split
 * the sizes shrink to (K - 1, 1); a single source domain supplies disjoint
 * meta-train and meta-test samples from itself.
 */
template <typename T>
Episode<T> sample_episode(const std::vector<PreparedDomain>& domains, const EpisodeConfig& cfg, std::mt19937_64& rng) {
    const std::size_t b = cfg.batch_per_domain;
    if (domains.empty()) throw Error("no source domains");
    if (domains.size() == 1) {
        const PreparedDomain& d = domains.front();
        const auto idx = draw_indices(d.images.size(), 2 * b, rng);
        std::vector<std::size_t> tr(idx.begin(), idx.begin() + b), te(idx.begin() + b, idx.end());
        return {detail::gather_batch<T>({&d}, {tr}), detail::gather_batch<T>({&d}, {te})};
    }
    std::size_t n_tr = cfg.n_meta_train, n_te = cfg.n_meta_test;
    if (n_tr + n_te > domains.size()) {
        n_te = 1;
        n_tr = domains.size() - 1;
    }
    std::vector<int> ids;
    for (const auto& d : domains) ids.push_back(d.id);
    const auto [tr_ids, te_ids] = split_domains(ids, n_tr, n_te, rng);
    auto pick = [&](const std::vector<int>& which) {
        std::vector<const PreparedDomain*> ds;
        std::vector<std::vector<std::size_t>> picks;
        for (int id : which) {
            ds.push_back(detail::find_domain(domains, id));
            picks.push_back(draw_indices(ds.back()->images.size(), b, rng));
        }
        return detail::gather_batch<T>(ds, picks);
    };
    Batch<T> train = pick(tr_ids);
    Batch<T> test = pick(te_ids);
    return {std::move(train), std::move(test)};
}

/// batch_per_domain samples from every domain, for the DeepAll baseline.
template <typename T>
Batch<T> sample_pooled(const std::vector<PreparedDomain>& domains, std::size_t per_domain, std::mt19937_64& rng) {
    std::vector<const PreparedDomain*> ds;
    std::vector<std::vector<std::size_t>> picks;
    for (const auto& d : domains) {
        ds.push_back(&d);
        picks.push_back(draw_indices(d.images.size(), per_domain, rng));
    }
    return detail::gather_batch<T>(ds, picks);
}

// ---------------------------------------------------------------------------
// Objective pieces

/// Maps network weights and an input batch to a forward pass.
template <typename T>
using ForwardFn = std::function<ForwardOutput<T>(const ParamSet<T>&, const Tensor<T>&)>;

/// Forward pass of a segmentation network using batch statistics, with the
/// given weights substituted for the stored ones.
template <typename T>
ForwardFn<T> segnet_forward(const SegNetConfig& config, const ParamSet<T>& running) {
    return [config, running](const ParamSet<T>& weights, const Tensor<T>& x) {
        return seg_forward(SegNetParams<T>{config, weights, running}, x, NormMode::train_batch_stats);
    };
}

/// theta - alpha * grad(loss); the step stays differentiable when second_order is set.
template <typename T>
std::vector<Tensor<T>> gradient_step(const std::vector<Tensor<T>>& theta, const Tensor<T>& loss, T alpha,
                                     bool second_order) {
    const auto grads = gradient(loss, theta, second_order);
    std::vector<Tensor<T>> out;
    out.reserve(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        for (T g : grads[i].values())
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite inner gradient");
        out.push_back(sub(theta[i], scale(grads[i], alpha)));
    }
    return out;
}

template <typename T>
struct InnerResult {
    ParamSet<T> adapted;  // theta'
    Tensor<T> loss;       // L_seg(D_tr; theta)
    ForwardOutput<T> forward;
};

template <typename T>
InnerResult<T> inner_update(const ForwardFn<T>& forward, const ParamSet<T>& theta, const Batch<T>& train, T alpha,
                            bool second_order) {
    ForwardOutput<T> out = forward(theta, train.x);
    Tensor<T> loss = dice_loss(out.foreground(), train.y);
    ParamSet<T> adapted = theta.with_values(gradient_step(theta.values, loss, alpha, second_order));
    return {std::move(adapted), std::move(loss), std::move(out)};
}

template <typename T>
struct MetaTerms {
    Tensor<T> value;    // L_seg(D_te) [+ l1 L_compact] [+ l2 L_smooth]
    Tensor<T> seg_te;
    Tensor<T> compact;  // empty when the arm excludes the term
    Tensor<T> smooth;
};

/// One embedding per sample with a randomly chosen class, over the given forward pass.
template <typename T>
void append_embeddings(std::vector<EmbeddingSample<T>>& out, const ForwardOutput<T>& fwd, const Batch<T>& batch,
                       const MorphologyConfig& morph, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto [con, bg] = extract_embeddings(fwd.decoder_acts, i, batch.masks[i], morph, batch.domains[i]);
        out.push_back(coin(rng) ? std::move(con) : std::move(bg));
    }
}

/**
 * L_meta at theta'. L_seg uses D_te only, L_compact the D_te predictions
 * only, L_smooth embeddings pooled from D_tr and D_te forwards at theta'.
 */
template <typename T>
MetaTerms<T> meta_objective(const ForwardFn<T>& forward, const ParamSet<T>& theta_prime, const ParamSet<T>& phi,
                            const Batch<T>& train, const Batch<T>& test, const EpisodeConfig& cfg,
                            std::mt19937_64& rng) {
    MetaTerms<T> m;
    ForwardOutput<T> te = forward(theta_prime, test.x);
    const Tensor<T> fg = te.foreground();
    m.seg_te = dice_loss(fg, test.y);
    m.value = m.seg_te;
    if (uses_compact(cfg.arm)) {
        m.compact = compactness_loss(fg);
        m.value = add(m.value, scale(m.compact, static_cast<T>(cfg.lambda1)));
    }
    if (uses_smooth(cfg.arm)) {
        ForwardOutput<T> tr = forward(theta_prime, train.x);
        std::vector<EmbeddingSample<T>> samples;
        append_embeddings(samples, tr, train, cfg.morphology, rng);
        append_embeddings(samples, te, test, cfg.morphology, rng);
        m.smooth = smoothness_loss(phi, samples, static_cast<T>(cfg.zeta));
        m.value = add(m.value, scale(m.smooth, static_cast<T>(cfg.lambda2)));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Rescales `grads` in place so their joint L2 norm is at most max_norm; returns the original norm.
template <typename T>
double clip_by_norm(std::vector<Tensor<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T factor = static_cast<T>(max_norm / norm);
        for (auto& g : grads) g = scale(g.detach(), factor);
    }
    return norm;
}

template <typename T>
struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Tensor<T>> m, v;
    std::uint64_t step = 0;

    static Adam for_params(const ParamSet<T>& params, double lr) {
        Adam a;
        a.lr = lr;
        for (const auto& p : params.values) {
            a.m.push_back(Tensor<T>::zeros(p.shape()));
            a.v.push_back(Tensor<T>::zeros(p.shape()));
        }
        return a;
    }

    /// Returns updated copies of `params`; the inputs are not modified.
    std::vector<Tensor<T>> update(const std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads) {
        if (params.size() != m.size() || grads.size() != m.size()) throw ShapeError("Adam: parameter count changed");
        ++step;
        const double c1 = 1.0 - std::pow(beta1, double(step)), c2 = 1.0 - std::pow(beta2, double(step));
        std::vector<Tensor<T>> out;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (grads[i].shape() != params[i].shape() || m[i].shape() != params[i].shape())
                throw ShapeError("Adam: shape mismatch");
            const std::size_t n = params[i].numel();
            std::vector<T> pm(n), pv(n), pp(n);
            for (std::size_t j = 0; j < n; ++j) {
                const double g = grads[i][j];
                const double mj = beta1 * m[i][j] + (1 - beta1) * g;
                const double vj = beta2 * v[i][j] + (1 - beta2) * g * g;
                pm[j] = static_cast<T>(mj);
                pv[j] = static_cast<T>(vj);
                pp[j] = static_cast<T>(params[i][j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
            }
            m[i] = Tensor<T>(params[i].shape(), std::move(pm));
            v[i] = Tensor<T>(params[i].shape(), std::move(pv));
            out.emplace_back(params[i].shape(), std::move(pp));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Training state

struct LossRecord {
    std::size_t iteration = 0;
    double l_seg_tr = 0;
    double l_seg_te = 0;
    double l_compact = 0;
    double l_smooth = 0;
    double total = 0;

    bool operator==(const LossRecord&) const = default;
};

/// Bounded loss history; the oldest entries fall off once full.
struct LossHistory {
    std::size_t capacity = std::size_t{1} << 20;
    std::deque<LossRecord> records;

    void push(const LossRecord& r) {
        records.push_back(r);
        while (records.size() > capacity) records.pop_front();
    }
    std::size_t size() const { return records.size(); }
    bool operator==(const LossHistory&) const = default;
};

template <typename T>
struct TrainState {
    SegNetParams<T> theta;
    ParamSet<T> phi;
    Adam<T> opt_theta;
    Adam<T> opt_phi;
    std::size_t iteration = 0;
    std::mt19937_64 rng;
    LossHistory history;
};

template <typename T>
TrainState<T> init_train_state(const SegNetConfig& net, const EpisodeConfig& cfg, std::uint64_t seed) {
    net.validate();
    cfg.validate();
    TrainState<T> s;
    s.theta = init_params<T>(net, detail::splitmix64(seed ^ 0x7468657461ull));
    s.phi = init_embed_params<T>(net.embed_width(), detail::splitmix64(seed ^ 0x706869ull)).weights;
    s.opt_theta = Adam<T>::for_params(s.theta.weights, cfg.meta_lr);
    s.opt_phi = Adam<T>::for_params(s.phi, cfg.phi_lr);
    s.rng.seed(detail::splitmix64(seed ^ 0x72616e64ull));
    return s;
}

namespace detail {

template <typename T>
double scalar_of(const Tensor<T>& t) {
    return t.numel() == 0 ? 0.0 : static_cast<double>(t.item());
}

template <typename T>
void apply_updates(TrainState<T>& state, std::vector<Tensor<T>> theta_grads, std::vector<Tensor<T>> phi_grads,
                   const EpisodeConfig& cfg) {
    clip_by_norm(theta_grads, cfg.clip_norm);
    clip_by_norm(phi_grads, cfg.clip_norm);
    state.theta.weights = state.theta.weights.with_values(state.opt_theta.update(state.theta.weights.values, theta_grads));
    state.phi = state.phi.with_values(state.opt_phi.update(state.phi.values, phi_grads));
}

}  // namespace detail

/**
 * One optimization step. Meta arms minimize L_seg(D_tr; theta) + L_meta(theta')
 * w.r.t. theta and phi; deepall minimizes L_seg on a pooled batch.
 * Running normalization statistics follow the theta forward pass.
 */
template <typename T>
LossRecord train_step(TrainState<T>& state, const std::vector<PreparedDomain>& domains, const EpisodeConfig& cfg) {
    LossRecord rec;
    rec.iteration = state.iteration + 1;
    try {
        Tape<T> tape;
        ParamSet<T> theta = state.theta.weights.with_values(tape.watch(state.theta.weights.values));
        ParamSet<T> phi = state.phi.with_values(tape.watch(state.phi.values));
        const ForwardFn<T> forward = segnet_forward(state.theta.config, state.theta.running);
        ForwardOutput<T> theta_forward;
        Tensor<T> total;
        if (cfg.arm == Arm::deepall) {
            Batch<T> batch = sample_pooled<T>(domains, cfg.batch_per_domain, state.rng);
            theta_forward = forward(theta, batch.x);
            total = dice_loss(theta_forward.foreground(), batch.y);
            rec.l_seg_tr = detail::scalar_of(total);
        } else {
            Episode<T> ep = sample_episode<T>(domains, cfg, state.rng);
            InnerResult<T> inner =
                inner_update(forward, theta, ep.train, static_cast<T>(cfg.alpha), cfg.second_order);
            MetaTerms<T> meta = meta_objective(forward, inner.adapted, phi, ep.train, ep.test, cfg, state.rng);
            total = add(inner.loss, meta.value);
            rec.l_seg_tr = detail::scalar_of(inner.loss);
            rec.l_seg_te = detail::scalar_of(meta.seg_te);
            rec.l_compact = detail::scalar_of(meta.compact);
            rec.l_smooth = detail::scalar_of(meta.smooth);
            theta_forward = std::move(inner.forward);
        }
        rec.total = detail::scalar_of(total);
        if (!std::isfinite(rec.total)) throw NumericError("non-finite total loss");
        std::vector<Tensor<T>> wrt = theta.values;
        wrt.insert(wrt.end(), phi.values.begin(), phi.values.end());
        auto grads = gradient(total, wrt);
        std::vector<Tensor<T>> theta_grads(grads.begin(), grads.begin() + theta.size());
        std::vector<Tensor<T>> phi_grads(grads.begin() + theta.size(), grads.end());
        for (const auto& g : grads)
            for (T v : g.values())
                if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient");
        detail::apply_updates(state, std::move(theta_grads), std::move(phi_grads), cfg);
        update_running_stats(state.theta, theta_forward);
    } catch (const NumericError& e) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "iteration %zu (%s): l_seg_tr=%g l_seg_te=%g l_compact=%g l_smooth=%g: ",
                      rec.iteration, to_string(cfg.arm).c_str(), rec.l_seg_tr, rec.l_seg_te, rec.l_compact,
                      rec.l_smooth);
        throw NumericError(buf + std::string(e.what()));
    }
    state.iteration = rec.iteration;
    state.history.push(rec);
    return rec;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string loss_csv(const LossHistory& history) {
    std::string out = "iteration,l_seg_tr,l_seg_te,l_compact,l_smooth,total\n";
    char buf[256];
    for (const auto& r : history.records) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.l_seg_tr, r.l_seg_te,
                      r.l_compact, r.l_smooth, r.total);
        out += buf;
    }
    return out;
}

template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& s) {
    TensorContainer c;
    std::ostringstream rng;
    rng << s.rng;
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : s.history.records)
        history.push_back({r.iteration, r.l_seg_tr, r.l_seg_te, r.l_compact, r.l_smooth, r.total});
    c.meta = {{"kind", "train-state"},
              {"config", to_json(s.theta.config)},
              {"iteration", s.iteration},
              {"rng", rng.str()},
              {"adam_theta", {{"step", s.opt_theta.step}, {"lr", s.opt_theta.lr}}},
              {"adam_phi", {{"step", s.opt_phi.step}, {"lr", s.opt_phi.lr}}},
              {"history_capacity", s.history.capacity},
              {"history", std::move(history)}};
    c.put_all("theta/", s.theta.weights);
    c.put_all("buffer/", s.theta.running);
    c.put_all("phi/", s.phi);
    for (std::size_t i = 0; i < s.theta.weights.size(); ++i) {
        c.put("adam/theta/m/" + s.theta.weights.names[i], s.opt_theta.m[i]);
        c.put("adam/theta/v/" + s.theta.weights.names[i], s.opt_theta.v[i]);
    }
    for (std::size_t i = 0; i < s.phi.size(); ++i) {
        c.put("adam/phi/m/" + s.phi.names[i], s.opt_phi.m[i]);
        c.put("adam/phi/v/" + s.phi.names[i], s.opt_phi.v[i]);
    }
    c.save(path);
}

template <typename T>
TrainState<T> load_train_state(const std::filesystem::path& path) {
    const TensorContainer c = TensorContainer::load(path);
    if (c.meta.value("kind", "") != "train-state") throw IoError(path.string() + " is not a training checkpoint");
    try {
        const SegNetConfig net = segnet_config_from_json(c.meta.at("config"));
        TrainState<T> s;
        s.theta = init_params<T>(net, 0);
        s.phi = init_embed_params<T>(net.embed_width(), 0).weights;
        c.get_all("theta/", s.theta.weights);
        c.get_all("buffer/", s.theta.running);
        c.get_all("phi/", s.phi);
        s.opt_theta = Adam<T>::for_params(s.theta.weights, c.meta.at("adam_theta").at("lr"));
        s.opt_theta.step = c.meta.at("adam_theta").at("step");
        s.opt_phi = Adam<T>::for_params(s.phi, c.meta.at("adam_phi").at("lr"));
        s.opt_phi.step = c.meta.at("adam_phi").at("step");
        for (std::size_t i = 0; i < s.theta.weights.size(); ++i) {
            s.opt_theta.m[i] = c.get<T>("adam/theta/m/" + s.theta.weights.names[i]);
            s.opt_theta.v[i] = c.get<T>("adam/theta/v/" + s.theta.weights.names[i]);
        }
        for (std::size_t i = 0; i < s.phi.size(); ++i) {
            s.opt_phi.m[i] = c.get<T>("adam/phi/m/" + s.phi.names[i]);
            s.opt_phi.v[i] = c.get<T>("adam/phi/v/" + s.phi.names[i]);
        }
        s.iteration = c.meta.at("iteration");
        std::istringstream rng(c.meta.at("rng").get<std::string>());
        rng >> s.rng;
        if (!rng) throw IoError("corrupt generator state in " + path.string());
        s.history.capacity = c.meta.at("history_capacity");
        for (const auto& r : c.meta.at("history"))
            s.history.push({r.at(0), r.at(1), r.at(2), r.at(3), r.at(4), r.at(5)});
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed training checkpoint " + path.string() + ": " + e.what());
    }
}

struct LoopOptions {
    std::size_t checkpoint_every = 0;  // 0: only at the end
    std::filesystem::path checkpoint_path;  // empty: no checkpoints
    std::filesystem::path csv_path;         // empty: no loss CSV
    std::function<void(const LossRecord&)> on_step;
};

/// Runs train_step until cfg.iterations steps have been taken in total.
template <typename T>
TrainState<T> train_loop(TrainState<T> state, const std::vector<PreparedDomain>& domains, const EpisodeConfig& cfg,
                         const LoopOptions& opt = {}) {
    cfg.validate();
    while (state.iteration < cfg.iterations) {
        const LossRecord rec = train_step(state, domains, cfg);
        if (opt.on_step) opt.on_step(rec);
        if (!opt.checkpoint_path.empty() && opt.checkpoint_every > 0 && state.iteration % opt.checkpoint_every == 0)
            save_train_state(opt.checkpoint_path, state);
    }
    if (!opt.checkpoint_path.empty()) save_train_state(opt.checkpoint_path, state);
    if (!opt.csv_path.empty()) write_file_atomic(opt.csv_path, loss_csv(state.history));
    return state;
}

}  // namespace saml
