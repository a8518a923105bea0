// Experiment configuration: a flat TOML file. Unknown keys and wrong types are errors that
// carry the offending line.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "saml/experiment.hpp"

namespace saml {

struct ExperimentConfig {
    // data
    std::filesystem::path dataset = "data";
    std::size_t num_domains = 4;
    std::size_t samples_per_domain = 40;
    std::size_t image_size = 64;
    // model and training
    SegNetConfig net;
    EpisodeConfig episode;
    // experiment
    std::vector<Arm> arms = all_arms();
    std::uint64_t seed = 0;
    std::size_t num_seeds = 5;  // seeds seed, seed + 1, ...
    std::filesystem::path out = "results";
    Dtype dtype = Dtype::f32;
    int sweep_target = -1;  // -1: the highest domain id
    std::size_t checkpoint_every = 0;

    std::vector<std::uint64_t> seeds() const {
        std::vector<std::uint64_t> s;
        for (std::size_t i = 0; i < num_seeds; ++i) s.push_back(seed + i);
        return s;
    }

    ExperimentSettings settings() const {
        ExperimentSettings s;
        s.net = net;
        s.episode = episode;
        s.dtype = dtype;
        return s;
    }

    void validate() const {
        net.validate();
        episode.validate();
        if (num_domains < 1 || num_domains > default_domain_specs().size())
            throw ConfigError("num_domains must be between 1 and " + std::to_string(default_domain_specs().size()));
        if (samples_per_domain < episode.batch_per_domain)
            throw ConfigError("samples_per_domain must be at least batch_per_domain");
        if (image_size == 0 || image_size % (std::size_t{1} << net.depth) != 0)
            throw ConfigError("image_size must be a positive multiple of 2^depth");
        if (arms.empty()) throw ConfigError("arms must not be empty");
        if (num_seeds < 1) throw ConfigError("num_seeds must be at least 1");
    }
};

namespace detail {

struct ConfigField {
    std::string key;
    std::string doc;
    std::function<void(ExperimentConfig&, const toml::node&)> read;
    std::function<void(const ExperimentConfig&, toml::table&)> write;
};

inline std::string where(const toml::node& n) {
    const auto& src = n.source();
    return src.begin ? "line " + std::to_string(src.begin.line) + ": " : std::string{};
}

template <typename V>
V expect(const toml::node& n, const std::string& key, const char* kind) {
    if constexpr (std::is_same_v<V, double>) {
        if (auto v = n.value_exact<double>()) return *v;
        if (auto v = n.value_exact<std::int64_t>()) return static_cast<double>(*v);
    } else if constexpr (std::is_same_v<V, std::int64_t>) {
        if (auto v = n.value_exact<std::int64_t>()) return *v;
    } else {
        if (auto v = n.value_exact<V>()) return *v;
    }
    throw ConfigError(where(n) + "'" + key + "' must be " + kind);
}

inline std::size_t expect_count(const toml::node& n, const std::string& key) {
    const auto v = expect<std::int64_t>(n, key, "a non-negative integer");
    if (v < 0) throw ConfigError(where(n) + "'" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
}

template <typename Get>
ConfigField count_field(std::string key, std::string doc, Get get) {
    return {key, std::move(doc),
            [key, get](ExperimentConfig& c, const toml::node& n) { get(c) = expect_count(n, key); },
            [key, get](const ExperimentConfig& c, toml::table& t) {
                ExperimentConfig copy = c;
                t.insert(key, static_cast<std::int64_t>(get(copy)));
            }};
}

template <typename Get>
ConfigField real_field(std::string key, std::string doc, Get get) {
    return {key, std::move(doc),
            [key, get](ExperimentConfig& c, const toml::node& n) { get(c) = expect<double>(n, key, "a number"); },
            [key, get](const ExperimentConfig& c, toml::table& t) {
                ExperimentConfig copy = c;
                t.insert(key, get(copy));
            }};
}

inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        {"dataset", "dataset directory",
         [](C& c, const toml::node& n) { c.dataset = expect<std::string>(n, "dataset", "a string"); },
         [](const C& c, toml::table& t) { t.insert("dataset", c.dataset.string()); }},
        count_field("num_domains", "synthetic domains to generate (first N default specs)",
                    [](C& c) -> std::size_t& { return c.num_domains; }),
        count_field("samples_per_domain", "samples per domain",
                    [](C& c) -> std::size_t& { return c.samples_per_domain; }),
        count_field("image_size", "square image side in pixels", [](C& c) -> std::size_t& { return c.image_size; }),
        count_field("in_channels", "input channels", [](C& c) -> std::size_t& { return c.net.in_channels; }),
        count_field("base_channels", "channels of the first stage",
                    [](C& c) -> std::size_t& { return c.net.base_channels; }),
        count_field("depth", "down/up stages", [](C& c) -> std::size_t& { return c.net.depth; }),
        count_field("num_classes", "output classes", [](C& c) -> std::size_t& { return c.net.num_classes; }),
        {"norm_mode", "normalisation at inference: train-batch-stats | running-stats | test-batch-stats",
         [](C& c, const toml::node& n) {
             try {
                 c.net.norm_mode = parse_norm_mode(expect<std::string>(n, "norm_mode", "a string"));
             } catch (const ConfigError& e) {
                 throw ConfigError(where(n) + e.what());
             }
         },
         [](const C& c, toml::table& t) { t.insert("norm_mode", to_string(c.net.norm_mode)); }},
        real_field("alpha", "inner-step learning rate", [](C& c) -> double& { return c.episode.alpha; }),
        real_field("meta_lr", "Adam learning rate for the segmentation network",
                   [](C& c) -> double& { return c.episode.meta_lr; }),
        real_field("phi_lr", "Adam learning rate for the embedding head",
                   [](C& c) -> double& { return c.episode.phi_lr; }),
        real_field("lambda1", "compactness weight", [](C& c) -> double& { return c.episode.lambda1; }),
        real_field("lambda2", "smoothness weight", [](C& c) -> double& { return c.episode.lambda2; }),
        count_field("n_meta_train", "meta-train domains per episode",
                    [](C& c) -> std::size_t& { return c.episode.n_meta_train; }),
        count_field("n_meta_test", "meta-test domains per episode",
                    [](C& c) -> std::size_t& { return c.episode.n_meta_test; }),
        count_field("batch_per_domain", "samples per domain per batch",
                    [](C& c) -> std::size_t& { return c.episode.batch_per_domain; }),
        count_field("iterations", "training iterations", [](C& c) -> std::size_t& { return c.episode.iterations; }),
        {"second_order", "differentiate through the inner step",
         [](C& c, const toml::node& n) { c.episode.second_order = expect<bool>(n, "second_order", "true or false"); },
         [](const C& c, toml::table& t) { t.insert("second_order", c.episode.second_order); }},
        real_field("zeta", "contrastive margin", [](C& c) -> double& { return c.episode.zeta; }),
        real_field("clip_norm", "per-group gradient norm clip", [](C& c) -> double& { return c.episode.clip_norm; }),
        count_field("contour_width", "contour ring width in pixels",
                    [](C& c) -> std::size_t& { return c.episode.morphology.contour_width; }),
        count_field("background_width", "background band width in pixels",
                    [](C& c) -> std::size_t& { return c.episode.morphology.background_width; }),
        {"arm", "arm trained by the train command",
         [](C& c, const toml::node& n) {
             try {
                 c.episode.arm = parse_arm(expect<std::string>(n, "arm", "a string"));
             } catch (const ConfigError& e) {
                 throw ConfigError(where(n) + e.what());
             }
         },
         [](const C& c, toml::table& t) { t.insert("arm", to_string(c.episode.arm)); }},
        {"arms", "arms compared by loo and sweep-domains",
         [](C& c, const toml::node& n) {
             const auto* arr = n.as_array();
             if (!arr) throw ConfigError(where(n) + "'arms' must be an array of strings");
             c.arms.clear();
             for (const auto& e : *arr) {
                 try {
                     c.arms.push_back(parse_arm(expect<std::string>(e, "arms", "an array of strings")));
                 } catch (const ConfigError& err) {
                     throw ConfigError(where(n) + err.what());
                 }
             }
         },
         [](const C& c, toml::table& t) {
             toml::array a;
             for (Arm arm : c.arms) a.push_back(to_string(arm));
             t.insert("arms", std::move(a));
         }},
        {"seed", "master seed",
         [](C& c, const toml::node& n) { c.seed = expect_count(n, "seed"); },
         [](const C& c, toml::table& t) { t.insert("seed", static_cast<std::int64_t>(c.seed)); }},
        count_field("num_seeds", "seeds per configuration (seed, seed+1, ...)",
                    [](C& c) -> std::size_t& { return c.num_seeds; }),
        {"out", "output directory",
         [](C& c, const toml::node& n) { c.out = expect<std::string>(n, "out", "a string"); },
         [](const C& c, toml::table& t) { t.insert("out", c.out.string()); }},
        {"dtype", "f32 | f64",
         [](C& c, const toml::node& n) {
             try {
                 c.dtype = parse_dtype(expect<std::string>(n, "dtype", "a string"));
             } catch (const ConfigError& e) {
                 throw ConfigError(where(n) + e.what());
             }
         },
         [](const C& c, toml::table& t) { t.insert("dtype", to_string(c.dtype)); }},
        {"sweep_target", "held-out domain of the source-count sweep (-1: highest id)",
         [](C& c, const toml::node& n) {
             c.sweep_target = static_cast<int>(expect<std::int64_t>(n, "sweep_target", "an integer"));
         },
         [](const C& c, toml::table& t) { t.insert("sweep_target", static_cast<std::int64_t>(c.sweep_target)); }},
        count_field("checkpoint_every", "iterations between checkpoints (0: only at the end)",
                    [](C& c) -> std::size_t& { return c.checkpoint_every; }),
    };
    return fields;
}

}  // namespace detail

/// Applies the keys of a TOML document on top of `base`.
inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "config",
                                     ExperimentConfig base = {}) {
    toml::table tbl;
    try {
        tbl = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        throw ConfigError(source + ": line " + std::to_string(e.source().begin.line) + ": " +
                          std::string(e.description()));
    }
    const auto& fields = detail::config_fields();
    try {
        for (const auto& [key, node] : tbl) {
            const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key.str(); });
            if (it == fields.end())
                throw ConfigError(detail::where(node) + "unknown key '" + std::string(key.str()) + "'");
            it->read(base, node);
        }
        base.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path), path.string());
}

/// Every key with its resolved value, one per line in schema order.
inline std::string to_toml(const ExperimentConfig& c) {
    std::ostringstream os;
    for (const auto& f : detail::config_fields()) {
        toml::table t;
        f.write(c, t);
        os << "# " << f.doc << "\n" << toml::toml_formatter(t, toml::format_flags::none) << "\n";
    }
    return os.str();
}

inline void write_resolved_config(const std::filesystem::path& dir, const ExperimentConfig& c) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "resolved_config.toml", to_toml(c));
}

inline std::vector<DomainSpec> config_domain_specs(const ExperimentConfig& c) {
    auto specs = default_domain_specs();
    specs.resize(c.num_domains);
    return specs;
}

}  // namespace saml
