// Synthetic multi-domain segmentation data: perturbed-ellipse blobs rendered
// as two-tissue images and pushed through a per-domain appearance pipeline
// (texture, gamma, bias field, blur, gain/offset, noise).
//
// On-disk layout:
//   manifest.json
//   domain_<k>/sample_<i>.img   H*W little-endian float32
//   domain_<k>/sample_<i>.msk   H*W uint8
// The manifest carries a CRC32 per payload.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "saml/checkpoint.hpp"
#include "saml/image.hpp"
#include "saml/morphology.hpp"

namespace saml {

inline constexpr int kDatasetVersion = 1;
inline constexpr double kBackgroundLevel = 0.25;
inline constexpr double kForegroundLevel = 0.75;
inline constexpr double kMinCoverage = 0.05;
inline constexpr double kMaxCoverage = 0.60;
inline constexpr int kMaxBlobAttempts = 100;

struct DomainSpec {
    int id = 0;
    double gain = 1.0;
    double offset = 0.0;
    double gamma = 1.0;
    double noise_sigma = 0.0;
    int blur_radius = 0;
    double bias_amplitude = 0.0;
    double texture_frequency = 0.0;  // cycles per image; 0 disables texture

    void validate() const {
        if (!(gamma > 0)) throw ConfigError("domain " + std::to_string(id) + ": gamma must be positive");
        if (noise_sigma < 0) throw ConfigError("domain " + std::to_string(id) + ": noise sigma must be >= 0");
        if (blur_radius < 0) throw ConfigError("domain " + std::to_string(id) + ": blur radius must be >= 0");
        if (bias_amplitude < 0 || bias_amplitude >= 1)
            throw ConfigError("domain " + std::to_string(id) + ": bias amplitude must lie in [0, 1)");
        if (texture_frequency < 0) throw ConfigError("domain " + std::to_string(id) + ": texture frequency must be >= 0");
    }

    bool operator==(const DomainSpec&) const = default;
};

/// Four scanner-like appearance settings used when no domains are configured.
inline std::vector<DomainSpec> default_domain_specs() {
    return {
        {0, 1.0, 0.0, 1.0, 0.05, 0, 0.10, 0.0},
        {1, 1.3, 0.1, 0.5, 0.07, 1, 0.30, 2.0},
        {2, 0.8, -0.1, 2.0, 0.08, 0, 0.20, 5.0},
        {3, 1.1, 0.05, 1.4, 0.12, 2, 0.40, 3.0},
    };
}

struct SampleRecord {
    Image image;
    Mask mask;
    int domain = 0;
    int sample_id = 0;
    std::uint64_t seed = 0;

    bool operator==(const SampleRecord&) const = default;
};

struct DomainDataset {
    DomainSpec spec;
    std::vector<SampleRecord> samples;

    bool operator==(const DomainDataset&) const = default;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<DomainDataset> domains;

    bool operator==(const Dataset&) const = default;

    const DomainDataset& domain(int id) const {
        for (const auto& d : domains)
            if (d.spec.id == id) return d;
        throw Error("dataset has no domain " + std::to_string(id));
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Seed of one sample, a pure function of (global seed, domain, sample, attempt).
inline std::uint64_t sample_seed(std::uint64_t seed, int domain, int sample, int attempt = 0) {
    std::uint64_t h = detail::splitmix64(seed);
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(domain));
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(sample));
    return detail::splitmix64(h ^ static_cast<std::uint64_t>(attempt));
}

inline double coverage(const Mask& m) { return static_cast<double>(count(m)) / static_cast<double>(m.size()); }

/// Ellipse with a low-frequency radial perturbation, rasterized at pixel centres.
inline Mask random_blob(std::size_t height, std::size_t width, std::mt19937_64& rng) {
    using U = std::uniform_real_distribution<double>;
    const double n = static_cast<double>(std::min(height, width));
    const double cy = height / 2.0 + U(-0.15, 0.15)(rng) * n;
    const double cx = width / 2.0 + U(-0.15, 0.15)(rng) * n;
    const double a = U(0.15, 0.32)(rng) * n;
    const double b = a * U(0.6, 1.0)(rng);
    const double rot = U(0.0, std::numbers::pi)(rng);
    double amp[3], phase[3];
    for (int k = 0; k < 3; ++k) {
        amp[k] = U(0.0, 0.08)(rng);
        phase[k] = U(0.0, 2 * std::numbers::pi)(rng);
    }
    Mask m(height, width, 0);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = dx * std::cos(rot) + dy * std::sin(rot);
            const double v = -dx * std::sin(rot) + dy * std::cos(rot);
            const double t = std::atan2(v, u);
            double radius = a * b / std::hypot(b * std::cos(t), a * std::sin(t));
            double wobble = 1.0;
            for (int k = 0; k < 3; ++k) wobble += amp[k] * std::cos((k + 2) * t + phase[k]);
            radius *= wobble;
            m.at(y, x) = std::hypot(u, v) <= radius;
        }
    return m;
}

inline Image render_clean(const Mask& m) {
    Image img(m.height, m.width, 0.0f);
    for (std::size_t i = 0; i < m.size(); ++i)
        img.data[i] = static_cast<float>(m.data[i] ? kForegroundLevel : kBackgroundLevel);
    return img;
}

namespace detail {

// One horizontal and one vertical box pass with edge clamping.
inline std::vector<double> box_blur(const std::vector<double>& src, std::size_t h, std::size_t w, int r) {
    std::vector<double> tmp(src.size()), out(src.size());
    const auto clampi = [](long v, long hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    const double norm = 1.0 / (2 * r + 1);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0;
            for (int d = -r; d <= r; ++d) s += src[y * w + clampi(long(x) + d, long(w) - 1)];
            tmp[y * w + x] = s * norm;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0;
            for (int d = -r; d <= r; ++d) s += tmp[clampi(long(y) + d, long(h) - 1) * w + x];
            out[y * w + x] = s * norm;
        }
    return out;
}

}  // namespace detail

/// Applies a domain's appearance pipeline to a clean rendering.
inline Image apply_appearance(const Image& clean, const DomainSpec& spec, std::mt19937_64& rng) {
    using U = std::uniform_real_distribution<double>;
    const std::size_t h = clean.height, w = clean.width;
    std::vector<double> v(clean.data.begin(), clean.data.end());
    if (spec.texture_frequency > 0) {
        const double angle = U(0.0, std::numbers::pi)(rng), phase = U(0.0, 2 * std::numbers::pi)(rng);
        const double f = 2 * std::numbers::pi * spec.texture_frequency / static_cast<double>(std::max(h, w));
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                v[y * w + x] += 0.1 * std::sin(f * (x * std::cos(angle) + y * std::sin(angle)) + phase);
    }
    if (spec.gamma != 1.0)
        for (auto& p : v) p = std::pow(std::clamp(p, 0.0, 1.0), spec.gamma);
    if (spec.bias_amplitude > 0) {
        const double p1 = U(0.0, 2 * std::numbers::pi)(rng), p2 = U(0.0, 2 * std::numbers::pi)(rng);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double field = std::sin(std::numbers::pi * y / double(h) + p1) *
                                     std::cos(std::numbers::pi * x / double(w) + p2);
                v[y * w + x] *= 1.0 + spec.bias_amplitude * field;
            }
    }
    if (spec.blur_radius > 0) v = detail::box_blur(detail::box_blur(v, h, w, spec.blur_radius), h, w, spec.blur_radius);
    if (spec.gain != 1.0 || spec.offset != 0.0)
        for (auto& p : v) p = spec.gain * p + spec.offset;
    if (spec.noise_sigma > 0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (auto& p : v) p += noise(rng);
    }
    Image out(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<float>(v[i]);
    return out;
}

/// One sample, fully determined by (seed, domain id, sample id).
inline SampleRecord generate_sample(const DomainSpec& spec, int sample_id, std::size_t height, std::size_t width,
                                    std::uint64_t seed) {
    for (int attempt = 0; attempt < kMaxBlobAttempts; ++attempt) {
        const std::uint64_t s = sample_seed(seed, spec.id, sample_id, attempt);
        std::mt19937_64 rng(s);
        Mask mask = random_blob(height, width, rng);
        const double c = coverage(mask);
        if (c < kMinCoverage || c > kMaxCoverage || connected_components(mask) != 1) continue;
        Image image = apply_appearance(render_clean(mask), spec, rng);
        return {std::move(image), std::move(mask), spec.id, sample_id, s};
    }
    throw Error("no valid blob for domain " + std::to_string(spec.id) + " sample " + std::to_string(sample_id) +
                " after " + std::to_string(kMaxBlobAttempts) + " attempts");
}

inline DomainDataset generate_domain(const DomainSpec& spec, std::size_t n, std::size_t height, std::size_t width,
                                     std::uint64_t seed) {
    spec.validate();
    if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
    DomainDataset d{spec, {}};
    d.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(spec, static_cast<int>(i), height, width, seed));
    return d;
}

inline Dataset generate_dataset(const std::vector<DomainSpec>& specs, std::size_t per_domain, std::size_t height,
                                std::size_t width, std::uint64_t seed) {
    Dataset ds{seed, height, width, {}};
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j)
            if (specs[j].id == specs[i].id) throw ConfigError("duplicate domain id " + std::to_string(specs[i].id));
        ds.domains.push_back(generate_domain(specs[i], per_domain, height, width, seed));
    }
    return ds;
}

/// Zero-mean, unit-variance normalization (population variance).
inline Image preprocess(const Image& img) {
    if (img.size() == 0) throw Error("preprocess: empty image");
    double mean = 0;
    for (float v : img.data) mean += v;
    mean /= static_cast<double>(img.size());
    double var = 0;
    for (float v : img.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(img.size());
    if (!(var > 1e-12)) throw Error("preprocess: constant image has zero variance");
    const double inv = 1.0 / std::sqrt(var);
    Image out(img.height, img.width);
    for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = static_cast<float>((img.data[i] - mean) * inv);
    return out;
}

// ---------------------------------------------------------------------------
// Files

inline std::uint32_t crc32_of(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline nlohmann::json to_json(const DomainSpec& s) {
    return {{"id", s.id},
            {"gain", s.gain},
            {"offset", s.offset},
            {"gamma", s.gamma},
            {"noise_sigma", s.noise_sigma},
            {"blur_radius", s.blur_radius},
            {"bias_amplitude", s.bias_amplitude},
            {"texture_frequency", s.texture_frequency}};
}

inline DomainSpec domain_spec_from_json(const nlohmann::json& j) {
    DomainSpec s;
    s.id = j.at("id");
    s.gain = j.at("gain");
    s.offset = j.at("offset");
    s.gamma = j.at("gamma");
    s.noise_sigma = j.at("noise_sigma");
    s.blur_radius = j.at("blur_radius");
    s.bias_amplitude = j.at("bias_amplitude");
    s.texture_frequency = j.at("texture_frequency");
    return s;
}

namespace detail {

inline std::filesystem::path sample_stem(const std::filesystem::path& root, int domain, int sample) {
    return root / ("domain_" + std::to_string(domain)) / ("sample_" + std::to_string(sample));
}

inline std::string encode_image(const Image& img) {
    std::string out;
    out.reserve(img.size() * 4);
    for (float v : img.data) put_le(out, v);
    return out;
}

inline std::string encode_mask(const Mask& m) { return std::string(m.data.begin(), m.data.end()); }

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& root) {
    nlohmann::json manifest;
    manifest["format"] = "saml-dataset";
    manifest["version"] = kDatasetVersion;
    manifest["seed"] = ds.seed;
    manifest["height"] = ds.height;
    manifest["width"] = ds.width;
    manifest["domains"] = nlohmann::json::array();
    for (const auto& d : ds.domains) {
        nlohmann::json dj{{"spec", to_json(d.spec)}, {"count", d.samples.size()}, {"samples", nlohmann::json::array()}};
        for (const auto& s : d.samples) {
            if (s.image.height != ds.height || s.image.width != ds.width || s.mask.height != ds.height ||
                s.mask.width != ds.width)
                throw ShapeError("sample size does not match the dataset size");
            const auto stem = detail::sample_stem(root, d.spec.id, s.sample_id);
            const std::string img = detail::encode_image(s.image), msk = detail::encode_mask(s.mask);
            write_file_atomic(stem.string() + ".img", img);
            write_file_atomic(stem.string() + ".msk", msk);
            dj["samples"].push_back(
                {{"id", s.sample_id}, {"seed", s.seed}, {"crc_img", crc32_of(img)}, {"crc_msk", crc32_of(msk)}});
        }
        manifest["domains"].push_back(std::move(dj));
    }
    write_file_atomic(root / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(root / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt manifest in " + root.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "saml-dataset") throw IoError(root.string() + " is not a dataset");
    if (manifest.value("version", 0) != kDatasetVersion)
        throw IoError("unsupported dataset version " + manifest.value("version", nlohmann::json(0)).dump());
    Dataset ds;
    try {
        ds.seed = manifest.at("seed");
        ds.height = manifest.at("height");
        ds.width = manifest.at("width");
        for (const auto& dj : manifest.at("domains")) {
            DomainDataset d{domain_spec_from_json(dj.at("spec")), {}};
            const std::size_t expected = dj.at("count");
            const auto dir = root / ("domain_" + std::to_string(d.spec.id));
            std::size_t on_disk = 0;
            if (std::filesystem::is_directory(dir))
                for (const auto& entry : std::filesystem::directory_iterator(dir))
                    on_disk += entry.path().extension() == ".img";
            if (on_disk != expected || dj.at("samples").size() != expected)
                throw IoError("domain " + std::to_string(d.spec.id) + ": manifest lists " + std::to_string(expected) +
                              " samples, found " + std::to_string(on_disk) + " on disk");
            for (const auto& sj : dj.at("samples")) {
                const int id = sj.at("id");
                const auto stem = detail::sample_stem(root, d.spec.id, id);
                const std::string img = read_file(stem.string() + ".img"), msk = read_file(stem.string() + ".msk");
                const std::size_t n = ds.height * ds.width;
                if (img.size() != 4 * n || msk.size() != n)
                    throw IoError("truncated payload for " + stem.string());
                if (crc32_of(img) != sj.at("crc_img").get<std::uint32_t>() ||
                    crc32_of(msk) != sj.at("crc_msk").get<std::uint32_t>())
                    throw IoError("checksum mismatch for " + stem.string());
                SampleRecord s{Image(ds.height, ds.width), Mask(ds.height, ds.width), d.spec.id, id, sj.at("seed")};
                for (std::size_t i = 0; i < n; ++i) s.image.data[i] = detail::get_le<float>(img.data() + 4 * i);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto b = static_cast<std::uint8_t>(msk[i]);
                    if (b > 1) throw IoError("mask value out of range in " + stem.string());
                    s.mask.data[i] = b;
                }
                d.samples.push_back(std::move(s));
            }
            ds.domains.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest in " + root.string() + ": " + e.what());
    }
    return ds;
}

}  // namespace saml
