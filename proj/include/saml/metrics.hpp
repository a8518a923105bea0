// Segmentation metrics and held-out evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "saml/meta_trainer.hpp"
#include "saml/models.hpp"
#include "saml/morphology.hpp"
#include "saml/shape_losses.hpp"

namespace saml {

/// 2|a ∩ b| / (|a| + |b|), 1 when both are empty.
inline double dice_score(const Mask& pred, const Mask& gt) {
    require_same_size(pred, gt, "dice_score");
    std::size_t inter = 0, total = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        inter += p && g;
        total += std::size_t(p) + std::size_t(g);
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

namespace detail {

// One pass of the lower-envelope squared distance transform (Felzenszwalb & Huttenlocher)
// over f[0..n) in place. Values are small integers, so every step is exact in double.
inline void edt_1d(std::vector<double>& f, std::size_t n, std::vector<double>& d, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::size_t k = 0, first = n;
    for (std::size_t q = 0; q < n; ++q)
        if (f[q] < inf) {
            first = q;
            break;
        }
    if (first == n) return;
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    const auto meet = [&](std::size_t q, std::size_t p) {
        const double qd = static_cast<double>(q), pd = static_cast<double>(p);
        return ((f[q] + qd * qd) - (f[p] + pd * pd)) / (2.0 * (qd - pd));
    };
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == inf) continue;
        double s = meet(q, v[k]);
        while (s <= z[k]) s = meet(q, v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double qd = static_cast<double>(q);
        while (z[k + 1] < qd) ++k;
        const double dv = qd - static_cast<double>(v[k]);
        d[q] = dv * dv + f[v[k]];
    }
    std::copy(d.begin(), d.begin() + n, f.begin());
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set pixel of `m`.
inline Grid<double> squared_distance_transform(const Mask& m) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    Grid<double> g(m.height, m.width, inf);
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.data[i]) g.data[i] = 0.0;
    const std::size_t n = std::max(m.height, m.width);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<std::size_t> v(n);
    for (std::size_t x = 0; x < m.width; ++x) {
        for (std::size_t y = 0; y < m.height; ++y) f[y] = g.at(y, x);
        detail::edt_1d(f, m.height, d, v, z);
        for (std::size_t y = 0; y < m.height; ++y) g.at(y, x) = f[y];
    }
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) f[x] = g.at(y, x);
        detail::edt_1d(f, m.width, d, v, z);
        for (std::size_t x = 0; x < m.width; ++x) g.at(y, x) = f[x];
    }
    return g;
}

namespace detail {

// Sum over the set pixels of `from` of the distance to the nearest set pixel of `to`.
inline double directed_distance_sum(const Mask& from, const Mask& to) {
    const Grid<double> dt = squared_distance_transform(to);
    double sum = 0;
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from.data[i]) sum += std::sqrt(dt.data[i]);
    return sum;
}

}  // namespace detail

/// Symmetric average surface distance in pixels over the 4-neighbourhood inner boundaries.
/// Empty when either mask is empty.
inline std::optional<double> asd(const Mask& pred, const Mask& gt) {
    require_same_size(pred, gt, "asd");
    if (count(pred) == 0 || count(gt) == 0) return std::nullopt;
    const Mask bp = inner_boundary(pred), bg = inner_boundary(gt);
    const double np = static_cast<double>(count(bp)), ng = static_cast<double>(count(bg));
    const double ab = detail::directed_distance_sum(bp, bg) / np;
    const double ba = detail::directed_distance_sum(bg, bp) / ng;
    return 0.5 * (ab + ba);
}

/// O(n^2) reference for asd; same boundary definition and the same summation order.
inline std::optional<double> asd_brute_force(const Mask& pred, const Mask& gt) {
    require_same_size(pred, gt, "asd_brute_force");
    if (count(pred) == 0 || count(gt) == 0) return std::nullopt;
    const Mask bp = inner_boundary(pred), bg = inner_boundary(gt);
    const auto directed = [](const Mask& a, const Mask& b) {
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!a.data[i]) continue;
            const double ay = static_cast<double>(i / a.width), ax = static_cast<double>(i % a.width);
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < b.size(); ++j) {
                if (!b.data[j]) continue;
                const double dy = ay - static_cast<double>(j / b.width), dx = ax - static_cast<double>(j % b.width);
                best = std::min(best, dy * dy + dx * dx);
            }
            sum += std::sqrt(best);
            ++n;
        }
        return sum / static_cast<double>(n);
    };
    return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

/// Iso-perimetric quotient 4πA/P² of a binary mask from the discrete P and A of compactness_loss,
/// without the stabilising epsilon (so it is exactly the reciprocal of the epsilon-free loss).
inline double ipq_measure(const Mask& m) {
    const std::size_t n = count(m);
    if (n == 0) throw Error("ipq_measure: empty mask");
    if (n == m.size()) throw Error("ipq_measure: mask covers the whole grid and has no boundary");
    std::vector<double> v(m.data.begin(), m.data.end());
    GradModeGuard off(false);
    return 1.0 / compactness_loss(Tensor<double>({m.height, m.width}, std::move(v)), 0.0).item();
}

/// Foreground where the foreground logit strictly exceeds every other class.
template <typename T>
std::vector<Mask> argmax_masks(const Tensor<T>& logits) {
    const auto& s = logits.shape();
    if (s.size() != 4 || s[1] < 2) throw ShapeError("argmax_masks expects [N, classes, H, W]");
    const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], plane = h * w;
    std::vector<Mask> out;
    for (std::size_t b = 0; b < n; ++b) {
        Mask m(h, w, 0);
        const T* base = logits.data() + b * c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < c; ++k)
                if (base[k * plane + i] > base[best * plane + i]) best = k;
            m.data[i] = best == 1;
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// Per-sample predictions for a prepared domain, each sample normalised with its own statistics
/// unless the mode uses stored running statistics.
template <typename T>
std::vector<Mask> predict(const SegNetParams<T>& params, const PreparedDomain& domain,
                          std::optional<NormMode> mode = std::nullopt) {
    GradModeGuard off(false);
    std::vector<Mask> out;
    for (const auto& img : domain.images) {
        const Tensor<T> x = stack_grids<T>(std::vector<const Image*>{&img});
        auto fwd = seg_forward(params, x, mode.value_or(params.config.norm_mode));
        out.push_back(std::move(argmax_masks(fwd.logits).front()));
    }
    return out;
}

struct SampleScore {
    double dice = 0;               // fraction in [0, 1]
    std::optional<double> asd;     // pixels; empty when undefined
    std::optional<double> ipq;     // of the prediction; empty when it has no boundary
    bool operator==(const SampleScore&) const = default;
};

struct EvalRecord {
    int held_out_domain = 0;
    std::string arm;
    std::uint64_t seed = 0;
    std::vector<int> source_domains;
    std::vector<SampleScore> samples;

    double dice_mean() const;  // percent
    double dice_std() const;   // percent
    double asd_mean() const;   // NaN when every sample is undefined
    double asd_std() const;
    std::size_t n_undefined_asd() const;
    double ipq_mean() const;  // NaN when every prediction is empty
    bool operator==(const EvalRecord&) const = default;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace detail

inline double EvalRecord::dice_mean() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(100.0 * s.dice);
    return detail::mean_std(v).first;
}
inline double EvalRecord::dice_std() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(100.0 * s.dice);
    return detail::mean_std(v).second;
}
inline double EvalRecord::asd_mean() const {
    std::vector<double> v;
    for (const auto& s : samples)
        if (s.asd) v.push_back(*s.asd);
    return detail::mean_std(v).first;
}
inline double EvalRecord::asd_std() const {
    std::vector<double> v;
    for (const auto& s : samples)
        if (s.asd) v.push_back(*s.asd);
    return detail::mean_std(v).second;
}
inline std::size_t EvalRecord::n_undefined_asd() const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return !s.asd; }));
}
inline double EvalRecord::ipq_mean() const {
    std::vector<double> v;
    for (const auto& s : samples)
        if (s.ipq) v.push_back(*s.ipq);
    return detail::mean_std(v).first;
}

inline std::vector<SampleScore> score_masks(const std::vector<Mask>& pred, const std::vector<Mask>& gt) {
    if (pred.size() != gt.size()) throw ShapeError("score_masks: prediction and ground-truth counts differ");
    std::vector<SampleScore> out;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        SampleScore s;
        s.dice = dice_score(pred[i], gt[i]);
        s.asd = asd(pred[i], gt[i]);
        const std::size_t n = count(pred[i]);
        if (n > 0 && n < pred[i].size()) s.ipq = ipq_measure(pred[i]);
        out.push_back(s);
    }
    return out;
}

template <typename T>
EvalRecord evaluate(const SegNetParams<T>& params, const PreparedDomain& domain,
                    std::optional<NormMode> mode = std::nullopt) {
    EvalRecord r;
    r.held_out_domain = domain.id;
    r.samples = score_masks(predict(params, domain, mode), domain.masks);
    return r;
}

}  // namespace saml
