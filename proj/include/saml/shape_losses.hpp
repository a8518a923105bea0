// Segmentation and shape-prior losses: soft Dice, iso-perimetric compactness,
// contour/background embedding extraction and the contrastive smoothness loss.
#pragma once

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "saml/image.hpp"
#include "saml/models.hpp"
#include "saml/morphology.hpp"
#include "saml/ops.hpp"

namespace saml {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kCompactEps = 1e-6;
inline constexpr double kDefaultMargin = 10.0;

namespace detail {

template <typename T>
void require_probabilities(const Tensor<T>& p, const char* what) {
    for (T v : p.values())
        if (!(v >= T(0) && v <= T(1))) throw Error(std::string(what) + ": probabilities must lie in [0, 1]");
}

// Views [H, W], [N, H, W] or [N, 1, H, W] as [N, H, W].
template <typename T>
Tensor<T> as_maps(const Tensor<T>& p) {
    switch (p.dim()) {
        case 2: return reshape(p, Shape{1, p.size(0), p.size(1)});
        case 3: return p;
        case 4:
            if (p.size(1) != 1) break;
            return reshape(p, Shape{p.size(0), p.size(2), p.size(3)});
        default: break;
    }
    throw ShapeError("expected a probability map [H, W], [N, H, W] or [N, 1, H, W], got " + to_string(p.shape()));
}

}  // namespace detail

/// Soft Dice loss 1 - (2 sum(p y) + e) / (sum(p) + sum(y) + e), averaged over the batch axis.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& y) {
    if (p.shape() != y.shape()) throw ShapeError("dice_loss: " + to_string(p.shape()) + " vs " + to_string(y.shape()));
    if (p.dim() < 2) throw ShapeError("dice_loss expects a leading batch axis");
    const T e = static_cast<T>(kDiceSmooth);
    Tensor<T> inter = sum_per_sample(mul(p, y));
    Tensor<T> total = add(sum_per_sample(p), sum_per_sample(y));
    Tensor<T> dice = div(shift(scale(inter, T(2)), e), shift(total, e));
    return mean(shift(neg(dice), T(1)));
}

/**
 * Reciprocal iso-perimetric quotient P^2 / (4 pi A) of a probability map.
 *
 * P sums sqrt(du^2 + dv^2 + eps) over all pixels, with forward differences
 * that are zero in the last column / row; A = sum |p| + eps. A batch is
 * reduced by the mean. Note every pixel adds at least sqrt(eps) to P.
 */
template <typename T>
Tensor<T> compactness_loss(const Tensor<T>& p, double epsilon = kCompactEps) {
    detail::require_probabilities(p, "compactness_loss");
    const Tensor<T> maps = detail::as_maps(p);
    const std::size_t h = maps.size(1), w = maps.size(2);
    if (h < 2 || w < 2) throw ShapeError("compactness_loss needs at least a 2x2 map");
    Tensor<T> du = pad_axis(sub(narrow(maps, 2, 1, w - 1), narrow(maps, 2, 0, w - 1)), 2, 0, w);
    Tensor<T> dv = pad_axis(sub(narrow(maps, 1, 1, h - 1), narrow(maps, 1, 0, h - 1)), 1, 0, h);
    const T eps = static_cast<T>(epsilon);
    Tensor<T> perimeter = sum_per_sample(saml::sqrt(shift(add(square(du), square(dv)), eps)));
    Tensor<T> area = shift(sum_per_sample(saml::abs(maps)), eps);
    const T four_pi = static_cast<T>(4.0 * std::numbers::pi);
    return mean(div(square(perimeter), scale(area, four_pi)));
}

struct MorphologyConfig {
    std::size_t contour_width = 2;
    std::size_t background_width = 4;

    void validate() const {
        if (contour_width < 1) throw ConfigError("contour width must be at least 1");
        if (background_width < contour_width) throw ConfigError("background width must be at least the contour width");
    }
};

struct BoundaryMasks {
    Mask contour;     // inner ring of the label
    Mask background;  // outer band around the label
};

/// Contour ring y AND NOT erode(y, w_c) and background band dilate(y, w_b) AND NOT y.
inline BoundaryMasks make_masks(const Mask& y, const MorphologyConfig& cfg = {}) {
    cfg.validate();
    if (count(y) == 0) throw Error("make_masks: empty label has no contour");
    BoundaryMasks m{subtract(y, erode(y, cfg.contour_width)), subtract(dilate(y, cfg.background_width), y)};
    if (count(m.contour) == 0) throw Error("make_masks: contour mask is empty");
    if (count(m.background) == 0) throw Error("make_masks: background mask is empty");
    return m;
}

enum EmbeddingClass : int { kBackground = 0, kContour = 1 };

template <typename T>
struct EmbeddingSample {
    Tensor<T> vector;  // [C]
    int tag = kContour;
    int domain = -1;
};

/**
 * Full-resolution feature map used for embeddings: the last two decoder
 * activations, bilinearly resized to the input size and concatenated along
 * channels (coarser stage first).
 */
template <typename T>
Tensor<T> embedding_map(const std::vector<Tensor<T>>& decoder_acts, std::size_t height, std::size_t width) {
    if (decoder_acts.size() < 2) throw ShapeError("embedding extraction needs two decoder stages");
    const Tensor<T>& coarse = decoder_acts[decoder_acts.size() - 2];
    const Tensor<T>& fine = decoder_acts.back();
    return concat<T>({resize_bilinear(coarse, height, width), resize_bilinear(fine, height, width)}, 1);
}

/// Weighted averages of an [N, C, H, W] map over one binary mask per sample, giving [N, C].
template <typename T>
Tensor<T> masked_average(const Tensor<T>& features, const std::vector<const Mask*>& masks) {
    const std::size_t n = features.size(0), c = features.size(1), h = features.size(2), w = features.size(3);
    if (masks.size() != n) throw ShapeError("masked_average: one mask per sample required");
    std::vector<T> inv_count(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (masks[i]->height != h || masks[i]->width != w) throw ShapeError("masked_average: mask size mismatch");
        const std::size_t k = count(*masks[i]);
        if (k == 0) throw Error("masked_average: empty mask");
        inv_count[i] = T(1) / static_cast<T>(k);
    }
    Tensor<T> weights = broadcast_to(stack_grids<T>(masks), Shape{n, c, h, w});
    Tensor<T> sums = sum_axis(reshape(mul(features, weights), Shape{n, c, h * w}), 2, false);
    return mul(sums, Tensor<T>({n, 1}, std::move(inv_count)));
}

/// Contour and background embeddings of sample `index` of a forward pass.
template <typename T>
std::pair<EmbeddingSample<T>, EmbeddingSample<T>> extract_embeddings(const std::vector<Tensor<T>>& decoder_acts,
                                                                     std::size_t index, const Mask& y,
                                                                     const MorphologyConfig& cfg = {},
                                                                     int domain = -1) {
    const BoundaryMasks masks = make_masks(y, cfg);
    std::vector<Tensor<T>> acts;
    for (std::size_t i = decoder_acts.size() - 2; i < decoder_acts.size(); ++i)
        acts.push_back(narrow(decoder_acts[i], 0, index, 1));
    Tensor<T> features = embedding_map(acts, y.height, y.width);
    Tensor<T> both = masked_average(concat<T>({features, features}, 0), {&masks.contour, &masks.background});
    const std::size_t c = features.size(1);
    return {EmbeddingSample<T>{reshape(narrow(both, 0, 0, 1), Shape{c}), kContour, domain},
            EmbeddingSample<T>{reshape(narrow(both, 0, 1, 1), Shape{c}), kBackground, domain}};
}

/// d_phi(E_m, E_n) = || H_phi(E_m) - H_phi(E_n) ||_2.
template <typename T>
Tensor<T> pair_distance(const ParamSet<T>& phi, const Tensor<T>& em, const Tensor<T>& en) {
    if (em.shape() != en.shape()) throw ShapeError("pair_distance: embedding widths differ");
    return saml::sqrt(sum(square(sub(embed_forward(phi, em), embed_forward(phi, en)))));
}

namespace detail {

// Per-pair contrastive terms from distances and same-class indicators.
template <typename T>
Tensor<T> contrastive_terms(const Tensor<T>& d, const Tensor<T>& same, T zeta) {
    Tensor<T> different = shift(neg(same), T(1));
    Tensor<T> hinge = square(relu(shift(neg(d), zeta)));
    return add(mul(same, d), mul(different, hinge));
}

}  // namespace detail

/// d_phi for same-class pairs, (max(0, zeta - d_phi))^2 otherwise.
template <typename T>
Tensor<T> contrastive_pair_loss(const ParamSet<T>& phi, const EmbeddingSample<T>& m, const EmbeddingSample<T>& n,
                                T zeta = static_cast<T>(kDefaultMargin)) {
    Tensor<T> d = reshape(pair_distance(phi, m.vector, n.vector), Shape{1});
    Tensor<T> same = Tensor<T>({1}, {m.tag == n.tag ? T(1) : T(0)});
    return sum(detail::contrastive_terms(d, same, zeta));
}

/**
 * Mean contrastive loss over all C(q, 2) unordered pairs of the rows of
 * `rows` [q, C], whose classes are given by `tags`.
 */
template <typename T>
Tensor<T> smoothness_loss_rows(const ParamSet<T>& phi, const Tensor<T>& rows, const std::vector<int>& tags,
                               T zeta = static_cast<T>(kDefaultMargin)) {
    if (rows.dim() != 2 || rows.size(0) != tags.size()) throw ShapeError("smoothness_loss: one tag per row required");
    const std::size_t q = tags.size();
    if (q < 2) throw Error("smoothness_loss needs at least two samples");
    std::vector<std::size_t> first, second;
    std::vector<T> same;
    for (std::size_t m = 0; m < q; ++m)
        for (std::size_t n = m + 1; n < q; ++n) {
            first.push_back(m);
            second.push_back(n);
            same.push_back(tags[m] == tags[n] ? T(1) : T(0));
        }
    const std::size_t pairs = first.size();
    Tensor<T> h = embed_forward(phi, rows);
    Tensor<T> diff = sub(index_rows(h, first), index_rows(h, second));
    Tensor<T> d = saml::sqrt(sum_axis(square(diff), 1, false));
    Tensor<T> terms = detail::contrastive_terms(d, Tensor<T>({pairs}, std::move(same)), zeta);
    return scale(sum(terms), T(1) / static_cast<T>(pairs));
}

template <typename T>
Tensor<T> smoothness_loss(const ParamSet<T>& phi, const std::vector<EmbeddingSample<T>>& samples,
                          T zeta = static_cast<T>(kDefaultMargin)) {
    if (samples.size() < 2) throw Error("smoothness_loss needs at least two samples");
    std::vector<Tensor<T>> rows;
    std::vector<int> tags;
    for (const auto& s : samples) {
        rows.push_back(reshape(s.vector, Shape{1, s.vector.numel()}));
        tags.push_back(s.tag);
    }
    return smoothness_loss_rows(phi, concat(rows, 0), tags, zeta);
}

}  // namespace saml
