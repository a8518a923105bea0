// Differentiable primitives.
//
// Every backward rule is written in terms of other primitives, so the same
// rules serve first-order passes (recording disabled) and create_graph passes
// (recording enabled), which yields second-order derivatives.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cassert>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "saml/tensor.hpp"

namespace saml {

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    // Exponent-all-ones test on the raw bits; branch free so it vectorises.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    Bits bad = 0;
    for (T v : t.values()) bad |= (std::bit_cast<Bits>(v) & exponent) == exponent;
    if (bad) throw NumericError(std::string(op) + ": non-finite value produced");
}

template <typename T>
Tensor<T> finish(Tensor<T> out, const char* op, const std::vector<const Tensor<T>*>& inputs,
                 typename Tape<T>::BackwardFn fn) {
    check_finite(out, op);
    if (!grad_enabled()) return out;
    Tape<T>* tape = nullptr;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) {
        if (in->tracked()) {
            if (tape && tape != in->tape()) throw Error(std::string(op) + ": inputs live on different tapes");
            tape = in->tape();
            ids.push_back(in->node());
        } else {
            ids.push_back(-1);
        }
    }
    if (!tape) return out;
    return tape->record(std::move(out), std::move(ids), op, std::move(fn));
}

template <typename T, typename F>
Tensor<T> map_values(const Tensor<T>& x, F f) {
    std::vector<T> out(x.numel());
    const T* in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor<T>(x.shape(), std::move(out));
}

template <typename T, typename F>
Tensor<T> zip_values(const Tensor<T>& a, const Tensor<T>& b, F f) {
    std::vector<T> out(a.numel());
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
    return Tensor<T>(a.shape(), std::move(out));
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Split of a shape around `axis`: outer * extent * inner == numel.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

inline std::ptrdiff_t floor_div(std::ptrdiff_t a, std::ptrdiff_t b) {
    std::ptrdiff_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

inline std::ptrdiff_t ceil_div(std::ptrdiff_t a, std::ptrdiff_t b) { return -floor_div(-a, b); }

}  // namespace detail

// Forward declarations; the backward rules reference each other.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div_safe(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T> Tensor<T> shift(const Tensor<T>& x, T s);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> expand_scalar(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = true);
template <typename T> Tensor<T> expand_axis(const Tensor<T>& x, std::size_t axis, std::size_t n);
template <typename T> Tensor<T> channel_sum(const Tensor<T>& x);
template <typename T> Tensor<T> channel_broadcast(const Tensor<T>& v, const Shape& shape);
template <typename T> Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> pad_axis(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t total);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Gathers `x.values()[index[j]]` into a tensor of `shape`.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);
/// Adjoint of gather: accumulates `g` into a zero tensor of `shape` at `index`.
template <typename T>
Tensor<T> scatter_add(const Tensor<T>& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dOptions opt = {});
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, Conv2dOptions opt, std::size_t height,
                            std::size_t width);
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& g, Conv2dOptions opt, std::size_t kh,
                             std::size_t kw);
template <typename T> Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
template <typename T> Tensor<T> avg_pool2d_adjoint(const Tensor<T>& g, std::size_t k);
template <typename T> Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width);
template <typename T>
Tensor<T> resize_bilinear_adjoint(const Tensor<T>& g, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Broadcasting helpers

/// Expands size-1 axes (or a single-element tensor) to `shape`.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
    if (x.shape() == shape) return x;
    if (x.numel() == 1) return expand_scalar(x, shape);
    detail::require(x.dim() == shape.size(),
                    "cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
    Tensor<T> out = x;
    for (std::size_t axis = 0; axis < shape.size(); ++axis) {
        if (out.size(axis) == shape[axis]) continue;
        detail::require(out.size(axis) == 1,
                        "cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
        out = expand_axis(out, axis, shape[axis]);
    }
    return out;
}

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (numel(b) == 1 && b.size() <= a.size()) return a;
    if (numel(a) == 1 && a.size() <= b.size()) return b;
    require(a.size() == b.size(), "shape mismatch: " + to_string(a) + " vs " + to_string(b));
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i] == b[i] || a[i] == 1 || b[i] == 1,
                "shape mismatch: " + to_string(a) + " vs " + to_string(b));
        out[i] = std::max(a[i], b[i]);
    }
    return out;
}

template <typename T, typename Prim>
Tensor<T> broadcasting(const Tensor<T>& a, const Tensor<T>& b, Prim prim) {
    if (a.shape() == b.shape()) return prim(a, b);
    const Shape s = broadcast_shape(a.shape(), b.shape());
    return prim(broadcast_to(a, s), broadcast_to(b, s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace prim {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto out = detail::zip_values(a, b, [](T x, T y) { return x + y; });
    return detail::finish<T>(std::move(out), "add", {&a, &b},
                             [](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{g, g};
                             });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto out = detail::zip_values(a, b, [](T x, T y) { return x - y; });
    return detail::finish<T>(std::move(out), "sub", {&a, &b},
                             [](const Tensor<T>& g, const std::vector<bool>& needs) {
                                 return std::vector<Tensor<T>>{g, needs[1] ? saml::neg(g) : Tensor<T>()};
                             });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto out = detail::zip_values(a, b, [](T x, T y) { return x * y; });
    return detail::finish<T>(std::move(out), "mul", {&a, &b},
                             [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
                                 return std::vector<Tensor<T>>{needs[0] ? saml::mul(g, b) : Tensor<T>(),
                                                               needs[1] ? saml::mul(g, a) : Tensor<T>()};
                             });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    auto out = detail::zip_values(a, b, [](T x, T y) { return x / y; });
    return detail::finish<T>(
        std::move(out), "div", {&a, &b}, [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
            Tensor<T> ga, gb;
            if (needs[0]) ga = saml::div(g, b);
            if (needs[1]) gb = saml::neg(saml::div(saml::mul(g, a), saml::square(b)));
            return std::vector<Tensor<T>>{ga, gb};
        });
}

template <typename T>
Tensor<T> div_safe(const Tensor<T>& a, const Tensor<T>& b) {
    auto out = detail::zip_values(a, b, [](T x, T y) { return y == T(0) ? T(0) : x / y; });
    return detail::finish<T>(
        std::move(out), "div_safe", {&a, &b}, [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
            Tensor<T> ga, gb;
            if (needs[0]) ga = saml::div_safe(g, b);
            if (needs[1]) gb = saml::neg(saml::div_safe(saml::mul(g, a), saml::square(b)));
            return std::vector<Tensor<T>>{ga, gb};
        });
}

}  // namespace prim

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcasting(a, b, [](const Tensor<T>& x, const Tensor<T>& y) { return prim::add(x, y); });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcasting(a, b, [](const Tensor<T>& x, const Tensor<T>& y) { return prim::sub(x, y); });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcasting(a, b, [](const Tensor<T>& x, const Tensor<T>& y) { return prim::mul(x, y); });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcasting(a, b, [](const Tensor<T>& x, const Tensor<T>& y) { return prim::div(x, y); });
}
/// Division that yields 0 (and zero gradients) where the denominator is exactly 0.
template <typename T>
Tensor<T> div_safe(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcasting(a, b,
                                [](const Tensor<T>& x, const Tensor<T>& y) { return prim::div_safe(x, y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return -v; });
    return detail::finish<T>(std::move(out), "neg", {&x}, [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::neg(g)};
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    auto out = detail::map_values(x, [s](T v) { return v * s; });
    return detail::finish<T>(std::move(out), "scale", {&x}, [s](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::scale(g, s)};
    });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& x, T s) {
    auto out = detail::map_values(x, [s](T v) { return v + s; });
    return detail::finish<T>(std::move(out), "shift", {&x}, [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{g};
    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return v * v; });
    return detail::finish<T>(std::move(out), "square", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::mul(g, saml::scale(x, T(2)))};
    });
}

/// Square root. The derivative at exactly 0 is taken as 0.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) {
        if (v < T(0)) throw NumericError("sqrt: negative input");
        return std::sqrt(v);
    });
    return detail::finish<T>(std::move(out), "sqrt", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::div_safe(g, saml::scale(saml::sqrt(x), T(2)))};
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return std::exp(v); });
    return detail::finish<T>(std::move(out), "exp", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::mul(g, saml::exp(x))};
    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return std::log(v); });
    return detail::finish<T>(std::move(out), "log", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::div(g, x)};
    });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T p) {
    auto out = detail::map_values(x, [p](T v) { return std::pow(v, p); });
    return detail::finish<T>(std::move(out), "pow", {&x}, [x, p](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{saml::mul(g, saml::scale(saml::pow(x, p - T(1)), p))};
    });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return std::abs(v); });
    return detail::finish<T>(std::move(out), "abs", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        auto sign = detail::map_values(x.detach(), [](T v) { return T((v > T(0)) - (v < T(0))); });
        return std::vector<Tensor<T>>{saml::mul(g, sign)};
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto out = detail::map_values(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
    return detail::finish<T>(std::move(out), "sigmoid", {&x}, [x](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> s = saml::sigmoid(x);
        return std::vector<Tensor<T>>{saml::mul(g, saml::sub(s, saml::square(s)))};
    });
}

/// Elementwise max(x, floor); the derivative is 1 strictly above `floor`, else 0.
template <typename T>
Tensor<T> max_scalar(const Tensor<T>& x, T floor) {
    auto out = detail::map_values(x, [floor](T v) { return std::max(v, floor); });
    return detail::finish<T>(std::move(out), "max_scalar", {&x},
                             [x, floor](const Tensor<T>& g, const std::vector<bool>&) {
                                 auto mask = detail::map_values(x.detach(), [floor](T v) { return T(v > floor); });
                                 return std::vector<Tensor<T>>{saml::mul(g, mask)};
                             });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return max_scalar(x, T(0));
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require(numel(shape) == x.numel(),
                    "reshape " + to_string(x.shape()) + " to " + to_string(shape));
    if (shape == x.shape()) return x;
    Tensor<T> out(shape, std::vector<T>(x.values().begin(), x.values().end()));
    const Shape in_shape = x.shape();
    return detail::finish<T>(std::move(out), "reshape", {&x},
                             [in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::reshape(g, in_shape)};
                             });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    const Shape in_shape = x.shape();
    return detail::finish<T>(Tensor<T>::scalar(acc), "sum", {&x},
                             [in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::expand_scalar(g, in_shape)};
                             });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> expand_scalar(const Tensor<T>& x, const Shape& shape) {
    detail::require(x.numel() == 1, "expand_scalar needs a single element, got " + to_string(x.shape()));
    Tensor<T> out = Tensor<T>::full(shape, x.values()[0]);
    const Shape in_shape = x.shape();
    return detail::finish<T>(std::move(out), "expand_scalar", {&x},
                             [in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::reshape(saml::sum(g), in_shape)};
                             });
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis, bool keepdim) {
    detail::require(axis < x.dim(), "sum_axis: axis out of range");
    const auto s = detail::split_at(x.shape(), axis);
    std::vector<T> out(s.outer * s.inner, T(0));
    const T* in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e) {
            const T* row = in + (o * s.extent + e) * s.inner;
            T* dst = out.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
        }
    Shape kept = x.shape();
    kept[axis] = 1;
    const std::size_t extent = s.extent;
    Tensor<T> result = detail::finish<T>(Tensor<T>(kept, std::move(out)), "sum_axis", {&x},
                                         [axis, extent, kept](const Tensor<T>& g, const std::vector<bool>&) {
                                             return std::vector<Tensor<T>>{
                                                 saml::expand_axis(saml::reshape(g, kept), axis, extent)};
                                         });
    if (keepdim) return result;
    Shape dropped = x.shape();
    dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(axis));
    return reshape(result, dropped);
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis, bool keepdim = true) {
    return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(x.size(axis)));
}

template <typename T>
Tensor<T> expand_axis(const Tensor<T>& x, std::size_t axis, std::size_t n) {
    detail::require(axis < x.dim() && x.size(axis) == 1, "expand_axis needs a size-1 axis");
    const auto s = detail::split_at(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = n;
    std::vector<T> out(s.outer * n * s.inner);
    const T* in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < n; ++e)
            std::copy(in + o * s.inner, in + (o + 1) * s.inner, out.data() + (o * n + e) * s.inner);
    return detail::finish<T>(Tensor<T>(shape, std::move(out)), "expand_axis", {&x},
                             [axis](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::sum_axis(g, axis, true)};
                             });
}

/// Per-channel sum of an [N, C, ...] tensor, giving [C].
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& x) {
    detail::require(x.dim() >= 2, "channel_sum needs [N, C, ...]");
    const std::size_t n = x.size(0), c = x.size(1), inner = x.numel() / (n * c);
    std::vector<T> out(c, T(0));
    const T* in = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* p = in + (b * c + ch) * inner;
            T acc = T(0);
            for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            out[ch] += acc;
        }
    const Shape in_shape = x.shape();
    return detail::finish<T>(Tensor<T>({c}, std::move(out)), "channel_sum", {&x},
                             [in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::channel_broadcast(g, in_shape)};
                             });
}

/// Broadcasts a [C] vector over an [N, C, ...] shape.
template <typename T>
Tensor<T> channel_broadcast(const Tensor<T>& v, const Shape& shape) {
    detail::require(shape.size() >= 2 && v.dim() == 1 && v.size(0) == shape[1],
                    "channel_broadcast " + to_string(v.shape()) + " to " + to_string(shape));
    const std::size_t n = shape[0], c = shape[1], inner = numel(shape) / (n * c);
    std::vector<T> out(numel(shape));
    const T* in = v.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            std::fill_n(out.data() + (b * c + ch) * inner, inner, in[ch]);
    return detail::finish<T>(Tensor<T>(shape, std::move(out)), "channel_broadcast", {&v},
                             [](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::channel_sum(g)};
                             });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    detail::require(axis < x.dim() && start + length <= x.size(axis), "narrow out of range");
    if (start == 0 && length == x.size(axis)) return x;
    const auto s = detail::split_at(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = length;
    std::vector<T> out(s.outer * length * s.inner);
    const T* in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(in + (o * s.extent + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
    const std::size_t total = s.extent;
    return detail::finish<T>(Tensor<T>(shape, std::move(out)), "narrow", {&x},
                             [axis, start, total](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::pad_axis(g, axis, start, total)};
                             });
}

/// Places `x` at offset `start` of a zero tensor whose `axis` has extent `total`.
template <typename T>
Tensor<T> pad_axis(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t total) {
    detail::require(axis < x.dim() && start + x.size(axis) <= total, "pad_axis out of range");
    const auto s = detail::split_at(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = total;
    std::vector<T> out(s.outer * total * s.inner, T(0));
    const T* in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(in + o * s.extent * s.inner, s.extent * s.inner, out.data() + (o * total + start) * s.inner);
    const std::size_t length = s.extent;
    return detail::finish<T>(Tensor<T>(shape, std::move(out)), "pad_axis", {&x},
                             [axis, start, length](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::narrow(g, axis, start, length)};
                             });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat of nothing");
    if (parts.size() == 1) return parts.front();
    Shape shape = parts.front().shape();
    detail::require(axis < shape.size(), "concat axis out of range");
    std::size_t total = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        detail::require(p.dim() == shape.size(), "concat rank mismatch");
        for (std::size_t i = 0; i < shape.size(); ++i)
            detail::require(i == axis || p.size(i) == shape[i],
                            "concat shape mismatch " + to_string(p.shape()) + " vs " + to_string(shape));
        extents.push_back(p.size(axis));
        total += p.size(axis);
    }
    shape[axis] = total;
    const auto s = detail::split_at(shape, axis);
    std::vector<T> out(numel(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t e = p.size(axis);
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(p.data() + o * e * s.inner, e * s.inner, out.data() + (o * total + offset) * s.inner);
        offset += e;
    }
    std::vector<const Tensor<T>*> inputs;
    for (const auto& p : parts) inputs.push_back(&p);
    return detail::finish<T>(Tensor<T>(shape, std::move(out)), "concat", inputs,
                             [axis, extents](const Tensor<T>& g, const std::vector<bool>& needs) {
                                 std::vector<Tensor<T>> grads(extents.size());
                                 std::size_t start = 0;
                                 for (std::size_t i = 0; i < extents.size(); ++i) {
                                     if (needs[i]) grads[i] = saml::narrow(g, axis, start, extents[i]);
                                     start += extents[i];
                                 }
                                 return grads;
                             });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
    detail::require(index->size() == numel(shape), "gather: index count does not match output shape");
    std::vector<T> out(index->size());
    const T* in = x.data();
    for (std::size_t j = 0; j < out.size(); ++j) {
        detail::require((*index)[j] < x.numel(), "gather: index out of range");
        out[j] = in[(*index)[j]];
    }
    const Shape in_shape = x.shape();
    return detail::finish<T>(Tensor<T>(std::move(shape), std::move(out)), "gather", {&x},
                             [index, in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::scatter_add(g, index, in_shape)};
                             });
}

template <typename T>
Tensor<T> scatter_add(const Tensor<T>& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
    detail::require(index->size() == g.numel(), "scatter_add: index count does not match input");
    std::vector<T> out(numel(shape), T(0));
    const T* in = g.data();
    for (std::size_t j = 0; j < index->size(); ++j) out.at((*index)[j]) += in[j];
    const Shape g_shape = g.shape();
    return detail::finish<T>(Tensor<T>(std::move(shape), std::move(out)), "scatter_add", {&g},
                             [index, g_shape](const Tensor<T>& gg, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::gather(gg, index, g_shape)};
                             });
}

/// Selects rows of a [B, D] tensor.
template <typename T>
Tensor<T> index_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
    detail::require(x.dim() == 2, "index_rows needs a matrix");
    const std::size_t d = x.size(1);
    auto index = std::make_shared<std::vector<std::size_t>>();
    index->reserve(rows.size() * d);
    for (std::size_t r : rows)
        for (std::size_t j = 0; j < d; ++j) index->push_back(r * d + j);
    return gather(x, std::shared_ptr<const std::vector<std::size_t>>(std::move(index)), Shape{rows.size(), d});
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require(x.dim() == 2, "transpose needs a matrix");
    const std::size_t m = x.size(0), n = x.size(1);
    std::vector<T> out(m * n);
    const T* in = x.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    return detail::finish<T>(Tensor<T>({n, m}, std::move(out)), "transpose", {&x},
                             [](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::transpose(g)};
                             });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.dim() == 2 && b.dim() == 2 && a.size(1) == b.size(0),
                    "matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    std::vector<T> out(m * n, T(0));
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            T* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return detail::finish<T>(Tensor<T>({m, n}, std::move(out)), "matmul", {&a, &b},
                             [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
                                 Tensor<T> ga, gb;
                                 if (needs[0]) ga = saml::matmul(g, saml::transpose(b));
                                 if (needs[1]) gb = saml::matmul(saml::transpose(a), g);
                                 return std::vector<Tensor<T>>{ga, gb};
                             });
}

// ---------------------------------------------------------------------------
// Convolution family. conv2d, its input gradient (the transposed convolution)
// and its weight gradient are the three partial derivatives of one trilinear
// form, so each one's backward is expressed with the other two.

namespace detail {

struct ConvDims {
    std::size_t n, ci, h, w, co, kh, kw, ho, wo, stride, pad;

    // Output columns whose input column ox*stride - pad + kx lies in [0, w).
    std::pair<std::size_t, std::size_t> col_range(std::size_t kx) const {
        const auto s = static_cast<std::ptrdiff_t>(stride);
        const auto p = static_cast<std::ptrdiff_t>(pad);
        const auto k = static_cast<std::ptrdiff_t>(kx);
        std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, ceil_div(p - k, s));
        std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(wo) - 1,
                                                     floor_div(static_cast<std::ptrdiff_t>(w) - 1 + p - k, s));
        if (hi < lo) return {0, 0};
        return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
    }

    bool row_valid(std::size_t oy, std::size_t ky, std::size_t& iy) const {
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) return false;
        iy = static_cast<std::size_t>(r);
        return true;
    }
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    require(in + 2 * pad >= k, "convolution kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

// Unfolds one image [ci, h, w] into columns [ci * kh * kw, ho * wo].
template <typename T>
void im2col(const T* in, const ConvDims& d, T* cols) {
    for (std::size_t ci = 0; ci < d.ci; ++ci)
        for (std::size_t ky = 0; ky < d.kh; ++ky)
            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                T* row = cols + ((ci * d.kh + ky) * d.kw + kx) * d.ho * d.wo;
                const auto [lo, hi] = d.col_range(kx);
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(d.pad);
                for (std::size_t oy = 0; oy < d.ho; ++oy) {
                    T* dst = row + oy * d.wo;
                    std::size_t iy;
                    if (!d.row_valid(oy, ky, iy)) {
                        std::fill(dst, dst + d.wo, T(0));
                        continue;
                    }
                    const T* src = in + (ci * d.h + iy) * d.w;
                    std::fill(dst, dst + lo, T(0));
                    if (d.stride == 1) {
                        if (hi > lo) std::copy(src + (static_cast<std::ptrdiff_t>(lo) + off),
                                               src + (static_cast<std::ptrdiff_t>(hi) + off), dst + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[ox] = src[static_cast<std::ptrdiff_t>(ox * d.stride) + off];
                    }
                    std::fill(dst + std::max(lo, hi), dst + d.wo, T(0));
                }
            }
}

// Adjoint of im2col: accumulates columns back into an image [ci, h, w].
template <typename T>
void col2im(const T* cols, const ConvDims& d, T* out) {
    for (std::size_t ci = 0; ci < d.ci; ++ci)
        for (std::size_t ky = 0; ky < d.kh; ++ky)
            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                const T* row = cols + ((ci * d.kh + ky) * d.kw + kx) * d.ho * d.wo;
                const auto [lo, hi] = d.col_range(kx);
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(d.pad);
                for (std::size_t oy = 0; oy < d.ho; ++oy) {
                    std::size_t iy;
                    if (!d.row_valid(oy, ky, iy)) continue;
                    T* dst = out + (ci * d.h + iy) * d.w;
                    const T* src = row + oy * d.wo;
                    if (d.stride == 1) {
                        T* first = dst + (static_cast<std::ptrdiff_t>(lo) + off);
                        for (std::size_t ox = lo; ox < hi; ++ox) first[ox - lo] += src[ox];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            dst[static_cast<std::ptrdiff_t>(ox * d.stride) + off] += src[ox];
                    }
                }
            }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dOptions opt) {
    detail::require(x.dim() == 4 && w.dim() == 4 && x.size(1) == w.size(1),
                    "conv2d input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
    detail::require(opt.stride >= 1, "conv2d stride must be positive");
    detail::ConvDims d{x.size(0), x.size(1), x.size(2), x.size(3), w.size(0), w.size(2), w.size(3), 0, 0,
                       opt.stride, opt.padding};
    d.ho = detail::conv_out(d.h, d.kh, d.stride, d.pad);
    d.wo = detail::conv_out(d.w, d.kw, d.stride, d.pad);
    const std::size_t k = d.ci * d.kh * d.kw, plane = d.ho * d.wo;
    std::vector<T> out(d.n * d.co * plane);
    std::vector<T> cols(k * plane);
    const detail::ConstMatrixView<T> kernel(w.data(), d.co, k);
    for (std::size_t b = 0; b < d.n; ++b) {
        detail::im2col(x.data() + b * d.ci * d.h * d.w, d, cols.data());
        detail::MatrixView<T>(out.data() + b * d.co * plane, d.co, plane).noalias() =
            kernel * detail::ConstMatrixView<T>(cols.data(), k, plane);
    }
    const std::size_t h = d.h, wd = d.w;
    return detail::finish<T>(Tensor<T>({d.n, d.co, d.ho, d.wo}, std::move(out)), "conv2d", {&x, &w},
                             [x, w, opt, h, wd](const Tensor<T>& g, const std::vector<bool>& needs) {
                                 Tensor<T> gx, gw;
                                 if (needs[0]) gx = saml::conv2d_input_grad(g, w, opt, h, wd);
                                 if (needs[1]) gw = saml::conv2d_weight_grad(x, g, opt, w.size(2), w.size(3));
                                 return std::vector<Tensor<T>>{gx, gw};
                             });
}

/// Gradient of conv2d with respect to its input; equivalently a transposed convolution.
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, Conv2dOptions opt, std::size_t height,
                            std::size_t width) {
    detail::require(g.dim() == 4 && w.dim() == 4 && g.size(1) == w.size(0),
                    "conv2d_input_grad grad " + to_string(g.shape()) + " weight " + to_string(w.shape()));
    detail::ConvDims d{g.size(0), w.size(1), height, width, w.size(0), w.size(2), w.size(3), g.size(2), g.size(3),
                       opt.stride, opt.padding};
    detail::require(detail::conv_out(height, d.kh, d.stride, d.pad) == d.ho &&
                        detail::conv_out(width, d.kw, d.stride, d.pad) == d.wo,
                    "conv2d_input_grad: inconsistent spatial sizes");
    const std::size_t k = d.ci * d.kh * d.kw, plane = d.ho * d.wo;
    std::vector<T> out(d.n * d.ci * d.h * d.w, T(0));
    std::vector<T> cols(k * plane);
    const detail::ConstMatrixView<T> kernel(w.data(), d.co, k);
    for (std::size_t b = 0; b < d.n; ++b) {
        detail::MatrixView<T>(cols.data(), k, plane).noalias() =
            kernel.transpose() * detail::ConstMatrixView<T>(g.data() + b * d.co * plane, d.co, plane);
        detail::col2im(cols.data(), d, out.data() + b * d.ci * d.h * d.w);
    }
    return detail::finish<T>(Tensor<T>({d.n, d.ci, d.h, d.w}, std::move(out)), "conv2d_input_grad", {&g, &w},
                             [g, w, opt](const Tensor<T>& gg, const std::vector<bool>& needs) {
                                 Tensor<T> d_g, d_w;
                                 if (needs[0]) d_g = saml::conv2d(gg, w, opt);
                                 if (needs[1]) d_w = saml::conv2d_weight_grad(gg, g, opt, w.size(2), w.size(3));
                                 return std::vector<Tensor<T>>{d_g, d_w};
                             });
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& g, Conv2dOptions opt, std::size_t kh,
                             std::size_t kw) {
    detail::require(x.dim() == 4 && g.dim() == 4 && x.size(0) == g.size(0),
                    "conv2d_weight_grad input " + to_string(x.shape()) + " grad " + to_string(g.shape()));
    detail::ConvDims d{x.size(0), x.size(1), x.size(2), x.size(3), g.size(1), kh, kw, g.size(2), g.size(3),
                       opt.stride, opt.padding};
    detail::require(detail::conv_out(d.h, kh, d.stride, d.pad) == d.ho &&
                        detail::conv_out(d.w, kw, d.stride, d.pad) == d.wo,
                    "conv2d_weight_grad: inconsistent spatial sizes");
    const std::size_t k = d.ci * kh * kw, plane = d.ho * d.wo;
    std::vector<T> out(d.co * k, T(0));
    std::vector<T> cols(k * plane);
    detail::MatrixView<T> acc(out.data(), d.co, k);
    for (std::size_t b = 0; b < d.n; ++b) {
        detail::im2col(x.data() + b * d.ci * d.h * d.w, d, cols.data());
        acc.noalias() += detail::ConstMatrixView<T>(g.data() + b * d.co * plane, d.co, plane) *
                         detail::ConstMatrixView<T>(cols.data(), k, plane).transpose();
    }
    return detail::finish<T>(Tensor<T>({d.co, d.ci, kh, kw}, std::move(out)), "conv2d_weight_grad", {&x, &g},
                             [x, g, opt](const Tensor<T>& gw, const std::vector<bool>& needs) {
                                 Tensor<T> d_x, d_g;
                                 if (needs[0]) d_x = saml::conv2d_input_grad(g, gw, opt, x.size(2), x.size(3));
                                 if (needs[1]) d_g = saml::conv2d(x, gw, opt);
                                 return std::vector<Tensor<T>>{d_x, d_g};
                             });
}

/// Transposed convolution with weight [C_in, C_out, kh, kw]; output (in - 1) * stride - 2 * pad + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dOptions opt = {}) {
    detail::require(x.dim() == 4 && w.dim() == 4 && x.size(1) == w.size(0),
                    "conv_transpose2d input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
    const auto out_size = [&](std::size_t in, std::size_t k) {
        const std::ptrdiff_t v = static_cast<std::ptrdiff_t>((in - 1) * opt.stride + k) -
                                 2 * static_cast<std::ptrdiff_t>(opt.padding);
        detail::require(v > 0, "conv_transpose2d: empty output");
        return static_cast<std::size_t>(v);
    };
    return conv2d_input_grad(x, w, opt, out_size(x.size(2), w.size(2)), out_size(x.size(3), w.size(3)));
}

// ---------------------------------------------------------------------------
// Pooling and resampling

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
    detail::require(x.dim() == 4 && k >= 1 && x.size(2) % k == 0 && x.size(3) % k == 0,
                    "avg_pool2d needs [N, C, H, W] with H and W divisible by the window");
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3), ho = h / k, wo = w / k;
    std::vector<T> out(planes * ho * wo, T(0));
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
                out[(p * ho + y / k) * wo + xx / k] += x.data()[(p * h + y) * w + xx] * inv;
    return detail::finish<T>(Tensor<T>({x.size(0), x.size(1), ho, wo}, std::move(out)), "avg_pool2d", {&x},
                             [k](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::avg_pool2d_adjoint(g, k)};
                             });
}

template <typename T>
Tensor<T> avg_pool2d_adjoint(const Tensor<T>& g, std::size_t k) {
    detail::require(g.dim() == 4, "avg_pool2d_adjoint needs [N, C, H, W]");
    const std::size_t planes = g.size(0) * g.size(1), ho = g.size(2), wo = g.size(3), h = ho * k, w = wo * k;
    std::vector<T> out(planes * h * w);
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
                out[(p * h + y) * w + xx] = g.data()[(p * ho + y / k) * wo + xx / k] * inv;
    return detail::finish<T>(Tensor<T>({g.size(0), g.size(1), h, w}, std::move(out)), "avg_pool2d_adjoint", {&g},
                             [k](const Tensor<T>& gg, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::avg_pool2d(gg, k)};
                             });
}

/// Max pooling with a k x k window and stride k. Ties resolve to the first element in raster order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k) {
    detail::require(x.dim() == 4 && k >= 1 && x.size(2) % k == 0 && x.size(3) % k == 0,
                    "max_pool2d needs [N, C, H, W] with H and W divisible by the window");
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3), ho = h / k, wo = w / k;
    auto index = std::make_shared<std::vector<std::size_t>>(planes * ho * wo);
    const T* in = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (p * h + oy * k) * w + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t i = (p * h + oy * k + dy) * w + ox * k + dx;
                        if (in[i] > in[best]) best = i;
                    }
                (*index)[(p * ho + oy) * wo + ox] = best;
            }
    return gather(x, std::shared_ptr<const std::vector<std::size_t>>(std::move(index)),
                  Shape{x.size(0), x.size(1), ho, wo});
}

namespace detail {

// Two-tap linear interpolation weights with half-pixel centres; source
// coordinates below 0 are clamped, as is the upper neighbour.
struct LerpTap {
    std::size_t i0, i1;
    double w0, w1;
};

inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
    std::vector<LerpTap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        const double frac = src - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t height, std::size_t width) {
    detail::require(x.dim() == 4 && height > 0 && width > 0, "resize_bilinear needs [N, C, H, W]");
    const std::size_t h = x.size(2), w = x.size(3);
    if (h == height && w == width) return x;
    const auto ty = detail::lerp_taps(h, height);
    const auto tx = detail::lerp_taps(w, width);
    const std::size_t planes = x.size(0) * x.size(1);
    std::vector<T> out(planes * height * width);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* in = x.data() + p * h * w;
        T* o = out.data() + p * height * width;
        for (std::size_t oy = 0; oy < height; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < width; ++ox) {
                const auto& b = tx[ox];
                o[oy * width + ox] = static_cast<T>(a.w0 * (b.w0 * in[a.i0 * w + b.i0] + b.w1 * in[a.i0 * w + b.i1]) +
                                                    a.w1 * (b.w0 * in[a.i1 * w + b.i0] + b.w1 * in[a.i1 * w + b.i1]));
            }
        }
    }
    return detail::finish<T>(Tensor<T>({x.size(0), x.size(1), height, width}, std::move(out)), "resize_bilinear",
                             {&x}, [h, w](const Tensor<T>& g, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::resize_bilinear_adjoint(g, h, w)};
                             });
}

/// Adjoint (transpose) of resize_bilinear from [height, width] to the size of `g`.
template <typename T>
Tensor<T> resize_bilinear_adjoint(const Tensor<T>& g, std::size_t height, std::size_t width) {
    detail::require(g.dim() == 4, "resize_bilinear_adjoint needs [N, C, H, W]");
    const std::size_t ho = g.size(2), wo = g.size(3);
    if (ho == height && wo == width) return g;
    const auto ty = detail::lerp_taps(height, ho);
    const auto tx = detail::lerp_taps(width, wo);
    const std::size_t planes = g.size(0) * g.size(1);
    std::vector<T> out(planes * height * width, T(0));
    for (std::size_t p = 0; p < planes; ++p) {
        const T* in = g.data() + p * ho * wo;
        T* o = out.data() + p * height * width;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const auto& b = tx[ox];
                const double v = in[oy * wo + ox];
                o[a.i0 * width + b.i0] += static_cast<T>(v * a.w0 * b.w0);
                o[a.i0 * width + b.i1] += static_cast<T>(v * a.w0 * b.w1);
                o[a.i1 * width + b.i0] += static_cast<T>(v * a.w1 * b.w0);
                o[a.i1 * width + b.i1] += static_cast<T>(v * a.w1 * b.w1);
            }
        }
    }
    return detail::finish<T>(Tensor<T>({g.size(0), g.size(1), height, width}, std::move(out)),
                             "resize_bilinear_adjoint", {&g}, [ho, wo](const Tensor<T>& gg, const std::vector<bool>&) {
                                 return std::vector<Tensor<T>>{saml::resize_bilinear(gg, ho, wo)};
                             });
}

// ---------------------------------------------------------------------------
// Composite operations

/// Softmax over axis 1 of an [N, C, ...] tensor.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    detail::require(x.dim() >= 2, "softmax_channels needs [N, C, ...]");
    const std::size_t n = x.size(0), c = x.size(1), inner = x.numel() / (n * c);
    // Constant shift for stability; it cancels in value and gradient.
    Shape kept = x.shape();
    kept[1] = 1;
    std::vector<T> mx(n * inner, -std::numeric_limits<T>::infinity());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i)
                mx[b * inner + i] = std::max(mx[b * inner + i], x.data()[(b * c + ch) * inner + i]);
    Tensor<T> e = exp(sub(x, Tensor<T>(kept, std::move(mx))));
    return div(e, sum_axis(e, 1, true));
}

/// Sum over every axis except the first, giving [N].
template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& x) {
    detail::require(x.dim() >= 1, "sum_per_sample needs a batch axis");
    return sum_axis(reshape(x, Shape{x.size(0), x.numel() / x.size(0)}), 1, false);
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return shift(a, s); }
template <typename T> Tensor<T> operator+(T s, const Tensor<T>& a) { return shift(a, s); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T s) { return shift(a, -s); }
template <typename T> Tensor<T> operator-(T s, const Tensor<T>& a) { return shift(neg(a), s); }

}  // namespace saml
