// 2-D grids for images and binary masks.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "saml/tensor.hpp"

namespace saml {

template <typename V>
struct Grid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<V> data;

    Grid() = default;
    Grid(std::size_t h, std::size_t w, V fill = V{}) : height(h), width(w), data(h * w, fill) {}

    V& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    const V& at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
    std::size_t size() const { return data.size(); }
    bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
/// Values in {0, 1}.
using Mask = Grid<std::uint8_t>;

inline std::size_t count(const Mask& m) {
    std::size_t n = 0;
    for (auto v : m.data) n += v != 0;
    return n;
}

inline void require_same_size(const Mask& a, const Mask& b, const char* what) {
    if (a.height != b.height || a.width != b.width) throw ShapeError(std::string(what) + ": mask sizes differ");
}

/// Stacks equally sized grids into an [N, 1, H, W] tensor.
template <typename T, typename V>
Tensor<T> stack_grids(const std::vector<const Grid<V>*>& grids) {
    if (grids.empty()) throw ShapeError("cannot stack zero grids");
    const std::size_t h = grids.front()->height, w = grids.front()->width;
    std::vector<T> v;
    v.reserve(grids.size() * h * w);
    for (const auto* g : grids) {
        if (g->height != h || g->width != w) throw ShapeError("stacked grids differ in size");
        for (auto x : g->data) v.push_back(static_cast<T>(x));
    }
    return Tensor<T>({grids.size(), 1, h, w}, std::move(v));
}

template <typename T, typename V>
Tensor<T> stack_grids(const std::vector<Grid<V>>& grids) {
    std::vector<const Grid<V>*> ptrs;
    for (const auto& g : grids) ptrs.push_back(&g);
    return stack_grids<T>(ptrs);
}

}  // namespace saml
