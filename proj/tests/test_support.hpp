#pragma once

#include <cstdint>
#include <random>

#include "saml/image.hpp"
#include "saml/tensor.hpp"

namespace testing_support {

inline saml::Tensor<double> random_tensor(saml::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(saml::numel(shape));
    for (auto& x : v) x = dist(rng);
    return saml::Tensor<double>(std::move(shape), std::move(v));
}

inline saml::Mask rect_mask(std::size_t n, std::size_t h, std::size_t w) {
    saml::Mask m(n, n, 0);
    const std::size_t top = (n - h) / 2, left = (n - w) / 2;
    for (std::size_t y = top; y < top + h; ++y)
        for (std::size_t x = left; x < left + w; ++x) m.at(y, x) = 1;
    return m;
}

// Pixel centres within radius r of the grid centre.
inline saml::Mask disk_mask(std::size_t n, double r, double cy = -1, double cx = -1) {
    if (cy < 0) cy = n / 2.0;
    if (cx < 0) cx = n / 2.0;
    saml::Mask m(n, n, 0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            m.at(y, x) = dy * dy + dx * dx <= r * r;
        }
    return m;
}

template <typename T = double>
saml::Tensor<T> as_map(const saml::Mask& m) {
    return saml::stack_grids<T>(std::vector<const saml::Mask*>{&m});
}

}  // namespace testing_support
