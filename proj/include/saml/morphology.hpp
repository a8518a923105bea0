// Binary morphology with the 3x3 cross (4-neighbourhood) structuring element.
// Pixels outside the grid count as background.
#pragma once

#include <utility>

#include "saml/image.hpp"

namespace saml {

inline Mask erode(const Mask& m, std::size_t iterations = 1) {
    Mask cur = m;
    for (std::size_t it = 0; it < iterations; ++it) {
        Mask next(cur.height, cur.width, 0);
        for (std::size_t y = 0; y < cur.height; ++y)
            for (std::size_t x = 0; x < cur.width; ++x) {
                if (!cur.at(y, x)) continue;
                const bool keep = y > 0 && cur.at(y - 1, x) && y + 1 < cur.height && cur.at(y + 1, x) && x > 0 &&
                                  cur.at(y, x - 1) && x + 1 < cur.width && cur.at(y, x + 1);
                next.at(y, x) = keep;
            }
        cur = std::move(next);
    }
    return cur;
}

inline Mask dilate(const Mask& m, std::size_t iterations = 1) {
    Mask cur = m;
    for (std::size_t it = 0; it < iterations; ++it) {
        Mask next = cur;
        for (std::size_t y = 0; y < cur.height; ++y)
            for (std::size_t x = 0; x < cur.width; ++x) {
                if (!cur.at(y, x)) continue;
                if (y > 0) next.at(y - 1, x) = 1;
                if (y + 1 < cur.height) next.at(y + 1, x) = 1;
                if (x > 0) next.at(y, x - 1) = 1;
                if (x + 1 < cur.width) next.at(y, x + 1) = 1;
            }
        cur = std::move(next);
    }
    return cur;
}

/// a AND NOT b
inline Mask subtract(const Mask& a, const Mask& b) {
    require_same_size(a, b, "subtract");
    Mask out(a.height, a.width, 0);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] && !b.data[i];
    return out;
}

/// Inner boundary: the mask minus its one-step erosion.
inline Mask inner_boundary(const Mask& m) { return subtract(m, erode(m, 1)); }

/// Number of 4-connected foreground components.
inline std::size_t connected_components(const Mask& m) {
    std::vector<std::uint8_t> seen(m.size(), 0);
    std::vector<std::size_t> stack;
    std::size_t components = 0;
    for (std::size_t start = 0; start < m.size(); ++start) {
        if (!m.data[start] || seen[start]) continue;
        ++components;
        stack.push_back(start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const std::size_t y = i / m.width, x = i % m.width;
            const auto visit = [&](std::size_t j) {
                if (m.data[j] && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
            };
            if (y > 0) visit(i - m.width);
            if (y + 1 < m.height) visit(i + m.width);
            if (x > 0) visit(i - 1);
            if (x + 1 < m.width) visit(i + 1);
        }
    }
    return components;
}

}  // namespace saml
