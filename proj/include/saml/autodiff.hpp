// Reverse-mode gradient passes over a Tape, plus finite-difference checking.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "saml/ops.hpp"
#include "saml/tensor.hpp"

namespace saml {

namespace testing {

namespace detail {
inline std::string& perturbed_op() {
    static std::string name;
    return name;
}
}  // namespace detail

/// Test hook: scales every gradient produced by backward rules of `op` by 1.01.
/// Pass an empty string to restore the correct rules. Not thread-safe.
inline void perturb_backward(std::string op) { detail::perturbed_op() = std::move(op); }

}  // namespace testing

/**
 * Gradients of the scalar `output` with respect to `wrt`, which may be leaves or
 * intermediate results (e.g. slices of a flat parameter vector).
 *
 * With `create_graph` the backward operations are themselves recorded on the
 * tape, so the returned tensors can be differentiated again. Tensors that do
 * not influence `output` receive zero tensors.
 */
template <typename T>
std::vector<Tensor<T>> gradient(const Tensor<T>& output, const std::vector<Tensor<T>>& wrt,
                                bool create_graph = false) {
    if (output.numel() != 1) throw ShapeError("gradient: output must be a scalar, got " + to_string(output.shape()));
    if (!output.tracked()) throw Error("gradient: output is not recorded on a tape");
    Tape<T>& tape = *output.tape();
    const int last = output.node();

    std::vector<char> needs(static_cast<std::size_t>(last) + 1, 0), target(needs.size(), 0);
    for (const auto& w : wrt) {
        if (!w.tracked() || w.tape() != &tape) throw Error("gradient: wrt tensor is not on the output's tape");
        if (w.node() <= last) needs[static_cast<std::size_t>(w.node())] = target[static_cast<std::size_t>(w.node())] = 1;
    }
    for (int i = 0; i <= last; ++i) {
        if (needs[static_cast<std::size_t>(i)]) continue;
        for (int in : tape.node(i).inputs)
            if (in >= 0 && needs[static_cast<std::size_t>(in)]) {
                needs[static_cast<std::size_t>(i)] = 1;
                break;
            }
    }

    const std::string& perturbed = testing::detail::perturbed_op();
    std::vector<Tensor<T>> grads(static_cast<std::size_t>(last) + 1);
    grads[static_cast<std::size_t>(last)] = Tensor<T>::ones(output.shape());
    GradModeGuard guard(create_graph);
    for (int i = last; i >= 0; --i) {
        auto& slot = grads[static_cast<std::size_t>(i)];
        if (!needs[static_cast<std::size_t>(i)] || !slot.defined()) continue;
        const auto& node = tape.node(i);
        if (node.leaf()) continue;
        std::vector<bool> in_needs(node.inputs.size());
        for (std::size_t k = 0; k < node.inputs.size(); ++k)
            in_needs[k] = node.inputs[k] >= 0 && needs[static_cast<std::size_t>(node.inputs[k])];
        // An interior target keeps its (complete) gradient; everything else is released.
        Tensor<T> g = slot;
        if (!target[static_cast<std::size_t>(i)]) slot = Tensor<T>();
        auto in_grads = node.backward(g, in_needs);
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            if (!in_needs[k] || !in_grads[k].defined()) continue;
            Tensor<T> gk = std::move(in_grads[k]);
            if (!perturbed.empty() && perturbed == node.op) gk = scale(gk, T(1.01));
            auto& acc = grads[static_cast<std::size_t>(node.inputs[k])];
            acc = acc.defined() ? add(acc, gk) : gk;
        }
    }

    std::vector<Tensor<T>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        const auto idx = static_cast<std::size_t>(w.node());
        if (w.node() <= last && grads[idx].defined())
            out.push_back(grads[idx]);
        else
            out.push_back(Tensor<T>::zeros(w.shape()));
    }
    return out;
}

template <typename T>
Tensor<T> gradient(const Tensor<T>& output, const Tensor<T>& wrt, bool create_graph = false) {
    return gradient(output, std::vector<Tensor<T>>{wrt}, create_graph)[0];
}

/// Relative error with denominator max(|a|, |b|, 1e-8).
inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/**
 * Compares the analytic gradient of `fn` at `x` against central differences
 * and returns the largest relative error over all coordinates. `fn` must map
 * a tensor shaped like `x` to a scalar and be deterministic.
 */
template <typename T>
double finite_difference_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& x,
                               double eps = 1e-5) {
    Tensor<T> analytic;
    {
        Tape<T> tape;
        Tensor<T> leaf = tape.watch(x);
        Tensor<T> y = fn(leaf);
        analytic = y.tracked() ? gradient(y, leaf).detach() : Tensor<T>::zeros(x.shape());
    }
    GradModeGuard off(false);
    std::vector<T> probe(x.values().begin(), x.values().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + static_cast<T>(eps);
        const double fp = fn(Tensor<T>(x.shape(), probe)).item();
        probe[i] = orig - static_cast<T>(eps);
        const double fm = fn(Tensor<T>(x.shape(), probe)).item();
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("finite_difference_check: non-finite value");
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, relative_error(analytic[i], numeric));
    }
    return worst;
}

}  // namespace saml
