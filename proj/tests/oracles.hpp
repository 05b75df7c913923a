#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library's op implementations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "flowvos/ops.hpp"
#include "flowvos/tensor.hpp"

namespace oracle {

using flowvos::Tensor;

// Direct nested-loop cross-correlation with explicit bounds checks.
inline std::vector<double> conv2d(const std::vector<double>& in, std::size_t cin, std::size_t h, std::size_t w,
                                  const std::vector<double>& ker, std::size_t cout, std::size_t k, std::size_t stride,
                                  std::size_t pad, std::size_t& ho, std::size_t& wo) {
    ho = (h + 2 * pad - k) / stride + 1;
    wo = (w + 2 * pad - k) / stride + 1;
    std::vector<double> out(cout * ho * wo, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t x = 0; x < wo; ++x) {
                double acc = 0.0;
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                            const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                            acc += in[(c * h + iy) * w + ix] * ker[((o * cin + c) * k + i) * k + j];
                        }
                out[(o * ho + y) * wo + x] = acc;
            }
    return out;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

using MultiFn = std::function<Tensor(std::span<const Tensor>)>;

// Scalarizes f by a fixed random projection so every output entry matters.
inline double projected(const MultiFn& f, std::span<const Tensor> inputs, const std::vector<double>& weights) {
    flowvos::NoTapeScope no_tape;
    Tensor out = f(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
    return s;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

// Relative error with a small floor so entries that are analytically zero do
// not divide by zero.
inline double rel_error(double a, double b, double floor = 1e-4) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares reverse-mode gradients of <f(x), w> to central differences.
inline GradCheck check_gradients(const MultiFn& f, const std::vector<Tensor>& inputs, flowvos::Rng& rng,
                                 double h = 1e-5) {
    std::vector<Tensor> leaves;
    for (const auto& t : inputs) leaves.push_back(t.as_leaf());
    flowvos::Tape tape;
    Tensor out;
    {
        flowvos::TapeScope scope(tape);
        out = f(leaves);
    }
    std::vector<double> w(out.numel());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    tape.vjp(out, w);

    GradCheck res;
    std::vector<Tensor> probe(inputs.begin(), inputs.end());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const auto base = inputs[t].values();
        const auto grad = leaves[t].has_grad() ? std::vector<double>(leaves[t].grad_values().begin(),
                                                                      leaves[t].grad_values().end())
                                               : std::vector<double>(base.size(), 0.0);
        for (std::size_t i = 0; i < base.size(); ++i) {
            std::vector<double> plus(base.begin(), base.end());
            std::vector<double> minus(base.begin(), base.end());
            plus[i] += h;
            minus[i] -= h;
            probe[t] = Tensor(inputs[t].shape(), plus);
            const double fp = projected(f, probe, w);
            probe[t] = Tensor(inputs[t].shape(), minus);
            const double fm = projected(f, probe, w);
            probe[t] = inputs[t];
            const double numeric = (fp - fm) / (2.0 * h);
            res.max_rel_error = std::max(res.max_rel_error, rel_error(grad[i], numeric));
            ++res.entries;
        }
    }
    return res;
}

// Compares the forward tangent of f along random directions to central differences.
inline double check_tangent(const MultiFn& f, const std::vector<Tensor>& inputs, flowvos::Rng& rng,
                            double h = 1e-5) {
    std::vector<Tensor> leaves;
    std::vector<std::vector<double>> dirs;
    for (const auto& t : inputs) {
        leaves.push_back(t.as_leaf());
        std::vector<double> d(t.numel());
        for (auto& x : d) x = rng.uniform(-1.0, 1.0);
        dirs.push_back(std::move(d));
    }
    flowvos::Tape tape;
    Tensor out;
    {
        flowvos::TapeScope scope(tape);
        out = f(leaves);
    }
    tape.jvp(leaves, dirs);
    const auto jv = out.tangent();

    auto moved = [&](double s) {
        std::vector<Tensor> p;
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            std::vector<double> v(inputs[t].values().begin(), inputs[t].values().end());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dirs[t][i];
            p.emplace_back(inputs[t].shape(), v);
        }
        flowvos::NoTapeScope no_tape;
        return f(p);
    };
    const Tensor fp = moved(h);
    const Tensor fm = moved(-h);
    double worst = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        worst = std::max(worst, rel_error(jv[i], (fp[i] - fm[i]) / (2.0 * h)));
    }
    return worst;
}

} // namespace oracle
