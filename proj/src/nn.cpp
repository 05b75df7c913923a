#include "flowvos/nn.hpp"

#include <cmath>

namespace flowvos {

Tensor he_kernel(std::size_t out_channels, std::size_t in_channels, std::size_t k, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels * k * k));
    return Tensor::randn({out_channels, in_channels, k, k}, rng, stddev);
}

ConvLayer ConvLayer::he(std::size_t out_channels, std::size_t in_channels, std::size_t k, Rng& rng,
                        bool with_bias) {
    ConvLayer layer;
    layer.weight = he_kernel(out_channels, in_channels, k, rng);
    if (with_bias) layer.bias = Tensor::zeros({out_channels});
    layer.padding = k / 2;
    return layer;
}

Tensor ConvLayer::operator()(const Tensor& x) const {
    Tensor y = conv2d(x, weight, stride, padding);
    return bias.defined() ? add_channel_bias(y, bias) : y;
}

void ConvLayer::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    if (bias.defined()) out.push_back({prefix + ".bias", &bias});
}

void make_leaves(const ParamList& params) {
    for (const auto& p : params) *p.slot = p.slot->as_leaf();
}

void make_constants(const ParamList& params) {
    for (const auto& p : params) *p.slot = p.slot->detach();
}

void Adam::step(const ParamList& params) {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (const auto& p : params) {
        Tensor& t = *p.slot;
        if (!t.has_grad()) continue;
        auto& mom = moments_[p.name];
        const std::size_t n = t.numel();
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        const auto g = t.grad_values();
        std::vector<double> next(t.values().begin(), t.values().end());
        for (std::size_t i = 0; i < n; ++i) {
            mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g[i];
            mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mh = mom.m[i] / c1;
            const double vh = mom.v[i] / c2;
            next[i] -= config_.learning_rate * mh / (std::sqrt(vh) + config_.epsilon);
        }
        t = Tensor(t.shape(), std::move(next), t.requires_grad());
    }
}

} // namespace flowvos
