#include "flowvos/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace flowvos {

std::string to_string(FusionMode mode) {
    switch (mode) {
    case FusionMode::none:
        return "none";
    case FusionMode::concat:
        return "concat";
    case FusionMode::attention:
        return "attention";
    }
    return "?";
}

FusionMode parse_fusion_mode(const std::string& text) {
    if (text == "none") return FusionMode::none;
    if (text == "concat") return FusionMode::concat;
    if (text == "attention") return FusionMode::attention;
    throw std::invalid_argument("unknown fusion mode '" + text + "' (expected none, concat or attention)");
}

FusionParams FusionParams::make(FusionMode mode, std::size_t channels, Rng& rng, std::size_t key_channels,
                                std::size_t value_channels) {
    FusionParams p;
    p.mode = mode;
    p.channels = channels;
    const std::size_t half = std::max<std::size_t>(channels / 2, 4);
    if (key_channels == 0) key_channels = half;
    if (value_channels == 0) value_channels = half;
    switch (mode) {
    case FusionMode::none:
        break;
    case FusionMode::concat:
        p.mix = he_kernel(channels, 2 * channels, 1, rng);
        break;
    case FusionMode::attention:
        p.query = he_kernel(key_channels, channels, 1, rng);
        p.key = he_kernel(key_channels, channels, 1, rng);
        p.value = he_kernel(value_channels, channels, 1, rng);
        p.output = he_kernel(channels, value_channels, 1, rng);
        break;
    }
    return p;
}

void FusionParams::collect(const std::string& prefix, ParamList& out) {
    if (query.defined()) out.push_back({prefix + ".query", &query});
    if (key.defined()) out.push_back({prefix + ".key", &key});
    if (value.defined()) out.push_back({prefix + ".value", &value});
    if (output.defined()) out.push_back({prefix + ".output", &output});
    if (mix.defined()) out.push_back({prefix + ".mix", &mix});
}

FusionParams FusionParams::detached() const {
    FusionParams p = *this;
    for (Tensor* t : {&p.query, &p.key, &p.value, &p.output, &p.mix})
        if (t->defined()) *t = t->detach();
    return p;
}

namespace {

void check_inputs(const Tensor& f_im, const Tensor& f_fl, const FusionParams& params) {
    if (f_im.rank() != 3) throw ShapeError("fuse: image features must be C x H x W, got " + shape_str(f_im.shape()));
    if (f_im.dim(0) != params.channels) {
        throw ShapeError("fuse: image features have " + std::to_string(f_im.dim(0)) +
                         " channels, fusion block expects " + std::to_string(params.channels));
    }
    if (params.mode == FusionMode::none) return;
    if (!f_fl.defined() || f_fl.shape() != f_im.shape()) {
        throw ShapeError("fuse: flow features " + (f_fl.defined() ? shape_str(f_fl.shape()) : std::string("<none>")) +
                         " do not match image features " + shape_str(f_im.shape()));
    }
}

} // namespace

Tensor attention_map(const Tensor& f_im, const Tensor& f_fl, const FusionParams& params) {
    if (params.mode != FusionMode::attention) throw std::invalid_argument("attention_map needs attention mode");
    check_inputs(f_im, f_fl, params);
    const std::size_t hw = f_im.dim(1) * f_im.dim(2);
    Tensor k = reshape(conv2d(f_im, params.key, 1, 0), {params.key_channels(), hw});
    Tensor v = reshape(conv2d(f_fl, params.value, 1, 0), {params.value_channels(), hw});
    Tensor logits = scale(matmul(v, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hw)));
    return softmax(logits, 1);
}

Tensor fuse(const Tensor& f_im, const Tensor& f_fl, const FusionParams& params) {
    check_inputs(f_im, f_fl, params);
    switch (params.mode) {
    case FusionMode::none:
        return f_im;
    case FusionMode::concat:
        return conv2d(concat({f_im, f_fl}), params.mix, 1, 0);
    case FusionMode::attention: {
        const std::size_t h = f_im.dim(1), w = f_im.dim(2);
        Tensor m = attention_map(f_im, f_fl, params);
        Tensor q = reshape(conv2d(f_fl, params.query, 1, 0), {params.key_channels(), h * w});
        Tensor remapped = reshape(matmul(m, q), {params.value_channels(), h, w});
        return add(f_im, conv2d(remapped, params.output, 1, 0));
    }
    }
    throw std::invalid_argument("fuse: unknown fusion mode");
}

} // namespace flowvos
