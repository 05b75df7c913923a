#include "flowvos/backbone.hpp"

#include <string>

namespace flowvos {

FeatureExtractor::FeatureExtractor(const BackboneConfig& config, Rng& rng) : config_(config) {
    std::size_t in = config.input_channels;
    for (std::size_t k = 0; k < 4; ++k) {
        stages_[k] = ConvLayer::he(config.channels[k], in, 3, rng);
        in = config.channels[k];
    }
}

Pyramid FeatureExtractor::extract(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != config_.input_channels) {
        throw ShapeError("feature extractor expects " + std::to_string(config_.input_channels) +
                         " input channels, got shape " + shape_str(x.shape()));
    }
    if (x.dim(1) % kInputMultiple || x.dim(2) % kInputMultiple) {
        throw ShapeError("feature extractor input " + shape_str(x.shape()) + " is not a multiple of " +
                         std::to_string(kInputMultiple));
    }
    Pyramid p;
    Tensor h = x;
    for (std::size_t k = 0; k < 4; ++k) {
        h = avg_pool2(relu(stages_[k](h)));
        p[k] = h;
    }
    return p;
}

Tensor FeatureExtractor::extract_l3(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != config_.input_channels) {
        throw ShapeError("feature extractor expects " + std::to_string(config_.input_channels) +
                         " input channels, got shape " + shape_str(x.shape()));
    }
    Tensor h = x;
    for (std::size_t k = 0; k < 3; ++k) h = avg_pool2(relu(stages_[k](h)));
    return h;
}

void FeatureExtractor::collect(const std::string& prefix, ParamList& out) {
    for (std::size_t k = 0; k < 4; ++k) stages_[k].collect(prefix + ".stage" + std::to_string(k + 1), out);
}

Backbones::Backbones(const BackboneConfig& config, Rng& rng) : image(config, rng), flow(config, rng) {}

Pyramid Backbones::extract(const Tensor& x, Branch branch) const {
    return branch == Branch::image ? image.extract(x) : flow.extract(x);
}

void Backbones::collect(ParamList& out) {
    image.collect("backbone.image", out);
    flow.collect("backbone.flow", out);
}

LabelEncoder::LabelEncoder(const LabelEncoderConfig& config, Rng& rng) : config_(config) {
    auto build = [&](Stack& s) {
        std::size_t in = 1;
        for (std::size_t k = 0; k < 3; ++k) {
            s.layers[k] = ConvLayer::he(config.hidden[k], in, 3, rng);
            in = config.hidden[k];
        }
        s.layers[3] = ConvLayer::he(config.label_channels, in, 3, rng);
    };
    build(label_);
    build(weight_);
    // Importance weights start near one.
    weight_.layers[3].weight = scale(weight_.layers[3].weight, 0.1);
    weight_.layers[3].bias = Tensor::ones({config.label_channels});
}

Tensor LabelEncoder::Stack::operator()(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t k = 0; k < 3; ++k) h = avg_pool2(relu(layers[k](h)));
    return layers[3](h);
}

LabelEncoding LabelEncoder::encode(const Tensor& mask) const {
    if (mask.rank() != 3 || mask.dim(0) != 1) {
        throw ShapeError("label encoder expects a 1 x H x W mask, got " + shape_str(mask.shape()));
    }
    if (mask.dim(1) % kTargetStride || mask.dim(2) % kTargetStride) {
        throw ShapeError("mask size " + shape_str(mask.shape()) + " does not divide into the target stride " +
                         std::to_string(kTargetStride));
    }
    return {label_(mask), square(weight_(mask))};
}

void LabelEncoder::collect(ParamList& out) {
    for (std::size_t k = 0; k < 4; ++k) {
        label_.layers[k].collect("label_encoder.layer" + std::to_string(k + 1), out);
        weight_.layers[k].collect("weight_encoder.layer" + std::to_string(k + 1), out);
    }
}

} // namespace flowvos
