#include "flowvos/decoder.hpp"

#include <stdexcept>

namespace flowvos {

std::string to_string(LevelOneSource source) { return source == LevelOneSource::flow ? "flow" : "image"; }

LevelOneSource parse_level_one_source(const std::string& text) {
    if (text == "flow") return LevelOneSource::flow;
    if (text == "image") return LevelOneSource::image;
    throw std::invalid_argument("unknown level-1 source '" + text + "' (expected flow or image)");
}

PyramidFusion PyramidFusion::make(FusionMode mode, const BackboneConfig& backbone, Rng& rng) {
    PyramidFusion p;
    for (std::size_t k = 0; k < 3; ++k) p.blocks[k] = FusionParams::make(mode, backbone.channels[k + 1], rng);
    return p;
}

void PyramidFusion::collect(ParamList& out) {
    for (std::size_t k = 0; k < 3; ++k) blocks[k].collect("fusion.decoder" + std::to_string(k + 2), out);
}

Pyramid fuse_pyramid(const Pyramid& image, const Pyramid& flow, const PyramidFusion& fusion,
                     LevelOneSource l1_source) {
    for (std::size_t k = 0; k < 4; ++k) {
        if (!image[k].defined()) throw std::invalid_argument("fuse_pyramid: image level " + std::to_string(k + 1) + " missing");
    }
    const bool with_flow = fusion.mode() != FusionMode::none;
    if (with_flow) {
        for (std::size_t k = 0; k < 4; ++k)
            if (!flow[k].defined()) throw std::invalid_argument("fuse_pyramid: flow level " + std::to_string(k + 1) + " missing");
    }
    Pyramid out;
    out[0] = with_flow && l1_source == LevelOneSource::flow ? flow[0] : image[0];
    for (std::size_t k = 1; k < 4; ++k) out[k] = fuse(image[k], with_flow ? flow[k] : Tensor(), fusion.blocks[k - 1]);
    return out;
}

Decoder::Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
    const std::size_t w = config.width;
    const auto& c = config.level_channels;
    const std::array<std::size_t, 4> inputs{w + c[0], w + c[1], w + config.target_channels + c[2], c[3]};
    for (std::size_t k = 0; k < 4; ++k) {
        blocks_[k][0] = ConvLayer::he(w, inputs[k], 3, rng);
        blocks_[k][1] = ConvLayer::he(w, w, 3, rng);
    }
    head_ = ConvLayer::he(1, w, 1, rng);
}

Tensor Decoder::decode(const Tensor& f_tm, const Pyramid& fused) const {
    for (std::size_t k = 0; k < 4; ++k) {
        if (!fused[k].defined() || fused[k].rank() != 3 || fused[k].dim(0) != config_.level_channels[k]) {
            throw ShapeError("decoder: level " + std::to_string(k + 1) + " features have shape " +
                             (fused[k].defined() ? shape_str(fused[k].shape()) : std::string("<none>")));
        }
    }
    for (std::size_t k = 1; k < 4; ++k) {
        if (fused[k].dim(1) * 2 != fused[k - 1].dim(1) || fused[k].dim(2) * 2 != fused[k - 1].dim(2)) {
            throw ShapeError("decoder: level " + std::to_string(k + 1) + " resolution " + shape_str(fused[k].shape()) +
                             " is not half of level " + std::to_string(k) + " " + shape_str(fused[k - 1].shape()));
        }
    }
    if (f_tm.rank() != 3 || f_tm.dim(0) != config_.target_channels || f_tm.dim(1) != fused[2].dim(1) ||
        f_tm.dim(2) != fused[2].dim(2)) {
        throw ShapeError("decoder: target output " + shape_str(f_tm.shape()) + " does not match level 3 " +
                         shape_str(fused[2].shape()));
    }
    auto refine = [&](std::size_t k, const Tensor& x) { return relu(blocks_[k][1](relu(blocks_[k][0](x)))); };
    Tensor h = upsample2x(refine(3, fused[3]));
    h = upsample2x(refine(2, concat({h, f_tm, fused[2]})));
    h = upsample2x(refine(1, concat({h, fused[1]})));
    h = upsample2x(refine(0, concat({h, fused[0]})));
    return head_(h);
}

void Decoder::collect(ParamList& out) {
    for (std::size_t k = 0; k < 4; ++k) {
        blocks_[k][0].collect("decoder.level" + std::to_string(k + 1) + ".conv1", out);
        blocks_[k][1].collect("decoder.level" + std::to_string(k + 1) + ".conv2", out);
    }
    head_.collect("decoder.head", out);
}

} // namespace flowvos
