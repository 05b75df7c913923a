#pragma once

#include <array>
#include <string>

#include "flowvos/backbone.hpp"
#include "flowvos/fusion.hpp"

namespace flowvos {

enum class LevelOneSource { flow, image };

std::string to_string(LevelOneSource source);
LevelOneSource parse_level_one_source(const std::string& text);

// Fusion blocks for pyramid levels 2, 3 and 4.
struct PyramidFusion {
    std::array<FusionParams, 3> blocks;

    static PyramidFusion make(FusionMode mode, const BackboneConfig& backbone, Rng& rng);
    FusionMode mode() const { return blocks[0].mode; }
    const FusionParams& level(std::size_t k) const { return blocks.at(k - 2); }
    void collect(ParamList& out);
};

// f_d^{l_k}: levels 2-4 fused with their own blocks, level 1 passed through
// from `l1_source`. Without a flow branch (mode none) level 1 is always the
// image feature and `flow` may hold undefined tensors.
Pyramid fuse_pyramid(const Pyramid& image, const Pyramid& flow, const PyramidFusion& fusion,
                     LevelOneSource l1_source = LevelOneSource::flow);

struct DecoderConfig {
    std::array<std::size_t, 4> level_channels{16, 32, 64, 64};
    std::size_t target_channels = 16; // D
    std::size_t width = 16;
};

// Coarse-to-fine refinement: level 4 -> up -> [level 3, f_tm] -> up ->
// level 2 -> up -> level 1 -> up -> 1x1 head. Each level applies two
// 3x3 conv + relu blocks.
class Decoder {
  public:
    Decoder() = default;
    Decoder(const DecoderConfig& config, Rng& rng);

    // One logit map (1 x H x W) at input resolution for a single object.
    Tensor decode(const Tensor& f_tm, const Pyramid& fused) const;

    void collect(ParamList& out);
    const DecoderConfig& config() const { return config_; }

  private:
    DecoderConfig config_;
    std::array<std::array<ConvLayer, 2>, 4> blocks_; // index 0 = level 1
    ConvLayer head_;
};

} // namespace flowvos
