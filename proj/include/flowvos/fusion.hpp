#pragma once

#include <optional>
#include <string>

#include "flowvos/nn.hpp"

namespace flowvos {

enum class FusionMode { none, concat, attention };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);

// One fusion block A_alpha. Attention mode uses the four 1x1 projections;
// concat mode uses the single 2C -> C projection; none carries nothing.
struct FusionParams {
    FusionMode mode = FusionMode::none;
    std::size_t channels = 0;
    Tensor query;  // C_k x C_in x 1 x 1, applied to flow features
    Tensor key;    // C_k x C_in x 1 x 1, applied to image features
    Tensor value;  // C_v x C_in x 1 x 1, applied to flow features
    Tensor output; // C_in x C_v x 1 x 1
    Tensor mix;    // C_in x 2C_in x 1 x 1 (concat mode)

    // key_channels / value_channels of 0 pick the default max(C_in / 2, 4).
    static FusionParams make(FusionMode mode, std::size_t channels, Rng& rng, std::size_t key_channels = 0,
                             std::size_t value_channels = 0);

    std::size_t key_channels() const { return key.defined() ? key.dim(0) : 0; }
    std::size_t value_channels() const { return value.defined() ? value.dim(0) : 0; }
    void collect(const std::string& prefix, ParamList& out);
    FusionParams detached() const;
};

// C_v x C_k channel attention map, rows softmax-normalized over key channels.
Tensor attention_map(const Tensor& f_im, const Tensor& f_fl, const FusionParams& params);

// Fuses image and flow features of identical shape C_in x H x W. In none mode
// the image features are returned as-is and `f_fl` may be undefined.
Tensor fuse(const Tensor& f_im, const Tensor& f_fl, const FusionParams& params);

} // namespace flowvos
