#pragma once

#include <array>
#include <cstddef>

#include "flowvos/nn.hpp"

namespace flowvos {

// Feature maps l_1..l_4; l_k has stride 2^k relative to the input.
using Pyramid = std::array<Tensor, 4>;

enum class Branch { image, flow };

struct BackboneConfig {
    std::array<std::size_t, 4> channels{16, 32, 64, 64};
    std::size_t input_channels = 3;
};

// Four stages of 3x3 conv -> relu -> 2x2 average pool.
class FeatureExtractor {
  public:
    FeatureExtractor() = default;
    FeatureExtractor(const BackboneConfig& config, Rng& rng);

    Pyramid extract(const Tensor& x) const;
    // Only the layers needed for l_3 (the target-model input).
    Tensor extract_l3(const Tensor& x) const;

    void collect(const std::string& prefix, ParamList& out);
    const BackboneConfig& config() const { return config_; }

  private:
    BackboneConfig config_;
    std::array<ConvLayer, 4> stages_;
};

// Separate image and flow extractors with identical architecture.
struct Backbones {
    FeatureExtractor image;
    FeatureExtractor flow;

    Backbones() = default;
    Backbones(const BackboneConfig& config, Rng& rng);

    Pyramid extract(const Tensor& x, Branch branch) const;
    void collect(ParamList& out);
};

// Spatial size divisor required by the extractors.
inline constexpr std::size_t kInputMultiple = 16;
// Stride of the target-model resolution (l_3).
inline constexpr std::size_t kTargetStride = 8;

struct LabelEncoding {
    Tensor encoded; // D x h x w, unconstrained
    Tensor weights; // D x h x w, nonnegative
};

struct LabelEncoderConfig {
    std::size_t label_channels = 16;
    std::array<std::size_t, 3> hidden{8, 16, 16};
};

// Label encoder (theta_1) and importance-weight generator (theta_2): two
// parameter sets over the same architecture. Weights are the square of the
// generator's final pre-activation.
class LabelEncoder {
  public:
    LabelEncoder() = default;
    LabelEncoder(const LabelEncoderConfig& config, Rng& rng);

    LabelEncoding encode(const Tensor& mask) const;
    void collect(ParamList& out);
    std::size_t label_channels() const { return config_.label_channels; }

  private:
    struct Stack {
        std::array<ConvLayer, 4> layers;
        Tensor operator()(const Tensor& x) const;
    };
    LabelEncoderConfig config_;
    Stack label_;
    Stack weight_;
};

} // namespace flowvos
