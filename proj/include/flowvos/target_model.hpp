#pragma once

#include <span>
#include <vector>

#include "flowvos/fusion.hpp"
#include "flowvos/jacobian.hpp"

namespace flowvos {

struct TargetModelConfig {
    std::size_t feature_channels = 64; // l_3 channels
    std::size_t mid_channels = 32;
    std::size_t label_channels = 16;
    double lambda = 1e-2;
};

// Two-layer linear filter stacks learned online: a 1x1 conv followed by a
// 3x3 conv with nothing in between. The flow stack is absent when the model
// runs without a flow branch.
struct TargetFilters {
    Tensor image_first;  // C_mid x C_l3 x 1 x 1
    Tensor image_second; // D x C_mid x 3 x 3
    Tensor flow_first;
    Tensor flow_second;

    bool has_flow() const { return flow_first.defined(); }
    // Optimized tensors in a fixed order: image pair, then flow pair.
    std::vector<Tensor> tensors() const;
    static TargetFilters from_tensors(std::span<const Tensor> tensors);
    double squared_norm() const;
};

// Starting point for the online learner: seeded first layers, zero second
// layers (the zero/zero point is a saddle of the bilinear stack).
TargetFilters initial_filters(const TargetModelConfig& config, bool with_flow, Rng& rng);

Tensor apply_filter(const Tensor& features, const Tensor& first, const Tensor& second);

// f_tm = A_tm(T_tau1(l3 image), T_tau2(l3 flow)).
Tensor target_forward(const Tensor& feat_image, const Tensor& feat_flow, const TargetFilters& filters,
                      const FusionParams& fusion);

// One supervision sample for the online loss. Features are l_3 maps; the
// encoded label and weights come from the label encoder.
struct TargetSample {
    Tensor feat_image;
    Tensor feat_flow; // undefined without a flow branch
    Tensor encoded;
    Tensor weights;
    double sample_weight = 1.0;
};

// Stacked residual whose half squared norm is the online loss: per sample
// sqrt(s) * w .* (f_tm - e), then sqrt(lambda) * tau.
Tensor target_residual(std::span<const TargetSample> samples, std::span<const Tensor> filter_tensors,
                       const FusionParams& fusion, double lambda);

ResidualFn target_residual_fn(std::vector<TargetSample> samples, FusionParams fusion, double lambda);

struct TargetLoss {
    Tensor residual;
    double loss = 0.0;
};
TargetLoss residual_and_loss(std::span<const TargetSample> samples, const TargetFilters& filters,
                             const FusionParams& fusion, double lambda);

} // namespace flowvos
