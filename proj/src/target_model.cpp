#include "flowvos/target_model.hpp"

#include <cmath>
#include <stdexcept>

namespace flowvos {

std::vector<Tensor> TargetFilters::tensors() const {
    std::vector<Tensor> out{image_first, image_second};
    if (has_flow()) {
        out.push_back(flow_first);
        out.push_back(flow_second);
    }
    return out;
}

TargetFilters TargetFilters::from_tensors(std::span<const Tensor> tensors) {
    if (tensors.size() != 2 && tensors.size() != 4) {
        throw std::invalid_argument("target filters need 2 or 4 tensors, got " + std::to_string(tensors.size()));
    }
    TargetFilters f;
    f.image_first = tensors[0];
    f.image_second = tensors[1];
    if (tensors.size() == 4) {
        f.flow_first = tensors[2];
        f.flow_second = tensors[3];
    }
    return f;
}

double TargetFilters::squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors())
        for (double v : t.values()) s += v * v;
    return s;
}

TargetFilters initial_filters(const TargetModelConfig& config, bool with_flow, Rng& rng) {
    TargetFilters f;
    f.image_first = he_kernel(config.mid_channels, config.feature_channels, 1, rng);
    f.image_second = Tensor::zeros({config.label_channels, config.mid_channels, 3, 3});
    if (with_flow) {
        f.flow_first = he_kernel(config.mid_channels, config.feature_channels, 1, rng);
        f.flow_second = Tensor::zeros({config.label_channels, config.mid_channels, 3, 3});
    }
    return f;
}

Tensor apply_filter(const Tensor& features, const Tensor& first, const Tensor& second) {
    return conv2d(conv2d(features, first, 1, 0), second, 1, 1);
}

Tensor target_forward(const Tensor& feat_image, const Tensor& feat_flow, const TargetFilters& filters,
                      const FusionParams& fusion) {
    Tensor f_x = apply_filter(feat_image, filters.image_first, filters.image_second);
    if (fusion.mode == FusionMode::none) return fuse(f_x, Tensor(), fusion);
    if (!filters.has_flow()) throw std::invalid_argument("target model: fusion needs flow filters");
    if (!feat_flow.defined()) throw ShapeError("target model: flow features missing");
    if (f_x.dim(0) != fusion.channels) {
        throw ShapeError("target model: filters emit " + std::to_string(f_x.dim(0)) +
                         " channels, fusion block expects " + std::to_string(fusion.channels));
    }
    Tensor f_f = apply_filter(feat_flow, filters.flow_first, filters.flow_second);
    return fuse(f_x, f_f, fusion);
}

Tensor target_residual(std::span<const TargetSample> samples, std::span<const Tensor> filter_tensors,
                       const FusionParams& fusion, double lambda) {
    if (samples.empty()) throw std::invalid_argument("target residual: empty sample set");
    if (lambda < 0.0) throw std::invalid_argument("target residual: lambda must be nonnegative");
    const TargetFilters filters = TargetFilters::from_tensors(filter_tensors);
    std::vector<Tensor> blocks;
    blocks.reserve(samples.size() + filter_tensors.size());
    for (const auto& s : samples) {
        if (s.sample_weight <= 0.0) throw std::invalid_argument("target residual: sample weight must be positive");
        Tensor f_tm = target_forward(s.feat_image, s.feat_flow, filters, fusion);
        if (f_tm.shape() != s.encoded.shape() || s.weights.shape() != s.encoded.shape()) {
            throw ShapeError("target residual: prediction " + shape_str(f_tm.shape()) + " vs label " +
                             shape_str(s.encoded.shape()));
        }
        Tensor r = mul(s.weights, sub(f_tm, s.encoded));
        if (s.sample_weight != 1.0) r = scale(r, std::sqrt(s.sample_weight));
        blocks.push_back(flatten(r));
    }
    if (lambda > 0.0) {
        const double root = std::sqrt(lambda);
        for (const auto& t : filter_tensors) blocks.push_back(scale(flatten(t), root));
    }
    return concat(blocks);
}

ResidualFn target_residual_fn(std::vector<TargetSample> samples, FusionParams fusion, double lambda) {
    fusion = fusion.detached();
    for (auto& s : samples) {
        s.feat_image = s.feat_image.detach();
        if (s.feat_flow.defined()) s.feat_flow = s.feat_flow.detach();
        s.encoded = s.encoded.detach();
        s.weights = s.weights.detach();
    }
    return [samples = std::move(samples), fusion = std::move(fusion), lambda](std::span<const Tensor> params) {
        return target_residual(samples, params, fusion, lambda);
    };
}

TargetLoss residual_and_loss(std::span<const TargetSample> samples, const TargetFilters& filters,
                             const FusionParams& fusion, double lambda) {
    const auto tensors = filters.tensors();
    TargetLoss out;
    out.residual = target_residual(samples, tensors, fusion, lambda);
    double s = 0.0;
    for (double v : out.residual.values()) s += v * v;
    out.loss = 0.5 * s;
    return out;
}

} // namespace flowvos
