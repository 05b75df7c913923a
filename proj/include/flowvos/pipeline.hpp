#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowvos/data_io.hpp"
#include "flowvos/learner.hpp"
#include "flowvos/model.hpp"

namespace flowvos {

// Zero-pads a C x H x W tensor on the bottom and right to multiples of
// kInputMultiple.
Tensor pad_to_multiple(const Tensor& x);
// Top-left H x W window of a C x H' x W' tensor.
Tensor crop(const Tensor& x, std::size_t height, std::size_t width);

// Embedded flow divided by the configured nominal displacement.
Tensor flow_input(const FlowField& flow, const RunConfig& config);

// Image and flow pyramids of one frame. `flow` holds undefined tensors when
// the model has no flow branch.
struct Features {
    Pyramid image;
    Pyramid flow;
};

// `image` and `flow` are padded 3 x H x W inputs; `flow` is ignored (and may
// be undefined) without a flow branch.
Features extract_features(const Model& model, const Tensor& image, const Tensor& flow);

// Online-loss sample for a padded 1 x H x W mask.
TargetSample make_target_sample(const Model& model, const Features& features, const Tensor& mask);

// Padded-resolution logits (1 x H x W) for one object.
Tensor predict_logits(const Model& model, const Features& features, const TargetFilters& filters);

// Fits fresh target filters to a single annotated sample.
TargetFilters fit_target_model(const Model& model, const TargetSample& sample, Rng& rng, std::size_t iterations);

// Per-pixel argmax over object probabilities; background where every
// probability is at most `threshold`.
LabelImage merge_objects(const std::vector<Tensor>& probabilities, double threshold = 0.5);

struct SegResult {
    std::size_t frame = 0;
    std::vector<Tensor> probabilities; // per object, 1 x H x W in [0, 1]
    LabelImage labels;
    double milliseconds = 0.0;
    bool updated = false;
    std::vector<TargetFilters> filters; // per object, after this frame
};

// Frame 0 returns the annotation; later frames are predicted in order using
// only frames up to the current one.
std::vector<SegResult> infer_sequence(const Model& model, const Sequence& sequence);

// Random flip plus affine warp about the image centre, shared by every frame
// of one training sample.
struct Augmentation {
    double a11 = 1.0, a12 = 0.0, a21 = 0.0, a22 = 1.0; // linear part (flip included)
    double tx = 0.0, ty = 0.0;

    bool is_identity() const;
    static Augmentation random(Rng& rng);
    static Augmentation horizontal_flip();
};

Tensor warp_image(const Tensor& image, const Augmentation& aug);  // bilinear, zero outside
Tensor warp_mask(const Tensor& mask, const Augmentation& aug);    // nearest
FlowField warp_flow(const FlowField& flow, const Augmentation& aug); // grid and vectors

struct TrainingSample {
    std::size_t sequence = 0;
    std::vector<std::size_t> frames; // sorted; frames[0] is the reference
    int object = 1;
    Augmentation augmentation;
};

struct SampleLoss {
    Tensor total; // mean over the test frames
    std::vector<double> per_frame;
};

// Loss of one training sample. With an active tape every offline parameter
// that influences the test frames is recorded; the online filters are fitted
// without recording (stop-gradient).
SampleLoss sample_loss(const Model& model, const std::vector<Sequence>& data, const TrainingSample& sample, Rng& rng);

// Steepest-descent steps on the single-sample online loss, each with the exact
// step length of the Gauss-Newton model. path[0] is the start point.
struct UnrolledFit {
    std::vector<TargetFilters> path;
    std::vector<double> step_sizes;
};
UnrolledFit unroll_steepest_descent(const TargetSample& sample, const TargetFilters& start,
                                    const FusionParams& fusion, double lambda, std::size_t steps);

// Cotangents of a downstream loss with respect to the label encoding, given
// its cotangent on the final filters. Step sizes are held fixed and the
// filter-to-filter Jacobians use the Gauss-Newton Hessian.
struct EncodingCotangent {
    Tensor encoded;
    Tensor weights;
};
EncodingCotangent unrolled_cotangent(const TargetSample& sample, const UnrolledFit& fit, const FusionParams& fusion,
                                     double lambda, std::span<const double> final_cotangent);

struct TrainReport {
    std::vector<double> train_loss;   // mean per epoch
    std::vector<double> holdout_loss; // [0] before training, then per epoch
    std::size_t train_sequences = 0;
    std::size_t holdout_sequences = 0;
};

using TrainLog = std::function<void(const std::string&)>;

TrainReport train_offline(Model& model, const std::vector<Sequence>& data, const TrainLog& log = {});

} // namespace flowvos
