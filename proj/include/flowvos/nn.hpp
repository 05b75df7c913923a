#pragma once

#include <map>
#include <string>
#include <vector>

#include "flowvos/ops.hpp"
#include "flowvos/rng.hpp"
#include "flowvos/tensor.hpp"

namespace flowvos {

// Named handle onto a parameter slot. Optimizers replace the tensor in the
// slot; they never write into an existing tensor.
struct ParamRef {
    std::string name;
    Tensor* slot;
};
using ParamList = std::vector<ParamRef>;

// He-initialized kernel: N(0, 2 / fan_in).
Tensor he_kernel(std::size_t out_channels, std::size_t in_channels, std::size_t k, Rng& rng);

struct ConvLayer {
    Tensor weight; // C_out x C_in x k x k
    Tensor bias;   // C_out, undefined for bias-free layers
    std::size_t stride = 1;
    std::size_t padding = 0;

    static ConvLayer he(std::size_t out_channels, std::size_t in_channels, std::size_t k, Rng& rng,
                        bool with_bias = true);

    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out);
    std::size_t out_channels() const { return weight.dim(0); }
};

// Replaces every parameter in `params` with a gradient-tracking leaf of the
// same value, so a fresh tape can differentiate with respect to them.
void make_leaves(const ParamList& params);
// Replaces every parameter with an untracked copy.
void make_constants(const ParamList& params);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
  public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // One update from the gradients currently held by the parameters.
    // Parameters without a gradient are left unchanged.
    void step(const ParamList& params);
    std::size_t steps() const { return steps_; }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig config_;
    std::size_t steps_ = 0;
    std::map<std::string, Moments> moments_;
};

} // namespace flowvos
