#pragma once

#include <functional>
#include <span>
#include <vector>

#include "flowvos/tensor.hpp"

namespace flowvos {

// Maps a list of parameter tensors to a residual tensor using recorded ops.
using ResidualFn = std::function<Tensor(std::span<const Tensor> params)>;

std::vector<double> flatten_values(std::span<const Tensor> tensors);
// Splits `flat` into tensors shaped like `like` (no gradient tracking).
std::vector<Tensor> unflatten_like(std::span<const double> flat, std::span<const Tensor> like);
std::size_t total_numel(std::span<const Tensor> tensors);

// A residual function recorded once at a parameter point. Jacobian products
// are evaluated against the recorded tape, so J is never materialized.
class Linearization {
  public:
    Linearization(const ResidualFn& fn, std::span<const Tensor> params);

    const Tensor& residual() const { return residual_; }
    std::size_t param_size() const { return param_size_; }
    std::size_t residual_size() const { return residual_.numel(); }

    // J * v (v flat over all parameters).
    std::vector<double> jvp(std::span<const double> v);
    // J^T * u (u flat over the residual).
    std::vector<double> vjp(std::span<const double> u);

  private:
    Tape tape_;
    std::vector<Tensor> leaves_;
    Tensor residual_;
    std::size_t param_size_ = 0;
};

} // namespace flowvos
