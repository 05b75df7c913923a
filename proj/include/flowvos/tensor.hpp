#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowvos/rng.hpp"

namespace flowvos {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<double>> storage;
    std::vector<double> grad;    // empty until the first backward touches it
    std::vector<double> tangent; // empty means zero tangent
    bool requires_grad = false;

    double* data() { return storage->data(); }
    const double* data() const { return storage->data(); }
    std::size_t size() const { return storage->size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(storage->size(), 0.0);
    }
};

// Dense row-major f64 array. Copies are cheap handles onto the same node; the
// values are never modified after construction.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->size(); }

    std::span<const double> values() const { return {impl_->data(), impl_->size()}; }
    const double* data() const { return impl_->data(); }
    double item() const;
    double operator[](std::size_t flat) const { return impl_->data()[flat]; }
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return impl_->requires_grad; }
    // Same values, no gradient tracking.
    Tensor detach() const;
    // Fresh leaf sharing the values, with gradient tracking enabled.
    Tensor as_leaf() const;

    bool has_grad() const { return !impl_->grad.empty(); }
    Tensor grad() const;
    std::span<const double> grad_values() const { return impl_->grad; }
    void zero_grad() const { impl_->grad.clear(); }

    bool has_tangent() const { return !impl_->tangent.empty(); }
    Tensor tangent() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
    bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable operations. Operations record themselves
// on the tape made active by a TapeScope whenever one of their inputs
// requires a gradient; with no active tape nothing is recorded.
class Tape {
  public:
    using Rule = std::function<void(TensorImpl& out, std::span<TensorImpl* const> inputs)>;

    struct Node {
        std::shared_ptr<TensorImpl> output;
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::vector<TensorImpl*> raw_inputs;
        Rule backward; // reads output.grad, accumulates into inputs[i].grad
        Rule tangent;  // reads inputs[i].tangent, writes output.tangent
    };

    void record(const Tensor& output, std::vector<Tensor> inputs, Rule backward, Rule tangent);
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    // Reverse sweep seeded with d(loss)/d(loss) = 1. Leaf gradients accumulate.
    void backward(const Tensor& loss);
    // Reverse sweep seeded with `seed` on `output` (vector-Jacobian product).
    void vjp(const Tensor& output, std::span<const double> seed);
    // Forward tangent sweep given tangents of the listed leaves (Jacobian-vector
    // product); other inputs carry zero tangent. Result lands in each node's tangent.
    void jvp(std::span<const Tensor> leaves, std::span<const std::vector<double>> tangents);
    // Clears gradients of every tensor the tape references, leaves included.
    void zero_grad();

  private:
    void clear_intermediate_grads();
    void sweep_backward(TensorImpl* start);

    std::vector<Node> nodes_;
};

Tape* active_tape();

class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* previous_;
};

// Suspends recording for the lifetime of the guard.
class NoTapeScope {
  public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

  private:
    Tape* previous_;
};

} // namespace flowvos
