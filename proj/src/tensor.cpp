#include "flowvos/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace flowvos {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->storage = std::make_shared<std::vector<double>>(std::move(values));
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
    }
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= impl_->shape[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
        flat = flat * impl_->shape[axis] + i;
        ++axis;
    }
    return impl_->data()[flat];
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->storage = impl_->storage;
    return Tensor(std::move(impl));
}

Tensor Tensor::as_leaf() const {
    auto t = detach();
    t.impl()->requires_grad = true;
    return t;
}

Tensor Tensor::grad() const {
    if (impl_->grad.empty()) return Tensor::zeros(impl_->shape);
    return Tensor(impl_->shape, impl_->grad);
}

Tensor Tensor::tangent() const {
    if (impl_->tangent.empty()) return Tensor::zeros(impl_->shape);
    return Tensor(impl_->shape, impl_->tangent);
}

// ---------------------------------------------------------------------------

void Tape::record(const Tensor& output, std::vector<Tensor> inputs, Rule backward, Rule tangent) {
    Node node;
    node.output = output.handle();
    node.inputs.reserve(inputs.size());
    node.raw_inputs.reserve(inputs.size());
    for (auto& t : inputs) {
        node.inputs.push_back(t.handle());
        node.raw_inputs.push_back(t.impl());
    }
    node.backward = std::move(backward);
    node.tangent = std::move(tangent);
    nodes_.push_back(std::move(node));
}

void Tape::clear_intermediate_grads() {
    for (auto& n : nodes_) n.output->grad.clear();
}

void Tape::sweep_backward(TensorImpl* start) {
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [start](const Node& n) { return n.output.get() == start; });
    for (; it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->backward(*it->output, it->raw_inputs);
    }
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const std::vector<double> seed{1.0};
    vjp(loss, seed);
}

void Tape::vjp(const Tensor& output, std::span<const double> seed) {
    if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
    if (seed.size() != output.numel()) {
        throw ShapeError("vjp seed has " + std::to_string(seed.size()) + " entries, output " +
                         shape_str(output.shape()));
    }
    clear_intermediate_grads();
    auto* out = output.impl();
    const bool on_tape = std::any_of(nodes_.begin(), nodes_.end(),
                                     [out](const Node& n) { return n.output.get() == out; });
    if (!on_tape) throw std::logic_error("vjp output was not produced on this tape");
    out->grad.assign(seed.begin(), seed.end());
    sweep_backward(out);
}

void Tape::jvp(std::span<const Tensor> leaves, std::span<const std::vector<double>> tangents) {
    if (leaves.size() != tangents.size()) throw ShapeError("jvp: leaves and tangents differ in count");
    for (auto& n : nodes_) {
        n.output->tangent.clear();
        for (auto* in : n.raw_inputs) in->tangent.clear();
    }
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        if (tangents[i].size() != leaves[i].numel()) {
            throw ShapeError("jvp tangent " + std::to_string(i) + " has " +
                             std::to_string(tangents[i].size()) + " entries, leaf " +
                             shape_str(leaves[i].shape()));
        }
        leaves[i].impl()->tangent = tangents[i];
    }
    for (auto& n : nodes_) n.tangent(*n.output, n.raw_inputs);
}

void Tape::zero_grad() {
    for (auto& n : nodes_) {
        n.output->grad.clear();
        for (auto* in : n.raw_inputs) in->grad.clear();
    }
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = previous_; }

} // namespace flowvos
