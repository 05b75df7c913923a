#include "flowvos/jacobian.hpp"

#include <string>

namespace flowvos {

std::size_t total_numel(std::span<const Tensor> tensors) {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
}

std::vector<double> flatten_values(std::span<const Tensor> tensors) {
    std::vector<double> flat;
    flat.reserve(total_numel(tensors));
    for (const auto& t : tensors) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
}

std::vector<Tensor> unflatten_like(std::span<const double> flat, std::span<const Tensor> like) {
    if (flat.size() != total_numel(like)) {
        throw ShapeError("unflatten: " + std::to_string(flat.size()) + " values for " +
                         std::to_string(total_numel(like)) + " parameters");
    }
    std::vector<Tensor> out;
    out.reserve(like.size());
    std::size_t off = 0;
    for (const auto& t : like) {
        out.emplace_back(t.shape(), std::vector<double>(flat.begin() + off, flat.begin() + off + t.numel()));
        off += t.numel();
    }
    return out;
}

Linearization::Linearization(const ResidualFn& fn, std::span<const Tensor> params) {
    leaves_.reserve(params.size());
    for (const auto& p : params) leaves_.push_back(p.as_leaf());
    param_size_ = total_numel(leaves_);
    TapeScope scope(tape_);
    residual_ = fn(leaves_);
    if (!residual_.requires_grad()) {
        throw std::logic_error("residual does not depend on the parameters");
    }
}

std::vector<double> Linearization::jvp(std::span<const double> v) {
    if (v.size() != param_size_) {
        throw ShapeError("jvp: vector has " + std::to_string(v.size()) + " entries, parameters " +
                         std::to_string(param_size_));
    }
    std::vector<std::vector<double>> tangents;
    tangents.reserve(leaves_.size());
    std::size_t off = 0;
    for (const auto& l : leaves_) {
        tangents.emplace_back(v.begin() + off, v.begin() + off + l.numel());
        off += l.numel();
    }
    tape_.jvp(leaves_, tangents);
    if (!residual_.has_tangent()) return std::vector<double>(residual_.numel(), 0.0);
    return residual_.impl()->tangent;
}

std::vector<double> Linearization::vjp(std::span<const double> u) {
    if (u.size() != residual_.numel()) {
        throw ShapeError("vjp: vector has " + std::to_string(u.size()) + " entries, residual " +
                         std::to_string(residual_.numel()));
    }
    tape_.zero_grad();
    tape_.vjp(residual_, u);
    std::vector<double> out;
    out.reserve(param_size_);
    for (const auto& l : leaves_) {
        if (l.has_grad()) {
            out.insert(out.end(), l.grad_values().begin(), l.grad_values().end());
        } else {
            out.insert(out.end(), l.numel(), 0.0);
        }
    }
    return out;
}

} // namespace flowvos
