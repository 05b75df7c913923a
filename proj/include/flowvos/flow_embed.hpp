#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "flowvos/tensor.hpp"

namespace flowvos {

// Dense displacement field (pixels) from frame `source` to frame `target`.
struct FlowField {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> u; // row-major, height x width
    std::vector<double> v;
    int source = 0;
    int target = 1;

    static FlowField zeros(std::size_t width, std::size_t height);

    double u_at(std::size_t x, std::size_t y) const { return u[y * width + x]; }
    double v_at(std::size_t x, std::size_t y) const { return v[y * width + x]; }

    // Throws NumericalError naming the first non-finite pixel.
    void validate() const;
};

using Matrix3 = std::array<std::array<double, 3>, 3>;

// Cone rotation applied to (u, v, |f|). Its third column carries the sqrt(2)
// magnitude scale: R = Q * diag(1, 1, sqrt(2)) with Q a proper rotation.
const Matrix3& flow_rotation();

struct FlowEmbedOptions {
    // Multiply the magnitude by sqrt(2) before applying R. R already carries
    // that factor, so enabling this scales the magnitude twice.
    bool prescale = false;
};

// 3 x H x W all-nonnegative flow representation.
Tensor embed_flow(const FlowField& flow, const FlowEmbedOptions& options = {});

// 1 x H x W Euclidean flow magnitude.
Tensor magnitude_channel(const FlowField& flow);

} // namespace flowvos
