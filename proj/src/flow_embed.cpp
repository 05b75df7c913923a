#include "flowvos/flow_embed.hpp"

#include <cmath>
#include <string>

namespace flowvos {

FlowField FlowField::zeros(std::size_t width, std::size_t height) {
    FlowField f;
    f.width = width;
    f.height = height;
    f.u.assign(width * height, 0.0);
    f.v.assign(width * height, 0.0);
    return f;
}

void FlowField::validate() const {
    if (width == 0 || height == 0) throw ShapeError("flow field has zero extent");
    if (u.size() != width * height || v.size() != width * height) {
        throw ShapeError("flow field buffers do not match " + std::to_string(width) + "x" +
                         std::to_string(height));
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (!std::isfinite(u[i]) || !std::isfinite(v[i])) {
            throw NumericalError("non-finite flow at pixel (x=" + std::to_string(i % width) +
                                 ", y=" + std::to_string(i / width) + ")");
        }
    }
}

const Matrix3& flow_rotation() {
    static const Matrix3 r = [] {
        const double s3 = std::sqrt(3.0);
        const double a = 1.0 / (2.0 * s3);
        const double c = std::sqrt(2.0) / s3;
        return Matrix3{{{a + 0.5, a - 0.5, c}, {a - 0.5, a + 0.5, c}, {-1.0 / s3, -1.0 / s3, c}}};
    }();
    return r;
}

Tensor embed_flow(const FlowField& flow, const FlowEmbedOptions& options) {
    flow.validate();
    const auto& r = flow_rotation();
    const std::size_t n = flow.width * flow.height;
    const double mscale = options.prescale ? std::sqrt(2.0) : 1.0;
    std::vector<double> out(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = flow.u[i];
        const double v = flow.v[i];
        const double m = mscale * std::hypot(u, v);
        for (std::size_t row = 0; row < 3; ++row) out[row * n + i] = r[row][0] * u + r[row][1] * v + r[row][2] * m;
    }
    return Tensor({3, flow.height, flow.width}, std::move(out));
}

Tensor magnitude_channel(const FlowField& flow) {
    flow.validate();
    const std::size_t n = flow.width * flow.height;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::hypot(flow.u[i], flow.v[i]);
    return Tensor({1, flow.height, flow.width}, std::move(out));
}

} // namespace flowvos
