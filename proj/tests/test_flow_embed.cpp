#include <gtest/gtest.h>

#include <cmath>

#include "flowvos/flow_embed.hpp"

using namespace flowvos;

namespace {

FlowField single(double u, double v) {
    FlowField f = FlowField::zeros(1, 1);
    f.u[0] = u;
    f.v[0] = v;
    return f;
}

FlowField random_field(std::size_t w, std::size_t h, Rng& rng, double range) {
    FlowField f = FlowField::zeros(w, h);
    for (std::size_t i = 0; i < w * h; ++i) {
        f.u[i] = rng.uniform(-range, range);
        f.v[i] = rng.uniform(-range, range);
    }
    return f;
}

} // namespace

TEST(FlowRotation, ColumnStructure) {
    const auto& r = flow_rotation();
    auto col_dot = [&](int a, int b) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) s += r[i][a] * r[i][b];
        return s;
    };
    EXPECT_NEAR(col_dot(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(col_dot(1, 1), 1.0, 1e-12);
    EXPECT_NEAR(col_dot(0, 1), 0.0, 1e-12);
    EXPECT_NEAR(col_dot(2, 2), 2.0, 1e-12);
    EXPECT_NEAR(col_dot(0, 2), 0.0, 1e-12);
    EXPECT_NEAR(col_dot(1, 2), 0.0, 1e-12);
    const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                       r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                       r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    EXPECT_NEAR(det, std::sqrt(2.0), 1e-12);
}

TEST(EmbedFlow, WorkedExamples) {
    Tensor z = embed_flow(single(0, 0));
    for (double v : z.values()) EXPECT_EQ(v, 0.0);

    Tensor a = embed_flow(single(1, 0));
    EXPECT_NEAR(a[0], 1.6052, 1e-4);
    EXPECT_NEAR(a[1], 0.6052, 1e-4);
    EXPECT_NEAR(a[2], 0.2391, 1e-4);

    Tensor b = embed_flow(single(0, -2));
    EXPECT_NEAR(b[0], 2.0556, 1e-4);
    EXPECT_NEAR(b[1], 0.0556, 1e-4);
    // Exact value is (2 + 2 sqrt 2) / sqrt 3 = 2.787694; the commonly quoted 2.7878 is off in the last digit.
    EXPECT_NEAR(b[2], (2.0 + 2.0 * std::sqrt(2.0)) / std::sqrt(3.0), 1e-12);
    EXPECT_NEAR(b[2], 2.7878, 2e-4);
    EXPECT_NEAR(std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]), 2 * std::sqrt(3.0), 1e-9);
}

TEST(EmbedFlow, NonnegativityAndNormLaw) {
    Rng rng(4);
    FlowField f = random_field(50, 40, rng, 100.0);
    Tensor e = embed_flow(f);
    const std::size_t n = 50 * 40;
    for (std::size_t i = 0; i < n; ++i) {
        const double m = std::hypot(f.u[i], f.v[i]);
        double norm2 = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_GE(e[c * n + i], -1e-9);
            norm2 += e[c * n + i] * e[c * n + i];
        }
        EXPECT_NEAR(std::sqrt(norm2), std::sqrt(3.0) * m, 1e-9);
    }
}

TEST(EmbedFlow, AntiparallelFlowTouchesZero) {
    // Row 3 of R has (x, y) part (-1, -1)/sqrt(3); flow along (1, 1) makes it vanish.
    Tensor e = embed_flow(single(3.0, 3.0));
    EXPECT_NEAR(e[2], 0.0, 1e-12);
}

TEST(EmbedFlow, DoublingFlowDoublesEmbedding) {
    Rng rng(8);
    FlowField f = random_field(7, 5, rng, 10.0);
    FlowField g = f;
    for (auto& x : g.u) x *= 2;
    for (auto& x : g.v) x *= 2;
    Tensor a = embed_flow(f), b = embed_flow(g);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(b[i], 2 * a[i]);
}

TEST(EmbedFlow, PrescaleBreaksTheNormLaw) {
    Tensor e = embed_flow(single(1, 0), {.prescale = true});
    const double norm = std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]);
    EXPECT_NEAR(norm, std::sqrt(5.0), 1e-12);
}

TEST(EmbedFlow, NonFiniteInputNamesThePixel) {
    FlowField f = FlowField::zeros(4, 3);
    f.v[2 * 4 + 1] = std::nan("");
    try {
        embed_flow(f);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("x=1, y=2"), std::string::npos) << e.what();
    }
}

TEST(MagnitudeChannel, Examples) {
    EXPECT_EQ(magnitude_channel(single(3, 4))[0], 5.0);
    EXPECT_EQ(magnitude_channel(single(0, 0))[0], 0.0);
    Rng rng(2);
    FlowField f = random_field(6, 6, rng, 5.0);
    Tensor m = magnitude_channel(f);
    EXPECT_EQ(m.shape(), (Shape{1, 6, 6}));
    for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(m[i], std::sqrt(f.u[i] * f.u[i] + f.v[i] * f.v[i]), 1e-12);
}
