#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "flowvos/fusion.hpp"
#include "oracles.hpp"

using namespace flowvos;

namespace {

// Applies the same pixel permutation to every channel of a C x H x W tensor.
Tensor permute_pixels(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = x[ch * hw + perm[i]];
    return Tensor(x.shape(), out);
}

} // namespace

TEST(Fusion, ParseModes) {
    EXPECT_EQ(parse_fusion_mode("attention"), FusionMode::attention);
    EXPECT_EQ(to_string(parse_fusion_mode("concat")), "concat");
    EXPECT_THROW(parse_fusion_mode("sum"), std::invalid_argument);
}

TEST(Fusion, DefaultProjectionSizes) {
    Rng rng(1);
    auto p = FusionParams::make(FusionMode::attention, 16, rng);
    EXPECT_EQ(p.key_channels(), 8u);
    EXPECT_EQ(p.value_channels(), 8u);
    EXPECT_EQ(p.query.dim(0), p.key.dim(0));
    auto small = FusionParams::make(FusionMode::attention, 6, rng);
    EXPECT_EQ(small.key_channels(), 4u);
}

TEST(Fusion, AttentionRowsSumToOne) {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        auto p = FusionParams::make(FusionMode::attention, 8, rng, 3, 5);
        Tensor f_im = Tensor::randn({8, 4, 5}, rng), f_fl = Tensor::randn({8, 4, 5}, rng);
        Tensor m = attention_map(f_im, f_fl, p);
        ASSERT_EQ(m.shape(), (Shape{5, 3}));
        for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(m.at({r, 0}) + m.at({r, 1}) + m.at({r, 2}), 1.0, 1e-12);
    }
}

TEST(Fusion, ZeroOutputProjectionIsIdentity) {
    Rng rng(3);
    auto p = FusionParams::make(FusionMode::attention, 8, rng);
    p.output = Tensor::zeros(p.output.shape());
    Tensor f_im = Tensor::randn({8, 4, 4}, rng), f_fl = Tensor::randn({8, 4, 4}, rng);
    Tensor out = fuse(f_im, f_fl, p);
    for (std::size_t i = 0; i < out.numel(); ++i) ASSERT_EQ(out[i], f_im[i]);
}

TEST(Fusion, SpatialPermutationEquivariance) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto p = FusionParams::make(FusionMode::attention, 8, rng);
        Tensor f_im = Tensor::randn({8, 4, 4}, rng), f_fl = Tensor::randn({8, 4, 4}, rng);
        std::vector<std::size_t> perm(16);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 15; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        Tensor a = permute_pixels(fuse(f_im, f_fl, p), perm);
        Tensor b = fuse(permute_pixels(f_im, perm), permute_pixels(f_fl, perm), p);
        for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-10);
    }
}

TEST(Fusion, NoneModeReturnsImageFeatures) {
    Rng rng(5);
    auto p = FusionParams::make(FusionMode::none, 8, rng);
    Tensor f_im = Tensor::randn({8, 4, 4}, rng);
    EXPECT_TRUE(fuse(f_im, Tensor(), p).same_node(f_im));
    EXPECT_TRUE(fuse(f_im, Tensor::randn({8, 4, 4}, rng), p).same_node(f_im));
}

TEST(Fusion, ConcatMatchesManualMix) {
    Rng rng(6);
    auto p = FusionParams::make(FusionMode::concat, 3, rng);
    Tensor f_im = Tensor::randn({3, 2, 2}, rng), f_fl = Tensor::randn({3, 2, 2}, rng);
    Tensor out = fuse(f_im, f_fl, p);
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 4; ++i) {
            double ref = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                ref += p.mix.at({o, c, 0, 0}) * f_im[c * 4 + i];
                ref += p.mix.at({o, c + 3, 0, 0}) * f_fl[c * 4 + i];
            }
            EXPECT_NEAR(out[o * 4 + i], ref, 1e-12);
        }
}

TEST(Fusion, ShapePreservedAndMismatchRejected) {
    Rng rng(7);
    for (auto mode : {FusionMode::none, FusionMode::concat, FusionMode::attention}) {
        auto p = FusionParams::make(mode, 8, rng);
        Tensor f_im = Tensor::randn({8, 3, 5}, rng), f_fl = Tensor::randn({8, 3, 5}, rng);
        EXPECT_EQ(fuse(f_im, f_fl, p).shape(), f_im.shape());
        EXPECT_THROW(fuse(Tensor::randn({4, 3, 5}, rng), f_fl, p), ShapeError);
        if (mode != FusionMode::none) {
            EXPECT_THROW(fuse(f_im, Tensor::randn({8, 3, 4}, rng), p), ShapeError);
        }
    }
}

TEST(Fusion, GradientsReachAllProjections) {
    Rng rng(8);
    auto p = FusionParams::make(FusionMode::attention, 8, rng);
    ParamList params;
    p.collect("fusion", params);
    ASSERT_EQ(params.size(), 4u);
    make_leaves(params);
    Tensor f_im = Tensor::randn({8, 4, 4}, rng), f_fl = Tensor::randn({8, 4, 4}, rng);
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = sum(square(fuse(f_im, f_fl, p)));
    }
    tape.backward(loss);
    for (const auto& ref : params) {
        ASSERT_TRUE(ref.slot->has_grad()) << ref.name;
        double n = 0.0;
        for (double g : ref.slot->grad_values()) n += g * g;
        EXPECT_GT(n, 0.0) << ref.name;
    }
}

TEST(Fusion, AttentionGradientsMatchFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        auto base = FusionParams::make(FusionMode::attention, 6, rng);
        oracle::MultiFn f = [base](std::span<const Tensor> x) {
            FusionParams p = base;
            p.query = x[2];
            p.key = x[3];
            p.value = x[4];
            p.output = x[5];
            return fuse(x[0], x[1], p);
        };
        auto res = oracle::check_gradients(f,
                                           {Tensor::randn({6, 3, 3}, rng), Tensor::randn({6, 3, 3}, rng), base.query,
                                            base.key, base.value, base.output},
                                           rng);
        EXPECT_LT(res.max_rel_error, 1e-4);
    }
}
