#include <gtest/gtest.h>

#include <cmath>

#include "flowvos/metrics.hpp"
#include "flowvos/pipeline.hpp"

using namespace flowvos;

namespace {

RunConfig seeded(std::uint64_t seed, FusionMode mode = FusionMode::attention) {
    RunConfig c;
    c.seed = seed;
    c.has_seed = true;
    c.fusion_mode = mode;
    return c;
}

Sequence scene(std::uint64_t seed, std::size_t frames, std::size_t objects = 1, bool distractors = false) {
    SynthScene s;
    s.seed = seed;
    s.frames = frames;
    s.objects = objects;
    s.distractors = distractors;
    return generate_synthetic(s, "scene" + std::to_string(seed));
}

void expect_identical(const SegResult& a, const SegResult& b) {
    ASSERT_EQ(a.probabilities.size(), b.probabilities.size());
    for (std::size_t k = 0; k < a.probabilities.size(); ++k) {
        for (std::size_t i = 0; i < a.probabilities[k].numel(); ++i) {
            ASSERT_EQ(a.probabilities[k][i], b.probabilities[k][i]) << "frame " << a.frame << " object " << k;
        }
    }
    EXPECT_EQ(a.labels.labels, b.labels.labels);
}

double mask_iou(const LabelImage& a, const LabelImage& b) { return jaccard(a, b); }

LabelImage flip_labels(const LabelImage& in) {
    LabelImage out = in;
    for (std::size_t y = 0; y < in.height; ++y)
        for (std::size_t x = 0; x < in.width; ++x) out.labels[y * in.width + x] = in.at(in.width - 1 - x, y);
    return out;
}

Sequence flip_sequence(const Sequence& seq) {
    Sequence out = seq;
    const std::size_t w = seq.meta.width, h = seq.meta.height;
    for (auto& img : out.frames) {
        const RgbImage src = img;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) img.data[(y * w + x) * 3 + c] = src.data[(y * w + (w - 1 - x)) * 3 + c];
    }
    for (auto& f : out.flows) {
        const FlowField src = f;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                f.u[y * w + x] = -src.u[y * w + (w - 1 - x)];
                f.v[y * w + x] = src.v[y * w + (w - 1 - x)];
            }
        }
    }
    for (auto& m : out.masks)
        if (m) m = flip_labels(*m);
    return out;
}

// Every second sequence is static so that motion is not the only cue.
std::vector<Sequence> training_suite(std::size_t count, std::uint64_t base_seed) {
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < count; ++i) {
        SynthScene s;
        s.seed = base_seed + i;
        s.frames = 6;
        s.static_scene = i % 2 == 1;
        out.push_back(generate_synthetic(s, "train" + std::to_string(s.seed)));
    }
    return out;
}

} // namespace

TEST(Padding, PadsToMultipleAndCropsBack) {
    Rng rng(1);
    Tensor x = Tensor::randn({3, 20, 30}, rng);
    Tensor p = pad_to_multiple(x);
    EXPECT_EQ(p.shape(), (Shape{3, 32, 32}));
    EXPECT_EQ(p.at({2, 19, 29}), x.at({2, 19, 29}));
    EXPECT_EQ(p.at({1, 25, 3}), 0.0);
    EXPECT_EQ(p.at({0, 4, 31}), 0.0);
    Tensor c = crop(p, 20, 30);
    ASSERT_EQ(c.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(c[i], x[i]);
    Tensor aligned = Tensor::zeros({1, 16, 48});
    EXPECT_TRUE(pad_to_multiple(aligned).same_node(aligned));
    EXPECT_THROW(crop(p, 40, 10), ShapeError);
}

TEST(Merge, ArgmaxWithBackgroundThreshold) {
    Tensor a({1, 1, 4}, {0.9, 0.2, 0.6, 0.5});
    Tensor b({1, 1, 4}, {0.8, 0.4, 0.7, 0.5});
    const LabelImage m = merge_objects({a, b});
    EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{1, 0, 2, 0}));
    EXPECT_THROW(merge_objects({}), std::invalid_argument);
    EXPECT_THROW(merge_objects({a, Tensor::zeros({1, 2, 2})}), ShapeError);
}

TEST(Augmentation, HorizontalFlipMirrorsPixelsAndNegatesU) {
    Rng rng(3);
    Tensor img = Tensor::uniform({3, 6, 8}, rng, 0.0, 1.0);
    const Augmentation flip = Augmentation::horizontal_flip();
    Tensor out = warp_image(img, flip);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(out.at({c, y, x}), img.at({c, y, 7 - x}));

    FlowField f = FlowField::zeros(8, 6);
    for (std::size_t i = 0; i < f.u.size(); ++i) {
        f.u[i] = rng.normal();
        f.v[i] = rng.normal();
    }
    const FlowField g = warp_flow(f, flip);
    for (std::size_t y = 0; y < 6; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
            EXPECT_EQ(g.u_at(x, y), -f.u_at(7 - x, y));
            EXPECT_EQ(g.v_at(x, y), f.v_at(7 - x, y));
        }
    }
    EXPECT_TRUE(Augmentation{}.is_identity());
    EXPECT_FALSE(flip.is_identity());
}

TEST(Augmentation, AffineWarpTransformsFlowVectorsByLinearPart) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const Augmentation a = Augmentation::random(rng);
        FlowField f = FlowField::zeros(32, 32);
        const double du = rng.uniform(-3, 3), dv = rng.uniform(-3, 3);
        std::fill(f.u.begin(), f.u.end(), du);
        std::fill(f.v.begin(), f.v.end(), dv);
        const FlowField g = warp_flow(f, a);
        // Interior pixels sample the constant field entirely from inside.
        for (std::size_t y = 12; y < 20; ++y) {
            for (std::size_t x = 12; x < 20; ++x) {
                EXPECT_NEAR(g.u_at(x, y), a.a11 * du + a.a12 * dv, 1e-12);
                EXPECT_NEAR(g.v_at(x, y), a.a21 * du + a.a22 * dv, 1e-12);
            }
        }
    }
}

TEST(Augmentation, WarpedMaskFollowsWarpedFlow) {
    // A translating square: a warped frame-0 mask pixel moved by the warped
    // flow must land inside the warped frame-1 mask.
    SynthScene s;
    s.frames = 2;
    SynthObject obj;
    obj.x = 24;
    obj.y = 22;
    obj.width = 14;
    obj.height = 14;
    obj.vx = 3;
    obj.vy = -2;
    s.scripted = {obj};
    const Sequence seq = generate_synthetic(s);
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const Augmentation a = Augmentation::random(rng);
        const Tensor m0 = warp_mask(object_mask(*seq.masks[0], 1), a);
        const Tensor m1 = warp_mask(object_mask(*seq.masks[1], 1), a);
        const FlowField f = warp_flow(seq.flows[1], a);
        std::size_t checked = 0, hits = 0;
        for (std::size_t y = 0; y < 64; ++y) {
            for (std::size_t x = 0; x < 64; ++x) {
                if (m0.at({0, y, x}) < 0.5) continue;
                const long tx = std::lround(static_cast<double>(x) + f.u_at(x, y));
                const long ty = std::lround(static_cast<double>(y) + f.v_at(x, y));
                if (tx < 0 || ty < 0 || tx >= 64 || ty >= 64) continue;
                ++checked;
                hits += m1.at({0, static_cast<std::size_t>(ty), static_cast<std::size_t>(tx)}) > 0.5;
            }
        }
        ASSERT_GT(checked, 50u);
        EXPECT_GE(static_cast<double>(hits) / static_cast<double>(checked), 0.9) << "trial " << trial;
    }
}

TEST(Inference, OneResultPerFrameAndFrameZeroIsTheAnnotation) {
    const Model model = Model::create(seeded(3));
    const Sequence seq = scene(21, 5, 2);
    const auto res = infer_sequence(model, seq);
    ASSERT_EQ(res.size(), 5u);
    EXPECT_EQ(res[0].labels.labels, seq.masks[0]->labels);
    for (const auto& r : res) {
        ASSERT_EQ(r.probabilities.size(), 2u);
        ASSERT_EQ(r.filters.size(), 2u);
        for (const auto& p : r.probabilities) {
            EXPECT_EQ(p.shape(), (Shape{1, 64, 64}));
            for (double v : p.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
        }
        for (auto v : r.labels.labels) EXPECT_LE(v, 2);
    }
}

TEST(Inference, RejectsBadInput) {
    const Model model = Model::create(seeded(3));
    Sequence seq = scene(21, 3);
    Sequence one = seq;
    one.frames.resize(1);
    EXPECT_THROW(infer_sequence(model, one), DataError);
    Sequence no_mask = seq;
    no_mask.masks[0].reset();
    EXPECT_THROW(infer_sequence(model, no_mask), DataError);
    Sequence no_flow = seq;
    no_flow.flows.resize(1);
    try {
        infer_sequence(model, no_flow);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("missing flow 1"), std::string::npos);
    }
    Sequence small_mask = seq;
    small_mask.masks[0] = LabelImage::blank(32, 32);
    EXPECT_THROW(infer_sequence(model, small_mask), DataError);
}

TEST(Inference, PaddingHandlesOddSizes) {
    const Model model = Model::create(seeded(4));
    SynthScene s;
    s.width = 50;
    s.height = 37;
    s.frames = 3;
    s.seed = 2;
    const auto res = infer_sequence(model, generate_synthetic(s));
    ASSERT_EQ(res.size(), 3u);
    EXPECT_EQ(res[2].labels.width, 50u);
    EXPECT_EQ(res[2].labels.height, 37u);
}

TEST(Inference, PredictionsDoNotDependOnFutureFrames) {
    for (FusionMode mode : {FusionMode::none, FusionMode::attention}) {
        const Model model = Model::create(seeded(5, mode));
        const Sequence seq = scene(31, 6, 2);
        const auto base = infer_sequence(model, seq);
        for (std::size_t t = 1; t + 1 < seq.frames.size(); ++t) {
            Sequence changed = seq;
            Rng rng(100 + t);
            for (std::size_t s = t + 1; s < seq.frames.size(); ++s) {
                for (auto& b : changed.frames[s].data) b = static_cast<std::uint8_t>(rng.below(256));
                for (auto& u : changed.flows[s].u) u = rng.uniform(-5, 5);
                changed.masks[s].reset();
            }
            const auto res = infer_sequence(model, changed);
            for (std::size_t s = 0; s <= t; ++s) expect_identical(res[s], base[s]);
        }
    }
}

TEST(Inference, ModeNoneIgnoresFlow) {
    const Model model = Model::create(seeded(6, FusionMode::none));
    const Sequence seq = scene(41, 5, 2);
    Sequence zeroed = seq;
    for (auto& f : zeroed.flows) {
        std::fill(f.u.begin(), f.u.end(), 0.0);
        std::fill(f.v.begin(), f.v.end(), 0.0);
    }
    const auto a = infer_sequence(model, seq);
    const auto b = infer_sequence(model, zeroed);
    for (std::size_t t = 0; t < a.size(); ++t) expect_identical(a[t], b[t]);
}

TEST(Inference, TargetModelChangesOnlineAndLossNeverIncreases) {
    const std::size_t calls_before = LossAudit::calls.load();
    RunConfig cfg = seeded(7);
    cfg.update_confidence = 2.0; // updates only on the fixed schedule
    const Model model = Model::create(cfg);
    SynthScene s;
    s.frames = 10;
    s.max_speed = 3;
    s.seed = 51;
    const auto res = infer_sequence(model, generate_synthetic(s));
    const auto t0 = res[0].filters[0].tensors(), t8 = res[8].filters[0].tensors();
    double dist = 0.0;
    for (std::size_t i = 0; i < t0.size(); ++i)
        for (std::size_t j = 0; j < t0[i].numel(); ++j) dist += std::pow(t0[i][j] - t8[i][j], 2);
    EXPECT_GT(std::sqrt(dist), 0.0);
    EXPECT_TRUE(res[4].updated);
    EXPECT_TRUE(res[8].updated);
    EXPECT_FALSE(res[5].updated);
    EXPECT_GT(LossAudit::calls.load(), calls_before);
    EXPECT_EQ(LossAudit::increases.load(), 0u);
}

TEST(Inference, OnlineUpdatesCanBeDisabled) {
    RunConfig cfg = seeded(7);
    cfg.online_updates = false;
    const Model model = Model::create(cfg);
    const auto res = infer_sequence(model, scene(52, 6));
    const auto t0 = res[0].filters[0].tensors(), t5 = res[5].filters[0].tensors();
    for (std::size_t i = 0; i < t0.size(); ++i) EXPECT_TRUE(t0[i].same_node(t5[i]));
}

TEST(Training, TestFrameLossAveragesThreeFrames) {
    const Model model = Model::create(seeded(8));
    const std::vector<Sequence> data{scene(61, 6)};
    TrainingSample s;
    s.frames = {0, 2, 3, 5};
    Rng rng(1);
    const SampleLoss loss = sample_loss(model, data, s, rng);
    ASSERT_EQ(loss.per_frame.size(), 3u);
    const double sum = loss.per_frame[0] + loss.per_frame[1] + loss.per_frame[2];
    EXPECT_NEAR(loss.total.item(), sum / 3.0, 1e-15);
    for (double l : loss.per_frame) EXPECT_GT(l, 0.0);
}

TEST(Training, SampleLossReachesEveryOfflineModuleExceptTheLabelEncoder) {
    Model model = Model::create(seeded(9));
    const std::vector<Sequence> data{scene(62, 5)};
    TrainingSample s;
    s.frames = {0, 1, 2, 4};
    const ParamList params = model.parameters();
    make_leaves(params);
    Tape tape;
    SampleLoss loss;
    {
        TapeScope scope(tape);
        Rng rng(2);
        loss = sample_loss(model, data, s, rng);
    }
    tape.backward(loss.total);
    for (const auto& p : params) {
        const bool encoder = p.name.rfind("label_encoder", 0) == 0 || p.name.rfind("weight_encoder", 0) == 0;
        if (encoder) {
            EXPECT_FALSE(p.slot->has_grad()) << p.name;
        } else {
            ASSERT_TRUE(p.slot->has_grad()) << p.name;
        }
    }
    make_constants(params);
}

TEST(Training, UnrolledCotangentMatchesFiniteDifferences) {
    Rng rng(10);
    const FusionParams fusion = FusionParams::make(FusionMode::attention, 4, rng);
    TargetModelConfig tc;
    tc.feature_channels = 6;
    tc.mid_channels = 3;
    tc.label_channels = 4;
    TargetSample s;
    s.feat_image = Tensor::randn({6, 4, 4}, rng);
    s.feat_flow = Tensor::randn({6, 4, 4}, rng);
    s.encoded = Tensor::randn({4, 4, 4}, rng);
    s.weights = Tensor::uniform({4, 4, 4}, rng, 0.5, 1.5);
    const double lambda = 0.05;
    const TargetFilters start = initial_filters(tc, true, rng);
    const UnrolledFit fit = unroll_steepest_descent(s, start, fusion, lambda, 1);
    ASSERT_EQ(fit.step_sizes.size(), 1u);
    const std::size_t n = total_numel(start.tensors());
    std::vector<double> c(n);
    for (auto& v : c) v = rng.normal();
    const EncodingCotangent ct = unrolled_cotangent(s, fit, fusion, lambda, c);

    // Downstream loss <c, tau_1> with the step length frozen.
    const double alpha = fit.step_sizes[0];
    auto downstream = [&](const Tensor& encoded, const Tensor& weights) {
        TargetSample p = s;
        p.encoded = encoded;
        p.weights = weights;
        Linearization lin(target_residual_fn({p}, fusion, lambda), start.tensors());
        const auto g = lin.vjp(lin.residual().values());
        const auto t0 = flatten_values(start.tensors());
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += c[i] * (t0[i] - alpha * g[i]);
        return acc;
    };
    const double h = 1e-6;
    for (std::size_t i = 0; i < s.encoded.numel(); i += 7) {
        std::vector<double> up(s.encoded.values().begin(), s.encoded.values().end()), dn = up;
        up[i] += h;
        dn[i] -= h;
        const double fd = (downstream(Tensor(s.encoded.shape(), up), s.weights) -
                           downstream(Tensor(s.encoded.shape(), dn), s.weights)) /
                          (2 * h);
        EXPECT_NEAR(ct.encoded[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "encoded " << i;
    }
    for (std::size_t i = 0; i < s.weights.numel(); i += 7) {
        std::vector<double> up(s.weights.values().begin(), s.weights.values().end()), dn = up;
        up[i] += h;
        dn[i] -= h;
        const double fd = (downstream(s.encoded, Tensor(s.weights.shape(), up)) -
                           downstream(s.encoded, Tensor(s.weights.shape(), dn))) /
                          (2 * h);
        EXPECT_NEAR(ct.weights[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "weights " << i;
    }
}

TEST(Training, UnrolledStepsLowerTheOnlineLoss) {
    Rng rng(11);
    const FusionParams fusion = FusionParams::make(FusionMode::concat, 4, rng);
    TargetModelConfig tc;
    tc.feature_channels = 5;
    tc.mid_channels = 3;
    tc.label_channels = 4;
    TargetSample s;
    s.feat_image = Tensor::randn({5, 4, 4}, rng);
    s.feat_flow = Tensor::randn({5, 4, 4}, rng);
    s.encoded = Tensor::randn({4, 4, 4}, rng);
    s.weights = Tensor::ones({4, 4, 4});
    const UnrolledFit fit = unroll_steepest_descent(s, initial_filters(tc, true, rng), fusion, 0.01, 4);
    ASSERT_EQ(fit.path.size(), 5u);
    std::vector<TargetSample> one{s};
    for (std::size_t k = 1; k < fit.path.size(); ++k) {
        EXPECT_LT(residual_and_loss(one, fit.path[k], fusion, 0.01).loss,
                  residual_and_loss(one, fit.path[k - 1], fusion, 0.01).loss);
    }
}

TEST(Training, ThroughOptimizerModeTrainsTheLabelEncoder) {
    auto encoder_values = [](Model& m) {
        std::vector<double> v;
        for (const auto& p : m.parameters())
            if (p.name.rfind("label_encoder", 0) == 0 || p.name.rfind("weight_encoder", 0) == 0)
                v.insert(v.end(), p.slot->values().begin(), p.slot->values().end());
        return v;
    };
    const std::vector<Sequence> data{scene(63, 5)};
    for (std::size_t steps : {0u, 2u}) {
        RunConfig cfg = seeded(12);
        cfg.train_epochs = 1;
        cfg.train_samples = 1;
        cfg.train_through_optimizer_steps = steps;
        Model m = Model::create(cfg);
        const auto before = encoder_values(m);
        ASSERT_FALSE(before.empty());
        train_offline(m, data);
        const auto after = encoder_values(m);
        EXPECT_EQ(before != after, steps > 0) << "steps " << steps;
    }
}

TEST(Training, ShortSequencesSampleWithReplacementAndWarn) {
    RunConfig cfg = seeded(13, FusionMode::none);
    cfg.train_epochs = 1;
    cfg.train_samples = 1;
    Model m = Model::create(cfg);
    std::vector<std::string> messages;
    train_offline(m, {scene(64, 3)}, [&](const std::string& s) { messages.push_back(s); });
    bool warned = false;
    for (const auto& s : messages) warned = warned || s.find("with replacement") != std::string::npos;
    EXPECT_TRUE(warned);
}

TEST(Training, RejectsUnusableData) {
    RunConfig cfg = seeded(14, FusionMode::none);
    Model m = Model::create(cfg);
    EXPECT_THROW(train_offline(m, {}), DataError);
    Sequence partial = scene(65, 4);
    partial.masks[2].reset();
    EXPECT_THROW(train_offline(m, {partial}), DataError);
}

// One small trained model shared by the behavioural checks below.
class TrainedModel : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        RunConfig cfg = seeded(2024);
        cfg.train_epochs = 2;
        cfg.train_samples = 1000;
        model_ = new Model(Model::create(cfg));
        report_ = new TrainReport(train_offline(*model_, training_suite(20, 700)));
    }
    static void TearDownTestSuite() {
        delete model_;
        delete report_;
        model_ = nullptr;
        report_ = nullptr;
    }
    static Model* model_;
    static TrainReport* report_;
};

Model* TrainedModel::model_ = nullptr;
TrainReport* TrainedModel::report_ = nullptr;

TEST_F(TrainedModel, HeldOutLossDecreases) {
    ASSERT_EQ(report_->train_loss.size(), 2u);
    ASSERT_EQ(report_->holdout_loss.size(), 3u);
    EXPECT_EQ(report_->holdout_sequences, 2u); // 20 sequences, a tenth held out
    EXPECT_LT(report_->holdout_loss[1], report_->holdout_loss[0]);
    EXPECT_LT(report_->holdout_loss[2], report_->holdout_loss[0]);
}

TEST_F(TrainedModel, StaticSceneKeepsTheAnnotatedMask) {
    double total = 0.0;
    for (std::uint64_t seed : {901u, 902u, 903u}) {
        SynthScene s;
        s.frames = 2;
        s.static_scene = true;
        s.seed = seed;
        const Sequence seq = generate_synthetic(s);
        const auto res = infer_sequence(*model_, seq);
        total += mask_iou(res[1].labels, *seq.masks[0]);
    }
    EXPECT_GE(total / 3.0, 0.9);
}

TEST_F(TrainedModel, FlippedInputGivesFlippedPrediction) {
    double total = 0.0;
    int count = 0;
    for (std::uint64_t seed : {911u, 912u, 913u, 914u}) {
        const Sequence seq = scene(seed, 4);
        const auto a = infer_sequence(*model_, seq);
        const auto b = infer_sequence(*model_, flip_sequence(seq));
        for (std::size_t t = 1; t < a.size(); ++t) {
            total += mask_iou(flip_labels(a[t].labels), b[t].labels);
            ++count;
        }
    }
    EXPECT_GE(total / count, 0.8);
}
