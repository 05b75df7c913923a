#include "flowvos/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace flowvos {

namespace {

std::size_t round_up(std::size_t n) { return (n + kInputMultiple - 1) / kInputMultiple * kInputMultiple; }

struct FrameInput {
    Tensor image;
    Tensor flow; // undefined without a flow branch
};

void check_frame(const Sequence& seq, std::size_t t) {
    if (t >= seq.frames.size()) {
        throw DataError(seq.name + ": frame " + std::to_string(t) + " out of range");
    }
    const auto& img = seq.frames[t];
    if (img.width != seq.meta.width || img.height != seq.meta.height) {
        throw DataError(seq.name + ": frame " + std::to_string(t) + " is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + ", expected " + std::to_string(seq.meta.width) + "x" +
                        std::to_string(seq.meta.height));
    }
}

FrameInput prepare_frame(const Model& model, const Sequence& seq, std::size_t t, const Augmentation& aug) {
    check_frame(seq, t);
    FrameInput in;
    Tensor img = image_tensor(seq.frames[t]);
    if (!aug.is_identity()) img = warp_image(img, aug);
    in.image = pad_to_multiple(img);
    if (model.uses_flow()) {
        if (t >= seq.flows.size()) throw DataError(seq.name + ": missing flow " + std::to_string(t));
        FlowField f = seq.flows[t];
        if (f.width != seq.meta.width || f.height != seq.meta.height) {
            throw DataError(seq.name + ": flow " + std::to_string(t) + " size does not match the frames");
        }
        f.validate();
        if (!aug.is_identity()) f = warp_flow(f, aug);
        in.flow = pad_to_multiple(flow_input(f, model.config));
    }
    return in;
}

Tensor prepare_mask(const Sequence& seq, std::size_t t, int object, const Augmentation& aug) {
    if (t >= seq.masks.size() || !seq.masks[t]) {
        throw DataError(seq.name + ": missing mask " + std::to_string(t));
    }
    const LabelImage& lab = *seq.masks[t];
    if (lab.width != seq.meta.width || lab.height != seq.meta.height) {
        throw DataError(seq.name + ": mask " + std::to_string(t) + " size does not match the frames");
    }
    Tensor m = object_mask(lab, object);
    if (!aug.is_identity()) m = warp_mask(m, aug);
    return pad_to_multiple(m);
}

struct PreparedSample {
    std::vector<FrameInput> frames;
    std::vector<Tensor> masks;
};

PreparedSample prepare_sample(const Model& model, const std::vector<Sequence>& data, const TrainingSample& sample) {
    if (sample.sequence >= data.size()) throw std::invalid_argument("training sample: sequence index out of range");
    if (sample.frames.size() < 2) throw std::invalid_argument("training sample needs a reference and a test frame");
    const Sequence& seq = data[sample.sequence];
    PreparedSample p;
    for (std::size_t t : sample.frames) {
        p.frames.push_back(prepare_frame(model, seq, t, sample.augmentation));
        p.masks.push_back(prepare_mask(seq, t, sample.object, sample.augmentation));
    }
    return p;
}

TargetSample reference_sample(const Model& model, const PreparedSample& p) {
    NoTapeScope no_tape;
    const Features ref = extract_features(model, p.frames[0].image, p.frames[0].flow);
    return make_target_sample(model, ref, p.masks[0]);
}

// Eq. 13 style average of per-frame BCE over the test frames.
SampleLoss test_frame_loss(const Model& model, const PreparedSample& p, const TargetFilters& filters) {
    SampleLoss out;
    std::vector<Tensor> losses;
    for (std::size_t i = 1; i < p.frames.size(); ++i) {
        const Features feats = extract_features(model, p.frames[i].image, p.frames[i].flow);
        Tensor l = bce_with_logits(predict_logits(model, feats, filters), p.masks[i]);
        out.per_frame.push_back(l.item());
        losses.push_back(l);
    }
    Tensor total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    out.total = scale(total, 1.0 / static_cast<double>(losses.size()));
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::vector<int> present_objects(const LabelImage& lab, std::size_t objects) {
    std::vector<bool> seen(256, false);
    for (auto v : lab.labels) seen[v] = true;
    std::vector<int> out;
    for (std::size_t k = 1; k <= objects && k < 256; ++k)
        if (seen[k]) out.push_back(static_cast<int>(k));
    return out;
}

TrainingSample draw_sample(const std::vector<Sequence>& data, const std::vector<std::size_t>& pool, Rng& rng,
                           const RunConfig& cfg, bool augment, const TrainLog& log) {
    TrainingSample s;
    s.sequence = pool[rng.below(pool.size())];
    const Sequence& seq = data[s.sequence];
    const std::size_t n = seq.frames.size();
    const std::size_t want = cfg.train_frames;
    if (n >= want) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < want; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
        s.frames.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(want));
    } else {
        if (log) {
            log("warning: sequence " + seq.name + " has " + std::to_string(n) + " frames, fewer than " +
                std::to_string(want) + "; sampling with replacement");
        }
        for (std::size_t i = 0; i < want; ++i) s.frames.push_back(rng.below(n));
    }
    std::sort(s.frames.begin(), s.frames.end());
    const auto objs = present_objects(*seq.masks[s.frames[0]], std::max<std::size_t>(seq.meta.objects, 1));
    s.object = objs.empty() ? 1 + static_cast<int>(rng.below(std::max<std::size_t>(seq.meta.objects, 1)))
                            : objs[rng.below(objs.size())];
    if (augment) s.augmentation = Augmentation::random(rng);
    return s;
}

Tensor tensor_like(const Tensor& like, std::vector<double> values) { return Tensor(like.shape(), std::move(values)); }

// Bilinear sample of channel `c` at continuous position (x, y); zero outside.
double bilinear(const double* plane, std::size_t w, std::size_t h, double x, double y) {
    const double fx = std::floor(x), fy = std::floor(y);
    const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
    const double ax = x - fx, ay = y - fy;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const long xx = x0 + dx, yy = y0 + dy;
            if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h)) continue;
            const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            if (wgt != 0.0) acc += wgt * plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        }
    }
    return acc;
}

// Source position of output pixel (x, y) under the inverse warp.
struct InverseMap {
    double i11, i12, i21, i22, cx, cy, tx, ty;

    InverseMap(const Augmentation& a, std::size_t w, std::size_t h) {
        const double det = a.a11 * a.a22 - a.a12 * a.a21;
        if (det == 0.0) throw std::invalid_argument("augmentation: singular linear part");
        i11 = a.a22 / det;
        i12 = -a.a12 / det;
        i21 = -a.a21 / det;
        i22 = a.a11 / det;
        cx = (static_cast<double>(w) - 1.0) / 2.0;
        cy = (static_cast<double>(h) - 1.0) / 2.0;
        tx = a.tx;
        ty = a.ty;
    }
    void source(std::size_t x, std::size_t y, double& sx, double& sy) const {
        const double qx = static_cast<double>(x) - cx - tx, qy = static_cast<double>(y) - cy - ty;
        sx = i11 * qx + i12 * qy + cx;
        sy = i21 * qx + i22 * qy + cy;
    }
};

} // namespace

Tensor pad_to_multiple(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("pad expects C x H x W, got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ph = round_up(h), pw = round_up(w);
    if (ph == h && pw == w) return x;
    std::vector<double> out(c * ph * pw, 0.0);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(x.data() + (k * h + y) * w, w, out.begin() + static_cast<std::ptrdiff_t>((k * ph + y) * pw));
    return Tensor({c, ph, pw}, std::move(out));
}

Tensor crop(const Tensor& x, std::size_t height, std::size_t width) {
    if (x.rank() != 3 || x.dim(1) < height || x.dim(2) < width) {
        throw ShapeError("crop " + std::to_string(height) + "x" + std::to_string(width) + " from " +
                         shape_str(x.shape()));
    }
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == height && w == width) return x;
    if (x.requires_grad() && active_tape()) throw std::logic_error("crop is not differentiable");
    std::vector<double> out(c * height * width);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < height; ++y)
            std::copy_n(x.data() + (k * h + y) * w, width,
                        out.begin() + static_cast<std::ptrdiff_t>((k * height + y) * width));
    return Tensor({c, height, width}, std::move(out));
}

Tensor flow_input(const FlowField& flow, const RunConfig& config) {
    Tensor e = embed_flow(flow, FlowEmbedOptions{config.flow_prescale});
    return Tensor(e.shape(), [&] {
        std::vector<double> v(e.values().begin(), e.values().end());
        for (auto& x : v) x /= config.flow_max_displacement;
        return v;
    }());
}

Features extract_features(const Model& model, const Tensor& image, const Tensor& flow) {
    Features f;
    f.image = model.backbones.extract(image, Branch::image);
    if (model.uses_flow()) {
        if (!flow.defined()) throw std::invalid_argument("extract_features: flow input required for this model");
        if (flow.shape() != image.shape()) {
            throw ShapeError("flow input " + shape_str(flow.shape()) + " vs image " + shape_str(image.shape()));
        }
        f.flow = model.backbones.extract(flow, Branch::flow);
    }
    return f;
}

TargetSample make_target_sample(const Model& model, const Features& features, const Tensor& mask) {
    const LabelEncoding enc = model.label_encoder.encode(mask);
    TargetSample s;
    s.feat_image = features.image[2];
    if (model.uses_flow()) s.feat_flow = features.flow[2];
    s.encoded = enc.encoded;
    s.weights = enc.weights;
    return s;
}

Tensor predict_logits(const Model& model, const Features& features, const TargetFilters& filters) {
    const Tensor f_tm = target_forward(features.image[2], model.uses_flow() ? features.flow[2] : Tensor(), filters,
                                       model.target_fusion);
    const Pyramid fused = fuse_pyramid(features.image, features.flow, model.decoder_fusion, model.config.l1_source);
    return model.decoder.decode(f_tm, fused);
}

TargetFilters fit_target_model(const Model& model, const TargetSample& sample, Rng& rng, std::size_t iterations) {
    MemoryBuffer buffer(model.config.buffer_capacity, model.config.buffer_decay);
    TargetSample s = sample;
    s.feat_image = s.feat_image.detach();
    if (s.feat_flow.defined()) s.feat_flow = s.feat_flow.detach();
    s.encoded = s.encoded.detach();
    s.weights = s.weights.detach();
    buffer.push(s, 0, true);
    const TargetFilters start = initial_filters(model.target_config(), model.uses_flow(), rng);
    return optimize_filters(start, buffer, model.target_fusion.detached(), model.config.lambda, model.config.learner,
                            iterations);
}

LabelImage merge_objects(const std::vector<Tensor>& probabilities, double threshold) {
    if (probabilities.empty()) throw std::invalid_argument("merge_objects: no objects");
    const Shape& shape = probabilities[0].shape();
    if (shape.size() != 3 || shape[0] != 1) throw ShapeError("merge_objects expects 1 x H x W maps");
    if (probabilities.size() > 255) throw std::invalid_argument("merge_objects: at most 255 objects");
    for (const auto& p : probabilities)
        if (p.shape() != shape) throw ShapeError("merge_objects: object maps differ in shape");
    LabelImage out = LabelImage::blank(shape[2], shape[1]);
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        double best = threshold;
        for (std::size_t k = 0; k < probabilities.size(); ++k) {
            const double p = probabilities[k][i];
            if (p > best) {
                best = p;
                out.labels[i] = static_cast<std::uint8_t>(k + 1);
            }
        }
    }
    return out;
}

std::vector<SegResult> infer_sequence(const Model& model, const Sequence& sequence) {
    using clock = std::chrono::steady_clock;
    const RunConfig& cfg = model.config;
    const std::size_t n = sequence.frames.size();
    if (n < 2) throw DataError(sequence.name + ": inference needs at least 2 frames, got " + std::to_string(n));
    if (sequence.masks.empty() || !sequence.masks[0]) throw DataError(sequence.name + ": missing annotation for frame 0");
    const LabelImage& first = *sequence.masks[0];
    const std::size_t h = sequence.meta.height, w = sequence.meta.width;
    if (first.width != w || first.height != h) {
        throw DataError(sequence.name + ": annotation is " + std::to_string(first.width) + "x" +
                        std::to_string(first.height) + ", frames are " + std::to_string(w) + "x" + std::to_string(h));
    }
    const std::size_t objects =
        sequence.meta.objects > 0 ? sequence.meta.objects : static_cast<std::size_t>(first.max_label());

    NoTapeScope no_tape;
    const Augmentation none;
    std::vector<SegResult> results;
    results.reserve(n);

    auto start = clock::now();
    const FrameInput in0 = prepare_frame(model, sequence, 0, none);
    const Features f0 = extract_features(model, in0.image, in0.flow);
    std::vector<MemoryBuffer> buffers;
    std::vector<TargetFilters> filters;
    SegResult r0;
    r0.frame = 0;
    r0.labels = first;
    r0.updated = true;
    for (std::size_t k = 0; k < objects; ++k) {
        const Tensor mask = object_mask(first, static_cast<int>(k + 1));
        TargetSample s = make_target_sample(model, f0, pad_to_multiple(mask));
        buffers.emplace_back(cfg.buffer_capacity, cfg.buffer_decay);
        buffers.back().push(s, 0, true);
        Rng rng(mix_seed(cfg.seed, k));
        filters.push_back(optimize_filters(initial_filters(model.target_config(), model.uses_flow(), rng),
                                           buffers.back(), model.target_fusion, cfg.lambda, cfg.learner,
                                           cfg.learner.init_iters));
        r0.probabilities.push_back(mask);
    }
    r0.filters = filters;
    r0.milliseconds = std::chrono::duration<double, std::milli>(clock::now() - start).count();
    results.push_back(std::move(r0));

    for (std::size_t t = 1; t < n; ++t) {
        start = clock::now();
        SegResult r;
        r.frame = t;
        const FrameInput in = prepare_frame(model, sequence, t, none);
        const Features feats = extract_features(model, in.image, in.flow);
        for (std::size_t k = 0; k < objects; ++k) {
            r.probabilities.push_back(crop(sigmoid(predict_logits(model, feats, filters[k])), h, w));
        }
        r.labels = objects > 0 ? merge_objects(r.probabilities) : LabelImage::blank(w, h);
        for (std::size_t k = 0; k < objects; ++k) {
            const Tensor pseudo = object_mask(r.labels, static_cast<int>(k + 1));
            double conf = 0.0, count = 0.0;
            for (std::size_t i = 0; i < pseudo.numel(); ++i) {
                if (pseudo[i] > 0.5) {
                    conf += r.probabilities[k][i];
                    count += 1.0;
                }
            }
            conf = count > 0.0 ? conf / count : 0.0;
            buffers[k].push(make_target_sample(model, feats, pad_to_multiple(pseudo)), static_cast<int>(t));
            if (cfg.online_updates && (t % cfg.update_every == 0 || conf > cfg.update_confidence)) {
                filters[k] = optimize_filters(filters[k], buffers[k], model.target_fusion, cfg.lambda, cfg.learner,
                                              cfg.learner.update_iters);
                r.updated = true;
            }
        }
        r.filters = filters;
        r.milliseconds = std::chrono::duration<double, std::milli>(clock::now() - start).count();
        results.push_back(std::move(r));
    }
    return results;
}

bool Augmentation::is_identity() const {
    return a11 == 1.0 && a12 == 0.0 && a21 == 0.0 && a22 == 1.0 && tx == 0.0 && ty == 0.0;
}

Augmentation Augmentation::random(Rng& rng) {
    const bool flip = rng.coin();
    const double theta = rng.uniform(-0.15, 0.15);
    const double s = rng.uniform(0.9, 1.1);
    Augmentation a;
    const double c = std::cos(theta) * s, sn = std::sin(theta) * s;
    const double f = flip ? -1.0 : 1.0;
    // s * R(theta) * diag(f, 1)
    a.a11 = c * f;
    a.a12 = -sn;
    a.a21 = sn * f;
    a.a22 = c;
    a.tx = rng.uniform(-4.0, 4.0);
    a.ty = rng.uniform(-4.0, 4.0);
    return a;
}

Augmentation Augmentation::horizontal_flip() {
    Augmentation a;
    a.a11 = -1.0;
    return a;
}

Tensor warp_image(const Tensor& image, const Augmentation& aug) {
    if (image.rank() != 3) throw ShapeError("warp_image expects C x H x W, got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const InverseMap inv(aug, w, h);
    std::vector<double> out(image.numel());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double sx, sy;
            inv.source(x, y, sx, sy);
            for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = bilinear(image.data() + k * h * w, w, h, sx, sy);
        }
    }
    return tensor_like(image, std::move(out));
}

Tensor warp_mask(const Tensor& mask, const Augmentation& aug) {
    if (mask.rank() != 3) throw ShapeError("warp_mask expects C x H x W, got " + shape_str(mask.shape()));
    const std::size_t c = mask.dim(0), h = mask.dim(1), w = mask.dim(2);
    const InverseMap inv(aug, w, h);
    std::vector<double> out(mask.numel(), 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double sx, sy;
            inv.source(x, y, sx, sy);
            const long xi = std::lround(sx), yi = std::lround(sy);
            if (xi < 0 || yi < 0 || xi >= static_cast<long>(w) || yi >= static_cast<long>(h)) continue;
            for (std::size_t k = 0; k < c; ++k) {
                out[(k * h + y) * w + x] =
                    mask.data()[(k * h + static_cast<std::size_t>(yi)) * w + static_cast<std::size_t>(xi)];
            }
        }
    }
    return tensor_like(mask, std::move(out));
}

FlowField warp_flow(const FlowField& flow, const Augmentation& aug) {
    const std::size_t h = flow.height, w = flow.width;
    const InverseMap inv(aug, w, h);
    FlowField out = flow;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double sx, sy;
            inv.source(x, y, sx, sy);
            const double u = bilinear(flow.u.data(), w, h, sx, sy);
            const double v = bilinear(flow.v.data(), w, h, sx, sy);
            out.u[y * w + x] = aug.a11 * u + aug.a12 * v;
            out.v[y * w + x] = aug.a21 * u + aug.a22 * v;
        }
    }
    return out;
}

SampleLoss sample_loss(const Model& model, const std::vector<Sequence>& data, const TrainingSample& sample, Rng& rng) {
    const PreparedSample p = prepare_sample(model, data, sample);
    const TargetSample ref = reference_sample(model, p);
    TargetFilters filters;
    {
        NoTapeScope no_tape;
        filters = fit_target_model(model, ref, rng, model.config.learner.init_iters);
    }
    return test_frame_loss(model, p, filters);
}

UnrolledFit unroll_steepest_descent(const TargetSample& sample, const TargetFilters& start,
                                    const FusionParams& fusion, double lambda, std::size_t steps) {
    NoTapeScope no_tape;
    UnrolledFit fit;
    fit.path.push_back(start);
    const ResidualFn fn = target_residual_fn({sample}, fusion, lambda);
    for (std::size_t k = 0; k < steps; ++k) {
        const auto params = fit.path.back().tensors();
        Linearization lin(fn, params);
        const auto g = lin.vjp(lin.residual().values());
        const auto jg = lin.jvp(g);
        const double gg = dot(g, g), jj = dot(jg, jg);
        if (gg == 0.0 || jj == 0.0) break;
        const double alpha = gg / jj;
        auto flat = flatten_values(params);
        for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= alpha * g[i];
        fit.path.push_back(TargetFilters::from_tensors(unflatten_like(flat, params)));
        fit.step_sizes.push_back(alpha);
    }
    return fit;
}

EncodingCotangent unrolled_cotangent(const TargetSample& sample, const UnrolledFit& fit, const FusionParams& fusion,
                                     double lambda, std::span<const double> final_cotangent) {
    NoTapeScope no_tape;
    const std::size_t n = sample.encoded.numel();
    std::vector<double> ce(n, 0.0), cw(n, 0.0);
    std::vector<double> g(final_cotangent.begin(), final_cotangent.end());
    const ResidualFn fn = target_residual_fn({sample}, fusion, lambda);
    const FusionParams fz = fusion.detached();
    for (std::size_t k = fit.step_sizes.size(); k-- > 0;) {
        const TargetFilters& tau = fit.path[k];
        const double alpha = fit.step_sizes[k];
        Linearization lin(fn, tau.tensors());
        if (g.size() != lin.param_size()) throw ShapeError("unrolled cotangent: size does not match the filters");
        const auto jg = lin.jvp(g);
        const Tensor f = target_forward(sample.feat_image, sample.feat_flow, tau, fz);
        for (std::size_t i = 0; i < n; ++i) {
            ce[i] += alpha * sample.weights[i] * jg[i];
            cw[i] -= 2.0 * alpha * (f[i] - sample.encoded[i]) * jg[i];
        }
        const auto jtjg = lin.vjp(jg);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= alpha * jtjg[i];
    }
    return {tensor_like(sample.encoded, std::move(ce)), tensor_like(sample.weights, std::move(cw))};
}

TrainReport train_offline(Model& model, const std::vector<Sequence>& data, const TrainLog& log) {
    const RunConfig& cfg = model.config;
    if (data.empty()) throw DataError("training needs at least one sequence");
    for (const auto& seq : data) {
        if (seq.frames.size() < 2) throw DataError(seq.name + ": training needs at least 2 frames");
        if (!seq.fully_annotated()) throw DataError(seq.name + ": training needs a mask for every frame");
    }
    TrainReport report;
    std::size_t holdout = cfg.train_holdout_sequences;
    if (holdout == 0 && data.size() >= 5) holdout = std::max<std::size_t>(1, data.size() / 10);
    if (holdout >= data.size()) throw ConfigError("train.holdout_sequences leaves no training data");
    std::vector<std::size_t> train_pool, holdout_pool;
    for (std::size_t i = 0; i < data.size(); ++i) (i + holdout < data.size() ? train_pool : holdout_pool).push_back(i);
    report.train_sequences = train_pool.size();
    report.holdout_sequences = holdout_pool.size();

    Rng rng(mix_seed(cfg.seed, 0x7a11));
    std::vector<TrainingSample> holdout_samples;
    if (!holdout_pool.empty()) {
        Rng hrng(mix_seed(cfg.seed, 0x401d));
        for (std::size_t i = 0; i < cfg.train_holdout_samples; ++i) {
            holdout_samples.push_back(draw_sample(data, holdout_pool, hrng, cfg, false, {}));
        }
    }
    auto evaluate_holdout = [&] {
        if (holdout_samples.empty()) return;
        NoTapeScope no_tape;
        double total = 0.0;
        for (std::size_t i = 0; i < holdout_samples.size(); ++i) {
            Rng srng(mix_seed(cfg.seed, 0x5000 + i));
            total += sample_loss(model, data, holdout_samples[i], srng).total.item();
        }
        report.holdout_loss.push_back(total / static_cast<double>(holdout_samples.size()));
    };
    evaluate_holdout();

    const ParamList params = model.parameters();
    Adam adam(AdamConfig{cfg.train_learning_rate});
    const FusionParams& tfusion = model.target_fusion;
    for (std::size_t epoch = 0; epoch < cfg.train_epochs; ++epoch) {
        double total = 0.0;
        for (std::size_t step = 0; step < cfg.train_samples; ++step) {
            const TrainingSample sample = draw_sample(data, train_pool, rng, cfg, cfg.train_augment, log);
            Rng srng = rng.split();
            const PreparedSample p = prepare_sample(model, data, sample);
            make_leaves(params);
            const TargetSample ref = reference_sample(model, p);
            TargetFilters tau = fit_target_model(model, ref, srng, cfg.learner.init_iters);
            UnrolledFit unrolled;
            std::vector<Tensor> tau_leaves;
            if (cfg.train_through_optimizer_steps > 0) {
                unrolled = unroll_steepest_descent(ref, tau, tfusion, cfg.lambda, cfg.train_through_optimizer_steps);
                for (const auto& t : unrolled.path.back().tensors()) tau_leaves.push_back(t.as_leaf());
                tau = TargetFilters::from_tensors(tau_leaves);
            }
            Tape tape;
            SampleLoss loss;
            {
                TapeScope scope(tape);
                loss = test_frame_loss(model, p, tau);
            }
            const double value = loss.total.item();
            if (!std::isfinite(value)) {
                throw NumericalError("training loss is not finite at epoch " + std::to_string(epoch + 1) +
                                     ", sample " + std::to_string(step + 1));
            }
            tape.backward(loss.total);
            if (!unrolled.step_sizes.empty()) {
                std::vector<double> g;
                for (const auto& t : tau_leaves) {
                    if (t.has_grad()) {
                        g.insert(g.end(), t.grad_values().begin(), t.grad_values().end());
                    } else {
                        g.insert(g.end(), t.numel(), 0.0);
                    }
                }
                const EncodingCotangent ct = unrolled_cotangent(ref, unrolled, tfusion, cfg.lambda, g);
                Tape enc_tape;
                Tensor surrogate;
                {
                    TapeScope scope(enc_tape);
                    const LabelEncoding enc = model.label_encoder.encode(p.masks[0]);
                    surrogate = add(sum(mul(enc.encoded, ct.encoded)), sum(mul(enc.weights, ct.weights)));
                }
                enc_tape.backward(surrogate);
            }
            adam.step(params);
            total += value;
        }
        make_constants(params);
        report.train_loss.push_back(total / static_cast<double>(std::max<std::size_t>(cfg.train_samples, 1)));
        evaluate_holdout();
        if (log) {
            std::ostringstream msg;
            msg << "epoch " << epoch + 1 << "/" << cfg.train_epochs << " train_loss " << report.train_loss.back();
            if (!report.holdout_loss.empty()) msg << " holdout_loss " << report.holdout_loss.back();
            log(msg.str());
        }
    }
    make_constants(params);
    return report;
}

} // namespace flowvos
