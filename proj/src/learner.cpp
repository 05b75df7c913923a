#include "flowvos/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace flowvos {

std::atomic<std::size_t> LossAudit::calls{0};
std::atomic<std::size_t> LossAudit::increases{0};

void LossAudit::reset() {
    calls = 0;
    increases = 0;
}

std::string to_string(LearnerMode mode) {
    return mode == LearnerMode::gauss_newton ? "gauss_newton" : "steepest_descent";
}

LearnerMode parse_learner_mode(const std::string& text) {
    if (text == "gauss_newton") return LearnerMode::gauss_newton;
    if (text == "steepest_descent") return LearnerMode::steepest_descent;
    throw std::invalid_argument("unknown learner mode '" + text + "' (expected gauss_newton or steepest_descent)");
}

void LearnerConfig::validate() const {
    if (init_iters < 1 || update_iters < 1 || cg_iters < 1 || sd_steps < 1) {
        throw std::invalid_argument("learner iteration counts must be >= 1");
    }
    if (!(damping >= 0.0)) throw std::invalid_argument("learner damping must be >= 0");
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double half_sq(std::span<const double> r) { return 0.5 * dot(r, r); }

std::vector<Tensor> shifted(std::span<const Tensor> params, std::span<const double> dir, double step) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    std::size_t off = 0;
    for (const auto& p : params) {
        std::vector<double> v(p.values().begin(), p.values().end());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += step * dir[off + i];
        off += v.size();
        out.emplace_back(p.shape(), std::move(v));
    }
    return out;
}

void check_finite(double loss, std::size_t iteration) {
    if (!std::isfinite(loss)) {
        throw NumericalError("online loss is not finite at iteration " + std::to_string(iteration));
    }
}

struct LineSearch {
    bool accepted = false;
    double loss = 0.0;
    std::vector<Tensor> params;
};

// Tries step, step/2, ... until the loss does not increase.
LineSearch halving_search(const ResidualFn& fn, std::span<const Tensor> params, std::span<const double> dir,
                          double step, double current, std::size_t max_halvings) {
    LineSearch ls;
    for (std::size_t h = 0; h <= max_halvings; ++h, step *= 0.5) {
        auto candidate = shifted(params, dir, step);
        const double loss = residual_loss(fn, candidate);
        if (std::isfinite(loss) && loss <= current) {
            ls.accepted = true;
            ls.loss = loss;
            ls.params = std::move(candidate);
            return ls;
        }
    }
    return ls;
}

} // namespace

CgResult conjugate_gradient(const LinearOperator& apply, std::span<const double> rhs, std::size_t max_iters,
                            double relative_tolerance) {
    const std::size_t n = rhs.size();
    CgResult res;
    res.x.assign(n, 0.0);
    std::vector<double> r(rhs.begin(), rhs.end());
    std::vector<double> p = r;
    std::vector<double> ap(n);
    double rr = dot(r, r);
    const double stop = relative_tolerance * std::sqrt(rr);
    res.residual_norm = std::sqrt(rr);
    if (rr == 0.0) return res;
    for (std::size_t it = 0; it < max_iters; ++it) {
        apply(p, ap);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) break;
        const double alpha = rr / pap;
        for (std::size_t i = 0; i < n; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        const double rr_new = dot(r, r);
        res.iterations = it + 1;
        res.residual_norm = std::sqrt(rr_new);
        if (res.residual_norm <= stop) break;
        const double beta = rr_new / rr;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
        rr = rr_new;
    }
    return res;
}

double residual_loss(const ResidualFn& fn, std::span<const Tensor> params) {
    NoTapeScope no_tape;
    std::vector<Tensor> constants;
    constants.reserve(params.size());
    for (const auto& p : params) constants.push_back(p.detach());
    return half_sq(fn(constants).values());
}

OptimizeReport optimize(std::vector<Tensor>& params, const ResidualFn& fn, const LearnerConfig& config,
                        std::size_t outer_iters) {
    config.validate();
    if (outer_iters < 1) throw std::invalid_argument("optimize: outer iteration count must be >= 1");
    OptimizeReport report;
    double loss = residual_loss(fn, params);
    check_finite(loss, 0);
    report.initial_loss = loss;

    const std::size_t steps = config.mode == LearnerMode::gauss_newton ? outer_iters : config.sd_steps;
    for (std::size_t it = 0; it < steps; ++it) {
        Linearization lin(fn, params);
        const auto r = lin.residual().values();
        std::vector<double> g = lin.vjp(r);
        const double gnorm2 = dot(g, g);
        if (gnorm2 == 0.0) break;

        std::vector<double> dir;
        double step = 1.0;
        if (config.mode == LearnerMode::gauss_newton) {
            std::vector<double> rhs(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) rhs[i] = -g[i];
            auto normal_op = [&](std::span<const double> v, std::span<double> out) {
                const auto jv = lin.jvp(v);
                const auto jtjv = lin.vjp(jv);
                for (std::size_t i = 0; i < v.size(); ++i) out[i] = jtjv[i] + config.damping * v[i];
            };
            dir = conjugate_gradient(normal_op, rhs, config.cg_iters, config.cg_tolerance).x;
        } else {
            const auto jg = lin.jvp(g);
            const double curvature = dot(jg, jg) + config.damping * gnorm2;
            if (!(curvature > 0.0)) break;
            step = gnorm2 / curvature;
            dir.resize(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) dir[i] = -g[i];
        }

        auto ls = halving_search(fn, params, dir, step, loss, config.max_halvings);
        if (ls.accepted) {
            check_finite(ls.loss, it + 1);
            params = std::move(ls.params);
            loss = ls.loss;
            ++report.accepted_steps;
        }
        report.losses.push_back(loss);
        if (!ls.accepted) break;
    }
    report.final_loss = loss;
    ++LossAudit::calls;
    double previous = report.initial_loss;
    for (double l : report.losses) {
        if (l > previous) ++LossAudit::increases;
        previous = l;
    }
    return report;
}

MemoryBuffer::MemoryBuffer(std::size_t capacity, double decay) : capacity_(capacity), decay_(decay) {
    if (capacity_ < 1) throw std::invalid_argument("memory buffer capacity must be >= 1");
    if (!(decay_ > 0.0 && decay_ <= 1.0)) throw std::invalid_argument("memory buffer decay must be in (0, 1]");
}

void MemoryBuffer::push(TargetSample sample, int frame_index, bool pinned) {
    if (entries_.size() == capacity_) {
        auto victim = std::find_if(entries_.begin(), entries_.end(), [](const MemoryEntry& e) { return !e.pinned; });
        if (victim == entries_.end()) throw std::logic_error("memory buffer is full of pinned entries");
        entries_.erase(victim);
    }
    for (auto& e : entries_)
        if (!e.pinned) e.sample.sample_weight *= decay_;
    sample.sample_weight = 1.0;
    entries_.push_back({std::move(sample), frame_index, pinned});
}

std::vector<TargetSample> MemoryBuffer::samples() const {
    std::vector<TargetSample> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.sample);
    return out;
}

TargetFilters optimize_filters(const TargetFilters& filters, const MemoryBuffer& buffer, const FusionParams& fusion,
                               double lambda, const LearnerConfig& config, std::size_t outer_iters,
                               OptimizeReport* report) {
    if (buffer.empty()) throw std::invalid_argument("optimize_filters: empty memory buffer");
    auto fn = target_residual_fn(buffer.samples(), fusion, lambda);
    std::vector<Tensor> params;
    for (const auto& t : filters.tensors()) params.push_back(t.detach());
    auto rep = optimize(params, fn, config, outer_iters);
    if (report) *report = rep;
    return TargetFilters::from_tensors(params);
}

} // namespace flowvos
