#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowvos/jacobian.hpp"
#include "flowvos/target_model.hpp"

namespace flowvos {

enum class LearnerMode { gauss_newton, steepest_descent };

std::string to_string(LearnerMode mode);
LearnerMode parse_learner_mode(const std::string& text);

struct LearnerConfig {
    LearnerMode mode = LearnerMode::gauss_newton;
    std::size_t init_iters = 5;   // outer iterations on the annotated frame
    std::size_t update_iters = 2; // outer iterations per online update
    std::size_t cg_iters = 10;
    double damping = 1e-4;        // Levenberg term mu
    std::size_t sd_steps = 20;    // steepest-descent steps per call
    std::size_t max_halvings = 8;
    double cg_tolerance = 1e-12;  // relative to |J^T r|

    void validate() const;
};

struct OptimizeReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> losses; // loss after every outer iteration / step
    std::size_t accepted_steps = 0;
};

// Process-wide record of every optimize() call, used to check that the online
// loss never increases.
struct LossAudit {
    static std::atomic<std::size_t> calls;
    static std::atomic<std::size_t> increases;
    static void reset();
};

struct CgResult {
    std::vector<double> x;
    std::size_t iterations = 0;
    double residual_norm = 0.0;
};

using LinearOperator = std::function<void(std::span<const double> in, std::span<double> out)>;

// Solves A x = b for symmetric positive (semi)definite A starting from x = 0.
CgResult conjugate_gradient(const LinearOperator& apply, std::span<const double> rhs, std::size_t max_iters,
                            double relative_tolerance);

// Half squared norm of fn(params), evaluated without recording.
double residual_loss(const ResidualFn& fn, std::span<const Tensor> params);

// Minimizes 1/2 |fn(params)|^2 in place. Gauss-Newton: per outer iteration
// solve (J^T J + mu I) d = -J^T r with matrix-free CG, then halve the step
// until the loss does not increase. Steepest descent: sd_steps gradient steps
// with exact line search on the Gauss-Newton model.
OptimizeReport optimize(std::vector<Tensor>& params, const ResidualFn& fn, const LearnerConfig& config,
                        std::size_t outer_iters);

struct MemoryEntry {
    TargetSample sample;
    int frame_index = 0;
    bool pinned = false;
};

// Bounded store of supervision samples. The annotated frame is pinned with the
// maximal weight 1; each later entry decays by `decay` per frame of age.
class MemoryBuffer {
  public:
    explicit MemoryBuffer(std::size_t capacity = 8, double decay = 0.9);

    void push(TargetSample sample, int frame_index, bool pinned = false);

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    const std::vector<MemoryEntry>& entries() const { return entries_; }
    // Samples with sample_weight set from the decay schedule.
    std::vector<TargetSample> samples() const;

  private:
    std::size_t capacity_;
    double decay_;
    std::vector<MemoryEntry> entries_;
};

// Fits the target filters to every sample in the buffer.
TargetFilters optimize_filters(const TargetFilters& filters, const MemoryBuffer& buffer, const FusionParams& fusion,
                               double lambda, const LearnerConfig& config, std::size_t outer_iters,
                               OptimizeReport* report = nullptr);

} // namespace flowvos
