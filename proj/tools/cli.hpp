#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "flowvos/metrics.hpp"
#include "flowvos/pipeline.hpp"

namespace flowvos::cli {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Runs one command line (argv[0] is the program name). Errors are reported on
// `err` and mapped to an exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct AblationRow {
    FusionMode mode = FusionMode::none;
    MetricsReport metrics;
    TrainReport training;
};

// Trains and evaluates one model per fusion mode (none, concat, attention)
// with otherwise identical configuration, data and seed.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<Sequence>& train,
                                      const std::vector<Sequence>& test, const TrainLog& log = {});

// Evaluates a trained model on every sequence.
MetricsReport evaluate_model(const Model& model, const std::vector<Sequence>& sequences);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

} // namespace flowvos::cli
