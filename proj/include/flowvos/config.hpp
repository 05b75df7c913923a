#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "flowvos/decoder.hpp"
#include "flowvos/fusion.hpp"
#include "flowvos/learner.hpp"

namespace flowvos {

// Bad configuration key or value; the message names the key.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    std::uint64_t seed = 0;
    bool has_seed = false;

    FusionMode fusion_mode = FusionMode::attention;
    std::size_t fusion_key_channels = 0; // 0 = max(C / 2, 4)
    std::size_t fusion_value_channels = 0;

    bool flow_prescale = false;
    double flow_max_displacement = 20.0; // embedded flow is divided by this

    LearnerConfig learner;
    double lambda = 1e-2;
    std::size_t buffer_capacity = 8;
    double buffer_decay = 0.9;
    bool online_updates = true;
    std::size_t update_every = 4;     // re-optimize on every n-th frame
    double update_confidence = 0.85; // ... or when mean foreground probability exceeds this

    LevelOneSource l1_source = LevelOneSource::flow;
    std::size_t decoder_width = 16;

    std::size_t train_epochs = 2;
    std::size_t train_samples = 600; // per epoch
    double train_learning_rate = 1e-3;
    std::size_t train_frames = 4; // frames per training sample (one reference)
    std::size_t train_through_optimizer_steps = 0;
    bool train_augment = true;
    std::size_t train_holdout_sequences = 0; // 0 = about a tenth of the data
    std::size_t train_holdout_samples = 12;

    std::size_t metrics_tolerance = 0; // 0 = round(0.0088 * diagonal)

    // Applies one key=value assignment; throws ConfigError naming the key.
    void set(const std::string& key, const std::string& value);
    // Canonical text form listing every key (stable order).
    std::string to_text() const;
    void validate() const;
};

// Parses "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

// Builds a config from defaults plus the given assignments, in order.
RunConfig make_config(const std::map<std::string, std::string>& assignments);

} // namespace flowvos
