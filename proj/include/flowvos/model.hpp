#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "flowvos/backbone.hpp"
#include "flowvos/config.hpp"
#include "flowvos/decoder.hpp"
#include "flowvos/fusion.hpp"
#include "flowvos/target_model.hpp"

namespace flowvos {

// Every offline-trained parameter plus the configuration that shaped it.
struct Model {
    RunConfig config;
    Backbones backbones;
    LabelEncoder label_encoder;
    FusionParams target_fusion; // alpha_tm, over the D label channels
    PyramidFusion decoder_fusion;
    Decoder decoder;

    // Seeded initialization; throws ConfigError without a seed.
    static Model create(const RunConfig& config);

    bool uses_flow() const { return config.fusion_mode != FusionMode::none; }
    TargetModelConfig target_config() const;
    ParamList parameters();
};

// Binary checkpoint: magic "FVOSCKPT", u32 version, the config text block,
// then named tensors (name, rank, u64 extents, f64 payload), little-endian.
void save_checkpoint(const std::filesystem::path& path, Model& model);
// `overrides` are applied on top of the stored configuration.
Model load_checkpoint(const std::filesystem::path& path, const std::map<std::string, std::string>& overrides = {});

} // namespace flowvos
