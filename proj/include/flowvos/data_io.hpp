#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowvos/flow_embed.hpp"
#include "flowvos/tensor.hpp"

namespace flowvos {

// Malformed, missing or inconsistent input data.
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> data; // interleaved RGB, row-major
};

// 0 = background, k = object k.
struct LabelImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> labels;

    static LabelImage blank(std::size_t width, std::size_t height);
    std::uint8_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }
    int max_label() const;
};

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelImage& image);
LabelImage read_pgm(const std::filesystem::path& path);

// Middlebury .flo: float32 magic 202021.25, int32 width, int32 height, then
// interleaved float32 (u, v), all little-endian.
void write_flo(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);

// 3 x H x W in [0, 1].
Tensor image_tensor(const RgbImage& image);
// 1 x H x W, 1 where the label equals `object`.
Tensor object_mask(const LabelImage& labels, int object);

struct SequenceMeta {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t frames = 0;
    std::size_t objects = 0;
};

// frames/%05d.ppm, flows/%05d.flo (flow t-1 -> t; 00000 holds 0 -> 1),
// masks/%05d.pgm and a `meta` text file.
struct Sequence {
    std::string name;
    SequenceMeta meta;
    std::vector<RgbImage> frames;
    std::vector<FlowField> flows;
    std::vector<std::optional<LabelImage>> masks;

    bool fully_annotated() const;
};

std::string frame_file_name(std::size_t index, const std::string& extension);

void save_sequence(const Sequence& sequence, const std::filesystem::path& dir);
// Validates every file against `meta`. Masks are optional except for frame 0.
Sequence load_sequence(const std::filesystem::path& dir);
// Subdirectories of `root` holding a `meta` file, sorted by name. A directory
// that is itself a sequence is returned alone.
std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& root);

enum class SynthShape { rect, disk };

struct SynthObject {
    SynthShape shape = SynthShape::rect;
    int x = 0; // rect: top-left corner at frame 0; disk: centre
    int y = 0;
    int width = 12; // rect extent; disk uses width as radius
    int height = 12;
    int vx = 0; // pixels per frame
    int vy = 0;
    std::array<std::uint8_t, 3> color{200, 60, 60};
    std::uint64_t texture_seed = 0;
    int label = 1; // 0 marks an unannotated distractor
};

struct SynthScene {
    std::size_t width = 64;
    std::size_t height = 64;
    std::size_t frames = 8;
    std::size_t objects = 1;
    bool distractors = false; // add an identical-appearance twin per object
    bool textured = true;
    bool static_scene = false;
    int max_speed = 3;
    std::uint64_t seed = 0;
    // Explicit back-to-front object list; when empty, objects are drawn from `seed`.
    std::vector<SynthObject> scripted;
};

// Random object layout for a scene (back to front).
std::vector<SynthObject> synth_objects(const SynthScene& scene);
Sequence generate_synthetic(const SynthScene& scene, const std::string& name = "synthetic");

} // namespace flowvos
