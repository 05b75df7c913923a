#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowvos/data_io.hpp"

namespace flowvos {

// Masks are LabelImages read as binary: any nonzero value is foreground.

// |pred & gt| / |pred | gt|; 1 when both are empty.
double jaccard(const LabelImage& pred, const LabelImage& gt);

// Foreground pixels with a 4-neighbour outside the foreground (the image
// border counts as background).
LabelImage boundary_map(const LabelImage& mask);

// Boundary F-measure with Chebyshev tolerance `tol_radius`.
double boundary_f(const LabelImage& pred, const LabelImage& gt, std::size_t tol_radius);

// round(0.0088 * image diagonal).
std::size_t default_tolerance(std::size_t width, std::size_t height);

// Binary mask of one object from a label image.
LabelImage select_object(const LabelImage& labels, int object);

struct FrameScore {
    std::string sequence;
    int object = 1;
    std::size_t frame = 0;
    double j = 0.0;
    double f = 0.0;
};

struct SequenceScore {
    std::string sequence;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
};

struct MetricsReport {
    std::vector<FrameScore> frames;
    std::vector<SequenceScore> sequences;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
};

// Scores every object on every frame that has ground truth. Frame 0 is scored
// too; aggregate() drops it.
std::vector<FrameScore> score_sequence(const std::string& name, const std::vector<LabelImage>& pred,
                                       const std::vector<std::optional<LabelImage>>& gt, std::size_t objects,
                                       std::size_t tol_radius);

// Mean over frames, then objects, then sequences. Frames with index below
// `first_scored_frame` (the given annotation) are excluded.
MetricsReport aggregate(std::vector<FrameScore> scores, std::size_t first_scored_frame = 1);

void write_frame_csv(const std::filesystem::path& path, const MetricsReport& report);
void write_report_json(const std::filesystem::path& path, const MetricsReport& report);
std::string format_score(double value);

} // namespace flowvos
