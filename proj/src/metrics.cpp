#include "flowvos/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "json.hpp"

namespace flowvos {

namespace {

void check_same(const LabelImage& a, const LabelImage& b, const char* what) {
    if (a.width != b.width || a.height != b.height) {
        throw ShapeError(std::string(what) + ": mask sizes differ (" + std::to_string(a.width) + "x" +
                         std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
    }
}

// Fraction of `from` boundary pixels with a `to` boundary pixel within the
// Chebyshev radius.
double matched_fraction(const LabelImage& from, const LabelImage& to, std::size_t radius, std::size_t& count) {
    const long w = static_cast<long>(from.width), h = static_cast<long>(from.height), r = static_cast<long>(radius);
    // Dilate `to` by a (2r+1) square: rows first, then columns.
    std::vector<std::uint8_t> rows(to.labels.size(), 0), dil(to.labels.size(), 0);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (!to.labels[y * w + x]) continue;
            for (long dx = std::max(0L, x - r); dx <= std::min(w - 1, x + r); ++dx) rows[y * w + dx] = 1;
        }
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (!rows[y * w + x]) continue;
            for (long dy = std::max(0L, y - r); dy <= std::min(h - 1, y + r); ++dy) dil[dy * w + x] = 1;
        }
    std::size_t hit = 0;
    count = 0;
    for (std::size_t i = 0; i < from.labels.size(); ++i) {
        if (!from.labels[i]) continue;
        ++count;
        hit += dil[i];
    }
    return count ? static_cast<double>(hit) / static_cast<double>(count) : 0.0;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

} // namespace

double jaccard(const LabelImage& pred, const LabelImage& gt) {
    check_same(pred, gt, "jaccard");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool a = pred.labels[i] != 0, b = gt.labels[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

LabelImage boundary_map(const LabelImage& mask) {
    LabelImage out = LabelImage::blank(mask.width, mask.height);
    const long w = static_cast<long>(mask.width), h = static_cast<long>(mask.height);
    auto fg = [&](long x, long y) { return x >= 0 && y >= 0 && x < w && y < h && mask.labels[y * w + x] != 0; };
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            if (fg(x, y) && (!fg(x - 1, y) || !fg(x + 1, y) || !fg(x, y - 1) || !fg(x, y + 1))) out.labels[y * w + x] = 1;
    return out;
}

double boundary_f(const LabelImage& pred, const LabelImage& gt, std::size_t tol_radius) {
    check_same(pred, gt, "boundary_f");
    const LabelImage bp = boundary_map(pred), bg = boundary_map(gt);
    std::size_t np = 0, ng = 0;
    const double precision = matched_fraction(bp, bg, tol_radius, np);
    const double recall = matched_fraction(bg, bp, tol_radius, ng);
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

std::size_t default_tolerance(std::size_t width, std::size_t height) {
    const double diag = std::sqrt(static_cast<double>(width * width + height * height));
    return static_cast<std::size_t>(std::lround(0.0088 * diag));
}

LabelImage select_object(const LabelImage& labels, int object) {
    LabelImage out = LabelImage::blank(labels.width, labels.height);
    for (std::size_t i = 0; i < labels.labels.size(); ++i) out.labels[i] = labels.labels[i] == object ? 1 : 0;
    return out;
}

std::vector<FrameScore> score_sequence(const std::string& name, const std::vector<LabelImage>& pred,
                                       const std::vector<std::optional<LabelImage>>& gt, std::size_t objects,
                                       std::size_t tol_radius) {
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("sequence " + name + ": " + std::to_string(pred.size()) + " predicted frames vs " +
                                    std::to_string(gt.size()) + " ground-truth frames");
    }
    std::vector<FrameScore> out;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        if (!gt[t]) continue;
        for (std::size_t k = 1; k <= objects; ++k) {
            const LabelImage p = select_object(pred[t], static_cast<int>(k));
            const LabelImage g = select_object(*gt[t], static_cast<int>(k));
            out.push_back({name, static_cast<int>(k), t, jaccard(p, g), boundary_f(p, g, tol_radius)});
        }
    }
    return out;
}

MetricsReport aggregate(std::vector<FrameScore> scores, std::size_t first_scored_frame) {
    MetricsReport report;
    // sequence -> object -> per-frame values, in first-seen order of sequences.
    std::vector<std::string> order;
    std::map<std::string, std::map<int, std::pair<std::vector<double>, std::vector<double>>>> groups;
    for (const auto& s : scores) {
        if (s.frame < first_scored_frame) continue;
        if (!groups.count(s.sequence)) order.push_back(s.sequence);
        auto& g = groups[s.sequence][s.object];
        g.first.push_back(s.j);
        g.second.push_back(s.f);
        report.frames.push_back(s);
    }
    std::vector<double> seq_j, seq_f;
    for (const auto& name : order) {
        std::vector<double> obj_j, obj_f;
        for (const auto& [object, vals] : groups[name]) {
            obj_j.push_back(mean(vals.first));
            obj_f.push_back(mean(vals.second));
        }
        SequenceScore ss{name, mean(obj_j), mean(obj_f), 0.0};
        ss.jf = (ss.j + ss.f) / 2.0;
        report.sequences.push_back(ss);
        seq_j.push_back(ss.j);
        seq_f.push_back(ss.f);
    }
    report.j = mean(seq_j);
    report.f = mean(seq_f);
    report.jf = (report.j + report.f) / 2.0;
    return report;
}

std::string format_score(double value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    return buf;
}

void write_frame_csv(const std::filesystem::path& path, const MetricsReport& report) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "sequence,object,frame,J,F,J&F\n";
    for (const auto& s : report.frames) {
        out << s.sequence << ',' << s.object << ',' << s.frame << ',' << format_score(s.j) << ',' << format_score(s.f)
            << ',' << format_score((s.j + s.f) / 2.0) << '\n';
    }
}

void write_report_json(const std::filesystem::path& path, const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["J"] = report.j;
    j["F"] = report.f;
    j["J&F"] = report.jf;
    j["sequences"] = nlohmann::ordered_json::array();
    for (const auto& s : report.sequences) {
        j["sequences"].push_back({{"sequence", s.sequence}, {"J", s.j}, {"F", s.f}, {"J&F", s.jf}});
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

} // namespace flowvos
