#include "flowvos/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "flowvos/rng.hpp"

namespace flowvos {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

LabelImage LabelImage::blank(std::size_t width, std::size_t height) {
    return {width, height, std::vector<std::uint8_t>(width * height, 0)};
}

int LabelImage::max_label() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

namespace {

std::string read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_all(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

// Parses a binary netpbm header ("P6 W H 255\n"), skipping comments.
std::size_t parse_netpbm(const std::string& bytes, const fs::path& path, const char* magic, std::size_t& width,
                         std::size_t& height) {
    if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
        throw DataError(path.string() + ": expected " + magic + " header");
    }
    std::size_t pos = 2;
    long fields[3];
    for (long& f : fields) {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw DataError(path.string() + ": malformed header at byte " + std::to_string(start));
        f = std::stol(bytes.substr(start, pos - start));
    }
    if (pos >= bytes.size()) throw DataError(path.string() + ": truncated header");
    ++pos; // single whitespace before the raster
    if (fields[0] <= 0 || fields[1] <= 0) throw DataError(path.string() + ": zero image extent");
    if (fields[2] != 255) throw DataError(path.string() + ": only maxval 255 is supported");
    width = static_cast<std::size_t>(fields[0]);
    height = static_cast<std::size_t>(fields[1]);
    return pos;
}

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& bytes, std::size_t offset) {
    T value;
    std::memcpy(&value, bytes.data() + offset, sizeof(T));
    return value;
}

} // namespace

void write_ppm(const fs::path& path, const RgbImage& image) {
    if (image.data.size() != 3 * image.width * image.height) throw DataError("RGB buffer size mismatch for " + path.string());
    std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    bytes.append(reinterpret_cast<const char*>(image.data.data()), image.data.size());
    write_all(path, bytes);
}

RgbImage read_ppm(const fs::path& path) {
    const std::string bytes = read_all(path);
    RgbImage img;
    const std::size_t pos = parse_netpbm(bytes, path, "P6", img.width, img.height);
    const std::size_t n = 3 * img.width * img.height;
    if (bytes.size() - pos < n) {
        throw DataError(path.string() + ": truncated raster at byte " + std::to_string(bytes.size()));
    }
    img.data.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    return img;
}

void write_pgm(const fs::path& path, const LabelImage& image) {
    if (image.labels.size() != image.width * image.height) throw DataError("label buffer size mismatch for " + path.string());
    std::string bytes = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    bytes.append(reinterpret_cast<const char*>(image.labels.data()), image.labels.size());
    write_all(path, bytes);
}

LabelImage read_pgm(const fs::path& path) {
    const std::string bytes = read_all(path);
    LabelImage img;
    const std::size_t pos = parse_netpbm(bytes, path, "P5", img.width, img.height);
    const std::size_t n = img.width * img.height;
    if (bytes.size() - pos < n) {
        throw DataError(path.string() + ": truncated raster at byte " + std::to_string(bytes.size()));
    }
    img.labels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    return img;
}

void write_flo(const fs::path& path, const FlowField& flow) {
    flow.validate();
    std::string bytes;
    bytes.reserve(12 + 8 * flow.width * flow.height);
    put<float>(bytes, 202021.25f);
    put<std::int32_t>(bytes, static_cast<std::int32_t>(flow.width));
    put<std::int32_t>(bytes, static_cast<std::int32_t>(flow.height));
    for (std::size_t i = 0; i < flow.width * flow.height; ++i) {
        put<float>(bytes, static_cast<float>(flow.u[i]));
        put<float>(bytes, static_cast<float>(flow.v[i]));
    }
    write_all(path, bytes);
}

FlowField read_flo(const fs::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() < 12) throw DataError(path.string() + ": truncated header at byte " + std::to_string(bytes.size()));
    if (get<float>(bytes, 0) != 202021.25f) throw DataError(path.string() + ": bad magic at byte 0");
    const std::int32_t w = get<std::int32_t>(bytes, 4);
    const std::int32_t h = get<std::int32_t>(bytes, 8);
    if (w <= 0 || h <= 0) throw DataError(path.string() + ": invalid extent at byte 4");
    FlowField f = FlowField::zeros(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
    const std::size_t need = 12 + 8 * f.width * f.height;
    if (bytes.size() < need) {
        throw DataError(path.string() + ": truncated payload at byte " + std::to_string(bytes.size()) + " (expected " +
                        std::to_string(need) + ")");
    }
    for (std::size_t i = 0; i < f.width * f.height; ++i) {
        f.u[i] = get<float>(bytes, 12 + 8 * i);
        f.v[i] = get<float>(bytes, 16 + 8 * i);
    }
    return f;
}

Tensor image_tensor(const RgbImage& image) {
    const std::size_t n = image.width * image.height;
    std::vector<double> v(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) v[c * n + i] = image.data[3 * i + c] / 255.0;
    return Tensor({3, image.height, image.width}, std::move(v));
}

Tensor object_mask(const LabelImage& labels, int object) {
    std::vector<double> v(labels.labels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = labels.labels[i] == object ? 1.0 : 0.0;
    return Tensor({1, labels.height, labels.width}, std::move(v));
}

bool Sequence::fully_annotated() const {
    return std::all_of(masks.begin(), masks.end(), [](const auto& m) { return m.has_value(); });
}

std::string frame_file_name(std::size_t index, const std::string& extension) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05zu.%s", index, extension.c_str());
    return buf;
}

void save_sequence(const Sequence& seq, const fs::path& dir) {
    fs::create_directories(dir / "frames");
    fs::create_directories(dir / "flows");
    fs::create_directories(dir / "masks");
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        write_ppm(dir / "frames" / frame_file_name(t, "ppm"), seq.frames[t]);
        write_flo(dir / "flows" / frame_file_name(t, "flo"), seq.flows[t]);
        if (seq.masks[t]) write_pgm(dir / "masks" / frame_file_name(t, "pgm"), *seq.masks[t]);
    }
    std::ofstream meta(dir / "meta");
    meta << "width " << seq.meta.width << "\n"
         << "height " << seq.meta.height << "\n"
         << "frames " << seq.meta.frames << "\n"
         << "objects " << seq.meta.objects << "\n"
         << "flow previous_to_current first_is_0_to_1\n";
    if (!meta) throw DataError("cannot write " + (dir / "meta").string());
}

namespace {

SequenceMeta read_meta(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key, value;
        if (ls >> key >> value) kv[key] = value;
    }
    auto field = [&](const std::string& key) -> std::size_t {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError(path.string() + ": missing key '" + key + "'");
        try {
            std::size_t used = 0;
            const long v = std::stol(it->second, &used);
            if (used != it->second.size() || v < 0) throw std::invalid_argument(key);
            return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw DataError(path.string() + ": invalid value for '" + key + "'");
        }
    };
    SequenceMeta m;
    m.width = field("width");
    m.height = field("height");
    m.frames = field("frames");
    m.objects = field("objects");
    if (m.width == 0 || m.height == 0) throw DataError(path.string() + ": zero frame size");
    if (m.frames == 0) throw DataError(path.string() + ": zero frames");
    return m;
}

std::size_t count_files(const fs::path& dir, const std::string& extension) {
    if (!fs::is_directory(dir)) return 0;
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == "." + extension) ++n;
    return n;
}

} // namespace

Sequence load_sequence(const fs::path& dir) {
    Sequence seq;
    seq.name = dir.filename().string();
    if (seq.name.empty()) seq.name = dir.parent_path().filename().string();
    seq.meta = read_meta(dir / "meta");
    const auto& m = seq.meta;
    const std::size_t frame_files = count_files(dir / "frames", "ppm");
    if (frame_files != m.frames) {
        throw DataError((dir / "meta").string() + ": meta lists " + std::to_string(m.frames) + " frames but " +
                        (dir / "frames").string() + " holds " + std::to_string(frame_files));
    }
    for (std::size_t t = 0; t < m.frames; ++t) {
        const fs::path fp = dir / "frames" / frame_file_name(t, "ppm");
        if (!fs::exists(fp)) throw DataError("missing frame " + std::to_string(t) + ": " + fp.string());
        RgbImage img = read_ppm(fp);
        if (img.width != m.width || img.height != m.height) {
            throw DataError(fp.string() + ": size " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            " does not match meta");
        }
        seq.frames.push_back(std::move(img));

        const fs::path flp = dir / "flows" / frame_file_name(t, "flo");
        if (!fs::exists(flp)) throw DataError("missing flow " + std::to_string(t) + ": " + flp.string());
        FlowField flow = read_flo(flp);
        if (flow.width != m.width || flow.height != m.height) throw DataError(flp.string() + ": size does not match meta");
        flow.source = t == 0 ? 0 : static_cast<int>(t) - 1;
        flow.target = t == 0 ? 1 : static_cast<int>(t);
        try {
            flow.validate();
        } catch (const NumericalError& e) {
            throw NumericalError(flp.string() + ": " + e.what());
        }
        seq.flows.push_back(std::move(flow));

        const fs::path mp = dir / "masks" / frame_file_name(t, "pgm");
        if (fs::exists(mp)) {
            LabelImage lab = read_pgm(mp);
            if (lab.width != m.width || lab.height != m.height) throw DataError(mp.string() + ": size does not match meta");
            if (lab.max_label() > static_cast<int>(m.objects)) {
                throw DataError(mp.string() + ": label " + std::to_string(lab.max_label()) + " exceeds object count " +
                                std::to_string(m.objects));
            }
            seq.masks.emplace_back(std::move(lab));
        } else {
            if (t == 0) throw DataError("missing first-frame annotation: " + mp.string());
            seq.masks.emplace_back();
        }
    }
    return seq;
}

std::vector<fs::path> list_sequences(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
    if (fs::exists(root / "meta")) return {root};
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "meta")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no sequences under " + root.string());
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Lattice noise in [0, 1): hashed corners, bilinear blend with rational
// weights, so every platform produces the same bytes.
double lattice_noise(std::uint64_t seed, long x, long y, long cell) {
    auto floor_div = [](long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    const long gx = floor_div(x, cell), gy = floor_div(y, cell);
    const double fx = static_cast<double>(x - gx * cell) / cell;
    const double fy = static_cast<double>(y - gy * cell) / cell;
    auto corner = [&](long i, long j) {
        const std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(i) * 0x100000001b3ULL ^
                                                   static_cast<std::uint64_t>(j)));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
    const double a = corner(gx, gy), b = corner(gx + 1, gy), c = corner(gx, gy + 1), d = corner(gx + 1, gy + 1);
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(static_cast<long>(v * 255.0 + 0.5), 0L, 255L));
}

struct Placement {
    int x, y;
};

Placement position(const SynthObject& o, std::size_t t) {
    return {o.x + o.vx * static_cast<int>(t), o.y + o.vy * static_cast<int>(t)};
}

bool covers(const SynthObject& o, Placement p, long px, long py) {
    if (o.shape == SynthShape::rect) return px >= p.x && px < p.x + o.width && py >= p.y && py < p.y + o.height;
    const long dx = px - p.x, dy = py - p.y;
    return dx * dx + dy * dy <= static_cast<long>(o.width) * o.width;
}

// Bounding box [x0, x1) x [y0, y1) at frame t.
void bounds(const SynthObject& o, std::size_t t, int& x0, int& y0, int& x1, int& y1) {
    const Placement p = position(o, t);
    if (o.shape == SynthShape::rect) {
        x0 = p.x, y0 = p.y, x1 = p.x + o.width, y1 = p.y + o.height;
    } else {
        x0 = p.x - o.width, y0 = p.y - o.width, x1 = p.x + o.width + 1, y1 = p.y + o.width + 1;
    }
}

bool boxes_apart(const SynthObject& a, const SynthObject& b, int gap) {
    int ax0, ay0, ax1, ay1, bx0, by0, bx1, by1;
    bounds(a, 0, ax0, ay0, ax1, ay1);
    bounds(b, 0, bx0, by0, bx1, by1);
    return ax1 + gap <= bx0 || bx1 + gap <= ax0 || ay1 + gap <= by0 || by1 + gap <= ay0;
}

// Picks a frame-0 position that keeps the whole trajectory inside the canvas.
bool place(SynthObject& o, const SynthScene& s, Rng& rng) {
    const int frames = static_cast<int>(s.frames);
    const int ex = o.shape == SynthShape::rect ? o.width : 2 * o.width + 1;
    const int ey = o.shape == SynthShape::rect ? o.height : 2 * o.width + 1;
    const int span_x = o.vx * (frames - 1), span_y = o.vy * (frames - 1);
    const int lo_x = std::max(0, -span_x), hi_x = static_cast<int>(s.width) - ex - std::max(0, span_x);
    const int lo_y = std::max(0, -span_y), hi_y = static_cast<int>(s.height) - ey - std::max(0, span_y);
    if (hi_x < lo_x || hi_y < lo_y) return false;
    const int left = lo_x + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi_x - lo_x + 1)));
    const int top = lo_y + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi_y - lo_y + 1)));
    o.x = o.shape == SynthShape::rect ? left : left + o.width;
    o.y = o.shape == SynthShape::rect ? top : top + o.width;
    return true;
}

void random_velocity(SynthObject& o, const SynthScene& s, Rng& rng) {
    if (s.static_scene || s.max_speed == 0) {
        o.vx = o.vy = 0;
        return;
    }
    const int m = s.max_speed;
    do {
        o.vx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * m + 1))) - m;
        o.vy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * m + 1))) - m;
    } while (o.vx == 0 && o.vy == 0);
}

} // namespace

std::vector<SynthObject> synth_objects(const SynthScene& s) {
    if (s.frames == 0) throw std::invalid_argument("synthetic scene needs at least one frame");
    if (s.objects == 0) throw std::invalid_argument("synthetic scene needs at least one object");
    if (s.objects > 255) throw std::invalid_argument("synthetic scene supports at most 255 objects");
    Rng rng(s.seed);
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::vector<SynthObject> objs;
        bool ok = true;
        for (std::size_t k = 0; k < s.objects && ok; ++k) {
            SynthObject o;
            o.shape = rng.coin() ? SynthShape::rect : SynthShape::disk;
            const int extent = static_cast<int>(std::min(s.width, s.height));
            const int lo = std::max(4, extent / 6), hi = std::max(lo, extent / 4);
            o.width = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
            o.height = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
            if (o.shape == SynthShape::disk) o.width = (o.width + 1) / 2;
            for (auto& c : o.color) c = static_cast<std::uint8_t>(40 + rng.below(200));
            o.texture_seed = rng.next_u64();
            o.label = static_cast<int>(k) + 1;
            random_velocity(o, s, rng);
            ok = place(o, s, rng);
            objs.push_back(o);
            if (s.distractors && ok) {
                SynthObject twin = o;
                twin.label = 0;
                do {
                    random_velocity(twin, s, rng);
                } while (!s.static_scene && s.max_speed > 0 &&
                         std::max(std::abs(twin.vx - o.vx), std::abs(twin.vy - o.vy)) < std::min(2, s.max_speed));
                ok = place(twin, s, rng);
                objs.push_back(twin);
            }
        }
        if (!ok) continue;
        for (std::size_t i = 0; i < objs.size() && ok; ++i)
            for (std::size_t j = i + 1; j < objs.size() && ok; ++j) ok = boxes_apart(objs[i], objs[j], 2);
        if (!ok) continue;
        // Random depth order.
        for (std::size_t i = objs.size(); i > 1; --i) std::swap(objs[i - 1], objs[rng.below(i)]);
        return objs;
    }
    throw std::invalid_argument("could not place " + std::to_string(s.objects) + " objects in a " +
                                std::to_string(s.width) + "x" + std::to_string(s.height) + " canvas");
}

Sequence generate_synthetic(const SynthScene& s, const std::string& name) {
    if (s.frames == 0) throw std::invalid_argument("synthetic scene needs at least one frame");
    if (s.width == 0 || s.height == 0) throw std::invalid_argument("synthetic scene needs a nonzero canvas");
    const std::vector<SynthObject> objs = s.scripted.empty() ? synth_objects(s) : s.scripted;
    if (objs.empty()) throw std::invalid_argument("synthetic scene needs at least one object");
    int max_label = 0;
    for (const auto& o : objs) max_label = std::max(max_label, o.label);

    Sequence seq;
    seq.name = name;
    seq.meta = {s.width, s.height, s.frames, static_cast<std::size_t>(max_label)};
    const std::uint64_t bg_seed = mix64(s.seed ^ 0xb5ad4eceda1ce2a9ULL);
    const std::size_t n = s.width * s.height;

    // Index of the front-most object covering each pixel at frame t, or -1.
    auto owners = [&](std::size_t t) {
        std::vector<int> owner(n, -1);
        for (std::size_t k = 0; k < objs.size(); ++k) {
            const Placement p = position(objs[k], t);
            for (std::size_t y = 0; y < s.height; ++y)
                for (std::size_t x = 0; x < s.width; ++x)
                    if (covers(objs[k], p, static_cast<long>(x), static_cast<long>(y))) owner[y * s.width + x] = static_cast<int>(k);
        }
        return owner;
    };

    for (std::size_t t = 0; t < s.frames; ++t) {
        const auto owner = owners(t);
        RgbImage img{s.width, s.height, std::vector<std::uint8_t>(3 * n)};
        LabelImage lab = LabelImage::blank(s.width, s.height);
        for (std::size_t y = 0; y < s.height; ++y)
            for (std::size_t x = 0; x < s.width; ++x) {
                const std::size_t i = y * s.width + x;
                const int k = owner[i];
                if (k < 0) {
                    const double g = s.textured ? 0.35 + 0.3 * lattice_noise(bg_seed, static_cast<long>(x), static_cast<long>(y), 8) : 0.5;
                    for (std::size_t c = 0; c < 3; ++c) img.data[3 * i + c] = to_byte(g * (0.8 + 0.1 * c));
                    continue;
                }
                const SynthObject& o = objs[static_cast<std::size_t>(k)];
                const Placement p = position(o, t);
                const double tex = s.textured ? lattice_noise(o.texture_seed, static_cast<long>(x) - p.x, static_cast<long>(y) - p.y, 4) : 0.5;
                for (std::size_t c = 0; c < 3; ++c) img.data[3 * i + c] = to_byte(o.color[c] / 255.0 * (0.7 + 0.6 * tex));
                lab.labels[i] = static_cast<std::uint8_t>(o.label);
            }
        seq.frames.push_back(std::move(img));
        seq.masks.emplace_back(std::move(lab));

        // Flow t-1 -> t lives on the grid of frame t-1; frame 0 carries 0 -> 1.
        const std::size_t src = t == 0 ? 0 : t - 1;
        const auto src_owner = t == 0 ? owner : owners(src);
        FlowField flow = FlowField::zeros(s.width, s.height);
        flow.source = static_cast<int>(src);
        flow.target = t == 0 ? 1 : static_cast<int>(t);
        for (std::size_t i = 0; i < n; ++i) {
            if (src_owner[i] < 0) continue;
            flow.u[i] = objs[static_cast<std::size_t>(src_owner[i])].vx;
            flow.v[i] = objs[static_cast<std::size_t>(src_owner[i])].vy;
        }
        seq.flows.push_back(std::move(flow));
    }
    return seq;
}

} // namespace flowvos
