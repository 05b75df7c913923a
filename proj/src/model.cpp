#include "flowvos/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "flowvos/data_io.hpp"

namespace flowvos {

namespace {

constexpr char kMagic[8] = {'F', 'V', 'O', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
  public:
    Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw DataError(origin_ + ": truncated checkpoint at byte " + std::to_string(pos_));
    }
    std::string bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace

Model Model::create(const RunConfig& config) {
    if (!config.has_seed) throw ConfigError("config key 'seed' is required");
    config.validate();
    Model m;
    m.config = config;
    Rng rng(config.seed);
    BackboneConfig bc;
    m.backbones = Backbones(bc, rng);
    m.label_encoder = LabelEncoder(LabelEncoderConfig{}, rng);
    m.target_fusion = FusionParams::make(config.fusion_mode, m.label_encoder.label_channels(), rng,
                                         config.fusion_key_channels, config.fusion_value_channels);
    m.decoder_fusion = PyramidFusion::make(config.fusion_mode, bc, rng);
    DecoderConfig dc;
    dc.level_channels = bc.channels;
    dc.target_channels = m.label_encoder.label_channels();
    dc.width = config.decoder_width;
    m.decoder = Decoder(dc, rng);
    return m;
}

TargetModelConfig Model::target_config() const {
    TargetModelConfig c;
    c.feature_channels = backbones.image.config().channels[2];
    c.label_channels = label_encoder.label_channels();
    c.lambda = config.lambda;
    return c;
}

ParamList Model::parameters() {
    ParamList out;
    backbones.collect(out);
    label_encoder.collect(out);
    target_fusion.collect("fusion.target", out);
    decoder_fusion.collect(out);
    decoder.collect(out);
    return out;
}

void save_checkpoint(const std::filesystem::path& path, Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    const std::string cfg = model.config.to_text();
    put<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const ParamList params = model.parameters();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const Tensor& t = *p.slot;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw DataError("write failed for checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const std::map<std::string, std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    Reader r(ss.str(), path.string());
    if (r.str(8) != std::string(kMagic, 8)) throw DataError(path.string() + ": not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const auto cfg_len = r.get<std::uint64_t>();
    auto assignments = parse_key_values(r.str(cfg_len), path.string());
    for (const auto& [k, v] : overrides) assignments[k] = v;
    Model model = Model::create(make_config(assignments));

    std::map<std::string, Tensor> stored;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>();
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = r.get<double>();
        stored.emplace(name, Tensor(shape, std::move(v)));
    }
    if (!r.done()) throw DataError(path.string() + ": trailing bytes at " + std::to_string(r.pos()));

    for (const auto& p : model.parameters()) {
        auto it = stored.find(p.name);
        if (it == stored.end()) throw DataError(path.string() + ": missing tensor '" + p.name + "'");
        if (it->second.shape() != p.slot->shape()) {
            throw DataError(path.string() + ": tensor '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                            ", model expects " + shape_str(p.slot->shape()));
        }
        *p.slot = it->second;
        stored.erase(it);
    }
    if (!stored.empty()) throw DataError(path.string() + ": unexpected tensor '" + stored.begin()->first + "'");
    return model;
}

} // namespace flowvos
