#include "flowvos/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace flowvos {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::size_t to_count(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
    }
}

double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a real number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

template <typename F>
auto wrap(const std::string& key, F&& parse) {
    try {
        return parse();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

std::string real_text(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

} // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    const std::string& v = value;
    if (key == "seed") {
        seed = static_cast<std::uint64_t>(to_count(key, v));
        has_seed = true;
    } else if (key == "fusion.mode") {
        fusion_mode = wrap(key, [&] { return parse_fusion_mode(v); });
    } else if (key == "fusion.key_channels") {
        fusion_key_channels = to_count(key, v);
    } else if (key == "fusion.value_channels") {
        fusion_value_channels = to_count(key, v);
    } else if (key == "flow.prescale") {
        flow_prescale = to_bool(key, v);
    } else if (key == "flow.max_displacement") {
        flow_max_displacement = to_real(key, v);
    } else if (key == "learner.mode") {
        learner.mode = wrap(key, [&] { return parse_learner_mode(v); });
    } else if (key == "learner.init_iters") {
        learner.init_iters = to_count(key, v);
    } else if (key == "learner.update_iters") {
        learner.update_iters = to_count(key, v);
    } else if (key == "learner.cg_iters") {
        learner.cg_iters = to_count(key, v);
    } else if (key == "learner.damping") {
        learner.damping = to_real(key, v);
    } else if (key == "learner.sd_steps") {
        learner.sd_steps = to_count(key, v);
    } else if (key == "learner.max_halvings") {
        learner.max_halvings = to_count(key, v);
    } else if (key == "learner.lambda") {
        lambda = to_real(key, v);
    } else if (key == "learner.buffer_capacity") {
        buffer_capacity = to_count(key, v);
    } else if (key == "learner.buffer_decay") {
        buffer_decay = to_real(key, v);
    } else if (key == "learner.online_updates") {
        online_updates = to_bool(key, v);
    } else if (key == "learner.update_every") {
        update_every = to_count(key, v);
    } else if (key == "learner.update_confidence") {
        update_confidence = to_real(key, v);
    } else if (key == "decoder.l1_source") {
        l1_source = wrap(key, [&] { return parse_level_one_source(v); });
    } else if (key == "decoder.width") {
        decoder_width = to_count(key, v);
    } else if (key == "train.epochs") {
        train_epochs = to_count(key, v);
    } else if (key == "train.samples_per_epoch") {
        train_samples = to_count(key, v);
    } else if (key == "train.learning_rate") {
        train_learning_rate = to_real(key, v);
    } else if (key == "train.frames_per_sample") {
        train_frames = to_count(key, v);
    } else if (key == "train.through_optimizer_steps") {
        train_through_optimizer_steps = to_count(key, v);
    } else if (key == "train.augment") {
        train_augment = to_bool(key, v);
    } else if (key == "train.holdout_sequences") {
        train_holdout_sequences = to_count(key, v);
    } else if (key == "train.holdout_samples") {
        train_holdout_samples = to_count(key, v);
    } else if (key == "metrics.tolerance") {
        metrics_tolerance = to_count(key, v);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

std::string RunConfig::to_text() const {
    std::ostringstream o;
    if (has_seed) o << "seed = " << seed << "\n";
    o << "fusion.mode = " << to_string(fusion_mode) << "\n"
      << "fusion.key_channels = " << fusion_key_channels << "\n"
      << "fusion.value_channels = " << fusion_value_channels << "\n"
      << "flow.prescale = " << (flow_prescale ? "true" : "false") << "\n"
      << "flow.max_displacement = " << real_text(flow_max_displacement) << "\n"
      << "learner.mode = " << to_string(learner.mode) << "\n"
      << "learner.init_iters = " << learner.init_iters << "\n"
      << "learner.update_iters = " << learner.update_iters << "\n"
      << "learner.cg_iters = " << learner.cg_iters << "\n"
      << "learner.damping = " << real_text(learner.damping) << "\n"
      << "learner.sd_steps = " << learner.sd_steps << "\n"
      << "learner.max_halvings = " << learner.max_halvings << "\n"
      << "learner.lambda = " << real_text(lambda) << "\n"
      << "learner.buffer_capacity = " << buffer_capacity << "\n"
      << "learner.buffer_decay = " << real_text(buffer_decay) << "\n"
      << "learner.online_updates = " << (online_updates ? "true" : "false") << "\n"
      << "learner.update_every = " << update_every << "\n"
      << "learner.update_confidence = " << real_text(update_confidence) << "\n"
      << "decoder.l1_source = " << to_string(l1_source) << "\n"
      << "decoder.width = " << decoder_width << "\n"
      << "train.epochs = " << train_epochs << "\n"
      << "train.samples_per_epoch = " << train_samples << "\n"
      << "train.learning_rate = " << real_text(train_learning_rate) << "\n"
      << "train.frames_per_sample = " << train_frames << "\n"
      << "train.through_optimizer_steps = " << train_through_optimizer_steps << "\n"
      << "train.augment = " << (train_augment ? "true" : "false") << "\n"
      << "train.holdout_sequences = " << train_holdout_sequences << "\n"
      << "train.holdout_samples = " << train_holdout_samples << "\n"
      << "metrics.tolerance = " << metrics_tolerance << "\n";
    return o.str();
}

void RunConfig::validate() const {
    try {
        learner.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("learner.*: ") + e.what());
    }
    if (!(flow_max_displacement > 0.0)) throw ConfigError("config key 'flow.max_displacement' must be positive");
    if (lambda < 0.0) throw ConfigError("config key 'learner.lambda' must be nonnegative");
    if (buffer_capacity < 2) throw ConfigError("config key 'learner.buffer_capacity' must be at least 2");
    if (!(buffer_decay > 0.0 && buffer_decay <= 1.0)) throw ConfigError("config key 'learner.buffer_decay' must be in (0, 1]");
    if (update_every < 1) throw ConfigError("config key 'learner.update_every' must be >= 1");
    if (decoder_width < 1) throw ConfigError("config key 'decoder.width' must be >= 1");
    if (train_frames < 2) throw ConfigError("config key 'train.frames_per_sample' must be >= 2");
    if (!(train_learning_rate > 0.0)) throw ConfigError("config key 'train.learning_rate' must be positive");
}

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(no) + ": empty key");
        out[key] = value;
    }
    return out;
}

std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str(), path.string());
}

RunConfig make_config(const std::map<std::string, std::string>& assignments) {
    RunConfig c;
    for (const auto& [k, v] : assignments) c.set(k, v);
    c.validate();
    return c;
}

} // namespace flowvos
