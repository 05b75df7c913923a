#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "flowvos/model.hpp"

namespace flowvos::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Options shared by every model-building command.
struct ConfigOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;

    void add_to(CLI::App* app) {
        app->add_option("--config", config_path, "key = value configuration file");
        app->add_option("--seed", seed, "random seed (overrides the config file)");
        app->add_option("--set", sets, "extra key=value override, repeatable");
    }

    // File values, then command flags, then --set, then --seed.
    std::map<std::string, std::string> assignments(const std::map<std::string, std::string>& flags) const {
        std::map<std::string, std::string> a;
        if (!config_path.empty()) a = read_key_value_file(config_path);
        for (const auto& [k, v] : flags) a[k] = v;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
            auto trim = [](std::string x) {
                const auto b = x.find_first_not_of(" \t");
                const auto e = x.find_last_not_of(" \t");
                return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
            };
            a[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
        }
        if (seed) a["seed"] = std::to_string(*seed);
        return a;
    }
};

bool verbose() {
    const char* v = std::getenv("FLOWVOS_LOG");
    return v == nullptr || (std::string(v) != "quiet" && std::string(v) != "0");
}

TrainLog make_log(std::ostream& err) {
    if (!verbose()) return {};
    return [&err](const std::string& msg) { err << msg << '\n'; };
}

std::vector<Sequence> load_all(const fs::path& root) {
    std::vector<Sequence> out;
    for (const auto& p : list_sequences(root)) out.push_back(load_sequence(p));
    return out;
}

std::size_t tolerance_for(const RunConfig& cfg, std::size_t w, std::size_t h) {
    return cfg.metrics_tolerance > 0 ? cfg.metrics_tolerance : default_tolerance(w, h);
}

std::string mode_label(FusionMode mode) {
    switch (mode) {
    case FusionMode::none: return "Baseline";
    case FusionMode::concat: return "Concatenated";
    case FusionMode::attention: return "Ours";
    }
    return "";
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

int cmd_synth(const fs::path& out_dir, const SynthScene& base, std::size_t sequences, std::ostream& out) {
    if (sequences == 0) throw UsageError("--sequences must be at least 1");
    for (std::size_t i = 0; i < sequences; ++i) {
        SynthScene scene = base;
        scene.seed = base.seed + i;
        std::ostringstream name;
        name << "seq_" << std::setw(3) << std::setfill('0') << i;
        const fs::path dir = sequences == 1 ? out_dir : out_dir / name.str();
        save_sequence(generate_synthetic(scene, name.str()), dir);
    }
    out << "wrote " << sequences << " sequence(s) to " << out_dir.string() << '\n';
    return kOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& ckpt, std::ostream& out,
              std::ostream& err) {
    Model model = Model::create(cfg);
    const auto sequences = load_all(data);
    const TrainReport report = train_offline(model, sequences, make_log(err));
    save_checkpoint(ckpt, model);
    out << "trained " << to_string(cfg.fusion_mode) << " model on " << report.train_sequences << " sequence(s)";
    if (!report.train_loss.empty()) out << ", final train loss " << report.train_loss.back();
    out << "\ncheckpoint " << ckpt.string() << '\n';
    return kOk;
}

int cmd_run(const fs::path& seq_dir, const fs::path& ckpt, const std::map<std::string, std::string>& overrides,
            const fs::path& out_dir, std::ostream& out) {
    const Model model = load_checkpoint(ckpt, overrides);
    const Sequence seq = load_sequence(seq_dir);
    const auto results = infer_sequence(model, seq);
    fs::create_directories(out_dir);
    std::ostringstream timing;
    timing << "frame,milliseconds,updated\n";
    for (const auto& r : results) {
        write_pgm(out_dir / frame_file_name(r.frame, "pgm"), r.labels);
        timing << r.frame << ',' << std::fixed << std::setprecision(3) << r.milliseconds << ',' << (r.updated ? 1 : 0)
               << '\n';
    }
    write_text(out_dir / "timing.csv", timing.str());
    out << "wrote " << results.size() << " mask(s) to " << out_dir.string() << '\n';
    return kOk;
}

std::vector<LabelImage> read_predictions(const fs::path& dir, std::size_t frames) {
    const fs::path base = fs::is_directory(dir / "masks") ? dir / "masks" : dir;
    std::vector<LabelImage> out;
    for (std::size_t t = 0; t < frames; ++t) {
        const fs::path p = base / frame_file_name(t, "pgm");
        if (!fs::exists(p)) throw DataError("missing predicted mask " + std::to_string(t) + ": " + p.string());
        out.push_back(read_pgm(p));
    }
    return out;
}

int cmd_eval(const RunConfig& cfg, const fs::path& pred, const fs::path& gt, const fs::path& report_path,
             const std::string& frames_csv, std::ostream& out) {
    const auto gt_dirs = list_sequences(gt);
    const bool single = gt_dirs.size() == 1 && gt_dirs[0] == gt;
    std::vector<FrameScore> scores;
    for (const auto& dir : gt_dirs) {
        const Sequence seq = load_sequence(dir);
        const fs::path pred_dir = single ? pred : pred / dir.filename();
        const auto predictions = read_predictions(pred_dir, seq.frames.size());
        const auto s = score_sequence(seq.name, predictions, seq.masks, seq.meta.objects,
                                      tolerance_for(cfg, seq.meta.width, seq.meta.height));
        scores.insert(scores.end(), s.begin(), s.end());
    }
    const MetricsReport report = aggregate(scores);
    if (report.frames.empty()) throw DataError("no annotated frames after frame 0 to score under " + gt.string());
    if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
    write_report_json(report_path, report);
    if (!frames_csv.empty()) write_frame_csv(frames_csv, report);
    out << "J " << format_score(report.j) << "  F " << format_score(report.f) << "  J&F " << format_score(report.jf)
        << '\n';
    return kOk;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& data, const fs::path& out_path, std::ostream& out,
               std::ostream& err) {
    if (!fs::is_directory(data / "train") || !fs::is_directory(data / "test")) {
        throw DataError("ablation data " + data.string() + " needs train/ and test/ subdirectories");
    }
    const auto train = load_all(data / "train");
    const auto test = load_all(data / "test");
    const auto rows = run_ablation(cfg, train, test, make_log(err));
    write_text(out_path, ablation_csv(rows));
    fs::path table_path = out_path;
    table_path.replace_extension(".txt");
    if (table_path == out_path) table_path += ".txt";
    const std::string table = ablation_table(rows);
    write_text(table_path, table);
    out << table;
    return kOk;
}

} // namespace

MetricsReport evaluate_model(const Model& model, const std::vector<Sequence>& sequences) {
    std::vector<FrameScore> scores;
    for (const auto& seq : sequences) {
        const auto results = infer_sequence(model, seq);
        std::vector<LabelImage> pred;
        for (const auto& r : results) pred.push_back(r.labels);
        const auto s = score_sequence(seq.name, pred, seq.masks, seq.meta.objects,
                                      tolerance_for(model.config, seq.meta.width, seq.meta.height));
        scores.insert(scores.end(), s.begin(), s.end());
    }
    return aggregate(scores);
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<Sequence>& train,
                                      const std::vector<Sequence>& test, const TrainLog& log) {
    if (test.empty()) throw DataError("ablation needs at least one test sequence");
    std::vector<AblationRow> rows;
    for (FusionMode mode : {FusionMode::none, FusionMode::concat, FusionMode::attention}) {
        RunConfig cfg = base;
        cfg.fusion_mode = mode;
        if (log) log("ablation: training " + to_string(mode));
        Model model = Model::create(cfg);
        AblationRow row;
        row.mode = mode;
        row.training = train_offline(model, train, log);
        row.metrics = evaluate_model(model, test);
        if (log) log("ablation: " + to_string(mode) + " J&F " + format_score(row.metrics.jf));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream o;
    o << "mode,J,F,J&F\n";
    for (const auto& r : rows) {
        o << to_string(r.mode) << ',' << format_score(r.metrics.j) << ',' << format_score(r.metrics.f) << ','
          << format_score(r.metrics.jf) << '\n';
    }
    return o.str();
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream o;
    o << std::left << std::setw(26) << "Method" << std::right << std::setw(8) << "J" << std::setw(8) << "F"
      << std::setw(8) << "J&F" << '\n';
    o << std::fixed << std::setprecision(1);
    for (const auto& r : rows) {
        o << std::left << std::setw(26) << (mode_label(r.mode) + " (" + to_string(r.mode) + ")") << std::right
          << std::setw(8) << 100.0 * r.metrics.j << std::setw(8) << 100.0 * r.metrics.f << std::setw(8)
          << 100.0 * r.metrics.jf << '\n';
    }
    return o.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Flow-guided semi-supervised video object segmentation"};
    app.require_subcommand(1);

    SynthScene scene;
    std::string synth_out;
    std::size_t synth_sequences = 1;
    int synth_width = 64, synth_height = 64;
    bool synth_static = false, synth_flat = false;
    auto* synth = app.add_subcommand("synth", "generate synthetic sequences with exact flow");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--frames", scene.frames, "frames per sequence");
    synth->add_option("--objects", scene.objects, "annotated objects per sequence");
    synth->add_option("--seed", scene.seed, "scene seed")->required();
    synth->add_flag("--distractors", scene.distractors, "add an identical-appearance twin per object");
    synth->add_option("--sequences", synth_sequences, "number of sequences (seeds seed, seed+1, ...)");
    synth->add_option("--width", synth_width, "frame width");
    synth->add_option("--height", synth_height, "frame height");
    synth->add_flag("--static", synth_static, "no motion");
    synth->add_flag("--flat", synth_flat, "untextured colours");
    synth->add_option("--max-speed", scene.max_speed, "maximum speed in pixels per frame");

    ConfigOptions train_opts;
    std::string train_data, train_out, train_fusion;
    std::optional<std::size_t> train_epochs, train_samples;
    auto* train = app.add_subcommand("train", "offline training");
    train->add_option("--data", train_data, "sequence directory or parent of sequences")->required();
    train->add_option("--out", train_out, "checkpoint path")->required();
    train->add_option("--epochs", train_epochs, "training epochs");
    train->add_option("--samples", train_samples, "training samples per epoch");
    train->add_option("--fusion", train_fusion, "fusion mode: none, concat or attention");
    train_opts.add_to(train);

    std::string run_seq, run_ckpt, run_out;
    std::vector<std::string> run_sets;
    std::string run_config;
    auto* runc = app.add_subcommand("run", "segment one sequence");
    runc->add_option("--seq", run_seq, "sequence directory")->required();
    runc->add_option("--ckpt", run_ckpt, "checkpoint path")->required();
    runc->add_option("--out", run_out, "mask output directory")->required();
    runc->add_option("--config", run_config, "configuration overrides file");
    runc->add_option("--set", run_sets, "extra key=value override, repeatable");

    ConfigOptions eval_opts;
    std::string eval_pred, eval_gt, eval_report, eval_frames;
    std::optional<std::size_t> eval_tol;
    auto* eval = app.add_subcommand("eval", "score predicted masks");
    eval->add_option("--pred", eval_pred, "predicted masks (directory or parent of directories)")->required();
    eval->add_option("--gt", eval_gt, "ground-truth sequence directory or parent")->required();
    eval->add_option("--report", eval_report, "JSON report path")->required();
    eval->add_option("--frames-csv", eval_frames, "optional per-frame CSV path");
    eval->add_option("--tolerance", eval_tol, "boundary tolerance in pixels (default: 0.0088 * diagonal)");
    eval_opts.add_to(eval);

    ConfigOptions ablate_opts;
    std::string ablate_data, ablate_out;
    std::optional<std::size_t> ablate_epochs, ablate_samples;
    auto* ablate = app.add_subcommand("ablate", "compare fusion modes none, concat and attention");
    ablate->add_option("--data", ablate_data, "directory holding train/ and test/")->required();
    ablate->add_option("--out", ablate_out, "CSV report path; a text table is written next to it")->required();
    ablate->add_option("--epochs", ablate_epochs, "training epochs per mode");
    ablate->add_option("--samples", ablate_samples, "training samples per epoch");
    ablate_opts.add_to(ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (synth->parsed()) {
            if (synth_width <= 0 || synth_height <= 0) throw UsageError("--width and --height must be positive");
            scene.width = static_cast<std::size_t>(synth_width);
            scene.height = static_cast<std::size_t>(synth_height);
            scene.static_scene = synth_static;
            scene.textured = !synth_flat;
            return cmd_synth(synth_out, scene, synth_sequences, out);
        }
        if (train->parsed()) {
            std::map<std::string, std::string> flags;
            if (train_epochs) flags["train.epochs"] = std::to_string(*train_epochs);
            if (train_samples) flags["train.samples_per_epoch"] = std::to_string(*train_samples);
            if (!train_fusion.empty()) flags["fusion.mode"] = train_fusion;
            return cmd_train(make_config(train_opts.assignments(flags)), train_data, train_out, out, err);
        }
        if (runc->parsed()) {
            ConfigOptions o;
            o.config_path = run_config;
            o.sets = run_sets;
            return cmd_run(run_seq, run_ckpt, o.assignments({}), run_out, out);
        }
        if (eval->parsed()) {
            std::map<std::string, std::string> flags;
            if (eval_tol) flags["metrics.tolerance"] = std::to_string(*eval_tol);
            return cmd_eval(make_config(eval_opts.assignments(flags)), eval_pred, eval_gt, eval_report, eval_frames,
                            out);
        }
        if (ablate->parsed()) {
            std::map<std::string, std::string> flags;
            if (ablate_epochs) flags["train.epochs"] = std::to_string(*ablate_epochs);
            if (ablate_samples) flags["train.samples_per_epoch"] = std::to_string(*ablate_samples);
            const RunConfig cfg = make_config(ablate_opts.assignments(flags));
            if (!cfg.has_seed) throw ConfigError("config key 'seed' is required (use --seed or the config file)");
            return cmd_ablate(cfg, ablate_data, ablate_out, out, err);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}

} // namespace flowvos::cli
