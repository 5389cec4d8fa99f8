// Command-line front end: train, eval, stability, ablate, toygen, stats.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "uda/harness.hpp"

namespace fs = std::filesystem;
using namespace uda;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Experiment config (JSON)");
    cmd->add_option("--set", c.sets, "Override, key=value (repeatable)");
    cmd->add_option("--seed", c.seed, "Run seed");
    cmd->add_option("--out", c.out, "Output directory");
}

ExperimentConfig resolve(const Common& c) {
    std::vector<std::string> overrides = c.sets;
    if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
    if (!c.out.empty()) overrides.push_back("out_dir=" + c.out);
    std::optional<fs::path> file;
    if (!c.config.empty()) file = c.config;
    return resolve_config(file, overrides);
}

void check_device() {
    const char* dev = std::getenv("UDA_FORGE_DEVICE");
    if (dev && std::string(dev) != "cpu" && std::string(dev) != "")
        throw ConfigError("UDA_FORGE_DEVICE", std::string("unsupported device '") + dev + "' (only 'cpu' is built in)");
}

void log_line(const std::string& msg) { std::cerr << "[uda_forge] " << msg << std::endl; }

std::unique_ptr<SegmentationModel> load_any_model(const fs::path& path) {
    const Archive ar = load_archive(path);
    if (ar.meta.value("kind", "") == "training") {
        TrainingState st;
        load_training_checkpoint(path, st);
        return std::move(st.student);
    }
    return load_model(path);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw ConfigError("--seeds", "not an integer: '" + item + "'");
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uda_forge: unsupervised domain adaptation for semantic segmentation"};
    app.require_subcommand(1);

    Common train_c, eval_c, stab_c, abl_c, toy_c, stats_c;
    std::string resume, model_path, eval_data, seeds = "0,1,2,3,4,5", stats_data;
    std::vector<std::string> ablate_toggles = toggle_names();

    auto* train = app.add_subcommand("train", "Train one model");
    add_common(train, train_c);
    train->add_option("--resume", resume, "Training checkpoint to continue from");

    auto* eval = app.add_subcommand("eval", "Evaluate a saved model");
    add_common(eval, eval_c);
    eval->add_option("--model", model_path, "model.archive or training checkpoint")->required();
    eval->add_option("--data", eval_data, "Labeled dataset root (default: the config's evaluation set)");

    auto* stability = app.add_subcommand("stability", "Train once per seed and summarise the spread");
    add_common(stability, stab_c);
    stability->add_option("--seeds", seeds, "Comma-separated seeds");

    auto* ablate = app.add_subcommand("ablate", "Remove one training strategy at a time");
    add_common(ablate, abl_c);
    ablate->add_option("--toggles", ablate_toggles, "Toggles to remove");

    auto* toygen = app.add_subcommand("toygen", "Write the synthetic two-domain benchmark to disk");
    add_common(toygen, toy_c);

    auto* stats = app.add_subcommand("stats", "Class frequency table of a labeled dataset");
    add_common(stats, stats_c);
    stats->add_option("--data", stats_data, "Dataset root (default: toy source domain)");

    CLI11_PARSE(app, argc, argv);

    try {
        check_device();
        if (train->parsed()) {
            const ExperimentConfig cfg = resolve(train_c);
            RunOptions opt;
            opt.log = log_line;
            if (!resume.empty()) opt.resume = resume;
            const auto t0 = std::chrono::steady_clock::now();
            const RunResult r = run_training(cfg, opt);
            std::cout << r.report.to_table();
            if (r.out_of_target) std::cout << "out-of-target\n" << r.out_of_target->to_table();
            log_line("wall clock " +
                     std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
        } else if (eval->parsed()) {
            const ExperimentConfig cfg = resolve(eval_c);
            const auto model = load_any_model(model_path);
            const ModelPredictor predictor(*model);
            EvalReport r;
            if (!eval_data.empty()) {
                const ClassSpace cs = read_manifest_class_space(eval_data);
                r = evaluate(predictor, load_manifest(eval_data, Domain::target, cs), cfg.infer);
            } else if (cfg.data.kind == "toy") {
                r = evaluate(predictor, generate_toy_domains(cfg.data.toy.generator, cfg.data.toy.seed).target_val,
                             cfg.infer, "target_val");
            } else {
                const ClassSpace cs = read_manifest_class_space(cfg.data.target_val);
                r = evaluate(predictor, load_manifest(cfg.data.target_val, Domain::target, cs), cfg.infer);
            }
            std::cout << r.to_table();
            if (!eval_c.out.empty()) {
                fs::create_directories(eval_c.out);
                std::ofstream(fs::path(eval_c.out) / "report.json") << r.to_json().dump(2) << "\n";
                std::ofstream(fs::path(eval_c.out) / "report.csv") << r.to_csv();
            }
        } else if (stability->parsed()) {
            const ExperimentConfig cfg = resolve(stab_c);
            RunOptions opt;
            opt.log = log_line;
            const StabilityReport r = run_stability(cfg, parse_seeds(seeds), opt);
            std::cout << r.to_json().dump(2) << "\n";
            if (!r.all_succeeded()) return exit_failure;
        } else if (ablate->parsed()) {
            const ExperimentConfig cfg = resolve(abl_c);
            RunOptions opt;
            opt.log = log_line;
            std::cout << run_ablation_suite(cfg, ablate_toggles, opt).to_text();
        } else if (toygen->parsed()) {
            const ExperimentConfig cfg = resolve(toy_c);
            const fs::path root = toy_c.out.empty() ? fs::path("toy_data") : fs::path(toy_c.out);
            const ToyDomains d = generate_toy_domains(cfg.data.toy.generator, cfg.data.toy.seed);
            write_dataset(d.source, root / "source");
            write_dataset(d.target_train, root / "target_train");
            write_dataset(d.target_train_labeled, root / "target_train_labeled");
            write_dataset(d.target_val, root / "target_val");
            log_line("wrote " + root.string());
        } else if (stats->parsed()) {
            const ExperimentConfig cfg = resolve(stats_c);
            if (!stats_data.empty()) {
                const ClassSpace cs = read_manifest_class_space(stats_data);
                std::cout << compute_class_frequencies(load_manifest(stats_data, Domain::source, cs)).to_csv(cs);
            } else {
                const Dataset src = generate_toy_domains(cfg.data.toy.generator, cfg.data.toy.seed).source;
                std::cout << compute_class_frequencies(src).to_csv(src.class_space);
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return exit_code_for(e);
    }
    return exit_ok;
}
