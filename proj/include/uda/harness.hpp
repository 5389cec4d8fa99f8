#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/eval.hpp"
#include "uda/uda_engine.hpp"

namespace uda {

/// Invalid configuration; `key` is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key, const std::string& message);
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_data = 3, exit_numeric = 4 };

/// Maps an in-flight exception to a process exit code.
int exit_code_for(const std::exception& e);

struct ToyDataConfig {
    ToyConfig generator;
    std::uint64_t seed = 0;
    /// Domain shift of an extra held-out domain scored as out-of-target; <= 0 disables it.
    double out_of_target_shift = 0.0;
};

struct DataConfig {
    /// "toy" or "manifest".
    std::string kind = "toy";
    ToyDataConfig toy;
    std::string source, target, target_val, out_of_target;
};

struct RunConfig {
    int eval_interval = 1000;
    int checkpoint_interval = 1000;
    int log_interval = 1;
    std::uint64_t reference_seed = 0x5eed;
};

struct ExperimentConfig {
    TrainMode mode = TrainMode::uda;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;  // mode is mirrored into train.mode
    InferConfig infer;
    RunConfig run;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";

    nlohmann::json to_json() const;
};

/// Defaults for a data kind: the scaled-down schedule for "toy", the
/// published schedule for "manifest".
nlohmann::json default_config_json(const std::string& data_kind = "toy");

/// Fills defaults, applies `key=value` overrides (value parsed as JSON, else
/// taken as a string) and validates. Unknown keys and type mismatches raise a
/// ConfigError naming the key path.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides = {});
ExperimentConfig resolve_config_json(const nlohmann::json& file_json, const std::vector<std::string>& overrides = {});

/// Resolved config plus a provenance tag ("paper" or "default") per constant.
nlohmann::json resolved_dump(const ExperimentConfig& config);

struct RunResult {
    std::filesystem::path out_dir;
    int steps = 0;
    EvalReport report;
    std::optional<EvalReport> out_of_target;
};

struct RunOptions {
    /// Training checkpoint to continue from.
    std::optional<std::filesystem::path> resume;
    /// Stop (with a checkpoint) after this many steps; for interruption tests.
    std::optional<int> stop_after;
    std::function<void(const std::string&)> log;
};

/// Writes <out>/config.resolved.json, metrics.jsonl, checkpoints/, report.json,
/// report.csv (and report_out_of_target.*), and model.archive.
RunResult run_training(const ExperimentConfig& config, const RunOptions& options = {});

struct StabilityReport {
    std::vector<std::uint64_t> seeds;
    std::vector<std::optional<double>> miou;  // nullopt for a failed run
    std::vector<std::string> errors;
    double best = 0, worst = 0, average = 0, std_dev = 0;

    bool all_succeeded() const;
    nlohmann::json to_json() const;
};

/// Population standard deviation.
double population_std(const std::vector<double>& values);
StabilityReport summarize_stability(const std::vector<std::uint64_t>& seeds, const std::vector<std::optional<double>>& miou,
                                    const std::vector<std::string>& errors);
StabilityReport run_stability(const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                              const RunOptions& options = {});

struct AblationRow {
    std::string removed;  // empty for the base run
    Toggles toggles;
    double miou = 0;
    double delta = 0;
};

struct AblationTable {
    std::vector<AblationRow> rows;

    std::string to_text() const;
    nlohmann::json to_json() const;
};

const std::vector<std::string>& toggle_names();
/// Returns `t` with the named toggle switched off; throws ConfigError for unknown names.
Toggles without(Toggles t, const std::string& name);

AblationTable run_ablation_suite(const ExperimentConfig& base, const std::vector<std::string>& toggles,
                                 const RunOptions& options = {});

}  // namespace uda
