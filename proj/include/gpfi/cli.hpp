#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpfi/data.hpp"
#include "gpfi/model.hpp"
#include "gpfi/training.hpp"

namespace gpfi::cli {

/// Bad invocation, bad input files or refused overwrite; maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;

/// Fully resolved run configuration. Top-level keys: preset, seed, data,
/// synth, skeleton, model, training, metrics. Section seeds default to the
/// top-level seed; a seed override (GPFI_SEED or --seed) replaces all of them.
struct RunConfig {
    std::string preset = "full";
    std::uint64_t seed = 0;
    SplitSpec split;
    SynthConfig synth;
    ModelConfig model;
    TrainConfig training;
    std::vector<int> pck_thresholds = kPckThresholds;
};

/// Validates every section; unknown keys raise ConfigError. Model input dims
/// not given explicitly are taken from `corpus` when provided.
RunConfig resolve_config(const nlohmann::json& doc, std::optional<std::uint64_t> seed_override = std::nullopt,
                         const CorpusDims* corpus = nullptr);
nlohmann::json to_json(const RunConfig& c);
/// Digest of the canonical resolved JSON.
std::string config_digest(const RunConfig& c);

/// Reads a JSON config file; parse failures raise UsageError.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// GPFI_SEED when set; malformed values raise UsageError.
std::optional<std::uint64_t> seed_from_env();

struct RunOutputs {
    MetricsReport final_report;
    TrainHistory history;
    std::string config_digest;
    std::size_t param_count = 0;
    std::size_t head_param_count = 0;
    std::string architecture_digest;
};

/// Split, train and evaluate into `dir` (config.json, history.jsonl,
/// checkpoint_best.gpfc, checkpoint_last.gpfc, metrics.json, table1.csv, per_joint.csv).
RunOutputs run_training(const RunConfig& cfg, const DatasetIndex& corpus, const std::filesystem::path& dir,
                        const std::function<void(const std::string&)>& log);

/// The six ablation configurations: name, table row label, config.
struct AblationRun {
    std::string name;
    std::string label;
    RunConfig config;
};
std::vector<AblationRun> ablation_grid(const RunConfig& base);

/// Entry point of the gpfi tool; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gpfi::cli
