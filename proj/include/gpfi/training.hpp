#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpfi/data.hpp"
#include "gpfi/metrics.hpp"
#include "gpfi/model.hpp"

namespace gpfi {

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::string preset = "full";
    double lr0 = 3e-4;
    double weight_decay = 0.02;
    std::size_t epochs = 50;
    std::size_t batch_size = 256;
    /// Samples per forward/backward pass; gradients are accumulated up to
    /// batch_size, so this only bounds memory.
    std::size_t micro_batch = 64;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr_floor = 1e-7;
    /// Apply weight decay to normalization gains and biases too.
    bool decay_norm_params = false;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0.0;
    std::size_t eval_every = 1;
    std::uint64_t seed = 0;

    /// lr 3e-4, wd 0.02, 50 epochs, batch 256.
    static TrainConfig full();
    /// 20 epochs, batch 64.
    static TrainConfig desk();
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep `base` values; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// (1/J) * sum_j ||pred_j - gt_j||^2.
double mse_loss(const Pose& pred, const Pose& gt);
/// Mean of the per-sample losses.
double mse_loss(const std::vector<Pose>& preds, const std::vector<Pose>& gts);

/// Cosine decay lr0 * (1 + cos(pi * step / total)) / 2, floored at cfg.lr_floor.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

/// Adam moments with decoupled weight decay: p <- p * (1 - lr * wd) before the
/// adaptive step; tensors registered with decay=false skip the shrink.
class AdamW {
public:
    AdamW(const ParamStore& params, const TrainConfig& cfg);
    void step(ParamStore& params, const std::vector<Tensor>& grads, double lr);
    std::size_t steps() const { return t_; }

private:
    double beta1_, beta2_, eps_, wd_;
    bool decay_norm_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// Train-set pose statistics: mean pose and RMS deviation per coordinate, rounded to float32.
PoseNormalizer fit_normalizer(const std::vector<Pose>& poses);

struct Checkpoint {
    ModelConfig model;
    ParamStore params;
    PoseNormalizer normalizer;
    /// Free-form run metadata (run config, config digest, epoch).
    nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "GPFC" | u32 version | str architecture digest | str metadata JSON |
/// u32 n | n x (str name | u32 rank | u32 dims... | f32 values...), little-endian,
/// strings as u32 length + bytes. Tensors follow ParamStore registration order,
/// then "buffer.target_mean" (J,3) and "buffer.target_scale" (1).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Rejects a file whose architecture digest differs from `expected`
/// (when given) unless `force`; forced loads still require matching shapes.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr,
                           bool force = false);

/// Rounds every parameter to float32, the precision checkpoints store.
void round_to_float32(ParamStore& params);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;     // normalized units
    double train_loss_mm2 = 0.0;  // same loss in squared millimeters
    std::vector<double> lr;       // one entry per optimizer step
    std::optional<MetricsReport> val;
    double seconds = 0.0;
};

struct TrainHistory {
    nlohmann::json recipe;
    std::optional<MetricsReport> initial_val;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double wall_seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

struct TrainHooks {
    /// Receives the recipe header and then one record per epoch, in order.
    std::function<void(const nlohmann::json&)> on_record;
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    Checkpoint last;
    Checkpoint best;
    TrainHistory history;
    /// Validation report of `last` as stored (float32 parameters).
    std::optional<MetricsReport> final_val;
};

/// Mini-batch AdamW with the cosine schedule, decayed per optimizer step.
/// Batch order is a seeded shuffle per epoch. Throws TrainingDiverged when
/// the loss or parameters become non-finite. epochs = 0 returns the initialization.
TrainResult train(const ModelConfig& model, const DatasetIndex& train_set, const DatasetIndex& val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

struct Evaluation {
    MetricsReport report;
    std::vector<Pose> predictions;
    std::vector<Pose> targets;
};

/// Forward pass over every sample of `index` and the metrics of the predictions.
Evaluation evaluate(const GraphPoseModel& model, const ParamStore& params, const PoseNormalizer& norm,
                    const DatasetIndex& index, std::size_t batch_size = 64);
MetricsReport evaluate(const Checkpoint& ckpt, const DatasetIndex& index);

// ---- gradient audit ---------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_entry = 0;
    std::size_t entries_checked = 0;
    /// Entries compared against a one-sided difference (stencil crossed a kink).
    std::size_t one_sided_entries = 0;
};

/// Lets tests tamper with the analytic gradients before comparison.
using GradientHook = std::function<void(std::vector<Tensor>&)>;

/// Central differences (step h) of `loss` against its analytic gradient for every
/// tensor of `params`; tensors above 1000 entries are checked on a seeded sample.
/// Per-entry error |a - n| / max(|a|, |n|, 1e-6 * max(1, |loss|)). Entries whose
/// stencil straddles a ReLU kink (detected from the +-h, +-2h samples) are
/// scored against the second-order one-sided difference of the smooth side.
GradCheckResult grad_check(ParamStore& params, const std::function<ad::Var(const Binding&)>& loss,
                           std::uint64_t seed, double h = 1e-5, const GradientHook& hook = {});

/// Audit of the full network on a random batch of two samples.
GradCheckResult grad_check(const ModelConfig& cfg, std::uint64_t seed, const GradientHook& hook = {});

}  // namespace gpfi
