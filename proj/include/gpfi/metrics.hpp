#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpfi/pose.hpp"

namespace gpfi {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline const std::vector<int> kPckThresholds{10, 20, 30, 40, 50};

struct MetricsReport {
    double mpjpe_mm = 0.0;
    double pa_mpjpe_mm = 0.0;
    /// threshold k -> percent of joints within (k / 100) * torso length.
    std::map<int, double> pck;
    std::vector<double> per_joint_mpjpe_mm;
    std::size_t n_samples = 0;
};

/// Mean Euclidean joint distance.
double mpjpe(const Pose& pred, const Pose& gt);

/// Similarity transform (rotation with det +1, scale >= 0, translation) of
/// `pred` minimizing the summed squared distance to `gt`.
Pose procrustes_align(const Pose& pred, const Pose& gt);

double pa_mpjpe(const Pose& pred, const Pose& gt);

/// Body-size normalizer for PCK: ||NeckBase - BotTorso|| of the ground truth.
double torso_length(const Pose& gt);

/// PCK from precomputed per-joint errors: errors[i][j] vs (k / 100) * normalizers[i].
/// A joint exactly on the threshold counts as correct.
std::map<int, double> pck_from_errors(const std::vector<std::vector<double>>& errors,
                                      const std::vector<double>& normalizers, const std::vector<int>& thresholds);

/// PCK over a batch, on Procrustes-aligned predictions.
std::map<int, double> pck(const std::vector<Pose>& preds, const std::vector<Pose>& gts,
                          const std::vector<int>& thresholds = kPckThresholds);

std::vector<double> per_joint_mpjpe(const std::vector<Pose>& preds, const std::vector<Pose>& gts);

/// All metrics over a batch; PA-MPJPE aligns each sample independently.
MetricsReport evaluate_poses(const std::vector<Pose>& preds, const std::vector<Pose>& gts,
                             const std::vector<int>& thresholds = kPckThresholds);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

/// Header and one row: PCK@10..PCK@50, MPJPE, PA-MPJPE.
std::string table_csv_header();
std::string table_csv_row(const MetricsReport& r);
/// "joint,mpjpe_mm" rows in joint order.
std::string per_joint_csv(const MetricsReport& r);

}  // namespace gpfi
