#include "gpfi/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "gpfi/skeleton_graph.hpp"

namespace gpfi {

namespace {

void require_same(const Pose& a, const Pose& b) {
    if (a.size() != b.size() || a.size() == 0) {
        throw MetricError("pose joint counts differ (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
    }
}

void require_batch(const std::vector<Pose>& preds, const std::vector<Pose>& gts) {
    if (preds.size() != gts.size() || preds.empty()) throw MetricError("prediction and ground-truth batches differ");
    for (std::size_t i = 0; i < preds.size(); ++i) require_same(preds[i], gts[i]);
}

std::vector<double> joint_errors(const Pose& pred, const Pose& gt) {
    std::vector<double> e(pred.size());
    for (std::size_t j = 0; j < e.size(); ++j)
        e[j] = (pred.joints.row(static_cast<Eigen::Index>(j)) - gt.joints.row(static_cast<Eigen::Index>(j))).norm();
    return e;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

double mpjpe(const Pose& pred, const Pose& gt) {
    require_same(pred, gt);
    double sum = 0.0;
    for (double e : joint_errors(pred, gt)) sum += e;
    return sum / static_cast<double>(pred.size());
}

Pose procrustes_align(const Pose& pred, const Pose& gt) {
    require_same(pred, gt);
    const Eigen::RowVector3d mu_p = pred.joints.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.joints.colwise().mean();
    const PoseMatrix x = pred.joints.rowwise() - mu_p;
    const PoseMatrix y = gt.joints.rowwise() - mu_g;
    if (y.norm() < 1e-12) throw MetricError("degenerate ground truth: all joints coincide");

    const double var_x = x.squaredNorm();
    if (var_x < 1e-300) {
        PoseMatrix out = PoseMatrix::Zero(gt.joints.rows(), 3);
        out.rowwise() += mu_g;
        return Pose(out);
    }
    // Maximize trace(R^T M) with M = Y^T X; aligned row = s * (R x)^T + t.
    const Eigen::Matrix3d m = y.transpose() * x;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d d(1.0, 1.0, 1.0);
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2) = -1.0;
    const Eigen::Matrix3d r = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
    const double s = svd.singularValues().dot(d) / var_x;
    PoseMatrix out = s * x * r.transpose();
    out.rowwise() += mu_g;
    return Pose(out);
}

double pa_mpjpe(const Pose& pred, const Pose& gt) { return mpjpe(procrustes_align(pred, gt), gt); }

double torso_length(const Pose& gt) {
    if (gt.size() <= kNeckBase) throw MetricError("torso length needs the 17-joint layout");
    const double len = (gt.joints.row(kNeckBase) - gt.joints.row(kBotTorso)).norm();
    if (!(len > 0.0)) throw MetricError("zero torso length in ground truth");
    return len;
}

std::map<int, double> pck_from_errors(const std::vector<std::vector<double>>& errors,
                                      const std::vector<double>& normalizers, const std::vector<int>& thresholds) {
    if (errors.size() != normalizers.size()) throw MetricError("pck: errors/normalizers size mismatch");
    for (double n : normalizers)
        if (!(n > 0.0)) throw MetricError("pck: body-size normalizer must be positive");
    std::map<int, double> out;
    for (int k : thresholds) {
        std::size_t correct = 0, total = 0;
        for (std::size_t i = 0; i < errors.size(); ++i) {
            const double limit = (static_cast<double>(k) / 100.0) * normalizers[i];
            for (double e : errors[i]) {
                correct += e <= limit ? 1 : 0;
                ++total;
            }
        }
        out[k] = total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    }
    return out;
}

std::map<int, double> pck(const std::vector<Pose>& preds, const std::vector<Pose>& gts,
                          const std::vector<int>& thresholds) {
    require_batch(preds, gts);
    std::vector<std::vector<double>> errors;
    std::vector<double> norms;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        errors.push_back(joint_errors(procrustes_align(preds[i], gts[i]), gts[i]));
        norms.push_back(torso_length(gts[i]));
    }
    return pck_from_errors(errors, norms, thresholds);
}

std::vector<double> per_joint_mpjpe(const std::vector<Pose>& preds, const std::vector<Pose>& gts) {
    require_batch(preds, gts);
    std::vector<double> acc(preds.front().size(), 0.0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto e = joint_errors(preds[i], gts[i]);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += e[j];
    }
    for (auto& v : acc) v /= static_cast<double>(preds.size());
    return acc;
}

MetricsReport evaluate_poses(const std::vector<Pose>& preds, const std::vector<Pose>& gts,
                             const std::vector<int>& thresholds) {
    require_batch(preds, gts);
    MetricsReport r;
    r.n_samples = preds.size();
    r.per_joint_mpjpe_mm = per_joint_mpjpe(preds, gts);
    double sum = 0.0;
    for (double v : r.per_joint_mpjpe_mm) sum += v;
    r.mpjpe_mm = sum / static_cast<double>(r.per_joint_mpjpe_mm.size());

    std::vector<std::vector<double>> aligned_errors;
    std::vector<double> norms;
    double pa_sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        auto e = joint_errors(procrustes_align(preds[i], gts[i]), gts[i]);
        double s = 0.0;
        for (double v : e) s += v;
        pa_sum += s / static_cast<double>(e.size());
        aligned_errors.push_back(std::move(e));
        norms.push_back(torso_length(gts[i]));
    }
    r.pa_mpjpe_mm = pa_sum / static_cast<double>(preds.size());
    r.pck = pck_from_errors(aligned_errors, norms, thresholds);
    return r;
}

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json pck = nlohmann::json::object();
    for (auto [k, v] : r.pck) pck[std::to_string(k)] = v;
    nlohmann::json joints = nlohmann::json::array();
    const auto& names = joint_names();
    for (std::size_t j = 0; j < r.per_joint_mpjpe_mm.size(); ++j) {
        joints.push_back({{"joint", j < names.size() && r.per_joint_mpjpe_mm.size() == names.size()
                                        ? std::string(names[j])
                                        : "joint" + std::to_string(j)},
                          {"mpjpe_mm", r.per_joint_mpjpe_mm[j]}});
    }
    return {{"mpjpe_mm", r.mpjpe_mm},
            {"pa_mpjpe_mm", r.pa_mpjpe_mm},
            {"pck", pck},
            {"per_joint_mpjpe_mm", joints},
            {"n_samples", r.n_samples}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.mpjpe_mm = j.at("mpjpe_mm").get<double>();
    r.pa_mpjpe_mm = j.at("pa_mpjpe_mm").get<double>();
    for (const auto& [k, v] : j.at("pck").items()) r.pck[std::stoi(k)] = v.get<double>();
    for (const auto& e : j.at("per_joint_mpjpe_mm")) r.per_joint_mpjpe_mm.push_back(e.at("mpjpe_mm").get<double>());
    r.n_samples = j.at("n_samples").get<std::size_t>();
    return r;
}

std::string table_csv_header() { return "PCK@10,PCK@20,PCK@30,PCK@40,PCK@50,MPJPE,PA-MPJPE"; }

std::string table_csv_row(const MetricsReport& r) {
    std::ostringstream os;
    for (int k : kPckThresholds) {
        auto it = r.pck.find(k);
        os << (it == r.pck.end() ? std::string("") : fmt(it->second)) << ',';
    }
    os << fmt(r.mpjpe_mm) << ',' << fmt(r.pa_mpjpe_mm);
    return os.str();
}

std::string per_joint_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "joint,mpjpe_mm\n";
    const auto& names = joint_names();
    for (std::size_t j = 0; j < r.per_joint_mpjpe_mm.size(); ++j) {
        const std::string name = r.per_joint_mpjpe_mm.size() == names.size() ? std::string(names[j])
                                                                              : "joint" + std::to_string(j);
        os << name << ',' << fmt(r.per_joint_mpjpe_mm[j]) << '\n';
    }
    return os.str();
}

}  // namespace gpfi
