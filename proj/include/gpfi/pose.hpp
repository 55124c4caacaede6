#pragma once

#include <Eigen/Dense>
#include <cstddef>

namespace gpfi {

using PoseMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// J x 3 joint coordinates in millimeters, rows in joint_names() order.
struct Pose {
    PoseMatrix joints;

    Pose() = default;
    explicit Pose(std::size_t joint_count) : joints(PoseMatrix::Zero(static_cast<Eigen::Index>(joint_count), 3)) {}
    explicit Pose(PoseMatrix m) : joints(std::move(m)) {}

    std::size_t size() const { return static_cast<std::size_t>(joints.rows()); }
    bool all_finite() const { return joints.allFinite(); }
};

}  // namespace gpfi
