#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

#include "gpfi/tensor.hpp"

namespace gpfi {

using Edge = std::pair<std::size_t, std::size_t>;

inline constexpr std::size_t kDefaultJoints = 17;

/// Joint order of the 17-joint skeleton used throughout (labels, metrics, reports).
const std::array<std::string_view, kDefaultJoints>& joint_names();

/// Kinematic tree over joint_names(); shoulders hang off Upper Torso (8).
const std::vector<Edge>& default_skeleton_edges();

inline constexpr std::size_t kBotTorso = 0;
inline constexpr std::size_t kNeckBase = 9;

class GraphError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Undirected, unweighted joint graph with the spectral operators derived from it.
/// Immutable once built.
struct SkeletonGraph {
    std::size_t joints = 0;
    std::vector<Edge> edges;
    Eigen::MatrixXd adjacency;
    Eigen::VectorXd degree;
    /// I - D^{-1/2} A D^{-1/2}
    Eigen::MatrixXd laplacian;
    /// Largest eigenvalue of `laplacian`, from a full eigendecomposition.
    double lambda_max = 0.0;
    /// 2 L / lambda_max - I
    Eigen::MatrixXd rescaled;
};

/// Throws GraphError on out-of-range, self-loop or duplicate edges and on
/// disconnected graphs (an isolated joint has no D^{-1/2}).
SkeletonGraph build_skeleton(std::size_t joints, const std::vector<Edge>& edges);

inline SkeletonGraph default_skeleton() { return build_skeleton(kDefaultJoints, default_skeleton_edges()); }

/// Chebyshev polynomials T_0..T_{K-1} of the rescaled Laplacian.
struct ChebBasis {
    std::vector<Eigen::MatrixXd> polys;
    /// Same matrices as row-major tensors, for the autodiff graph mixing op.
    std::vector<Tensor> operators;

    std::size_t order() const { return polys.size(); }
};

ChebBasis cheb_basis(const SkeletonGraph& graph, std::size_t order);

}  // namespace gpfi
