#include "gpfi/skeleton_graph.hpp"

#include <algorithm>
#include <queue>
#include <set>
#include <string>

namespace gpfi {

const std::array<std::string_view, kDefaultJoints>& joint_names() {
    static const std::array<std::string_view, kDefaultJoints> names{
        "Bot Torso",   "L.Hip",      "L.Knee",   "L.Foot",  "R.Hip",      "R.Knee",
        "R.Foot",      "Center Torso", "Upper Torso", "Neck Base", "Center Head", "R.Shoulder",
        "R.Elbow",     "R.Hand",     "L.Shoulder", "L.Elbow", "L.Hand"};
    return names;
}

const std::vector<Edge>& default_skeleton_edges() {
    static const std::vector<Edge> edges{{0, 1},  {1, 2},  {2, 3},   {0, 4},   {4, 5},   {5, 6},
                                         {0, 7},  {7, 8},  {8, 9},   {9, 10},  {8, 11},  {11, 12},
                                         {12, 13}, {8, 14}, {14, 15}, {15, 16}};
    return edges;
}

SkeletonGraph build_skeleton(std::size_t joints, const std::vector<Edge>& edges) {
    if (joints == 0) throw GraphError("skeleton needs at least one joint");
    SkeletonGraph g;
    g.joints = joints;
    g.edges = edges;
    g.adjacency = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(joints), static_cast<Eigen::Index>(joints));

    std::set<Edge> seen;
    for (auto [a, b] : edges) {
        if (a >= joints || b >= joints) {
            throw GraphError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") out of range for " +
                             std::to_string(joints) + " joints");
        }
        if (a == b) throw GraphError("self-loop on joint " + std::to_string(a));
        if (!seen.insert({std::min(a, b), std::max(a, b)}).second) {
            throw GraphError("duplicate edge (" + std::to_string(a) + "," + std::to_string(b) + ")");
        }
        const auto i = static_cast<Eigen::Index>(a);
        const auto j = static_cast<Eigen::Index>(b);
        g.adjacency(i, j) = g.adjacency(j, i) = 1.0;
    }

    // Connectivity by BFS from joint 0.
    std::vector<bool> reached(joints, false);
    std::queue<std::size_t> frontier;
    frontier.push(0);
    reached[0] = true;
    while (!frontier.empty()) {
        const auto u = frontier.front();
        frontier.pop();
        for (std::size_t v = 0; v < joints; ++v) {
            if (!reached[v] && g.adjacency(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) != 0.0) {
                reached[v] = true;
                frontier.push(v);
            }
        }
    }
    if (joints > 1) {
        const auto missing = std::find(reached.begin(), reached.end(), false);
        if (missing != reached.end()) {
            throw GraphError("skeleton graph is disconnected (joint " +
                             std::to_string(std::distance(reached.begin(), missing)) + " unreachable)");
        }
    } else {
        throw GraphError("single-joint graph has zero degree; normalized Laplacian undefined");
    }

    g.degree = g.adjacency.rowwise().sum();
    const Eigen::VectorXd inv_sqrt = g.degree.array().rsqrt();
    const auto n = static_cast<Eigen::Index>(joints);
    g.laplacian = Eigen::MatrixXd::Identity(n, n) - inv_sqrt.asDiagonal() * g.adjacency * inv_sqrt.asDiagonal();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.laplacian, Eigen::EigenvaluesOnly);
    g.lambda_max = eig.eigenvalues().maxCoeff();
    g.rescaled = (2.0 / g.lambda_max) * g.laplacian - Eigen::MatrixXd::Identity(n, n);
    return g;
}

ChebBasis cheb_basis(const SkeletonGraph& graph, std::size_t order) {
    if (order < 1) throw GraphError("Chebyshev order must be >= 1");
    const auto n = static_cast<Eigen::Index>(graph.joints);
    ChebBasis basis;
    basis.polys.reserve(order);
    basis.polys.push_back(Eigen::MatrixXd::Identity(n, n));
    if (order > 1) basis.polys.push_back(graph.rescaled);
    for (std::size_t k = 2; k < order; ++k) {
        basis.polys.push_back(2.0 * graph.rescaled * basis.polys[k - 1] - basis.polys[k - 2]);
    }
    for (const auto& m : basis.polys) {
        Tensor t(Shape{graph.joints, graph.joints});
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) t[static_cast<std::size_t>(i * n + j)] = m(i, j);
        basis.operators.push_back(std::move(t));
    }
    return basis;
}

}  // namespace gpfi
