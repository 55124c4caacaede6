#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpfi/autodiff.hpp"
#include "gpfi/params.hpp"
#include "gpfi/pose.hpp"
#include "gpfi/skeleton_graph.hpp"

namespace gpfi {

enum class Aggregator { ltsa, gap, pj_mhsa };
enum class HeadKind { graph, mlp };

std::string to_string(Aggregator a);
std::string to_string(HeadKind h);
Aggregator parse_aggregator(const std::string& s);
HeadKind parse_head(const std::string& s);

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Architecture hyperparameters. Defaults are the full-size network; see
/// ModelConfig::desk() and ModelConfig::tiny() for the reduced presets.
struct ModelConfig {
    std::size_t antennas = 3;       // A
    std::size_t subcarriers = 114;  // S
    std::size_t frames = 10;        // T
    std::size_t joints = 17;        // J
    std::size_t encoder_channels = 128;  // D1
    std::size_t fused_channels = 64;     // D2
    std::size_t graph_channels = 128;    // D3
    std::size_t time_steps = 5;          // W
    std::size_t cheb_order = 2;          // K
    std::size_t blocks = 4;              // N
    std::size_t heads = 4;
    Aggregator aggregator = Aggregator::ltsa;
    HeadKind head = HeadKind::graph;
    bool cheb_bias = true;
    double dropout = 0.0;
    /// MLP-head hidden width; 0 picks the width matching the graph head's size.
    std::size_t mlp_hidden = 0;
    std::vector<Edge> edges = default_skeleton_edges();

    static ModelConfig desk();
    /// A=2, S=32, T=4, J=5, D1=8, D2=8, D3=16, W=2, N=1 on a 5-joint tree.
    static ModelConfig tiny();

    /// Throws ConfigError when the configuration is not buildable.
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep `base` values; unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
/// Stable hex digest of the architecture (to_json(cfg) canonical dump).
std::string architecture_digest(const ModelConfig& cfg);

/// Maps network outputs (normalized units) to millimeters: pose = mean + scale * output.
struct PoseNormalizer {
    Tensor mean;  // (J, 3)
    double scale = 1.0;

    static PoseNormalizer identity(std::size_t joints);
};

/// Spatial sizes of the encoder stages for a given input plane.
struct EncoderPlan {
    struct Stage {
        std::array<std::size_t, 2> stride;
        std::array<std::size_t, 2> out;  // (subcarrier, time)
    };
    std::array<std::size_t, 2> stem{};
    std::vector<Stage> blocks;
};

inline constexpr std::size_t kMinSubcarriers = 32;
inline constexpr std::size_t kMinFrames = 4;
inline constexpr std::size_t kEncoderBlocks = 3;
inline constexpr double kNormEps = 1e-5;

/// Intermediate tensors of one batched forward pass (batch-first layouts).
struct ActivationTrace {
    Tensor antenna_features;   // F_a: (B*A, D1, J, W), image b*A + a
    Tensor fused;              // F_1: (B, J, A, W, D2)
    Tensor alpha;              // (B, J, A, W), softmax over W
    Tensor temporal;           // F_t: (B, J, A, D2)
    Tensor beta;               // (B, J, A), softmax over A
    Tensor aggregated;         // F_2 transposed: (B, J, D2)
    Tensor embedding;          // F_3: (B, J, D2)
    std::vector<Tensor> block_outputs;      // X after each block: (B, J, D3)
    std::vector<Tensor> attention_weights;  // per MHSA: (B*heads, tokens, tokens)
    Tensor output;             // network output before PoseNormalizer: (B, J, 3)
    std::size_t cheb_applications = 0;
};

/// Dropout state for training passes; absent means evaluation mode.
struct DropoutContext {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;
};

/// The full network: shared per-antenna CNN encoder, point-wise antenna fusion,
/// temporal/spatial aggregation, joint embedding and pose regression head.
class GraphPoseModel {
public:
    explicit GraphPoseModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const SkeletonGraph& graph() const { return graph_; }
    const ChebBasis& basis() const { return basis_; }
    const EncoderPlan& encoder_plan() const { return plan_; }

    /// Kaiming-uniform (fan-in) weights, zero biases, unit norm gains.
    ParamStore init_params(std::uint64_t seed) const;

    /// Learnable scalar count of the regression head only.
    std::size_t head_param_count() const;
    /// Hidden width the MLP head uses under this config.
    std::size_t mlp_hidden_width() const;

    // Batched stages over autodiff values.
    ad::Var encode(const Binding& p, const ad::Var& images) const;  // (N,1,S,T) -> (N,D1,J,W)
    ad::Var fuse(const Binding& p, const ad::Var& features, std::size_t batch) const;  // -> (B,J,A,W,D2)
    ad::Var aggregate(const Binding& p, const ad::Var& fused, ActivationTrace* trace) const;  // -> (B,J,D2)
    ad::Var embed(const Binding& p, const ad::Var& aggregated) const;  // -> (B,J,D2)
    ad::Var regress(const Binding& p, const ad::Var& embedding, ActivationTrace* trace,
                    const DropoutContext* dropout = nullptr) const;  // -> (B,J,3)

    /// z: (B, A, S, T). Returns the network output in normalized units (B, J, 3).
    ad::Var forward(const Binding& p, const Tensor& z, ActivationTrace* trace = nullptr,
                    const DropoutContext* dropout = nullptr) const;

private:
    ModelConfig cfg_;
    SkeletonGraph graph_;
    ChebBasis basis_;
    EncoderPlan plan_;
};

// Building blocks shared by the model and the single-sample API below.
namespace layers {

/// sum_k T_k X Theta_k (+ bias); X (B, J, Cin), thetas "<prefix>.theta<k>", bias "<prefix>.bias".
ad::Var cheb_gconv(const Binding& p, const std::string& prefix, const ChebBasis& basis, const ad::Var& x,
                   bool bias, std::size_t* counter = nullptr);
/// Attention branch without residual: projections "<prefix>.{query,key,value,out}.{weight,bias}".
ad::Var mhsa_branch(const Binding& p, const std::string& prefix, const ad::Var& x, std::size_t heads,
                    std::vector<Tensor>* attention = nullptr);
/// x + mhsa_branch(x).
ad::Var mhsa(const Binding& p, const std::string& prefix, const ad::Var& x, std::size_t heads,
             std::vector<Tensor>* attention = nullptr);

}  // namespace layers

// ---- single-sample operations in the documented (channel-first) layouts ----

/// z_a (S, T) -> F_a (D1, J, W).
Tensor encode_antenna(const GraphPoseModel& m, const ParamStore& p, const Tensor& z_a);
/// stack (A, D1, J, W) -> F_1 (D2, J, A, W).
Tensor fuse_antennas(const GraphPoseModel& m, const ParamStore& p, const Tensor& stack);

struct TemporalResult {
    Tensor features;  // F_t (D2, J, A)
    Tensor alpha;     // (J, A, W)
};
TemporalResult temporal_attention(const ParamStore& p, const Tensor& fused);

struct SpatialResult {
    Tensor features;  // F_2 (D2, J)
    Tensor beta;      // (J, A)
};
SpatialResult spatial_attention(const ParamStore& p, const Tensor& temporal);

/// F_2 (D2, J) -> F_3 (J, D2).
Tensor joint_embedding(const ParamStore& p, const Tensor& aggregated);
/// Uniform mean over W then A: F_1 (D2, J, A, W) -> (D2, J).
Tensor aggregate_gap(const Tensor& fused);
/// Per-joint MHSA over A*W tokens then mean-pooling: F_1 (D2, J, A, W) -> (D2, J).
Tensor aggregate_pj_mhsa(const ParamStore& p, const Tensor& fused, std::size_t heads);

/// Plain Chebyshev graph convolution X (J, Cin) with thetas K x (Cin, Cout) and optional bias.
Tensor cheb_gconv(const Tensor& x, const ChebBasis& basis, const std::vector<Tensor>& thetas,
                  const Tensor* bias = nullptr);
/// X (J, C) with projections under `prefix`; includes the residual.
Tensor mhsa(const ParamStore& p, const std::string& prefix, const Tensor& x, std::size_t heads,
            Tensor* attention = nullptr);
/// One graph block (index `block`) on X (J, D3).
Tensor gcn_attention_block(const GraphPoseModel& m, const ParamStore& p, std::size_t block, const Tensor& x);
/// F_3 (J, D2) -> (J, 3) through the configured head (network units).
Tensor regress_pose(const GraphPoseModel& m, const ParamStore& p, const Tensor& embedding,
                    std::size_t* cheb_applications = nullptr);
Tensor mlp_head(const GraphPoseModel& m, const ParamStore& p, const Tensor& embedding);

/// z (A, S, T) -> pose in millimeters.
Pose predict_pose(const GraphPoseModel& m, const ParamStore& p, const PoseNormalizer& norm, const Tensor& z,
                  ActivationTrace* trace = nullptr);

std::size_t param_count(const ParamStore& p);

/// Dense batch of network outputs (B, J, 3) to millimeter poses.
std::vector<Pose> to_poses(const Tensor& output, const PoseNormalizer& norm);

}  // namespace gpfi
