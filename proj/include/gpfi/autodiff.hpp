#pragma once

// Minimal reverse-mode automatic differentiation over gpfi::Tensor.
//
// A Var is a handle to a node of a dynamically built expression graph. Ops
// record a closure that scatters the node's gradient into its inputs; calling
// backward() on a scalar Var runs those closures in reverse topological order.
// Graphs built from inputs that do not require gradients record nothing, so
// inference pays no bookkeeping cost beyond the forward values.

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "gpfi/tensor.hpp"

namespace gpfi::ad {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-allocated on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool valid() const { return static_cast<bool>(node_); }

    /// Accumulated gradient; empty tensor when nothing flowed here.
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Var make_result(Tensor, const std::vector<Var>&, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

/// Wrap a computed value; the closure is kept only if some input needs a gradient.
Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward_fn);

/// Seeds d(loss)/d(loss) = seed (default 1) and propagates to all leaves.
void backward(const Var& loss, double seed = 1.0);

// ---- element-wise ---------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, double s);
/// Element-wise product with a constant tensor (e.g. a dropout mask).
Var mul_const(const Var& x, const Tensor& m);
/// y = w * x + b with single-element w and b (a 1x1 convolution on one channel).
Var scalar_affine(const Var& x, const Var& w, const Var& b);
/// Adds b (length C) along `axis` of x.
Var add_bias(const Var& x, const Var& b, std::size_t axis);
Var relu(const Var& x);
/// Exact (erf) GELU.
Var gelu(const Var& x);

// ---- shape ----------------------------------------------------------------

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, std::vector<std::size_t> perm);

// ---- reductions -----------------------------------------------------------

Var mean_axis(const Var& x, std::size_t axis);
Var sum_all(const Var& x);
/// Sum of x * weights for a constant weight tensor of the same shape.
Var dot_const(const Var& x, const Tensor& weights);

// ---- linear algebra -------------------------------------------------------

/// x (..., Cin) times w (Cin, Cout), plus optional bias (Cout).
Var linear(const Var& x, const Var& w, const Var* bias = nullptr);
/// Batched matmul over a leading group axis: (G,m,k) x (G,k,n) with optional transposes.
Var bmm(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
/// Left-multiplies every (J, C) slice of x (B, J, C) by the constant matrix m (J, J).
Var graph_mix(const Tensor& m, const Var& x);

// ---- normalization / attention helpers ------------------------------------

Var softmax_last(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
/// GroupNorm over x (N, C, H, W) with `groups` channel groups.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps);
/// weights (P..., n), values (P..., n, d) -> (P..., d): sum_i weights[i] * values[i, :].
Var weighted_sum(const Var& weights, const Var& values);

// ---- convolution / pooling ------------------------------------------------

struct Conv2dGeometry {
    std::array<std::size_t, 2> stride{1, 1};
    std::array<std::size_t, 2> padding{0, 0};
};

/// x (N, C, H, W), w (O, C, kh, kw), optional bias (O).
Var conv2d(const Var& x, const Var& w, const Var* bias, Conv2dGeometry geom);
/// Adaptive average pooling with floor/ceil bin edges; output (N, C, oh, ow).
Var adaptive_avg_pool2d(const Var& x, std::size_t out_h, std::size_t out_w);

// ---- loss -----------------------------------------------------------------

/// Mean over rows of squared row norms of (pred - target); rows are the last axis.
Var row_mse(const Var& pred, const Tensor& target);

}  // namespace gpfi::ad
