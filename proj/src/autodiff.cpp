#include "gpfi/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace gpfi::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

bool wants(const std::shared_ptr<Node>& n) { return n->requires_grad; }

CVecMap vec(const Tensor& t) { return CVecMap(t.data(), static_cast<Eigen::Index>(t.size())); }
VecMap vec(Tensor& t) { return VecMap(t.data(), static_cast<Eigen::Index>(t.size())); }

struct Split3 {
    std::size_t outer = 1, mid = 1, inner = 1;
};

Split3 split_at(const Shape& s, std::size_t axis) {
    Split3 r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.mid = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward_fn) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
        out.node_->requires_grad = true;
        out.node_->inputs.reserve(inputs.size());
        for (const auto& v : inputs) out.node_->inputs.push_back(v.node());
        out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
}

void backward(const Var& loss, double seed) {
    if (loss.value().size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---- element-wise ---------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    vec(out) += vec(b.value());
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (auto& in : self.inputs)
            if (wants(in)) vec(in->grad_buffer()) += vec(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    vec(out) -= vec(b.value());
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += vec(self.grad);
        if (wants(self.inputs[1])) vec(self.inputs[1]->grad_buffer()) -= vec(self.grad);
    });
}

Var scale(const Var& x, double s) {
    Tensor out = x.value();
    vec(out) *= s;
    return make_result(std::move(out), {x}, [s](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += s * vec(self.grad);
    });
}

Var mul_const(const Var& x, const Tensor& m) {
    if (x.shape() != m.shape()) throw ShapeError("mul_const: shape mismatch");
    Tensor out = x.value();
    vec(out).array() *= vec(m).array();
    return make_result(std::move(out), {x}, [m](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()).array() += vec(self.grad).array() * vec(m).array();
    });
}

Var scalar_affine(const Var& x, const Var& w, const Var& b) {
    if (w.value().size() != 1 || b.value().size() != 1) throw ShapeError("scalar_affine: w and b must be scalars");
    Tensor out = x.value();
    const double wv = w.value()[0];
    const double bv = b.value()[0];
    vec(out) = (vec(out) * wv).array() + bv;
    return make_result(std::move(out), {x, w, b}, [wv](Node& self) {
        const auto& xin = self.inputs[0];
        if (wants(xin)) vec(xin->grad_buffer()) += wv * vec(self.grad);
        if (wants(self.inputs[1])) self.inputs[1]->grad_buffer()[0] += vec(self.grad).dot(vec(xin->value));
        if (wants(self.inputs[2])) self.inputs[2]->grad_buffer()[0] += vec(self.grad).sum();
    });
}

Var add_bias(const Var& x, const Var& b, std::size_t axis) {
    if (axis >= x.value().rank() || b.value().size() != x.dim(axis)) {
        throw ShapeError("add_bias: bias length does not match axis of " + shape_str(x.shape()));
    }
    const Split3 sp = split_at(x.shape(), axis);
    Tensor out = x.value();
    const double* bv = b.value().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t c = 0; c < sp.mid; ++c) {
            double* p = out.data() + (o * sp.mid + c) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) p[i] += bv[c];
        }
    return make_result(std::move(out), {x, b}, [sp](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += vec(self.grad);
        if (wants(self.inputs[1])) {
            Tensor& gb = self.inputs[1]->grad_buffer();
            const double* g = self.grad.data();
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t c = 0; c < sp.mid; ++c) {
                    const double* p = g + (o * sp.mid + c) * sp.inner;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < sp.inner; ++i) acc += p[i];
                    gb[c] += acc;
                }
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(out), {x}, [](Node& self) {
        auto& in = self.inputs[0];
        if (!wants(in)) return;
        Tensor& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in->value[i] > 0.0) g[i] += self.grad[i];
    });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return make_result(std::move(out), {x}, [](Node& self) {
        auto& in = self.inputs[0];
        if (!wants(in)) return;
        Tensor& g = in->grad_buffer();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = in->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// ---- shape ----------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {x}, [](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += vec(self.grad);
    });
}

Var permute(const Var& x, std::vector<std::size_t> perm) {
    Tensor out = gpfi::permute(x.value(), perm);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
    return make_result(std::move(out), {x}, [inverse](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += vec(gpfi::permute(self.grad, inverse));
    });
}

// ---- reductions -----------------------------------------------------------

Var mean_axis(const Var& x, std::size_t axis) {
    if (axis >= x.value().rank()) throw ShapeError("mean_axis: axis out of range");
    const Split3 sp = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(out_shape);
    const double inv = 1.0 / static_cast<double>(sp.mid);
    const double* xv = x.value().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.mid; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.mid + k) * sp.inner + i] * inv;
    return make_result(std::move(out), {x}, [sp, inv](Node& self) {
        auto& in = self.inputs[0];
        if (!wants(in)) return;
        Tensor& g = in->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.mid; ++k)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    g[(o * sp.mid + k) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
    });
}

Var sum_all(const Var& x) {
    Tensor out(Shape{1}, vec(x.value()).sum());
    return make_result(std::move(out), {x}, [](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()).array() += self.grad[0];
    });
}

Var dot_const(const Var& x, const Tensor& weights) {
    if (x.shape() != weights.shape()) throw ShapeError("dot_const: shape mismatch");
    Tensor out(Shape{1}, vec(x.value()).dot(vec(weights)));
    return make_result(std::move(out), {x}, [weights](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += self.grad[0] * vec(weights);
    });
}

// ---- linear algebra -------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var* bias) {
    if (w.value().rank() != 2 || x.value().rank() < 1 || x.shape().back() != w.dim(0)) {
        throw ShapeError("linear: cannot apply " + shape_str(w.shape()) + " to " + shape_str(x.shape()));
    }
    const auto cin = static_cast<Eigen::Index>(w.dim(0));
    const auto cout = static_cast<Eigen::Index>(w.dim(1));
    const auto rows = static_cast<Eigen::Index>(x.value().size() / w.dim(0));
    if (bias && bias->value().size() != w.dim(1)) throw ShapeError("linear: bias length mismatch");
    Shape out_shape = x.shape();
    out_shape.back() = w.dim(1);
    Tensor out(out_shape);
    MapR y(out.data(), rows, cout);
    y.noalias() = CMapR(x.value().data(), rows, cin) * CMapR(w.value().data(), cin, cout);
    if (bias) y.rowwise() += CVecMap(bias->value().data(), cout).transpose();

    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return make_result(std::move(out), inputs, [rows, cin, cout](Node& self) {
        CMapR gy(self.grad.data(), rows, cout);
        auto& xn = self.inputs[0];
        auto& wn = self.inputs[1];
        if (wants(xn)) MapR(xn->grad_buffer().data(), rows, cin).noalias() += gy * CMapR(wn->value.data(), cin, cout).transpose();
        if (wants(wn)) MapR(wn->grad_buffer().data(), cin, cout).noalias() += CMapR(xn->value.data(), rows, cin).transpose() * gy;
        if (self.inputs.size() > 2 && wants(self.inputs[2])) vec(self.inputs[2]->grad_buffer()) += gy.colwise().sum().transpose();
    });
}

Var bmm(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
    if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0)) throw ShapeError("bmm: expects (G,.,.) operands");
    const auto G = a.dim(0);
    const auto ar = static_cast<Eigen::Index>(a.dim(1)), ac = static_cast<Eigen::Index>(a.dim(2));
    const auto br = static_cast<Eigen::Index>(b.dim(1)), bc = static_cast<Eigen::Index>(b.dim(2));
    const auto m = transpose_a ? ac : ar;
    const auto k = transpose_a ? ar : ac;
    const auto kb = transpose_b ? bc : br;
    const auto n = transpose_b ? br : bc;
    if (k != kb) throw ShapeError("bmm: inner dimensions differ");
    Tensor out(Shape{G, static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
    for (std::size_t g = 0; g < G; ++g) {
        CMapR A(a.value().data() + g * ar * ac, ar, ac);
        CMapR B(b.value().data() + g * br * bc, br, bc);
        MapR C(out.data() + g * m * n, m, n);
        if (!transpose_a && !transpose_b) C.noalias() = A * B;
        else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
        else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    return make_result(std::move(out), {a, b}, [=](Node& self) {
        auto& an = self.inputs[0];
        auto& bn = self.inputs[1];
        for (std::size_t g = 0; g < G; ++g) {
            CMapR gC(self.grad.data() + g * m * n, m, n);
            CMapR A(an->value.data() + g * ar * ac, ar, ac);
            CMapR B(bn->value.data() + g * br * bc, br, bc);
            if (wants(an)) {
                MapR gA(an->grad_buffer().data() + g * ar * ac, ar, ac);
                // d op(A) = gC * op(B)^T
                if (!transpose_a) {
                    if (!transpose_b) gA.noalias() += gC * B.transpose();
                    else gA.noalias() += gC * B;
                } else {
                    if (!transpose_b) gA.noalias() += B * gC.transpose();
                    else gA.noalias() += B.transpose() * gC.transpose();
                }
            }
            if (wants(bn)) {
                MapR gB(bn->grad_buffer().data() + g * br * bc, br, bc);
                // d op(B) = op(A)^T * gC
                if (!transpose_b) {
                    if (!transpose_a) gB.noalias() += A.transpose() * gC;
                    else gB.noalias() += A * gC;
                } else {
                    if (!transpose_a) gB.noalias() += gC.transpose() * A;
                    else gB.noalias() += gC.transpose() * A.transpose();
                }
            }
        }
    });
}

Var graph_mix(const Tensor& m, const Var& x) {
    if (m.rank() != 2 || x.value().rank() != 3 || m.dim(0) != m.dim(1) || m.dim(1) != x.dim(1)) {
        throw ShapeError("graph_mix: operator " + shape_str(m.shape()) + " incompatible with " + shape_str(x.shape()));
    }
    const auto B = x.dim(0);
    const auto J = static_cast<Eigen::Index>(x.dim(1));
    const auto C = static_cast<Eigen::Index>(x.dim(2));
    Tensor out(x.shape());
    CMapR M(m.data(), J, J);
    for (std::size_t b = 0; b < B; ++b)
        MapR(out.data() + b * J * C, J, C).noalias() = M * CMapR(x.value().data() + b * J * C, J, C);
    return make_result(std::move(out), {x}, [m, B, J, C](Node& self) {
        auto& xn = self.inputs[0];
        if (!wants(xn)) return;
        CMapR M(m.data(), J, J);
        for (std::size_t b = 0; b < B; ++b)
            MapR(xn->grad_buffer().data() + b * J * C, J, C).noalias() +=
                M.transpose() * CMapR(self.grad.data() + b * J * C, J, C);
    });
}

// ---- normalization / attention helpers ------------------------------------

Var softmax_last(const Var& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.value().size() / n;
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * n;
        const double mx = *std::max_element(p, p + n);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (p[i] = std::exp(p[i] - mx));
        for (std::size_t i = 0; i < n; ++i) p[i] /= s;
    }
    Tensor y = out;
    return make_result(std::move(out), {x}, [y = std::move(y), n, rows](Node& self) {
        auto& xn = self.inputs[0];
        if (!wants(xn)) return;
        Tensor& g = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yp = y.data() + r * n;
            const double* gp = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += gp[i] * yp[i];
            for (std::size_t i = 0; i < n; ++i) g[r * n + i] += yp[i] * (gp[i] - dot);
        }
    });
}

namespace {

// Shared normalization kernel: each of `count` groups holds `len` contiguous
// elements; channel(group, i) gives the affine parameter index.
struct NormCache {
    Tensor xhat;
    std::vector<double> inv_std;
};

template <typename ChannelOf>
NormCache normalize_groups(const Tensor& x, std::size_t count, std::size_t len, double eps, const Tensor& gamma,
                           const Tensor& beta, Tensor& out, ChannelOf channel) {
    NormCache c{Tensor(x.shape()), std::vector<double>(count)};
    for (std::size_t g = 0; g < count; ++g) {
        const double* p = x.data() + g * len;
        double mean = 0.0;
        for (std::size_t i = 0; i < len; ++i) mean += p[i];
        mean /= static_cast<double>(len);
        double var = 0.0;
        for (std::size_t i = 0; i < len; ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= static_cast<double>(len);
        const double is = 1.0 / std::sqrt(var + eps);
        c.inv_std[g] = is;
        for (std::size_t i = 0; i < len; ++i) {
            const double xh = (p[i] - mean) * is;
            c.xhat[g * len + i] = xh;
            const std::size_t ch = channel(g, i);
            out[g * len + i] = gamma[ch] * xh + beta[ch];
        }
    }
    return c;
}

template <typename ChannelOf>
void normalize_groups_backward(Node& self, const NormCache& c, std::size_t count, std::size_t len, ChannelOf channel) {
    auto& xn = self.inputs[0];
    auto& gn = self.inputs[1];
    auto& bn = self.inputs[2];
    const Tensor& gamma = gn->value;
    for (std::size_t g = 0; g < count; ++g) {
        const double* gy = self.grad.data() + g * len;
        const double* xh = c.xhat.data() + g * len;
        if (wants(gn) || wants(bn)) {
            for (std::size_t i = 0; i < len; ++i) {
                const std::size_t ch = channel(g, i);
                if (wants(gn)) gn->grad_buffer()[ch] += gy[i] * xh[i];
                if (wants(bn)) bn->grad_buffer()[ch] += gy[i];
            }
        }
        if (wants(xn)) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double gi = gy[i] * gamma[channel(g, i)];
                mean_g += gi;
                mean_gx += gi * xh[i];
            }
            mean_g /= static_cast<double>(len);
            mean_gx /= static_cast<double>(len);
            Tensor& gx = xn->grad_buffer();
            for (std::size_t i = 0; i < len; ++i) {
                const double gi = gy[i] * gamma[channel(g, i)];
                gx[g * len + i] += c.inv_std[g] * (gi - mean_g - xh[i] * mean_gx);
            }
        }
    }
}

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::size_t C = x.shape().back();
    if (gamma.value().size() != C || beta.value().size() != C) throw ShapeError("layer_norm: affine size mismatch");
    const std::size_t rows = x.value().size() / C;
    Tensor out(x.shape());
    auto channel = [](std::size_t, std::size_t i) { return i; };
    NormCache cache = normalize_groups(x.value(), rows, C, eps, gamma.value(), beta.value(), out, channel);
    return make_result(std::move(out), {x, gamma, beta}, [cache = std::move(cache), rows, C, channel](Node& self) {
        normalize_groups_backward(self, cache, rows, C, channel);
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps) {
    if (x.value().rank() != 4) throw ShapeError("group_norm: expects (N,C,H,W)");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (groups == 0 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.value().size() != C || beta.value().size() != C) throw ShapeError("group_norm: affine size mismatch");
    const std::size_t cpg = C / groups;
    const std::size_t count = N * groups;
    const std::size_t len = cpg * HW;
    Tensor out(x.shape());
    auto channel = [groups, cpg, HW](std::size_t g, std::size_t i) { return (g % groups) * cpg + i / HW; };
    NormCache cache = normalize_groups(x.value(), count, len, eps, gamma.value(), beta.value(), out, channel);
    return make_result(std::move(out), {x, gamma, beta}, [cache = std::move(cache), count, len, channel](Node& self) {
        normalize_groups_backward(self, cache, count, len, channel);
    });
}

Var weighted_sum(const Var& weights, const Var& values) {
    const Shape& ws = weights.shape();
    const Shape& vs = values.shape();
    if (vs.size() != ws.size() + 1 || !std::equal(ws.begin(), ws.end(), vs.begin())) {
        throw ShapeError("weighted_sum: weights " + shape_str(ws) + " incompatible with values " + shape_str(vs));
    }
    const std::size_t n = ws.back();
    const std::size_t d = vs.back();
    const std::size_t P = weights.value().size() / n;
    Shape out_shape(ws.begin(), ws.end() - 1);
    out_shape.push_back(d);
    Tensor out(out_shape);
    for (std::size_t p = 0; p < P; ++p) {
        double* o = out.data() + p * d;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = weights.value()[p * n + i];
            const double* v = values.value().data() + (p * n + i) * d;
            for (std::size_t c = 0; c < d; ++c) o[c] += w * v[c];
        }
    }
    return make_result(std::move(out), {weights, values}, [P, n, d](Node& self) {
        auto& wn = self.inputs[0];
        auto& vn = self.inputs[1];
        for (std::size_t p = 0; p < P; ++p) {
            const double* gy = self.grad.data() + p * d;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t row = (p * n + i) * d;
                if (wants(wn)) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d; ++c) acc += gy[c] * vn->value[row + c];
                    wn->grad_buffer()[p * n + i] += acc;
                }
                if (wants(vn)) {
                    const double w = wn->value[p * n + i];
                    double* gv = vn->grad_buffer().data() + row;
                    for (std::size_t c = 0; c < d; ++c) gv[c] += w * gy[c];
                }
            }
        }
    });
}

// ---- convolution / pooling ------------------------------------------------

namespace {

struct ConvDims {
    std::size_t N, C, H, W, O, kh, kw, oh, ow, sh, sw, ph, pw;
    std::size_t patch() const { return C * kh * kw; }
    std::size_t pixels() const { return oh * ow; }
};

// col: (C*kh*kw, count*oh*ow) for images [n0, n0+count).
void im2col(const double* x, const ConvDims& d, std::size_t n0, std::size_t count, double* col) {
    const std::size_t cols = count * d.pixels();
    for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
                for (std::size_t n = 0; n < count; ++n) {
                    const double* img = x + ((n0 + n) * d.C + c) * d.H * d.W;
                    for (std::size_t oi = 0; oi < d.oh; ++oi) {
                        const auto ii = static_cast<std::ptrdiff_t>(oi * d.sh + ki) - static_cast<std::ptrdiff_t>(d.ph);
                        double* dst = row + n * d.pixels() + oi * d.ow;
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.H)) {
                            std::fill(dst, dst + d.ow, 0.0);
                            continue;
                        }
                        for (std::size_t oj = 0; oj < d.ow; ++oj) {
                            const auto jj = static_cast<std::ptrdiff_t>(oj * d.sw + kj) - static_cast<std::ptrdiff_t>(d.pw);
                            dst[oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(d.W)) ? 0.0 : img[ii * d.W + jj];
                        }
                    }
                }
            }
}

void col2im(const double* col, const ConvDims& d, std::size_t n0, std::size_t count, double* gx) {
    const std::size_t cols = count * d.pixels();
    for (std::size_t c = 0; c < d.C; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
                for (std::size_t n = 0; n < count; ++n) {
                    double* img = gx + ((n0 + n) * d.C + c) * d.H * d.W;
                    for (std::size_t oi = 0; oi < d.oh; ++oi) {
                        const auto ii = static_cast<std::ptrdiff_t>(oi * d.sh + ki) - static_cast<std::ptrdiff_t>(d.ph);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.H)) continue;
                        const double* src = row + n * d.pixels() + oi * d.ow;
                        for (std::size_t oj = 0; oj < d.ow; ++oj) {
                            const auto jj = static_cast<std::ptrdiff_t>(oj * d.sw + kj) - static_cast<std::ptrdiff_t>(d.pw);
                            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(d.W)) img[ii * d.W + jj] += src[oj];
                        }
                    }
                }
            }
}

// Images per im2col chunk, keeping the column buffer near 2M doubles.
std::size_t chunk_images(const ConvDims& d) {
    const std::size_t per = d.patch() * d.pixels();
    return std::max<std::size_t>(1, (std::size_t{1} << 21) / std::max<std::size_t>(per, 1));
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* bias, Conv2dGeometry geom) {
    if (x.value().rank() != 4 || w.value().rank() != 4 || x.dim(1) != w.dim(1)) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    ConvDims d{};
    d.N = x.dim(0), d.C = x.dim(1), d.H = x.dim(2), d.W = x.dim(3);
    d.O = w.dim(0), d.kh = w.dim(2), d.kw = w.dim(3);
    d.sh = geom.stride[0], d.sw = geom.stride[1], d.ph = geom.padding[0], d.pw = geom.padding[1];
    if (d.H + 2 * d.ph < d.kh || d.W + 2 * d.pw < d.kw || d.sh == 0 || d.sw == 0) throw ShapeError("conv2d: input smaller than kernel");
    d.oh = (d.H + 2 * d.ph - d.kh) / d.sh + 1;
    d.ow = (d.W + 2 * d.pw - d.kw) / d.sw + 1;
    if (bias && bias->value().size() != d.O) throw ShapeError("conv2d: bias length mismatch");

    Tensor out(Shape{d.N, d.O, d.oh, d.ow});
    const std::size_t chunk = chunk_images(d);
    std::vector<double> col;
    MatR y;
    const auto O = static_cast<Eigen::Index>(d.O);
    const auto K = static_cast<Eigen::Index>(d.patch());
    const auto P = static_cast<Eigen::Index>(d.pixels());
    CMapR wm(w.value().data(), O, K);
    for (std::size_t n0 = 0; n0 < d.N; n0 += chunk) {
        const std::size_t cnt = std::min(chunk, d.N - n0);
        col.resize(d.patch() * cnt * d.pixels());
        im2col(x.value().data(), d, n0, cnt, col.data());
        const auto cols = static_cast<Eigen::Index>(cnt) * P;
        y.noalias() = wm * CMapR(col.data(), K, cols);
        for (std::size_t n = 0; n < cnt; ++n)
            MapR(out.data() + (n0 + n) * d.O * d.pixels(), O, P) = y.middleCols(static_cast<Eigen::Index>(n) * P, P);
    }
    if (bias) {
        const double* b = bias->value().data();
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t o = 0; o < d.O; ++o) {
                double* p = out.data() + (n * d.O + o) * d.pixels();
                for (std::size_t i = 0; i < d.pixels(); ++i) p[i] += b[o];
            }
    }

    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return make_result(std::move(out), inputs, [d, chunk, O, K, P](Node& self) {
        auto& xn = self.inputs[0];
        auto& wn = self.inputs[1];
        if (self.inputs.size() > 2 && wants(self.inputs[2])) {
            Tensor& gb = self.inputs[2]->grad_buffer();
            for (std::size_t n = 0; n < d.N; ++n)
                for (std::size_t o = 0; o < d.O; ++o) {
                    const double* p = self.grad.data() + (n * d.O + o) * d.pixels();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < d.pixels(); ++i) acc += p[i];
                    gb[o] += acc;
                }
        }
        if (!wants(xn) && !wants(wn)) return;
        std::vector<double> col;
        MatR gy, gcol;
        CMapR wm(wn->value.data(), O, K);
        for (std::size_t n0 = 0; n0 < d.N; n0 += chunk) {
            const std::size_t cnt = std::min(chunk, d.N - n0);
            const auto cols = static_cast<Eigen::Index>(cnt) * P;
            gy.resize(O, cols);
            for (std::size_t n = 0; n < cnt; ++n)
                gy.middleCols(static_cast<Eigen::Index>(n) * P, P) = CMapR(self.grad.data() + (n0 + n) * d.O * d.pixels(), O, P);
            if (wants(wn)) {
                col.resize(d.patch() * cnt * d.pixels());
                im2col(xn->value.data(), d, n0, cnt, col.data());
                MapR(wn->grad_buffer().data(), O, K).noalias() += gy * CMapR(col.data(), K, cols).transpose();
            }
            if (wants(xn)) {
                gcol.noalias() = wm.transpose() * gy;
                col2im(gcol.data(), d, n0, cnt, xn->grad_buffer().data());
            }
        }
    });
}

Var adaptive_avg_pool2d(const Var& x, std::size_t out_h, std::size_t out_w) {
    if (x.value().rank() != 4 || out_h == 0 || out_w == 0) throw ShapeError("adaptive_avg_pool2d: expects (N,C,H,W)");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    auto bins = [](std::size_t in, std::size_t out) {
        std::vector<std::pair<std::size_t, std::size_t>> b(out);
        for (std::size_t i = 0; i < out; ++i) b[i] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
        return b;
    };
    const auto bh = bins(H, out_h);
    const auto bw = bins(W, out_w);
    Tensor out(Shape{x.dim(0), x.dim(1), out_h, out_w});
    for (std::size_t m = 0; m < NC; ++m) {
        const double* img = x.value().data() + m * H * W;
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                double acc = 0.0;
                for (std::size_t r = bh[i].first; r < bh[i].second; ++r)
                    for (std::size_t c = bw[j].first; c < bw[j].second; ++c) acc += img[r * W + c];
                const auto area = static_cast<double>((bh[i].second - bh[i].first) * (bw[j].second - bw[j].first));
                out[(m * out_h + i) * out_w + j] = acc / area;
            }
    }
    return make_result(std::move(out), {x}, [=](Node& self) {
        auto& xn = self.inputs[0];
        if (!wants(xn)) return;
        Tensor& g = xn->grad_buffer();
        for (std::size_t m = 0; m < NC; ++m)
            for (std::size_t i = 0; i < out_h; ++i)
                for (std::size_t j = 0; j < out_w; ++j) {
                    const auto area = static_cast<double>((bh[i].second - bh[i].first) * (bw[j].second - bw[j].first));
                    const double gv = self.grad[(m * out_h + i) * out_w + j] / area;
                    for (std::size_t r = bh[i].first; r < bh[i].second; ++r)
                        for (std::size_t c = bw[j].first; c < bw[j].second; ++c) g[m * H * W + r * W + c] += gv;
                }
    });
}

// ---- loss -----------------------------------------------------------------

Var row_mse(const Var& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) throw ShapeError("row_mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const double rows = static_cast<double>(target.size() / target.shape().back());
    Tensor diff = pred.value();
    vec(diff) -= vec(target);
    Tensor out(Shape{1}, vec(diff).squaredNorm() / rows);
    return make_result(std::move(out), {pred}, [diff = std::move(diff), rows](Node& self) {
        if (wants(self.inputs[0])) vec(self.inputs[0]->grad_buffer()) += (2.0 * self.grad[0] / rows) * vec(diff);
    });
}

}  // namespace gpfi::ad
