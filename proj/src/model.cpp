#include "gpfi/model.hpp"

#include <cmath>
#include <numeric>

#include "gpfi/digest.hpp"

namespace gpfi {

using ad::Var;

std::string to_string(Aggregator a) {
    switch (a) {
        case Aggregator::ltsa: return "LTSA";
        case Aggregator::gap: return "GAP";
        case Aggregator::pj_mhsa: return "PJ-MHSA";
    }
    return "?";
}

std::string to_string(HeadKind h) { return h == HeadKind::graph ? "graph" : "mlp"; }

Aggregator parse_aggregator(const std::string& s) {
    if (s == "LTSA" || s == "ltsa") return Aggregator::ltsa;
    if (s == "GAP" || s == "gap") return Aggregator::gap;
    if (s == "PJ-MHSA" || s == "pj_mhsa" || s == "PJ_MHSA") return Aggregator::pj_mhsa;
    throw ConfigError("unknown aggregator '" + s + "' (expected LTSA, GAP or PJ-MHSA)");
}

HeadKind parse_head(const std::string& s) {
    if (s == "graph") return HeadKind::graph;
    if (s == "mlp") return HeadKind::mlp;
    throw ConfigError("unknown head '" + s + "' (expected graph or mlp)");
}

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.encoder_channels = 16;
    c.fused_channels = 16;
    c.graph_channels = 32;
    return c;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.antennas = 2;
    c.subcarriers = 32;
    c.frames = 4;
    c.joints = 5;
    c.encoder_channels = 8;
    c.fused_channels = 8;
    c.graph_channels = 16;
    c.time_steps = 2;
    c.blocks = 1;
    c.edges = {{0, 1}, {1, 2}, {0, 3}, {3, 4}};
    return c;
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* what) {
        if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
    };
    positive(antennas, "antennas");
    positive(joints, "joints");
    positive(encoder_channels, "encoder_channels");
    positive(fused_channels, "fused_channels");
    positive(graph_channels, "graph_channels");
    positive(time_steps, "time_steps");
    positive(cheb_order, "cheb_order");
    positive(heads, "heads");
    if (subcarriers < kMinSubcarriers) {
        throw ConfigError("subcarriers=" + std::to_string(subcarriers) + " below encoder minimum " +
                          std::to_string(kMinSubcarriers));
    }
    if (frames < kMinFrames) {
        throw ConfigError("frames=" + std::to_string(frames) + " below encoder minimum " + std::to_string(kMinFrames));
    }
    if (time_steps > frames) throw ConfigError("time_steps must not exceed frames");
    if (blocks < 1 || blocks > 8) throw ConfigError("blocks must be in [1, 8]");
    if (head == HeadKind::graph && graph_channels % heads != 0) {
        throw ConfigError("graph_channels must be divisible by heads");
    }
    if (aggregator == Aggregator::pj_mhsa && fused_channels % heads != 0) {
        throw ConfigError("fused_channels must be divisible by heads for PJ-MHSA");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    try {
        (void)build_skeleton(joints, edges);
    } catch (const GraphError& e) {
        throw ConfigError(std::string("skeleton: ") + e.what());
    }
}

nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json edges = nlohmann::json::array();
    for (auto [a, b] : c.edges) edges.push_back({a, b});
    return {{"antennas", c.antennas},
            {"subcarriers", c.subcarriers},
            {"frames", c.frames},
            {"joints", c.joints},
            {"encoder_channels", c.encoder_channels},
            {"fused_channels", c.fused_channels},
            {"graph_channels", c.graph_channels},
            {"time_steps", c.time_steps},
            {"cheb_order", c.cheb_order},
            {"blocks", c.blocks},
            {"heads", c.heads},
            {"aggregator", to_string(c.aggregator)},
            {"head", to_string(c.head)},
            {"cheb_bias", c.cheb_bias},
            {"dropout", c.dropout},
            {"mlp_hidden", c.mlp_hidden},
            {"edges", edges}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "antennas") c.antennas = v.get<std::size_t>();
            else if (key == "subcarriers") c.subcarriers = v.get<std::size_t>();
            else if (key == "frames") c.frames = v.get<std::size_t>();
            else if (key == "joints") c.joints = v.get<std::size_t>();
            else if (key == "encoder_channels") c.encoder_channels = v.get<std::size_t>();
            else if (key == "fused_channels") c.fused_channels = v.get<std::size_t>();
            else if (key == "graph_channels") c.graph_channels = v.get<std::size_t>();
            else if (key == "time_steps") c.time_steps = v.get<std::size_t>();
            else if (key == "cheb_order") c.cheb_order = v.get<std::size_t>();
            else if (key == "blocks") c.blocks = v.get<std::size_t>();
            else if (key == "heads") c.heads = v.get<std::size_t>();
            else if (key == "aggregator") c.aggregator = parse_aggregator(v.get<std::string>());
            else if (key == "head") c.head = parse_head(v.get<std::string>());
            else if (key == "cheb_bias") c.cheb_bias = v.get<bool>();
            else if (key == "dropout") c.dropout = v.get<double>();
            else if (key == "mlp_hidden") c.mlp_hidden = v.get<std::size_t>();
            else if (key == "edges") {
                c.edges.clear();
                for (const auto& e : v) {
                    if (!e.is_array() || e.size() != 2) throw ConfigError("edges must be [a, b] pairs");
                    c.edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
                }
            } else {
                throw ConfigError("unknown model key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    return c;
}

std::string architecture_digest(const ModelConfig& cfg) { return digest_hex(to_json(cfg).dump()); }

PoseNormalizer PoseNormalizer::identity(std::size_t joints) { return {Tensor(Shape{joints, 3}), 1.0}; }

namespace {

std::size_t ceil_half(std::size_t n) { return (n + 1) / 2; }

EncoderPlan make_plan(const ModelConfig& c) {
    EncoderPlan plan;
    plan.stem = {c.subcarriers, c.frames};
    std::size_t s = c.subcarriers, t = c.frames;
    for (std::size_t i = 0; i < kEncoderBlocks; ++i) {
        const std::size_t st = ceil_half(t) >= c.time_steps ? 2 : 1;
        s = ceil_half(s);
        t = st == 2 ? ceil_half(t) : t;
        plan.blocks.push_back({{2, st}, {s, t}});
    }
    return plan;
}

std::size_t norm_groups(std::size_t channels) { return std::gcd(channels, std::size_t{8}); }

std::string block_prefix(std::size_t n) { return "head.block" + std::to_string(n) + "."; }

std::size_t graph_head_scalars(const ModelConfig& c) {
    const std::size_t K = c.cheb_order, D2 = c.fused_channels, D3 = c.graph_channels;
    const std::size_t b = c.cheb_bias ? 1 : 0;
    const std::size_t input = K * D2 * D3 + b * D3;
    const std::size_t block = 6 * D3 + 2 * (K * D3 * D3 + b * D3) + 4 * (D3 * D3 + D3);
    const std::size_t output = K * D3 * 3 + b * 3;
    return input + c.blocks * block + output;
}

std::size_t mlp_scalars(const ModelConfig& c, std::size_t hidden) {
    const std::size_t in = c.joints * c.fused_channels, out = c.joints * 3;
    return in * hidden + hidden + hidden * out + out;
}

// Dropout on a residual branch; identity in evaluation mode.
Var drop(const Var& x, const DropoutContext* ctx) {
    if (!ctx || ctx->rate <= 0.0 || !ctx->rng) return x;
    std::bernoulli_distribution keep(1.0 - ctx->rate);
    Tensor mask(x.shape());
    const double s = 1.0 / (1.0 - ctx->rate);
    for (auto& m : mask.values()) m = keep(*ctx->rng) ? s : 0.0;
    return ad::mul_const(x, mask);
}

struct TemporalVars {
    Var features;  // (B, J, A, D2)
    Var alpha;     // (B, J, A, W)
};

TemporalVars temporal_stage(const Binding& p, const Var& fused) {
    Var logits = ad::scalar_affine(ad::mean_axis(fused, 4), p["ltsa.temporal.weight"], p["ltsa.temporal.bias"]);
    Var alpha = ad::softmax_last(logits);
    return {ad::weighted_sum(alpha, fused), alpha};
}

struct SpatialVars {
    Var features;  // (B, J, D2)
    Var beta;      // (B, J, A)
};

SpatialVars spatial_stage(const Binding& p, const Var& temporal) {
    Var logits = ad::scalar_affine(ad::mean_axis(temporal, 3), p["ltsa.spatial.weight"], p["ltsa.spatial.bias"]);
    Var beta = ad::softmax_last(logits);
    return {ad::weighted_sum(beta, temporal), beta};
}

// Uniform weights through the same weighted sum as LTSA, so constant attention
// logits reproduce GAP bit for bit.
Var gap_stage(const Var& fused) {
    const Shape& s = fused.shape();  // (B, J, A, W, D2)
    const Var over_time(Tensor(Shape{s[0], s[1], s[2], s[3]}, 1.0 / static_cast<double>(s[3])));
    const Var temporal = ad::weighted_sum(over_time, fused);
    const Var over_antennas(Tensor(Shape{s[0], s[1], s[2]}, 1.0 / static_cast<double>(s[2])));
    return ad::weighted_sum(over_antennas, temporal);
}

Var pj_mhsa_stage(const Binding& p, const Var& fused, std::size_t heads, std::vector<Tensor>* attention) {
    const std::size_t B = fused.dim(0), J = fused.dim(1), A = fused.dim(2), W = fused.dim(3), D = fused.dim(4);
    Var tokens = ad::reshape(fused, {B * J, A * W, D});
    Var mixed = layers::mhsa(p, "aggregator.mhsa", tokens, heads, attention);
    return ad::reshape(ad::mean_axis(mixed, 1), {B, J, D});
}

Var block_stage(const Binding& p, const ChebBasis& basis, const ModelConfig& c, std::size_t n, const Var& x,
                ActivationTrace* trace, const DropoutContext* dropout) {
    const std::string pre = block_prefix(n);
    std::size_t* counter = trace ? &trace->cheb_applications : nullptr;
    Var h = ad::layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"], kNormEps);
    h = drop(ad::gelu(layers::cheb_gconv(p, pre + "cheb1", basis, h, c.cheb_bias, counter)), dropout);
    Var y = ad::add(x, h);
    h = ad::layer_norm(y, p[pre + "norm2.weight"], p[pre + "norm2.bias"], kNormEps);
    h = drop(ad::gelu(layers::cheb_gconv(p, pre + "cheb2", basis, h, c.cheb_bias, counter)), dropout);
    y = ad::add(y, h);
    h = ad::layer_norm(y, p[pre + "norm3.weight"], p[pre + "norm3.bias"], kNormEps);
    h = drop(layers::mhsa_branch(p, pre + "mhsa", h, c.heads, trace ? &trace->attention_weights : nullptr), dropout);
    return ad::add(y, h);
}

Var mlp_stage(const Binding& p, const Var& embedding) {
    const std::size_t B = embedding.dim(0), J = embedding.dim(1);
    Var flat = ad::reshape(embedding, {B, J * embedding.dim(2)});
    const Var& b1 = p["head.mlp.fc1.bias"];
    const Var& b2 = p["head.mlp.fc2.bias"];
    Var h = ad::gelu(ad::linear(flat, p["head.mlp.fc1.weight"], &b1));
    return ad::reshape(ad::linear(h, p["head.mlp.fc2.weight"], &b2), {B, J, 3});
}

// Adds a leading batch axis of 1.
Var batch1(const Tensor& t) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return Var(t.reshaped(s));
}

Tensor drop_batch(const Tensor& t) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    return t.reshaped(s);
}

}  // namespace

GraphPoseModel::GraphPoseModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    graph_ = build_skeleton(cfg_.joints, cfg_.edges);
    basis_ = cheb_basis(graph_, cfg_.cheb_order);
    plan_ = make_plan(cfg_);
}

std::size_t GraphPoseModel::mlp_hidden_width() const {
    if (cfg_.mlp_hidden > 0) return cfg_.mlp_hidden;
    const double target = static_cast<double>(graph_head_scalars(cfg_));
    const double out = static_cast<double>(cfg_.joints * 3);
    const double per = static_cast<double>(cfg_.joints * cfg_.fused_channels + 1 + cfg_.joints * 3);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((target - out) / per)));
}

std::size_t GraphPoseModel::head_param_count() const {
    return cfg_.head == HeadKind::graph ? graph_head_scalars(cfg_) : mlp_scalars(cfg_, mlp_hidden_width());
}

ParamStore GraphPoseModel::init_params(std::uint64_t seed) const {
    const ModelConfig& c = cfg_;
    ParamStore ps;
    std::mt19937_64 rng(seed);
    // bound = sqrt(gain2 / fan_in): gain2 = 6 ahead of rectifiers, 3 for linear outputs.
    auto uniform = [&](Shape shape, std::size_t fan_in, double gain2 = 6.0) {
        const double bound = std::sqrt(gain2 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor t(std::move(shape));
        // float32-representable, so a checkpoint of the init round-trips exactly.
        for (auto& v : t.values()) v = static_cast<float>(dist(rng));
        return t;
    };
    auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
        ps.add(name + ".weight", uniform({out, in, k, k}, in * k * k));
        ps.add(name + ".bias", Tensor(Shape{out}));
    };
    auto norm = [&](const std::string& name, std::size_t ch) {
        ps.add(name + ".weight", Tensor(Shape{ch}, 1.0), false);
        ps.add(name + ".bias", Tensor(Shape{ch}), false);
    };
    auto lin = [&](const std::string& name, std::size_t in, std::size_t out, double gain2 = 6.0) {
        ps.add(name + ".weight", uniform({in, out}, in, gain2));
        ps.add(name + ".bias", Tensor(Shape{out}));
    };
    auto scalar_conv = [&](const std::string& name) {
        ps.add(name + ".weight", uniform({1}, 1));
        ps.add(name + ".bias", Tensor(Shape{1}));
    };
    auto cheb = [&](const std::string& name, std::size_t in, std::size_t out, double gain2 = 6.0) {
        for (std::size_t k = 0; k < c.cheb_order; ++k)
            ps.add(name + ".theta" + std::to_string(k), uniform({in, out}, c.cheb_order * in, gain2));
        if (c.cheb_bias) ps.add(name + ".bias", Tensor(Shape{out}));
    };
    auto attention = [&](const std::string& name, std::size_t ch) {
        for (const char* proj : {"query", "key", "value", "out"}) lin(name + "." + proj, ch, ch, 3.0);
    };

    const std::size_t D1 = c.encoder_channels, D2 = c.fused_channels, D3 = c.graph_channels;
    conv("encoder.stem.conv", D1, 1, 3);
    norm("encoder.stem.norm", D1);
    for (std::size_t i = 1; i <= kEncoderBlocks; ++i) {
        const std::string pre = "encoder.block" + std::to_string(i) + ".";
        conv(pre + "conv1", D1, D1, 3);
        norm(pre + "norm1", D1);
        conv(pre + "conv2", D1, D1, 3);
        norm(pre + "norm2", D1);
        conv(pre + "shortcut", D1, D1, 1);
    }
    lin("fusion", D1, D2, 3.0);
    switch (c.aggregator) {
        case Aggregator::ltsa:
            scalar_conv("ltsa.temporal");
            scalar_conv("ltsa.spatial");
            break;
        case Aggregator::pj_mhsa: attention("aggregator.mhsa", D2); break;
        case Aggregator::gap: break;
    }
    norm("embed.norm", D2);
    if (c.head == HeadKind::graph) {
        cheb("head.input", D2, D3);
        for (std::size_t n = 0; n < c.blocks; ++n) {
            const std::string pre = block_prefix(n);
            norm(pre + "norm1", D3);
            cheb(pre + "cheb1", D3, D3);
            norm(pre + "norm2", D3);
            cheb(pre + "cheb2", D3, D3);
            norm(pre + "norm3", D3);
            attention(pre + "mhsa", D3);
        }
        cheb("head.output", D3, 3, 3.0);
    } else {
        const std::size_t hidden = mlp_hidden_width();
        lin("head.mlp.fc1", c.joints * D2, hidden);
        lin("head.mlp.fc2", hidden, c.joints * 3, 3.0);
    }
    return ps;
}

Var GraphPoseModel::encode(const Binding& p, const Var& images) const {
    if (images.value().rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.subcarriers ||
        images.dim(3) != cfg_.frames) {
        throw ShapeError("encoder input must be (N, 1, " + std::to_string(cfg_.subcarriers) + ", " +
                         std::to_string(cfg_.frames) + "), got " + shape_str(images.shape()));
    }
    const std::size_t groups = norm_groups(cfg_.encoder_channels);
    auto conv = [&](const Var& x, const std::string& name, std::array<std::size_t, 2> stride, std::size_t pad) {
        const Var& b = p[name + ".bias"];
        return ad::conv2d(x, p[name + ".weight"], &b, {stride, {pad, pad}});
    };
    auto norm = [&](const Var& x, const std::string& name) {
        return ad::group_norm(x, p[name + ".weight"], p[name + ".bias"], groups, kNormEps);
    };
    Var x = ad::relu(norm(conv(images, "encoder.stem.conv", {1, 1}, 1), "encoder.stem.norm"));
    for (std::size_t i = 0; i < plan_.blocks.size(); ++i) {
        const std::string pre = "encoder.block" + std::to_string(i + 1) + ".";
        const auto stride = plan_.blocks[i].stride;
        Var h = ad::relu(norm(conv(x, pre + "conv1", stride, 1), pre + "norm1"));
        h = norm(conv(h, pre + "conv2", {1, 1}, 1), pre + "norm2");
        x = ad::relu(ad::add(h, conv(x, pre + "shortcut", stride, 0)));
    }
    return ad::adaptive_avg_pool2d(x, cfg_.joints, cfg_.time_steps);
}

Var GraphPoseModel::fuse(const Binding& p, const Var& features, std::size_t batch) const {
    const std::size_t A = cfg_.antennas;
    if (features.dim(0) != batch * A) throw ShapeError("fuse: feature count does not match batch x antennas");
    Var stacked = ad::reshape(features, {batch, A, cfg_.encoder_channels, cfg_.joints, cfg_.time_steps});
    Var channels_last = ad::permute(stacked, {0, 3, 1, 4, 2});  // (B, J, A, W, D1)
    const Var& b = p["fusion.bias"];
    return ad::linear(channels_last, p["fusion.weight"], &b);
}

Var GraphPoseModel::aggregate(const Binding& p, const Var& fused, ActivationTrace* trace) const {
    switch (cfg_.aggregator) {
        case Aggregator::ltsa: {
            TemporalVars t = temporal_stage(p, fused);
            SpatialVars s = spatial_stage(p, t.features);
            if (trace) {
                trace->alpha = t.alpha.value();
                trace->temporal = t.features.value();
                trace->beta = s.beta.value();
            }
            return s.features;
        }
        case Aggregator::gap: return gap_stage(fused);
        case Aggregator::pj_mhsa:
            return pj_mhsa_stage(p, fused, cfg_.heads, trace ? &trace->attention_weights : nullptr);
    }
    throw ConfigError("unhandled aggregator");
}

Var GraphPoseModel::embed(const Binding& p, const Var& aggregated) const {
    return ad::layer_norm(aggregated, p["embed.norm.weight"], p["embed.norm.bias"], kNormEps);
}

Var GraphPoseModel::regress(const Binding& p, const Var& embedding, ActivationTrace* trace,
                            const DropoutContext* dropout) const {
    if (cfg_.head == HeadKind::mlp) return mlp_stage(p, embedding);
    std::size_t* counter = trace ? &trace->cheb_applications : nullptr;
    Var x = layers::cheb_gconv(p, "head.input", basis_, embedding, cfg_.cheb_bias, counter);
    for (std::size_t n = 0; n < cfg_.blocks; ++n) {
        x = block_stage(p, basis_, cfg_, n, x, trace, dropout);
        if (trace) trace->block_outputs.push_back(x.value());
    }
    return layers::cheb_gconv(p, "head.output", basis_, x, cfg_.cheb_bias, counter);
}

Var GraphPoseModel::forward(const Binding& p, const Tensor& z, ActivationTrace* trace,
                            const DropoutContext* dropout) const {
    const ModelConfig& c = cfg_;
    if (z.rank() != 4 || z.dim(1) != c.antennas || z.dim(2) != c.subcarriers || z.dim(3) != c.frames) {
        throw ShapeError("forward: expected (B, " + std::to_string(c.antennas) + ", " + std::to_string(c.subcarriers) +
                         ", " + std::to_string(c.frames) + ") input, got " + shape_str(z.shape()));
    }
    const std::size_t B = z.dim(0);
    Var images(z.reshaped({B * c.antennas, 1, c.subcarriers, c.frames}));
    Var features = encode(p, images);
    Var fused = fuse(p, features, B);
    Var aggregated = aggregate(p, fused, trace);
    Var embedding = embed(p, aggregated);
    if (trace) {
        trace->antenna_features = features.value();
        trace->fused = fused.value();
        trace->aggregated = aggregated.value();
        trace->embedding = embedding.value();
    }
    Var out = regress(p, embedding, trace, dropout);
    if (trace) trace->output = out.value();
    return out;
}

namespace layers {

Var cheb_gconv(const Binding& p, const std::string& prefix, const ChebBasis& basis, const Var& x, bool bias,
               std::size_t* counter) {
    Var acc;
    for (std::size_t k = 0; k < basis.order(); ++k) {
        Var mixed = k == 0 ? x : ad::graph_mix(basis.operators[k], x);
        Var term = ad::linear(mixed, p[prefix + ".theta" + std::to_string(k)]);
        acc = k == 0 ? term : ad::add(acc, term);
    }
    if (bias) acc = ad::add_bias(acc, p[prefix + ".bias"], acc.value().rank() - 1);
    if (counter) ++*counter;
    return acc;
}

Var mhsa_branch(const Binding& p, const std::string& prefix, const Var& x, std::size_t heads,
                std::vector<Tensor>* attention) {
    if (x.value().rank() != 3) throw ShapeError("mhsa expects (G, tokens, C)");
    const std::size_t G = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (heads == 0 || C % heads != 0) throw ShapeError("mhsa: channels not divisible by head count");
    const std::size_t dh = C / heads;
    auto project = [&](const char* name) {
        const Var& b = p[prefix + "." + name + ".bias"];
        return ad::linear(x, p[prefix + "." + name + ".weight"], &b);
    };
    auto split = [&](const Var& t) {
        return ad::reshape(ad::permute(ad::reshape(t, {G, T, heads, dh}), {0, 2, 1, 3}), {G * heads, T, dh});
    };
    Var q = split(project("query"));
    Var k = split(project("key"));
    Var v = split(project("value"));
    Var weights = ad::softmax_last(ad::scale(ad::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh))));
    if (attention) attention->push_back(weights.value());
    Var mixed = ad::bmm(weights, v);
    Var merged = ad::reshape(ad::permute(ad::reshape(mixed, {G, heads, T, dh}), {0, 2, 1, 3}), {G, T, C});
    const Var& bo = p[prefix + ".out.bias"];
    return ad::linear(merged, p[prefix + ".out.weight"], &bo);
}

Var mhsa(const Binding& p, const std::string& prefix, const Var& x, std::size_t heads,
         std::vector<Tensor>* attention) {
    return ad::add(x, mhsa_branch(p, prefix, x, heads, attention));
}

}  // namespace layers

// ---- single-sample API ------------------------------------------------------

Tensor encode_antenna(const GraphPoseModel& m, const ParamStore& p, const Tensor& z_a) {
    const auto& c = m.config();
    if (z_a.rank() != 2) throw ShapeError("encode_antenna expects (S, T)");
    Binding b(p, false);
    Var images(z_a.reshaped({1, 1, z_a.dim(0), z_a.dim(1)}));
    return m.encode(b, images).value().reshaped({c.encoder_channels, c.joints, c.time_steps});
}

Tensor fuse_antennas(const GraphPoseModel& m, const ParamStore& p, const Tensor& stack) {
    const auto& c = m.config();
    if (stack.shape() != Shape{c.antennas, c.encoder_channels, c.joints, c.time_steps}) {
        throw ShapeError("fuse_antennas expects (A, D1, J, W), got " + shape_str(stack.shape()));
    }
    Binding b(p, false);
    Var out = m.fuse(b, Var(stack.reshaped({c.antennas, c.encoder_channels, c.joints, c.time_steps})), 1);
    return gpfi::permute(drop_batch(out.value()), {3, 0, 1, 2});  // (J,A,W,D2) -> (D2,J,A,W)
}

TemporalResult temporal_attention(const ParamStore& p, const Tensor& fused) {
    if (fused.rank() != 4) throw ShapeError("temporal_attention expects (D2, J, A, W)");
    Binding b(p, false);
    TemporalVars t = temporal_stage(b, batch1(gpfi::permute(fused, {1, 2, 3, 0})));
    return {gpfi::permute(drop_batch(t.features.value()), {2, 0, 1}), drop_batch(t.alpha.value())};
}

SpatialResult spatial_attention(const ParamStore& p, const Tensor& temporal) {
    if (temporal.rank() != 3) throw ShapeError("spatial_attention expects (D2, J, A)");
    Binding b(p, false);
    SpatialVars s = spatial_stage(b, batch1(gpfi::permute(temporal, {1, 2, 0})));
    return {gpfi::permute(drop_batch(s.features.value()), {1, 0}), drop_batch(s.beta.value())};
}

Tensor joint_embedding(const ParamStore& p, const Tensor& aggregated) {
    if (aggregated.rank() != 2) throw ShapeError("joint_embedding expects (D2, J)");
    Binding b(p, false);
    Var x = Var(gpfi::permute(aggregated, {1, 0}));
    return ad::layer_norm(x, b["embed.norm.weight"], b["embed.norm.bias"], kNormEps).value();
}

Tensor aggregate_gap(const Tensor& fused) {
    if (fused.rank() != 4) throw ShapeError("aggregate_gap expects (D2, J, A, W)");
    Var f = batch1(gpfi::permute(fused, {1, 2, 3, 0}));
    return gpfi::permute(drop_batch(gap_stage(f).value()), {1, 0});
}

Tensor aggregate_pj_mhsa(const ParamStore& p, const Tensor& fused, std::size_t heads) {
    if (fused.rank() != 4) throw ShapeError("aggregate_pj_mhsa expects (D2, J, A, W)");
    Binding b(p, false);
    Var f = batch1(gpfi::permute(fused, {1, 2, 3, 0}));
    return gpfi::permute(drop_batch(pj_mhsa_stage(b, f, heads, nullptr).value()), {1, 0});
}

Tensor cheb_gconv(const Tensor& x, const ChebBasis& basis, const std::vector<Tensor>& thetas, const Tensor* bias) {
    if (thetas.size() != basis.order()) throw ShapeError("cheb_gconv: theta count does not match basis order");
    if (x.rank() != 2) throw ShapeError("cheb_gconv expects X (J, Cin)");
    ParamStore ps;
    for (std::size_t k = 0; k < thetas.size(); ++k) ps.add("g.theta" + std::to_string(k), thetas[k]);
    if (bias) ps.add("g.bias", *bias);
    Binding b(ps, false);
    return drop_batch(layers::cheb_gconv(b, "g", basis, batch1(x), bias != nullptr).value());
}

Tensor mhsa(const ParamStore& p, const std::string& prefix, const Tensor& x, std::size_t heads, Tensor* attention) {
    if (x.rank() != 2) throw ShapeError("mhsa expects X (tokens, C)");
    Binding b(p, false);
    std::vector<Tensor> weights;
    Tensor out = drop_batch(layers::mhsa(b, prefix, batch1(x), heads, &weights).value());
    if (attention) *attention = weights.front();
    return out;
}

Tensor gcn_attention_block(const GraphPoseModel& m, const ParamStore& p, std::size_t block, const Tensor& x) {
    if (block >= m.config().blocks) throw std::out_of_range("graph block index out of range");
    Binding b(p, false);
    return drop_batch(block_stage(b, m.basis(), m.config(), block, batch1(x), nullptr, nullptr).value());
}

Tensor regress_pose(const GraphPoseModel& m, const ParamStore& p, const Tensor& embedding,
                    std::size_t* cheb_applications) {
    Binding b(p, false);
    ActivationTrace trace;
    Tensor out = drop_batch(m.regress(b, batch1(embedding), &trace).value());
    if (cheb_applications) *cheb_applications = trace.cheb_applications;
    return out;
}

Tensor mlp_head(const GraphPoseModel& m, const ParamStore& p, const Tensor& embedding) {
    if (m.config().head != HeadKind::mlp) throw ConfigError("mlp_head requires head = mlp");
    Binding b(p, false);
    return drop_batch(mlp_stage(b, batch1(embedding)).value());
}

Pose predict_pose(const GraphPoseModel& m, const ParamStore& p, const PoseNormalizer& norm, const Tensor& z,
                  ActivationTrace* trace) {
    Binding b(p, false);
    Shape s = z.shape();
    s.insert(s.begin(), 1);
    Var out = m.forward(b, z.reshaped(s), trace);
    return to_poses(out.value(), norm).front();
}

std::size_t param_count(const ParamStore& p) { return p.scalar_count(); }

std::vector<Pose> to_poses(const Tensor& output, const PoseNormalizer& norm) {
    if (output.rank() != 3 || output.dim(2) != 3) throw ShapeError("to_poses expects (B, J, 3)");
    const std::size_t B = output.dim(0), J = output.dim(1);
    if (norm.mean.shape() != Shape{J, 3}) throw ShapeError("pose normalizer joint count mismatch");
    std::vector<Pose> poses;
    poses.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        Pose pose(J);
        for (std::size_t j = 0; j < J; ++j)
            for (std::size_t c = 0; c < 3; ++c)
                pose.joints(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) =
                    norm.mean[j * 3 + c] + norm.scale * output[(b * J + j) * 3 + c];
        poses.push_back(std::move(pose));
    }
    return poses;
}

}  // namespace gpfi
