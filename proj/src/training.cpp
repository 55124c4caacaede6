#include "gpfi/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "gpfi/digest.hpp"

namespace fs = std::filesystem;

namespace gpfi {

// ---- configuration --------------------------------------------------------------

TrainConfig TrainConfig::full() { return {}; }

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.preset = "desk";
    c.epochs = 20;
    c.batch_size = 64;
    c.lr0 = 2e-3;
    return c;
}

void TrainConfig::validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("training.lr0 must be > 0");
    if (epochs < 1) throw ConfigError("training.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
    if (micro_batch < 1) throw ConfigError("training.micro_batch must be >= 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("training.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("training betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("training.eps must be > 0");
    if (!(lr_floor >= 0.0)) throw ConfigError("training.lr_floor must be >= 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("training.grad_clip must be >= 0");
    if (eval_every < 1) throw ConfigError("training.eval_every must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"preset", c.preset},       {"lr0", c.lr0},
            {"weight_decay", c.weight_decay}, {"epochs", c.epochs},
            {"batch_size", c.batch_size}, {"micro_batch", c.micro_batch},
            {"beta1", c.beta1},         {"beta2", c.beta2},
            {"eps", c.eps},             {"lr_floor", c.lr_floor},
            {"schedule", "cosine"},     {"decay_norm_params", c.decay_norm_params},
            {"grad_clip", c.grad_clip}, {"eval_every", c.eval_every},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("training config must be a JSON object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "preset") {
                const auto name = v.get<std::string>();
                if (name == "full") c = TrainConfig::full();
                else if (name == "desk") c = TrainConfig::desk();
                else throw ConfigError("unknown training preset '" + name + "'");
            }
        }
        for (const auto& [k, v] : j.items()) {
            if (k == "preset") continue;
            if (k == "lr0") c.lr0 = v.get<double>();
            else if (k == "weight_decay") c.weight_decay = v.get<double>();
            else if (k == "epochs") c.epochs = v.get<std::size_t>();
            else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (k == "micro_batch") c.micro_batch = v.get<std::size_t>();
            else if (k == "beta1") c.beta1 = v.get<double>();
            else if (k == "beta2") c.beta2 = v.get<double>();
            else if (k == "eps") c.eps = v.get<double>();
            else if (k == "lr_floor") c.lr_floor = v.get<double>();
            else if (k == "decay_norm_params") c.decay_norm_params = v.get<bool>();
            else if (k == "grad_clip") c.grad_clip = v.get<double>();
            else if (k == "eval_every") c.eval_every = v.get<std::size_t>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "schedule") {
                if (v.get<std::string>() != "cosine") throw ConfigError("only the cosine schedule is supported");
            } else throw ConfigError("unknown training key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("training config: ") + e.what());
    }
    return c;
}

// ---- loss, schedule, optimizer --------------------------------------------------

double mse_loss(const Pose& pred, const Pose& gt) {
    if (pred.size() != gt.size() || pred.size() == 0) throw MetricError("mse_loss: joint counts differ");
    return (pred.joints - gt.joints).rowwise().squaredNorm().sum() / static_cast<double>(pred.size());
}

double mse_loss(const std::vector<Pose>& preds, const std::vector<Pose>& gts) {
    if (preds.size() != gts.size() || preds.empty()) throw MetricError("mse_loss: batch sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += mse_loss(preds[i], gts[i]);
    return s / static_cast<double>(preds.size());
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    if (total_steps == 0) return cfg.lr0;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return std::max(cfg.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)), cfg.lr_floor);
}

AdamW::AdamW(const ParamStore& params, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), wd_(cfg.weight_decay), decay_norm_(cfg.decay_norm_params) {
    for (const auto& e : params.entries()) {
        m_.emplace_back(e.value.shape());
        v_.emplace_back(e.value.shape());
    }
}

void AdamW::step(ParamStore& params, const std::vector<Tensor>& grads, double lr) {
    auto& entries = params.entries();
    if (grads.size() != entries.size() || m_.size() != entries.size()) {
        throw std::invalid_argument("AdamW::step: gradient count does not match parameters");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor& p = entries[i].value;
        const Tensor& g = grads[i];
        const double shrink = (entries[i].decay || decay_norm_) ? 1.0 - lr * wd_ : 1.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
            p[k] = p[k] * shrink - lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
        }
    }
}

PoseNormalizer fit_normalizer(const std::vector<Pose>& poses) {
    if (poses.empty()) throw std::invalid_argument("fit_normalizer: no poses");
    const std::size_t J = poses.front().size();
    PoseMatrix mean = PoseMatrix::Zero(static_cast<Eigen::Index>(J), 3);
    for (const auto& p : poses) mean += p.joints;
    mean /= static_cast<double>(poses.size());
    double ss = 0.0;
    for (const auto& p : poses) ss += (p.joints - mean).squaredNorm();
    const double scale = std::sqrt(ss / static_cast<double>(poses.size() * J * 3));
    PoseNormalizer n;
    n.mean = Tensor(Shape{J, 3});
    for (std::size_t j = 0; j < J; ++j)
        for (std::size_t c = 0; c < 3; ++c)
            n.mean[j * 3 + c] = static_cast<float>(mean(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)));
    // Stored as float32 in checkpoints; rounding here keeps training and reloads identical.
    n.scale = static_cast<float>(scale > 1e-9 ? scale : 1.0);
    return n;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
}

void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_str(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put_f32(os, v);
}

class Reader {
public:
    Reader(std::vector<unsigned char> bytes, fs::path path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    std::uint32_t u32() {
        need(4);
        const unsigned char* p = bytes_.data() + pos_;
        pos_ += 4;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw CheckpointError("truncated checkpoint " + path_.string());
    }
    std::vector<unsigned char> bytes_;
    fs::path path_;
    std::size_t pos_ = 0;
};

}  // namespace

void round_to_float32(ParamStore& params) {
    for (auto& e : params.entries())
        for (auto& v : e.value.values()) v = static_cast<float>(v);
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw CheckpointError("cannot write " + path.string());
        os.write("GPFC", 4);
        put_u32(os, kCheckpointVersion);
        put_str(os, architecture_digest(ckpt.model));
        nlohmann::json header = ckpt.meta;
        header["model"] = to_json(ckpt.model);
        put_str(os, header.dump());
        put_u32(os, static_cast<std::uint32_t>(ckpt.params.size() + 2));
        for (const auto& e : ckpt.params.entries()) put_tensor(os, e.name, e.value);
        put_tensor(os, "buffer.target_mean", ckpt.normalizer.mean);
        put_tensor(os, "buffer.target_scale", Tensor(Shape{1}, ckpt.normalizer.scale));
        if (!os) throw CheckpointError("failed writing " + path.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected, bool force) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);
    if (r.raw(4) != "GPFC") throw CheckpointError("not a checkpoint (bad magic): " + path.string());
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const std::string digest = r.str();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }

    Checkpoint ck;
    ck.model = model_config_from_json(header.at("model"));
    if (architecture_digest(ck.model) != digest) {
        throw CheckpointError("checkpoint header digest does not match its own model config: " + path.string());
    }
    if (expected && architecture_digest(*expected) != digest) {
        if (!force) {
            throw CheckpointError("architecture digest mismatch: checkpoint " + digest + ", expected " +
                                  architecture_digest(*expected) + " (use --force to override)");
        }
        ck.model = *expected;
    }
    header.erase("model");
    ck.meta = header;

    // Shapes and order must match the architecture being instantiated.
    const ParamStore reference = GraphPoseModel(ck.model).init_params(0);
    const std::uint32_t n = r.u32();
    if (n != reference.size() + 2) {
        throw CheckpointError("checkpoint has " + std::to_string(n) + " tensors, architecture needs " +
                              std::to_string(reference.size() + 2));
    }
    auto read_tensor = [&](const std::string& want, const Shape& shape) {
        const std::string name = r.str();
        if (name != want) throw CheckpointError("checkpoint tensor '" + name + "' where '" + want + "' was expected");
        Shape got(r.u32());
        for (auto& d : got) d = r.u32();
        if (got != shape) {
            throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(got) + ", expected " +
                                  shape_str(shape));
        }
        Tensor t(got);
        for (auto& v : t.values()) v = r.f32();
        return t;
    };
    for (const auto& e : reference.entries()) ck.params.add(e.name, read_tensor(e.name, e.value.shape()), e.decay);
    ck.normalizer.mean = read_tensor("buffer.target_mean", Shape{ck.model.joints, 3});
    ck.normalizer.scale = read_tensor("buffer.target_scale", Shape{1})[0];
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
    return ck;
}

// ---- history records ------------------------------------------------------------

nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j = {{"epoch", r.epoch},
                        {"train_loss", r.train_loss},
                        {"train_loss_mm2", r.train_loss_mm2},
                        {"lr", r.lr},
                        {"seconds", r.seconds}};
    j["val"] = r.val ? to_json(*r.val) : nlohmann::json(nullptr);
    return j;
}

EpochRecord epoch_record_from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_loss_mm2 = j.at("train_loss_mm2").get<double>();
    r.lr = j.at("lr").get<std::vector<double>>();
    r.seconds = j.value("seconds", 0.0);
    if (j.contains("val") && !j.at("val").is_null()) r.val = metrics_from_json(j.at("val"));
    return r;
}

// ---- batches ----------------------------------------------------------------------

namespace {

// Whole split in memory as float32 (normalized inputs) when it fits the budget,
// otherwise read from disk per batch.
class SampleStore {
public:
    static constexpr std::size_t kMemoryBudgetBytes = std::size_t{1} << 30;

    explicit SampleStore(const DatasetIndex& index) : index_(index) {
        const auto& d = index.dims();
        sample_size_ = d.antennas * d.subcarriers * d.frames;
        cached_ = index.size() * sample_size_ * sizeof(float) <= kMemoryBudgetBytes;
        poses_.reserve(index.size());
        if (cached_) z_.resize(index.size() * sample_size_);
        for (std::size_t i = 0; i < index.size(); ++i) {
            CsiSample s = index.load(i);
            if (cached_) {
                const Tensor n = normalize_sample(s.z);
                std::transform(n.values().begin(), n.values().end(), z_.begin() + static_cast<std::ptrdiff_t>(i * sample_size_),
                               [](double v) { return static_cast<float>(v); });
            }
            poses_.push_back(std::move(s.pose));
        }
    }

    std::size_t size() const { return poses_.size(); }
    const std::vector<Pose>& poses() const { return poses_; }

    Tensor inputs(const std::vector<std::size_t>& ids) const {
        const auto& d = index_.dims();
        Tensor z(Shape{ids.size(), d.antennas, d.subcarriers, d.frames});
        for (std::size_t b = 0; b < ids.size(); ++b) {
            double* dst = z.data() + b * sample_size_;
            if (cached_) {
                const float* src = z_.data() + ids[b] * sample_size_;
                std::copy(src, src + sample_size_, dst);
            } else {
                const Tensor n = normalize_sample(index_.load(ids[b]).z);
                std::transform(n.values().begin(), n.values().end(), dst,
                               [](double v) { return static_cast<double>(static_cast<float>(v)); });
            }
        }
        return z;
    }

    Tensor targets(const std::vector<std::size_t>& ids, const PoseNormalizer& norm) const {
        const std::size_t J = index_.dims().joints;
        Tensor t(Shape{ids.size(), J, 3});
        for (std::size_t b = 0; b < ids.size(); ++b)
            for (std::size_t j = 0; j < J; ++j)
                for (std::size_t c = 0; c < 3; ++c)
                    t[(b * J + j) * 3 + c] =
                        (poses_[ids[b]].joints(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) - norm.mean[j * 3 + c]) /
                        norm.scale;
        return t;
    }

private:
    const DatasetIndex& index_;
    std::size_t sample_size_ = 0;
    bool cached_ = true;
    std::vector<float> z_;
    std::vector<Pose> poses_;
};

Evaluation evaluate_store(const GraphPoseModel& model, const ParamStore& params, const PoseNormalizer& norm,
                          const SampleStore& store, std::size_t batch_size) {
    if (store.size() == 0) throw std::invalid_argument("evaluate: empty index");
    Binding binding(params, false);
    Evaluation ev;
    ev.targets = store.poses();
    for (std::size_t start = 0; start < store.size(); start += batch_size) {
        std::vector<std::size_t> ids;
        for (std::size_t i = start; i < std::min(store.size(), start + batch_size); ++i) ids.push_back(i);
        const ad::Var out = model.forward(binding, store.inputs(ids));
        for (auto& p : to_poses(out.value(), norm)) ev.predictions.push_back(std::move(p));
    }
    ev.report = evaluate_poses(ev.predictions, ev.targets);
    return ev;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Evaluation evaluate(const GraphPoseModel& model, const ParamStore& params, const PoseNormalizer& norm,
                    const DatasetIndex& index, std::size_t batch_size) {
    const SampleStore store(index);
    return evaluate_store(model, params, norm, store, std::max<std::size_t>(batch_size, 1));
}

MetricsReport evaluate(const Checkpoint& ckpt, const DatasetIndex& index) {
    const GraphPoseModel model(ckpt.model);
    return evaluate(model, ckpt.params, ckpt.normalizer, index).report;
}

// ---- training loop ------------------------------------------------------------------

TrainResult train(const ModelConfig& model_cfg, const DatasetIndex& train_set, const DatasetIndex& val_set,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
    {
        // epochs = 0 is a no-op run returning the initialization.
        TrainConfig check = cfg;
        check.epochs = std::max<std::size_t>(check.epochs, 1);
        check.validate();
    }
    model_cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    const auto& d = train_set.dims();
    if (d.antennas != model_cfg.antennas || d.subcarriers != model_cfg.subcarriers || d.frames != model_cfg.frames ||
        d.joints != model_cfg.joints) {
        throw ConfigError("corpus dims do not match the model config");
    }
    auto log = [&](const std::string& s) {
        if (hooks.log) hooks.log(s);
    };
    const auto t_start = std::chrono::steady_clock::now();

    const GraphPoseModel model(model_cfg);
    ParamStore params = model.init_params(cfg.seed);
    const SampleStore train_store(train_set);
    std::optional<SampleStore> val_store;
    if (!val_set.empty()) val_store.emplace(val_set);
    const PoseNormalizer norm = fit_normalizer(train_store.poses());

    const std::size_t n = train_store.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;

    TrainResult result;
    TrainHistory& hist = result.history;
    hist.recipe = {{"type", "recipe"},
                   {"optimizer", "AdamW"},
                   {"schedule", "cosine"},
                   {"training", to_json(cfg)},
                   {"model", to_json(model_cfg)},
                   {"architecture_digest", architecture_digest(model_cfg)},
                   {"train_samples", n},
                   {"val_samples", val_set.size()},
                   {"steps_per_epoch", steps_per_epoch},
                   {"total_steps", total_steps},
                   {"param_count", params.scalar_count()},
                   {"target_scale_mm", norm.scale}};
    if (hooks.on_record) hooks.on_record(hist.recipe);

    auto snapshot = [&](const ParamStore& ps, std::size_t epoch) {
        Checkpoint ck{model_cfg, ps, norm, {{"epoch", epoch}}};
        round_to_float32(ck.params);
        return ck;
    };

    double best_mpjpe = std::numeric_limits<double>::infinity();
    result.best = snapshot(params, 0);
    if (val_store) {
        hist.initial_val = evaluate_store(model, params, norm, *val_store, cfg.micro_batch).report;
        best_mpjpe = hist.initial_val->mpjpe_mm;
        if (hooks.on_record) hooks.on_record({{"type", "initial"}, {"val", to_json(*hist.initial_val)}});
        log("epoch 0: val MPJPE " + std::to_string(best_mpjpe) + " mm (untrained)");
    }

    AdamW opt(params, cfg);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 dropout_rng(cfg.seed + 1);
    const DropoutContext dropout{model_cfg.dropout, &dropout_rng};
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t_epoch = std::chrono::steady_clock::now();
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
        EpochRecord rec;
        rec.epoch = epoch;
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const double batch = static_cast<double>(stop - start);
            std::vector<Tensor> grads;
            double batch_loss = 0.0;
            for (std::size_t ms = start; ms < stop; ms += cfg.micro_batch) {
                const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(ms),
                                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(stop, ms + cfg.micro_batch)));
                Binding binding(params, true);
                const ad::Var out = model.forward(binding, train_store.inputs(ids), nullptr,
                                                  model_cfg.dropout > 0.0 ? &dropout : nullptr);
                const ad::Var loss = ad::row_mse(out, train_store.targets(ids, norm));
                // row_mse over B*J rows is the per-sample (1/J) sum, averaged; weight by micro-batch share.
                const double weight = static_cast<double>(ids.size()) / batch;
                ad::backward(loss, weight);
                batch_loss += weight * loss.value()[0];
                auto g = binding.gradients();
                if (grads.empty()) grads = std::move(g);
                else
                    for (std::size_t k = 0; k < grads.size(); ++k)
                        for (std::size_t e = 0; e < grads[k].size(); ++e) grads[k][e] += g[k][e];
            }
            if (!std::isfinite(batch_loss)) {
                throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                                       " (lr " + std::to_string(lr_at(step, total_steps, cfg)) + ")");
            }
            if (cfg.grad_clip > 0.0) {
                double sq = 0.0;
                for (const auto& g : grads)
                    for (double v : g.values()) sq += v * v;
                const double norm2 = std::sqrt(sq);
                if (norm2 > cfg.grad_clip)
                    for (auto& g : grads)
                        for (auto& v : g.values()) v *= cfg.grad_clip / norm2;
            }
            const double lr = lr_at(step, total_steps, cfg);
            opt.step(params, grads, lr);
            rec.lr.push_back(lr);
            loss_sum += batch_loss * batch;
        }
        if (!params.all_finite()) throw TrainingDiverged("non-finite parameters after epoch " + std::to_string(epoch));
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.train_loss_mm2 = rec.train_loss * norm.scale * norm.scale;
        if (val_store && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
            rec.val = evaluate_store(model, params, norm, *val_store, cfg.micro_batch).report;
            if (rec.val->mpjpe_mm < best_mpjpe) {
                best_mpjpe = rec.val->mpjpe_mm;
                hist.best_epoch = epoch;
                result.best = snapshot(params, epoch);
            }
        }
        rec.seconds = seconds_since(t_epoch);
        log("epoch " + std::to_string(epoch) + ": train loss " + std::to_string(rec.train_loss_mm2) + " mm^2" +
            (rec.val ? ", val MPJPE " + std::to_string(rec.val->mpjpe_mm) + " mm" : std::string()));
        if (hooks.on_record) {
            auto j = to_json(rec);
            j["type"] = "epoch";
            hooks.on_record(j);
        }
        hist.epochs.push_back(std::move(rec));
    }

    result.last = snapshot(params, cfg.epochs);
    if (!val_store) result.best = result.last;
    if (val_store) result.final_val = evaluate_store(model, result.last.params, norm, *val_store, cfg.micro_batch).report;
    hist.wall_seconds = seconds_since(t_start);
    return result;
}

// ---- gradient audit ------------------------------------------------------------------

GradCheckResult grad_check(ParamStore& params, const std::function<ad::Var(const Binding&)>& loss_fn,
                           std::uint64_t seed, double h, const GradientHook& hook) {
    std::vector<Tensor> analytic;
    {
        Binding b(params, true);
        ad::backward(loss_fn(b));
        analytic = b.gradients();
    }
    if (hook) hook(analytic);

    auto eval = [&] {
        Binding b(params, false);
        return loss_fn(b).value()[0];
    };
    const double center = eval();
    std::mt19937_64 rng(seed);
    constexpr std::size_t kFullCheckLimit = 1000;
    constexpr std::size_t kSampledEntries = 64;
    // Cancellation noise in the differences grows with |loss|, so the floor does too.
    const double floor = 1e-6 * std::max(1.0, std::abs(center));
    const double noise = 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(center)) / h;
    auto rel = [floor](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };
    GradCheckResult res;
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor& t = entries[i].value;
        std::vector<std::size_t> idx;
        if (t.size() <= kFullCheckLimit) {
            for (std::size_t k = 0; k < t.size(); ++k) idx.push_back(k);
        } else {
            for (std::size_t k = 0; k < kSampledEntries; ++k) idx.push_back(static_cast<std::size_t>(rng() % t.size()));
        }
        for (auto k : idx) {
            const double orig = t[k];
            auto at = [&](double dx) {
                t[k] = orig + dx;
                const double v = eval();
                t[k] = orig;
                return v;
            };
            const double up = at(h), down = at(-h), up2 = at(2.0 * h), down2 = at(-2.0 * h);
            const double a = analytic[i][k];
            double err = rel(a, (up - down) / (2.0 * h));
            // On a smooth stencil both sides bend alike: F2 - F1 ~ B1 - B2 ~ h f''/2.
            // A rectifier kink within 2h breaks that; score against the
            // second-order one-sided difference from the side without it.
            const double f1 = (up - center) / h, f2 = (up2 - center) / (2.0 * h);
            const double b1 = (center - down) / h, b2 = (center - down2) / (2.0 * h);
            const double mismatch = std::abs((f2 - f1) - (b1 - b2));
            if (mismatch > 1e-3 * std::max({std::abs(f1), std::abs(b1), floor}) + noise) {
                err = std::min(rel(a, 2.0 * f1 - f2), rel(a, 2.0 * b1 - b2));
                ++res.one_sided_entries;
            }
            ++res.entries_checked;
            if (err > res.max_rel_error || !std::isfinite(err)) {
                res.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
                res.worst_param = entries[i].name;
                res.worst_entry = k;
            }
        }
    }
    return res;
}

GradCheckResult grad_check(const ModelConfig& cfg, std::uint64_t seed, const GradientHook& hook) {
    cfg.validate();
    const GraphPoseModel model(cfg);
    ParamStore params = model.init_params(seed);
    std::mt19937_64 rng(seed + 7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    // Perturb norm/bias tensors away from their init constants so every term is exercised.
    for (auto& e : params.entries())
        for (auto& v : e.value.values()) v += 0.1 * gauss(rng);
    constexpr std::size_t B = 2;
    Tensor z(Shape{B, cfg.antennas, cfg.subcarriers, cfg.frames});
    for (auto& v : z.values()) v = gauss(rng);
    Tensor target(Shape{B, cfg.joints, 3});
    for (auto& v : target.values()) v = gauss(rng);
    return grad_check(
        params, [&](const Binding& b) { return ad::row_mse(model.forward(b, z), target); }, seed, 1e-5, hook);
}

}  // namespace gpfi
