#include <doctest.h>

#include <numbers>

#include "gpfi/training.hpp"
#include "oracles.hpp"

using namespace gpfi;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("gpfi_train_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelConfig small_model() {
    ModelConfig c = ModelConfig::desk();
    c.subcarriers = 32;
    c.frames = 4;
    c.time_steps = 2;
    c.encoder_channels = 8;
    c.fused_channels = 8;
    c.graph_channels = 16;
    c.blocks = 1;
    return c;
}

DatasetIndex small_corpus(const fs::path& root, std::size_t n, std::uint64_t seed = 3) {
    SynthConfig s;
    s.n_samples = n;
    s.dims = {3, 32, 4, 17};
    s.seed = seed;
    return synth_dataset(s, root);
}

TrainConfig quick(std::size_t epochs) {
    TrainConfig t = TrainConfig::desk();
    t.epochs = epochs;
    t.batch_size = 16;
    t.micro_batch = 8;
    t.lr0 = 2e-3;
    t.seed = 5;
    return t;
}

}  // namespace

TEST_CASE("loss") {
    Pose gt(17), pred(17);
    oracle::Rng rng(1);
    gt = oracle::random_pose(rng);
    pred = gt;
    pred.joints.col(0).array() += 3.0;
    pred.joints.col(1).array() += 4.0;
    CHECK(mse_loss(pred, gt) == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(mse_loss(gt, gt) == 0.0);
    const Pose other = oracle::random_pose(rng);
    double by_hand = 0.0;
    for (Eigen::Index j = 0; j < 17; ++j) by_hand += (other.joints.row(j) - gt.joints.row(j)).squaredNorm() / 17.0;
    CHECK(mse_loss(other, gt) == doctest::Approx(by_hand).epsilon(1e-12));
    CHECK(mse_loss(std::vector<Pose>{pred, other}, std::vector<Pose>{gt, gt}) == doctest::Approx((25.0 + by_hand) / 2).epsilon(1e-12));
}

TEST_CASE("cosine learning-rate schedule") {
    const TrainConfig c = TrainConfig::full();
    CHECK(c.lr0 == 3e-4);
    CHECK(c.weight_decay == 0.02);
    CHECK(c.epochs == 50);
    CHECK(c.batch_size == 256);
    CHECK(lr_at(0, 1000, c) == 3e-4);
    CHECK(lr_at(500, 1000, c) == doctest::Approx(1.5e-4).epsilon(1e-12));
    CHECK(lr_at(1000, 1000, c) == c.lr_floor);
    CHECK(lr_at(999, 1000, c) < 1e-8 + c.lr_floor);
    double prev = 1.0;
    for (std::size_t s = 0; s <= 1000; s += 10) {
        const double lr = lr_at(s, 1000, c);
        CHECK(lr <= prev);
        CHECK(lr >= c.lr_floor);
        const double want = 3e-4 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(s) / 1000.0)) / 2.0;
        CHECK(lr == doctest::Approx(std::max(want, c.lr_floor)).epsilon(1e-12));
        prev = lr;
    }
}

TEST_CASE("train config JSON") {
    TrainConfig c = TrainConfig::desk();
    c.grad_clip = 1.5;
    CHECK(to_json(train_config_from_json(to_json(c))) == to_json(c));
    CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 1.0}}), ConfigError);
    TrainConfig bad = c;
    bad.batch_size = 0;
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.lr0 = -1.0;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("AdamW minimizes a one-dimensional quadratic") {
    ParamStore p;
    p.add("w", Tensor(Shape{1}, 0.0));
    TrainConfig c;
    c.lr0 = 0.1;
    c.weight_decay = 0.0;
    AdamW opt(p, c);
    const std::size_t total = 500;
    for (std::size_t s = 0; s < total; ++s) {
        const double w = p.at("w")[0];
        opt.step(p, {Tensor(Shape{1}, 2.0 * (w - 3.0))}, lr_at(s, total, c));
    }
    CHECK(std::abs(p.at("w")[0] - 3.0) < 1e-3);
    CHECK(opt.steps() == total);
}

TEST_CASE("weight decay is decoupled from the adaptive step") {
    ParamStore p;
    p.add("w", Tensor(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}));
    p.add("gain", Tensor(Shape{2}, 1.0), false);
    TrainConfig c;
    c.weight_decay = 0.1;
    const double lr = 0.01;
    SUBCASE("zero gradient shrinks geometrically") {
        AdamW opt(p, c);
        for (int k = 0; k < 20; ++k) opt.step(p, {Tensor(Shape{3}), Tensor(Shape{2})}, lr);
        const double f = std::pow(1.0 - lr * 0.1, 20);
        CHECK(p.at("w")[0] == doctest::Approx(f).epsilon(1e-13));
        CHECK(p.at("w")[1] == doctest::Approx(-2.0 * f).epsilon(1e-13));
        CHECK(p.at("gain")[0] == 1.0);
    }
    SUBCASE("first step with a gradient") {
        AdamW opt(p, c);
        const std::vector<double> g{0.3, -4.0, 1e-3};
        opt.step(p, {Tensor(Shape{3}, g), Tensor(Shape{2})}, lr);
        const double p0[] = {1.0, -2.0, 0.5};
        for (std::size_t i = 0; i < 3; ++i) {
            const double want = p0[i] * (1.0 - lr * 0.1) - lr * g[i] / (std::abs(g[i]) + c.eps);
            CHECK(p.at("w")[i] == doctest::Approx(want).epsilon(1e-13));
        }
    }
    SUBCASE("norm parameters decay when asked") {
        c.decay_norm_params = true;
        AdamW opt(p, c);
        opt.step(p, {Tensor(Shape{3}), Tensor(Shape{2})}, lr);
        CHECK(p.at("gain")[0] == doctest::Approx(1.0 - lr * 0.1).epsilon(1e-15));
    }
}

TEST_CASE("pose normalizer") {
    oracle::Rng rng(2);
    std::vector<Pose> poses;
    for (int i = 0; i < 30; ++i) poses.push_back(oracle::random_pose(rng, 17, 200.0));
    const PoseNormalizer n = fit_normalizer(poses);
    REQUIRE(n.mean.shape() == Shape{17, 3});
    for (std::size_t j = 0; j < 17; ++j)
        for (std::size_t c = 0; c < 3; ++c) {
            double m = 0.0;
            for (const auto& p : poses) m += p.joints(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) / 30.0;
            CHECK(n.mean.at({j, c}) == static_cast<double>(static_cast<float>(n.mean.at({j, c}))));
            CHECK(std::abs(n.mean.at({j, c}) - m) < 1e-4);
        }
    double sq = 0.0;
    for (const auto& p : poses)
        for (std::size_t j = 0; j < 17; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                const double d = p.joints(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) - n.mean.at({j, c});
                sq += d * d;
            }
    CHECK(n.scale == doctest::Approx(std::sqrt(sq / (30.0 * 51.0))).epsilon(1e-6));
}

TEST_CASE("checkpoints") {
    TempDir tmp;
    const ModelConfig mc = small_model();
    const GraphPoseModel model(mc);
    Checkpoint ck{mc, model.init_params(4), PoseNormalizer::identity(17), {{"note", "x"}, {"epoch", 3}}};
    oracle::Rng rng(4);
    for (auto& v : ck.params.entries()[0].value.values()) v = oracle::normal(rng);
    ck.normalizer.mean = oracle::random_tensor({17, 3}, rng, 100.0);
    ck.normalizer.scale = 123.25;
    const fs::path p = tmp.path / "a.gpfc";
    save_checkpoint(p, ck);

    SUBCASE("round trip at float32 precision") {
        const Checkpoint back = load_checkpoint(p, &mc);
        CHECK(architecture_digest(back.model) == architecture_digest(mc));
        CHECK(back.meta.at("note") == "x");
        CHECK(back.meta.at("epoch") == 3);
        REQUIRE(back.params.size() == ck.params.size());
        ParamStore rounded = ck.params;
        round_to_float32(rounded);
        for (std::size_t i = 0; i < rounded.size(); ++i) {
            CHECK(back.params.entries()[i].name == rounded.entries()[i].name);
            CHECK(back.params.entries()[i].value.storage() == rounded.entries()[i].value.storage());
        }
        CHECK(back.normalizer.scale == 123.25);
        for (std::size_t i = 0; i < 51; ++i)
            CHECK(back.normalizer.mean[i] == static_cast<double>(static_cast<float>(ck.normalizer.mean[i])));
        // Saving the reload reproduces the file.
        save_checkpoint(tmp.path / "b.gpfc", back);
        CHECK(fs::file_size(p) == fs::file_size(tmp.path / "b.gpfc"));
    }
    SUBCASE("architecture mismatch") {
        ModelConfig other = mc;
        other.blocks = 2;
        CHECK_THROWS_AS(load_checkpoint(p, &other), CheckpointError);
        CHECK_THROWS_AS(load_checkpoint(p, &other, true), CheckpointError);  // shapes differ
        ModelConfig same_shapes = mc;
        same_shapes.dropout = 0.1;
        CHECK_THROWS_AS(load_checkpoint(p, &same_shapes), CheckpointError);
        const Checkpoint forced = load_checkpoint(p, &same_shapes, true);
        CHECK(forced.model.dropout == 0.1);
    }
    SUBCASE("truncated file") {
        fs::resize_file(p, fs::file_size(p) / 2);
        CHECK_THROWS_AS(load_checkpoint(p), CheckpointError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(tmp.path / "none.gpfc"), CheckpointError); }
}

TEST_CASE("evaluation is repeatable and matches per-sample prediction") {
    TempDir tmp;
    const DatasetIndex data = small_corpus(tmp.path / "d", 20);
    const ModelConfig mc = small_model();
    const GraphPoseModel model(mc);
    ParamStore p = model.init_params(6);
    round_to_float32(p);
    const auto samples = data.load_all();
    std::vector<Pose> poses;
    for (const auto& s : samples) poses.push_back(s.pose);
    const PoseNormalizer norm = fit_normalizer(poses);

    const Evaluation a = evaluate(model, p, norm, data, 8);
    const Evaluation b = evaluate(model, p, norm, data, 3);
    CHECK(a.report.mpjpe_mm == evaluate(model, p, norm, data, 8).report.mpjpe_mm);
    CHECK(std::abs(a.report.mpjpe_mm - b.report.mpjpe_mm) < 1e-9);
    double loop = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        // Model inputs are the normalized CSI held at float32.
        Tensor z = normalize_sample(samples[i].z);
        for (auto& v : z.values()) v = static_cast<double>(static_cast<float>(v));
        const Pose single = predict_pose(model, p, norm, z);
        CHECK((single.joints - a.predictions[i].joints).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(a.targets[i].joints == samples[i].pose.joints);
        loop += oracle::loop_mpjpe(single, samples[i].pose) / static_cast<double>(samples.size());
    }
    CHECK(std::abs(a.report.mpjpe_mm - loop) < 1e-9);
    const Checkpoint ck{mc, p, norm, {}};
    CHECK(std::abs(evaluate(ck, data).mpjpe_mm - a.report.mpjpe_mm) < 1e-9);
}

TEST_CASE("gradient audit") {
    SUBCASE("tiny network") {
        const GradCheckResult r = grad_check(ModelConfig::tiny(), 1);
        MESSAGE("max relative error " << r.max_rel_error << " at " << r.worst_param << "[" << r.worst_entry << "]");
        CHECK(r.entries_checked > 100);
        CHECK(r.max_rel_error < 1e-4);
    }
    SUBCASE("linear model") {
        ParamStore p;
        oracle::Rng rng(2);
        p.add("w", oracle::random_tensor({4, 3}, rng));
        p.add("b", oracle::random_tensor({3}, rng));
        const Tensor x = oracle::random_tensor({5, 4}, rng), y = oracle::random_tensor({5, 3}, rng);
        auto loss = [&](const Binding& b) {
            const ad::Var& bias = b["b"];
            return ad::row_mse(ad::linear(ad::Var(x), b["w"], &bias), y);
        };
        const GradCheckResult r = grad_check(p, loss, 3);
        CHECK(r.entries_checked == 15);
        CHECK(r.max_rel_error < 1e-8);
        const GradCheckResult bad = grad_check(p, loss, 3, 1e-5, [](std::vector<Tensor>& g) { g[0][4] += 0.5; });
        CHECK(bad.max_rel_error > 1e-2);
        CHECK(bad.worst_param == "w");
        CHECK(bad.worst_entry == 4);
    }
    SUBCASE("corrupted network gradient is caught") {
        const GradCheckResult r = grad_check(ModelConfig::tiny(), 1, [](std::vector<Tensor>& g) {
            for (auto& v : g.back().values()) v *= 1.5;
        });
        CHECK(r.max_rel_error > 1e-2);
    }
}

TEST_CASE("zero epochs return the initialization") {
    TempDir tmp;
    const DatasetIndex data = small_corpus(tmp.path / "d", 16);
    const TrainConfig cfg = quick(0);
    const TrainResult r = train(small_model(), data, data.subset({0, 1, 2, 3}), cfg);
    ParamStore init = GraphPoseModel(small_model()).init_params(cfg.seed);
    round_to_float32(init);
    for (std::size_t i = 0; i < init.size(); ++i)
        CHECK(r.last.params.entries()[i].value.storage() == init.entries()[i].value.storage());
    CHECK(r.history.epochs.empty());
    REQUIRE(r.final_val.has_value());
    REQUIRE(r.history.initial_val.has_value());
    CHECK(r.final_val->mpjpe_mm == r.history.initial_val->mpjpe_mm);
}

TEST_CASE("training is deterministic and records its history") {
    TempDir tmp;
    const DatasetIndex data = small_corpus(tmp.path / "d", 48);
    const Split sp = make_split(data, {SplitStrategy::random, 1});
    std::vector<std::string> types;
    TrainHooks hooks;
    hooks.on_record = [&](const nlohmann::json& j) { types.push_back(j.at("type").get<std::string>()); };
    const TrainResult a = train(small_model(), sp.train, sp.test, quick(2), hooks);
    const TrainResult b = train(small_model(), sp.train, sp.test, quick(2));
    CHECK(types == std::vector<std::string>{"recipe", "initial", "epoch", "epoch"});
    REQUIRE(a.history.epochs.size() == 2);
    for (std::size_t i = 0; i < a.last.params.size(); ++i)
        CHECK(a.last.params.entries()[i].value.storage() == b.last.params.entries()[i].value.storage());
    CHECK(a.history.epochs[1].train_loss == b.history.epochs[1].train_loss);
    CHECK(a.final_val->mpjpe_mm == b.final_val->mpjpe_mm);
    // 36 samples at batch 16: three steps per epoch, cosine over six.
    CHECK(a.history.epochs[0].lr.size() == 3);
    CHECK(a.history.epochs[0].lr[0] == 2e-3);
    CHECK(a.history.epochs[1].lr[2] == doctest::Approx(lr_at(5, 6, quick(2))));
    CHECK(a.history.recipe.at("total_steps") == 6);
    const EpochRecord rt = epoch_record_from_json(to_json(a.history.epochs[0]));
    CHECK(rt.train_loss == a.history.epochs[0].train_loss);
    CHECK(rt.lr == a.history.epochs[0].lr);
    // A different seed gives a different run.
    TrainConfig other = quick(2);
    other.seed = 6;
    const TrainResult c = train(small_model(), sp.train, sp.test, other);
    CHECK(c.last.params.entries()[0].value.storage() != a.last.params.entries()[0].value.storage());
    // The reported final metrics are those of the stored checkpoint.
    CHECK(evaluate(a.last, sp.test).mpjpe_mm == a.final_val->mpjpe_mm);
}

TEST_CASE("micro-batch size does not change the update") {
    TempDir tmp;
    const DatasetIndex data = small_corpus(tmp.path / "d", 32);
    TrainConfig x = quick(1), y = quick(1);
    x.micro_batch = 16;
    y.micro_batch = 5;
    const TrainResult a = train(small_model(), data, DatasetIndex{}, x);
    const TrainResult b = train(small_model(), data, DatasetIndex{}, y);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.last.params.size(); ++i)
        worst = std::max(worst, max_abs_diff(a.last.params.entries()[i].value, b.last.params.entries()[i].value));
    // Equal up to summation order and float32 storage.
    CHECK(worst < 1e-5);
    CHECK(a.history.epochs[0].train_loss == doctest::Approx(b.history.epochs[0].train_loss).epsilon(1e-9));
}

TEST_CASE("mismatched corpus dims are rejected") {
    TempDir tmp;
    const DatasetIndex data = small_corpus(tmp.path / "d", 8);
    ModelConfig mc = small_model();
    mc.subcarriers = 64;
    CHECK_THROWS_AS(train(mc, data, DatasetIndex{}, quick(1)), ConfigError);
    CHECK_THROWS(train(small_model(), DatasetIndex{}, DatasetIndex{}, quick(1)));
}
