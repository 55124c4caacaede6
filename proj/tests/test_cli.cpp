#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "gpfi/cli.hpp"

using namespace gpfi;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("gpfi_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "gpfi");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

json small_config(std::size_t n = 40) {
    return {{"preset", "desk"},
            {"seed", 3},
            {"synth", {{"n_samples", n}, {"A", 3}, {"S", 32}, {"T", 4}, {"J", 17}}},
            {"model",
             {{"time_steps", 2}, {"encoder_channels", 8}, {"fused_channels", 8}, {"graph_channels", 16}, {"blocks", 1}}},
            {"training", {{"epochs", 1}, {"batch_size", 16}, {"micro_batch", 8}, {"lr0", 2e-3}}}};
}

fs::path write_json(const fs::path& p, const json& j) {
    std::ofstream(p) << j.dump(2);
    return p;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

std::string last_field(const std::string& csv_line) { return csv_line.substr(csv_line.rfind(',') + 1); }

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(invoke({}).code == cli::kExitUsage);
    CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
    CHECK(invoke({"synth"}).code == cli::kExitUsage);  // --out required
    CHECK(invoke({"train", "--data", "/nonexistent/corpus", "--out", "/tmp/x"}).code == cli::kExitUsage);
    CHECK(invoke({"train", "--config", "/nonexistent.json", "--data", "/tmp"}).code == cli::kExitUsage);
    CHECK(invoke({"eval", "--checkpoint", "/nonexistent.gpfc", "--data", "/tmp"}).code == cli::kExitUsage);
    CHECK(invoke({"--help"}).code == cli::kExitOk);
}

TEST_CASE("config resolution") {
    SUBCASE("unknown keys are rejected at every level") {
        CHECK_THROWS_AS(cli::resolve_config({{"modle", json::object()}}), ConfigError);
        CHECK_THROWS_AS(cli::resolve_config({{"model", {{"blokcs", 2}}}}), ConfigError);
        CHECK_THROWS_AS(cli::resolve_config({{"data", {{"splitt", "S1"}}}}), ConfigError);
        CHECK_THROWS_AS(cli::resolve_config({{"preset", "huge"}}), ConfigError);
    }
    SUBCASE("section seeds inherit the top-level seed unless overridden") {
        json doc = {{"seed", 7}, {"training", {{"seed", 9}}}};
        const cli::RunConfig a = cli::resolve_config(doc);
        CHECK(a.split.seed == 7);
        CHECK(a.synth.seed == 7);
        CHECK(a.training.seed == 9);
        const cli::RunConfig b = cli::resolve_config(doc, 42);
        CHECK(b.seed == 42);
        CHECK(b.split.seed == 42);
        CHECK(b.synth.seed == 42);
        CHECK(b.training.seed == 42);
        CHECK(cli::config_digest(a) != cli::config_digest(b));
    }
    SUBCASE("model dims come from the corpus when absent") {
        const CorpusDims d{2, 40, 6, 17};
        const cli::RunConfig c = cli::resolve_config({{"preset", "desk"}}, std::nullopt, &d);
        CHECK(c.model.antennas == 2);
        CHECK(c.model.subcarriers == 40);
        CHECK(c.model.frames == 6);
        const cli::RunConfig e = cli::resolve_config({{"model", {{"subcarriers", 64}}}}, std::nullopt, &d);
        CHECK(e.model.subcarriers == 64);
    }
    SUBCASE("skeleton edges") {
        json edges = json::array();
        for (auto [a, b] : default_skeleton_edges()) edges.push_back({a, b});
        CHECK_NOTHROW(cli::resolve_config({{"skeleton", {{"edges", edges}}}}));
        json fewer = edges;
        fewer.erase(fewer.end() - 1);
        CHECK_THROWS(cli::resolve_config({{"skeleton", {{"edges", fewer}}}}));
        json swapped = edges;
        std::swap(swapped[0], swapped[1]);
        CHECK_THROWS_AS(cli::resolve_config({{"skeleton", {{"edges", edges}}}, {"model", {{"edges", swapped}}}}), ConfigError);
    }
    SUBCASE("digest is stable and sensitive") {
        const json doc = small_config();
        CHECK(cli::config_digest(cli::resolve_config(doc)) == cli::config_digest(cli::resolve_config(doc)));
        json other = doc;
        other["training"]["lr0"] = 1e-3;
        CHECK(cli::config_digest(cli::resolve_config(other)) != cli::config_digest(cli::resolve_config(doc)));
        const cli::RunConfig c = cli::resolve_config(doc);
        CHECK(cli::config_digest(cli::resolve_config(cli::to_json(c))) == cli::config_digest(c));
    }
    SUBCASE("full preset") {
        const cli::RunConfig c = cli::resolve_config(json::object());
        CHECK(c.training.lr0 == 3e-4);
        CHECK(c.training.weight_decay == 0.02);
        CHECK(c.training.epochs == 50);
        CHECK(c.training.batch_size == 256);
        CHECK(c.model.encoder_channels == 128);
        CHECK(c.model.blocks == 4);
        CHECK(c.pck_thresholds == std::vector<int>{10, 20, 30, 40, 50});
    }
}

TEST_CASE("seed from the environment") {
    ::setenv("GPFI_SEED", "17", 1);
    CHECK(cli::seed_from_env() == std::optional<std::uint64_t>(17));
    ::setenv("GPFI_SEED", "seventeen", 1);
    CHECK_THROWS_AS(cli::seed_from_env(), cli::UsageError);
    ::unsetenv("GPFI_SEED");
    CHECK_FALSE(cli::seed_from_env().has_value());
}

TEST_CASE("ablation grid") {
    const cli::RunConfig base = cli::resolve_config(small_config());
    const auto grid = cli::ablation_grid(base);
    REQUIRE(grid.size() == 6);
    std::set<std::string> names, digests;
    for (const auto& r : grid) {
        names.insert(r.name);
        digests.insert(cli::config_digest(r.config));
        CHECK(r.config.training.seed == base.training.seed);
        CHECK(r.config.split.seed == base.split.seed);
    }
    CHECK(names.size() == 6);
    CHECK(digests.size() == 6);
    CHECK(grid[0].config.model.aggregator == Aggregator::ltsa);
    CHECK(grid[1].config.model.aggregator == Aggregator::gap);
    CHECK(grid[2].config.model.aggregator == Aggregator::pj_mhsa);
    CHECK(grid[3].config.model.head == HeadKind::mlp);
    CHECK(grid[4].config.model.blocks == 2);
    CHECK(grid[5].config.model.blocks == 6);
}

TEST_CASE("end-to-end: synth, train, eval, report") {
    TempDir tmp;
    const fs::path cfg = write_json(tmp.path / "cfg.json", small_config());
    const fs::path data = tmp.path / "data", run = tmp.path / "run";

    // synth
    Result r = invoke({"synth", "--config", cfg.string(), "--out", data.string()});
    REQUIRE(r.code == 0);
    const json manifest = read_json(data / "manifest.json");
    CHECK(manifest.at("n_samples") == 40);
    const std::string digest_synth = manifest.at("config_digest");
    CHECK(invoke({"synth", "--config", cfg.string(), "--out", data.string()}).code == cli::kExitUsage);
    CHECK(invoke({"synth", "--config", cfg.string(), "--out", data.string(), "--force"}).code == 0);
    CHECK(read_json(data / "manifest.json").at("corpus_digest") == manifest.at("corpus_digest"));
    fs::create_directories(tmp.path / "other");
    std::ofstream(tmp.path / "other" / "keep.txt") << "x";
    CHECK(invoke({"synth", "--config", cfg.string(), "--out", (tmp.path / "other").string(), "--force"}).code == cli::kExitUsage);
    CHECK(fs::exists(tmp.path / "other" / "keep.txt"));
    const fs::path bad = write_json(tmp.path / "bad.json", {{"trainig", json::object()}});
    CHECK(invoke({"synth", "--config", bad.string(), "--out", (tmp.path / "x").string()}).code == cli::kExitUsage);

    // dry run
    r = invoke({"train", "--config", cfg.string(), "--data", data.string(), "--out", run.string(), "--dry-run"});
    REQUIRE(r.code == 0);
    const json plan = json::parse(r.out);
    CHECK(plan.at("n_train") == 30);
    CHECK(plan.at("n_test") == 10);
    CHECK_FALSE(fs::exists(run));
    r = invoke({"train", "--config", cfg.string(), "--data", data.string(), "--dry-run", "--split", "S2"});
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out).at("test_subjects") == 2);

    // train
    r = invoke({"train", "--config", cfg.string(), "--data", data.string(), "--out", run.string()});
    REQUIRE(r.code == 0);
    for (const char* f : {"config.json", "history.jsonl", "checkpoint_best.gpfc", "checkpoint_last.gpfc", "metrics.json",
                          "table1.csv", "per_joint.csv"})
        CHECK(fs::exists(run / f));
    const std::string digest = read_json(run / "config.json").at("config_digest");
    CHECK(digest == plan.at("config_digest"));
    const auto history = lines(run / "history.jsonl");
    REQUIRE(history.size() >= 3);
    for (const auto& l : history) CHECK(json::parse(l).at("config_digest") == digest);
    CHECK(json::parse(history.front()).at("type") == "recipe");
    const json metrics = read_json(run / "metrics.json");
    CHECK(metrics.at("config_digest") == digest);
    const auto table = lines(run / "table1.csv");
    REQUIRE(table.size() == 2);
    CHECK(table[0] == "PCK@10,PCK@20,PCK@30,PCK@40,PCK@50,MPJPE,PA-MPJPE,config_digest");
    CHECK(last_field(table[1]) == digest);
    const auto pj = lines(run / "per_joint.csv");
    CHECK(pj.size() == 18);
    CHECK(last_field(pj[5]) == digest);
    CHECK(invoke({"train", "--config", cfg.string(), "--data", data.string(), "--out", run.string()}).code == cli::kExitUsage);

    // eval reproduces the training-time metrics exactly
    const fs::path ev = tmp.path / "eval";
    r = invoke({"eval", "--checkpoint", (run / "checkpoint_last.gpfc").string(), "--data", data.string(), "--out", ev.string()});
    REQUIRE(r.code == 0);
    const json em = read_json(ev / "metrics.json");
    CHECK(em.at("config_digest") == digest);
    CHECK(em.at("report").at("mpjpe_mm") == metrics.at("report").at("mpjpe_mm"));
    CHECK(em.at("report").at("pck") == metrics.at("report").at("pck"));
    CHECK(lines(ev / "table1.csv") == table);
    // A mismatched expected architecture is refused unless forced.
    json other = small_config();
    other["model"]["blocks"] = 2;
    const fs::path other_cfg = write_json(tmp.path / "other.json", other);
    CHECK(invoke({"eval", "--checkpoint", (run / "checkpoint_last.gpfc").string(), "--data", data.string(), "--config",
                other_cfg.string()})
              .code == cli::kExitUsage);

    // report
    r = invoke({"report", "--run", run.string()});
    REQUIRE(r.code == 0);
    for (const char* f : {"loss.svg", "lr.svg", "per_joint.svg", "pck.svg", "summary.txt"}) CHECK(fs::exists(run / "report" / f));
    std::ifstream svg(run / "report" / "loss.svg");
    CHECK(std::string(std::istreambuf_iterator<char>(svg), {}).find("<svg") != std::string::npos);
    CHECK(invoke({"report", "--run", run.string()}).code == cli::kExitUsage);
    CHECK(invoke({"report", "--run", run.string(), "--force"}).code == 0);

    // mixed digests in one run directory are refused
    json tampered = metrics;
    tampered["config_digest"] = "0000000000000000";
    write_json(run / "metrics.json", tampered);
    r = invoke({"report", "--run", run.string(), "--force"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("digest") != std::string::npos);
    (void)digest_synth;
}

TEST_CASE("seed override via flag and environment") {
    TempDir tmp;
    const fs::path cfg = write_json(tmp.path / "cfg.json", small_config());
    const fs::path data = tmp.path / "data";
    REQUIRE(invoke({"synth", "--config", cfg.string(), "--out", data.string()}).code == 0);
    auto plan = [&](std::vector<std::string> extra) {
        std::vector<std::string> args{"train", "--config", cfg.string(), "--data", data.string(), "--dry-run"};
        args.insert(args.end(), extra.begin(), extra.end());
        const Result r = invoke(args);
        REQUIRE(r.code == 0);
        return json::parse(r.out);
    };
    const json base = plan({});
    const json flag = plan({"--seed", "11"});
    CHECK(flag.at("config").at("training").at("seed") == 11);
    CHECK(flag.at("split").at("seed") == 11);
    ::setenv("GPFI_SEED", "11", 1);
    const json env = plan({});
    ::unsetenv("GPFI_SEED");
    CHECK(env.at("config_digest") == flag.at("config_digest"));
    CHECK(base.at("config_digest") != flag.at("config_digest"));
}

TEST_CASE("ablation command writes both tables") {
    TempDir tmp;
    const fs::path cfg = write_json(tmp.path / "cfg.json", small_config(32));
    const fs::path data = tmp.path / "data", out = tmp.path / "abl";
    REQUIRE(invoke({"synth", "--config", cfg.string(), "--out", data.string()}).code == 0);
    const Result r = invoke({"ablate", "--config", cfg.string(), "--data", data.string(), "--out", out.string()});
    REQUIRE(r.code == 0);
    const auto t3 = lines(out / "table3.csv"), t4 = lines(out / "table4.csv");
    REQUIRE(t3.size() == 4);
    REQUIRE(t4.size() == 5);
    CHECK(t3[0] == "method,mpjpe_mm,run,config_digest");
    CHECK(t3[1].rfind(R"x("GAP",)x", 0) == 0);
    CHECK(t3[2].rfind(R"x("PJ-MHSA",)x", 0) == 0);
    CHECK(t3[3].rfind(R"x("LTSA (ours)",)x", 0) == 0);
    CHECK(t4[1].rfind(R"x("MLP regression head",)x", 0) == 0);
    // The shared LTSA + N=4 run appears in both tables with one digest.
    CHECK(last_field(t3[3]) == last_field(t4[3]));
    std::set<std::string> digests;
    for (const auto& l : {t3[1], t3[2], t3[3], t4[1], t4[2], t4[4]}) digests.insert(last_field(l));
    CHECK(digests.size() == 6);
    for (const char* d : {"ltsa_graph_n4", "gap_graph_n4", "pj_mhsa_graph_n4", "ltsa_mlp", "ltsa_graph_n2", "ltsa_graph_n6"})
        CHECK(fs::exists(out / d / "metrics.json"));
    CHECK(fs::exists(out / "tables.md"));
    CHECK(read_json(out / "ablation.json").at("runs").size() == 6);
}

TEST_CASE("gradcheck command") {
    const Result r = invoke({"gradcheck", "--seed", "2"});
    CHECK(r.code == 0);
    CHECK(invoke({"gradcheck", "--threshold", "1e-30"}).code == cli::kExitInternal);
}
