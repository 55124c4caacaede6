#include "gpfi/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "gpfi/digest.hpp"
#include "gpfi/metrics.hpp"

namespace gpfi::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kConfigFile = "config.json";
const char* const kHistoryFile = "history.jsonl";
const char* const kBestCkpt = "checkpoint_best.gpfc";
const char* const kLastCkpt = "checkpoint_last.gpfc";
const char* const kMetricsFile = "metrics.json";
const char* const kTableFile = "table1.csv";
const char* const kPerJointFile = "per_joint.csv";
const std::vector<std::string> kRunArtifacts{kConfigFile, kHistoryFile, kBestCkpt,    kLastCkpt,
                                             kMetricsFile, kTableFile,  kPerJointFile};
const std::vector<std::string> kReportArtifacts{"loss.svg", "lr.svg", "per_joint.svg", "pck.svg", "summary.txt"};

void require_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (!allowed.count(k)) throw ConfigError("unknown " + where + " key '" + k + "'");
    }
}

json section(const json& doc, const char* name) {
    return doc.contains(name) ? doc.at(name) : json::object();
}

std::uint64_t section_seed(json& sec, std::uint64_t top, std::optional<std::uint64_t> override_seed) {
    if (override_seed) return *override_seed;
    if (sec.contains("seed")) {
        const auto s = sec.at("seed").get<std::uint64_t>();
        sec.erase("seed");
        return s;
    }
    return top;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << s;
    if (!os) throw std::runtime_error("failed writing " + p.string());
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

std::string num(double v) { return json(v).dump(); }

bool dir_non_empty(const fs::path& d) { return fs::exists(d) && !fs::is_empty(d); }

/// Output directory contract: refuse a non-empty directory unless forced;
/// forced runs remove only the artifacts this command writes.
void prepare_out_dir(const fs::path& dir, bool force, const std::vector<std::string>& owned) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (dir_non_empty(dir)) {
        if (!force) throw UsageError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
        for (const auto& name : owned) fs::remove_all(dir / name);
    }
    fs::create_directories(dir);
}

void patch_manifest(const fs::path& root, const json& extra) {
    json m = read_json(root / "manifest.json");
    for (const auto& [k, v] : extra.items()) m[k] = v;
    write_text(root / "manifest.json", m.dump(2) + "\n");
}

std::string csv_with_digest(const std::string& csv, const std::string& digest) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out << line << ',' << (header ? std::string("config_digest") : digest) << '\n';
        header = false;
    }
    return out.str();
}

void write_metric_files(const fs::path& dir, const MetricsReport& r, const std::string& digest, const json& extra) {
    json m = extra;
    m["config_digest"] = digest;
    m["report"] = to_json(r);
    write_text(dir / kMetricsFile, m.dump(2) + "\n");
    write_text(dir / kTableFile, csv_with_digest(table_csv_header() + "\n" + table_csv_row(r) + "\n", digest));
    write_text(dir / kPerJointFile, csv_with_digest(per_joint_csv(r), digest));
}

json split_json(const SplitSpec& s) {
    json j = {{"split", to_string(s.strategy)}, {"seed", s.seed}, {"test_ratio", s.test_ratio},
              {"test_subjects", s.test_subjects}};
    j["test_environment"] = s.test_environment ? json(*s.test_environment) : json(nullptr);
    return j;
}

}  // namespace

// ---- configuration -------------------------------------------------------------

RunConfig resolve_config(const json& doc_in, std::optional<std::uint64_t> seed_override, const CorpusDims* corpus) {
    json doc = doc_in.is_null() ? json::object() : doc_in;
    require_keys(doc, "top-level", {"preset", "seed", "data", "synth", "skeleton", "model", "training", "metrics"});
    RunConfig c;
    try {
        c.preset = doc.value("preset", std::string("full"));
        if (c.preset != "full" && c.preset != "desk") throw ConfigError("preset must be 'full' or 'desk'");
        c.seed = seed_override ? *seed_override : doc.value("seed", std::uint64_t{0});

        json data = section(doc, "data");
        require_keys(data, "data", {"split", "seed", "test_ratio", "test_subjects", "test_environment"});
        c.split.seed = section_seed(data, c.seed, seed_override);
        c.split.strategy = parse_split(data.value("split", std::string("S1")));
        c.split.test_ratio = data.value("test_ratio", 0.25);
        if (!(c.split.test_ratio > 0.0 && c.split.test_ratio < 1.0)) throw ConfigError("data.test_ratio must be in (0, 1)");
        if (data.contains("test_subjects")) c.split.test_subjects = data.at("test_subjects").get<std::vector<std::string>>();
        if (data.contains("test_environment") && !data.at("test_environment").is_null())
            c.split.test_environment = data.at("test_environment").get<std::string>();

        json synth = section(doc, "synth");
        const std::uint64_t synth_seed = section_seed(synth, c.seed, seed_override);
        c.synth = synth_config_from_json(synth);
        c.synth.seed = synth_seed;
        c.synth.validate();

        json model = section(doc, "model");
        ModelConfig mbase = c.preset == "desk" ? ModelConfig::desk() : ModelConfig{};
        if (corpus) {
            const std::pair<const char*, std::size_t> dims[] = {{"antennas", corpus->antennas},
                                                               {"subcarriers", corpus->subcarriers},
                                                               {"frames", corpus->frames},
                                                               {"joints", corpus->joints}};
            for (auto [k, v] : dims)
                if (!model.contains(k)) model[k] = v;
        }
        const json skeleton = section(doc, "skeleton");
        require_keys(skeleton, "skeleton", {"edges"});
        if (skeleton.contains("edges")) {
            if (model.contains("edges") && model.at("edges") != skeleton.at("edges"))
                throw ConfigError("skeleton.edges and model.edges disagree");
            model["edges"] = skeleton.at("edges");
        }
        c.model = model_config_from_json(model, mbase);
        c.model.validate();

        json training = section(doc, "training");
        const std::uint64_t train_seed = section_seed(training, c.seed, seed_override);
        TrainConfig tbase = c.preset == "desk" ? TrainConfig::desk() : TrainConfig::full();
        c.training = train_config_from_json(training, tbase);
        c.training.seed = train_seed;
        c.training.validate();

        const json metrics = section(doc, "metrics");
        require_keys(metrics, "metrics", {"pck_thresholds"});
        if (metrics.contains("pck_thresholds")) {
            c.pck_thresholds = metrics.at("pck_thresholds").get<std::vector<int>>();
            if (c.pck_thresholds.empty()) throw ConfigError("metrics.pck_thresholds must not be empty");
            for (int k : c.pck_thresholds)
                if (k <= 0) throw ConfigError("metrics.pck_thresholds must be positive");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

json to_json(const RunConfig& c) {
    json skeleton_edges = json::array();
    for (auto [a, b] : c.model.edges) skeleton_edges.push_back({a, b});
    json data = split_json(c.split);
    return {{"preset", c.preset},
            {"seed", c.seed},
            {"data", data},
            {"synth", gpfi::to_json(c.synth)},
            {"skeleton", {{"edges", skeleton_edges}}},
            {"model", gpfi::to_json(c.model)},
            {"training", gpfi::to_json(c.training)},
            {"metrics", {{"pck_thresholds", c.pck_thresholds}}}};
}

std::string config_digest(const RunConfig& c) { return digest_hex(to_json(c).dump()); }

json read_config_file(const fs::path& path) {
    if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
    return read_json(path);
}

std::optional<std::uint64_t> seed_from_env() {
    const char* s = std::getenv("GPFI_SEED");
    if (!s || !*s) return std::nullopt;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw UsageError(std::string("GPFI_SEED is not an unsigned integer: ") + s);
    }
}

// ---- training run ---------------------------------------------------------------

RunOutputs run_training(const RunConfig& cfg, const DatasetIndex& corpus, const fs::path& dir,
                        const std::function<void(const std::string&)>& log) {
    const std::string digest = config_digest(cfg);
    Split split;
    try {
        split = make_split(corpus, cfg.split);
    } catch (const DataError& e) {
        throw UsageError(std::string("cannot split corpus: ") + e.what());
    }
    json cfg_json = to_json(cfg);
    cfg_json["config_digest"] = digest;
    write_text(dir / kConfigFile, cfg_json.dump(2) + "\n");

    std::ofstream history(dir / kHistoryFile);
    if (!history) throw std::runtime_error("cannot write " + (dir / kHistoryFile).string());
    TrainHooks hooks;
    hooks.on_record = [&](const json& rec) {
        json r = rec;
        r["config_digest"] = digest;
        if (r.value("type", "") == "recipe") {
            r["split"] = split_json(cfg.split);
            r["train_subjects"] = split.train.counts_by_subject().size();
            r["test_subjects"] = split.test.counts_by_subject().size();
            r["train_environments"] = split.train.counts_by_environment().size();
            r["test_environments"] = split.test.counts_by_environment().size();
        }
        history << r.dump() << '\n';
        history.flush();
    };
    hooks.log = log;
    TrainResult result = train(cfg.model, split.train, split.test, cfg.training, hooks);
    history.close();

    const std::string corpus_dig = corpus_digest(corpus);
    const json split_info = split_json(cfg.split);
    auto save = [&](Checkpoint& ck, const char* name, const char* role) {
        ck.meta["config_digest"] = digest;
        ck.meta["config"] = to_json(cfg);
        ck.meta["split"] = split_info;
        ck.meta["corpus_digest"] = corpus_dig;
        ck.meta["role"] = role;
        save_checkpoint(dir / name, ck);
    };
    save(result.best, kBestCkpt, "best");
    save(result.last, kLastCkpt, "last");

    const GraphPoseModel model(cfg.model);
    Evaluation ev = evaluate(model, result.last.params, result.last.normalizer, split.test, cfg.training.micro_batch);
    const MetricsReport report = evaluate_poses(ev.predictions, ev.targets, cfg.pck_thresholds);
    write_metric_files(dir, report, digest,
                       {{"split", split_info},
                        {"corpus_digest", corpus_dig},
                        {"checkpoint", kLastCkpt},
                        {"n_train", split.train.size()},
                        {"n_test", split.test.size()},
                        {"best_epoch", result.history.best_epoch},
                        {"wall_seconds", result.history.wall_seconds}});

    RunOutputs out;
    out.final_report = report;
    out.history = std::move(result.history);
    out.config_digest = digest;
    out.param_count = result.last.params.scalar_count();
    out.head_param_count = model.head_param_count();
    out.architecture_digest = architecture_digest(cfg.model);
    return out;
}

std::vector<AblationRun> ablation_grid(const RunConfig& base) {
    auto variant = [&](Aggregator agg, HeadKind head, std::size_t blocks) {
        RunConfig c = base;
        c.model.aggregator = agg;
        c.model.head = head;
        c.model.blocks = blocks;
        c.model.validate();
        return c;
    };
    return {
        {"ltsa_graph_n4", "LTSA (ours)", variant(Aggregator::ltsa, HeadKind::graph, 4)},
        {"gap_graph_n4", "GAP", variant(Aggregator::gap, HeadKind::graph, 4)},
        {"pj_mhsa_graph_n4", "PJ-MHSA", variant(Aggregator::pj_mhsa, HeadKind::graph, 4)},
        {"ltsa_mlp", "MLP regression head", variant(Aggregator::ltsa, HeadKind::mlp, 4)},
        {"ltsa_graph_n2", "Graph-based regression head (N = 2)", variant(Aggregator::ltsa, HeadKind::graph, 2)},
        {"ltsa_graph_n6", "Graph-based regression head (N = 6)", variant(Aggregator::ltsa, HeadKind::graph, 6)},
    };
}

// ---- plots ---------------------------------------------------------------------

namespace {

struct Series {
    std::string name;
    std::vector<double> x, y;
    std::string color;
};

std::string esc(const std::string& s) {
    std::string o;
    for (char ch : s) {
        if (ch == '<') o += "&lt;";
        else if (ch == '>') o += "&gt;";
        else if (ch == '&') o += "&amp;";
        else o += ch;
    }
    return o;
}

std::string tick(double v) {
    std::ostringstream os;
    os << std::setprecision(3) << v;
    return os.str();
}

constexpr double kW = 640, kH = 400, kL = 70, kR = 20, kT = 40, kB = 60;

std::string svg_open(const std::string& title, const std::string& digest) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
       << "<!-- config_digest: " << digest << " -->\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
       << esc(title) << "</text>\n";
    return os.str();
}

std::string axes(double x0, double x1, double y0, double y1, const std::string& xl, const std::string& yl, bool xticks) {
    std::ostringstream os;
    const double pw = kW - kL - kR, ph = kH - kT - kB;
    os << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double v = y0 + (y1 - y0) * i / 4.0;
        const double py = kT + ph - ph * i / 4.0;
        os << "<text x=\"" << kL - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << tick(v)
           << "</text>\n";
        if (xticks) {
            const double xv = x0 + (x1 - x0) * i / 4.0;
            os << "<text x=\"" << kL + pw * i / 4.0 << "\" y=\"" << kT + ph + 16
               << "\" text-anchor=\"middle\" font-size=\"11\">" << tick(xv) << "</text>\n";
        }
    }
    os << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << esc(xl)
       << "</text>\n"
       << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" transform=\"rotate(-90 16 " << kT + ph / 2
       << ")\" text-anchor=\"middle\" font-size=\"12\">" << esc(yl) << "</text>\n";
    return os.str();
}

std::string line_chart(const std::string& title, const std::string& xl, const std::string& yl,
                       const std::vector<Series>& series, const std::string& digest) {
    double x0 = INFINITY, x1 = -INFINITY, y0 = 0.0, y1 = -INFINITY;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y1 = 1;
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const double pw = kW - kL - kR, ph = kH - kT - kB;
    std::ostringstream os;
    os << svg_open(title, digest) << axes(x0, x1, y0, y1, xl, yl, true);
    int legend = 0;
    for (const auto& s : series) {
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            os << kL + pw * (s.x[i] - x0) / (x1 - x0) << ',' << kT + ph - ph * (s.y[i] - y0) / (y1 - y0) << ' ';
        os << "\"/>\n";
        for (std::size_t i = 0; i < s.x.size() && s.x.size() <= 60; ++i)
            os << "<circle r=\"2.5\" fill=\"" << s.color << "\" cx=\"" << kL + pw * (s.x[i] - x0) / (x1 - x0)
               << "\" cy=\"" << kT + ph - ph * (s.y[i] - y0) / (y1 - y0) << "\"/>\n";
        os << "<text x=\"" << kW - kR - 8 << "\" y=\"" << kT + 16 + 15 * legend++ << "\" text-anchor=\"end\" fill=\""
           << s.color << "\" font-size=\"12\">" << esc(s.name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string bar_chart(const std::string& title, const std::string& yl, const std::vector<std::string>& labels,
                      const std::vector<double>& values, const std::string& digest) {
    double y1 = 0.0;
    for (double v : values) y1 = std::max(y1, v);
    if (y1 <= 0.0) y1 = 1.0;
    const double pw = kW - kL - kR, ph = kH - kT - kB;
    std::ostringstream os;
    os << svg_open(title, digest) << axes(0, 1, 0, y1, "", yl, false);
    const double slot = pw / static_cast<double>(std::max<std::size_t>(values.size(), 1));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double h = ph * values[i] / y1;
        const double x = kL + slot * i + slot * 0.15;
        os << "<rect x=\"" << x << "\" y=\"" << kT + ph - h << "\" width=\"" << slot * 0.7 << "\" height=\"" << h
           << "\" fill=\"#4477aa\"><title>" << esc(labels[i]) << ": " << num(values[i]) << "</title></rect>\n";
        const double lx = kL + slot * (i + 0.5), ly = kT + ph + 8;
        os << "<text x=\"" << lx << "\" y=\"" << ly << "\" transform=\"rotate(45 " << lx << ' ' << ly
           << ")\" font-size=\"9\">" << esc(labels[i]) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<json> read_jsonl(const fs::path& p) {
    std::vector<json> out;
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw UsageError(p.string() + ":" + std::to_string(n) + ": malformed record: " + e.what());
        }
    }
    return out;
}

}  // namespace

// ---- commands -----------------------------------------------------------------

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::mutex log_mu;

    void log(const std::string& s) {
        std::lock_guard<std::mutex> lk(log_mu);
        err << s << '\n';
        err.flush();
    }
};

std::optional<std::uint64_t> seed_override(const std::optional<std::uint64_t>& flag) {
    if (flag) return flag;
    return seed_from_env();
}

json load_doc(const std::string& config_path) {
    return config_path.empty() ? json::object() : read_config_file(config_path);
}

DatasetIndex load_corpus(const fs::path& root) {
    if (!fs::is_directory(root)) throw UsageError("data root not found: " + root.string());
    return load_mmfi(root);
}

int cmd_synth(Context& ctx, const std::string& config, const fs::path& out_dir, bool force,
              std::optional<std::size_t> n_samples, std::optional<std::uint64_t> seed) {
    json doc = load_doc(config);
    if (n_samples) doc["synth"]["n_samples"] = *n_samples;
    const RunConfig cfg = resolve_config(doc, seed_override(seed));
    if (dir_non_empty(out_dir)) {
        if (!force) throw UsageError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
        if (!fs::exists(out_dir / "manifest.json"))
            throw UsageError("refusing to clear " + out_dir.string() + ": it does not hold a corpus manifest");
        fs::remove_all(out_dir);
    }
    const DatasetIndex index = synth_dataset(cfg.synth, out_dir);
    const std::string digest = config_digest(cfg);
    patch_manifest(out_dir, {{"config_digest", digest}});
    ctx.out << "wrote " << index.size() << " samples to " << out_dir.string() << " (config " << digest << ")\n";
    return kExitOk;
}

int cmd_ingest(Context& ctx, const std::string& config, const fs::path& raw, const fs::path& out_dir, bool force) {
    const RunConfig cfg = resolve_config(load_doc(config), seed_from_env());
    if (!fs::is_directory(raw)) throw UsageError("raw corpus not found: " + raw.string());
    if (dir_non_empty(out_dir)) {
        if (!force) throw UsageError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
        if (!fs::exists(out_dir / "manifest.json"))
            throw UsageError("refusing to clear " + out_dir.string() + ": it does not hold a corpus manifest");
        fs::remove_all(out_dir);
    }
    const DatasetIndex index = ingest_raw(raw, out_dir);
    patch_manifest(out_dir, {{"config_digest", config_digest(cfg)}});
    ctx.out << "ingested " << index.size() << " samples into " << out_dir.string() << '\n';
    return kExitOk;
}

struct TrainFlags {
    std::string config;
    std::string data;
    std::string out;
    std::string split;
    std::string preset;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr0;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool dry_run = false;
};

json apply_flags(json doc, const TrainFlags& f) {
    if (!f.preset.empty()) doc["preset"] = f.preset;
    if (!f.split.empty()) doc["data"]["split"] = f.split;
    if (f.epochs) doc["training"]["epochs"] = *f.epochs;
    if (f.batch_size) doc["training"]["batch_size"] = *f.batch_size;
    if (f.lr0) doc["training"]["lr0"] = *f.lr0;
    return doc;
}

int cmd_train(Context& ctx, const TrainFlags& f) {
    const json doc = apply_flags(load_doc(f.config), f);
    // Validate before touching the data so config errors surface first.
    (void)resolve_config(doc, seed_override(f.seed));
    const DatasetIndex corpus = load_corpus(f.data);
    const RunConfig cfg = resolve_config(doc, seed_override(f.seed), &corpus.dims());
    const fs::path dir(f.out);
    if (f.dry_run) {
        Split split;
        try {
            split = make_split(corpus, cfg.split);
        } catch (const DataError& e) {
            throw UsageError(std::string("cannot split corpus: ") + e.what());
        }
        json plan = {{"type", "plan"},
                     {"config_digest", config_digest(cfg)},
                     {"config", to_json(cfg)},
                     {"split", split_json(cfg.split)},
                     {"n_train", split.train.size()},
                     {"n_test", split.test.size()},
                     {"train_subjects", split.train.counts_by_subject().size()},
                     {"test_subjects", split.test.counts_by_subject().size()},
                     {"train_environments", split.train.counts_by_environment().size()},
                     {"test_environments", split.test.counts_by_environment().size()},
                     {"param_count", GraphPoseModel(cfg.model).init_params(cfg.training.seed).scalar_count()}};
        ctx.out << plan.dump(2) << '\n';
        return kExitOk;
    }
    prepare_out_dir(dir, f.force, kRunArtifacts);
    const RunOutputs r = run_training(cfg, corpus, dir, [&](const std::string& s) { ctx.log(s); });
    ctx.out << table_csv_header() << '\n' << table_csv_row(r.final_report) << '\n';
    ctx.out << "run written to " << dir.string() << " (config " << r.config_digest << ")\n";
    return kExitOk;
}

int cmd_eval(Context& ctx, const fs::path& ckpt_path, const std::string& data, const std::string& split_flag,
             const std::string& out, const std::string& config, bool force) {
    if (!fs::exists(ckpt_path)) throw UsageError("checkpoint not found: " + ckpt_path.string());
    std::optional<ModelConfig> expected;
    if (!config.empty()) expected = resolve_config(load_doc(config), seed_from_env()).model;
    Checkpoint ck;
    try {
        ck = load_checkpoint(ckpt_path, expected ? &*expected : nullptr, force);
    } catch (const CheckpointError& e) {
        throw UsageError(e.what());
    }
    RunConfig cfg;
    if (ck.meta.contains("config")) {
        json doc = ck.meta.at("config");
        if (!split_flag.empty()) doc["data"]["split"] = split_flag;
        cfg = resolve_config(doc, std::nullopt);
    } else if (!split_flag.empty()) {
        cfg.split.strategy = parse_split(split_flag);
    }
    cfg.model = ck.model;
    const std::string digest = ck.meta.value("config_digest", config_digest(cfg));
    const DatasetIndex corpus = load_corpus(data);
    const auto& d = corpus.dims();
    if (d.antennas != ck.model.antennas || d.subcarriers != ck.model.subcarriers || d.frames != ck.model.frames ||
        d.joints != ck.model.joints)
        throw UsageError("corpus dims do not match the checkpoint's model");
    Split split;
    try {
        split = make_split(corpus, cfg.split);
    } catch (const DataError& e) {
        throw UsageError(std::string("cannot split corpus: ") + e.what());
    }
    const GraphPoseModel model(ck.model);
    const Evaluation ev = evaluate(model, ck.params, ck.normalizer, split.test, cfg.training.micro_batch);
    const MetricsReport report = evaluate_poses(ev.predictions, ev.targets, cfg.pck_thresholds);
    json result = {{"config_digest", digest}, {"checkpoint", ckpt_path.string()}, {"split", split_json(cfg.split)},
                   {"n_test", split.test.size()}, {"report", to_json(report)}};
    if (!out.empty()) {
        const fs::path dir(out);
        prepare_out_dir(dir, force, {kMetricsFile, kTableFile, kPerJointFile});
        write_metric_files(dir, report, digest,
                           {{"checkpoint", ckpt_path.string()}, {"split", split_json(cfg.split)}, {"n_test", split.test.size()}});
    }
    ctx.out << result.dump(2) << '\n';
    ctx.out << csv_with_digest(table_csv_header() + "\n" + table_csv_row(report) + "\n", digest);
    ctx.out << csv_with_digest(per_joint_csv(report), digest);
    return kExitOk;
}

int cmd_ablate(Context& ctx, TrainFlags f, std::size_t parallel) {
    const json doc = apply_flags(load_doc(f.config), f);
    (void)resolve_config(doc, seed_override(f.seed));
    const DatasetIndex corpus = load_corpus(f.data);
    const RunConfig base = resolve_config(doc, seed_override(f.seed), &corpus.dims());
    const std::vector<AblationRun> grid = ablation_grid(base);
    const fs::path dir(f.out);
    std::vector<std::string> owned{"ablation.json", "table3.csv", "table4.csv", "tables.md"};
    for (const auto& r : grid) owned.push_back(r.name);
    prepare_out_dir(dir, f.force, owned);

    std::vector<std::optional<RunOutputs>> outs(grid.size());
    std::vector<std::string> errors(grid.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < grid.size(); i = next++) {
            const auto& run = grid[i];
            try {
                fs::create_directories(dir / run.name);
                ctx.log("[" + run.name + "] training " + run.label);
                outs[i] = run_training(run.config, corpus, dir / run.name,
                                       [&](const std::string& s) { ctx.log("[" + run.name + "] " + s); });
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(parallel, 1, grid.size());
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (!errors[i].empty()) throw std::runtime_error("ablation run " + grid[i].name + " failed: " + errors[i]);

    json runs = json::array();
    std::map<std::string, const RunOutputs*> by_name;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const RunOutputs& o = *outs[i];
        by_name[grid[i].name] = &o;
        runs.push_back({{"name", grid[i].name},
                        {"label", grid[i].label},
                        {"config_digest", o.config_digest},
                        {"architecture_digest", o.architecture_digest},
                        {"param_count", o.param_count},
                        {"head_param_count", o.head_param_count},
                        {"aggregator", to_string(grid[i].config.model.aggregator)},
                        {"head", to_string(grid[i].config.model.head)},
                        {"blocks", grid[i].config.model.blocks},
                        {"mpjpe_mm", o.final_report.mpjpe_mm},
                        {"pa_mpjpe_mm", o.final_report.pa_mpjpe_mm}});
    }
    const std::vector<std::pair<std::string, std::string>> t3{
        {"GAP", "gap_graph_n4"}, {"PJ-MHSA", "pj_mhsa_graph_n4"}, {"LTSA (ours)", "ltsa_graph_n4"}};
    const std::vector<std::pair<std::string, std::string>> t4{
        {"MLP regression head", "ltsa_mlp"},
        {"Graph-based regression head (N = 2)", "ltsa_graph_n2"},
        {"Graph-based regression head (N = 4)", "ltsa_graph_n4"},
        {"Graph-based regression head (N = 6)", "ltsa_graph_n6"}};
    auto table = [&](const std::vector<std::pair<std::string, std::string>>& rows, std::string& md) {
        std::ostringstream csv;
        csv << "method,mpjpe_mm,run,config_digest\n";
        md += "| Method | MPJPE (mm) |\n|---|---|\n";
        for (const auto& [label, name] : rows) {
            const RunOutputs& o = *by_name.at(name);
            csv << '"' << label << "\"," << num(o.final_report.mpjpe_mm) << ',' << name << ',' << o.config_digest << '\n';
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(1) << o.final_report.mpjpe_mm;
            md += "| " + label + " | " + cell.str() + " |\n";
        }
        return csv.str();
    };
    std::string md3, md4;
    write_text(dir / "table3.csv", table(t3, md3));
    write_text(dir / "table4.csv", table(t4, md4));
    const std::string md = "Aggregation ablation\n\n" + md3 + "\nRegression head ablation\n\n" + md4;
    write_text(dir / "tables.md", md);
    json summary = {{"base_config_digest", config_digest(base)}, {"runs", runs}};
    write_text(dir / "ablation.json", summary.dump(2) + "\n");
    ctx.out << md;
    return kExitOk;
}

int cmd_report(Context& ctx, const fs::path& run_dir, const std::string& out_flag, bool force) {
    if (!fs::is_directory(run_dir)) throw UsageError("run directory not found: " + run_dir.string());
    std::vector<std::string> warnings;
    std::map<std::string, std::set<std::string>> digests;  // digest -> artifacts carrying it
    auto note = [&](const std::string& d, const std::string& where) { digests[d].insert(where); };

    std::optional<json> config;
    if (fs::exists(run_dir / kConfigFile)) {
        config = read_json(run_dir / kConfigFile);
        note(config->value("config_digest", std::string("(none)")), kConfigFile);
    } else {
        warnings.push_back("config.json missing");
    }
    std::vector<json> history;
    if (fs::exists(run_dir / kHistoryFile)) {
        history = read_jsonl(run_dir / kHistoryFile);
        for (const auto& r : history) note(r.value("config_digest", std::string("(none)")), kHistoryFile);
    } else {
        warnings.push_back("history.jsonl missing: no loss or learning-rate curves");
    }
    std::optional<json> metrics;
    if (fs::exists(run_dir / kMetricsFile)) {
        metrics = read_json(run_dir / kMetricsFile);
        note(metrics->value("config_digest", std::string("(none)")), kMetricsFile);
    } else {
        warnings.push_back("metrics.json missing: run has no final evaluation");
    }
    for (const char* ck : {kBestCkpt, kLastCkpt}) {
        if (!fs::exists(run_dir / ck)) continue;
        try {
            note(load_checkpoint(run_dir / ck).meta.value("config_digest", std::string("(none)")), ck);
        } catch (const CheckpointError& e) {
            warnings.push_back(std::string(ck) + " unreadable: " + e.what());
        }
    }
    if (digests.empty()) throw UsageError(run_dir.string() + " holds no run artifacts");
    if (digests.size() > 1) {
        std::string msg = "mixed config digests in " + run_dir.string() + ":";
        for (const auto& [d, where] : digests) {
            msg += " " + d + " (";
            for (const auto& w : where) msg += w + (w == *where.rbegin() ? "" : ", ");
            msg += ")";
        }
        throw UsageError(msg);
    }
    const std::string digest = digests.begin()->first;

    const fs::path out = out_flag.empty() ? run_dir / "report" : fs::path(out_flag);
    prepare_out_dir(out, force, kReportArtifacts);

    // Curves from the history.
    Series train_rmse{"train RMSE (mm)", {}, {}, "#cc3311"}, val{"val MPJPE (mm)", {}, {}, "#0077bb"};
    Series lr{"learning rate", {}, {}, "#009988"};
    std::optional<json> last_val;
    std::size_t step = 0, epochs_run = 0;
    std::optional<double> last_loss;
    for (const auto& r : history) {
        const std::string type = r.value("type", "");
        if (type == "initial") {
            val.x.push_back(0);
            val.y.push_back(r.at("val").at("mpjpe_mm").get<double>());
            last_val = r.at("val");
        } else if (type == "epoch") {
            const EpochRecord e = epoch_record_from_json(r);
            ++epochs_run;
            train_rmse.x.push_back(static_cast<double>(e.epoch));
            train_rmse.y.push_back(std::sqrt(e.train_loss_mm2));
            last_loss = e.train_loss_mm2;
            if (e.val) {
                val.x.push_back(static_cast<double>(e.epoch));
                val.y.push_back(e.val->mpjpe_mm);
                last_val = r.at("val");
            }
            for (double v : e.lr) {
                lr.x.push_back(static_cast<double>(step++));
                lr.y.push_back(v);
            }
        }
    }
    std::vector<std::string> written;
    if (!history.empty()) {
        write_text(out / "loss.svg", line_chart("Training loss and validation error", "epoch", "mm", {train_rmse, val}, digest));
        write_text(out / "lr.svg", line_chart("Learning rate per optimizer step", "step", "lr", {lr}, digest));
        written.insert(written.end(), {"loss.svg", "lr.svg"});
        if (epochs_run == 0) warnings.push_back("history has no completed epochs");
    }
    std::optional<MetricsReport> report;
    if (metrics) {
        report = metrics_from_json(metrics->at("report"));
    } else if (last_val) {
        report = metrics_from_json(*last_val);
        warnings.push_back("per-joint and PCK plots use the last validation snapshot in the history");
    } else {
        warnings.push_back("no evaluation data: per-joint and PCK plots skipped");
    }
    if (report) {
        std::vector<std::string> labels;
        const auto& names = joint_names();
        for (std::size_t j = 0; j < report->per_joint_mpjpe_mm.size(); ++j)
            labels.push_back(report->per_joint_mpjpe_mm.size() == names.size() ? std::string(names[j]) : "joint" + std::to_string(j));
        write_text(out / "per_joint.svg", bar_chart("Per-joint MPJPE", "mm", labels, report->per_joint_mpjpe_mm, digest));
        Series pck{"PCK", {}, {}, "#ee7733"};
        for (auto [k, v] : report->pck) {
            pck.x.push_back(k);
            pck.y.push_back(v);
        }
        write_text(out / "pck.svg", line_chart("PCK against threshold", "threshold k", "percent", {pck}, digest));
        written.insert(written.end(), {"per_joint.svg", "pck.svg"});
    }

    std::ostringstream s;
    s << "run: " << run_dir.string() << '\n' << "config_digest: " << digest << '\n';
    s << "epochs_run: " << epochs_run << '\n';
    if (last_loss) s << "final_train_loss_mm2: " << num(*last_loss) << '\n';
    if (metrics && metrics->contains("best_epoch")) s << "best_epoch: " << metrics->at("best_epoch").dump() << '\n';
    if (report) {
        s << "source: " << (metrics ? "metrics.json" : "history.jsonl") << '\n';
        s << "n_samples: " << report->n_samples << '\n';
        s << "mpjpe_mm: " << num(report->mpjpe_mm) << '\n';
        s << "pa_mpjpe_mm: " << num(report->pa_mpjpe_mm) << '\n';
        for (auto [k, v] : report->pck) s << "pck@" << k << ": " << num(v) << '\n';
        const auto& names = joint_names();
        for (std::size_t j = 0; j < report->per_joint_mpjpe_mm.size(); ++j) {
            const std::string name =
                report->per_joint_mpjpe_mm.size() == names.size() ? std::string(names[j]) : "joint" + std::to_string(j);
            s << "joint." << name << ": " << num(report->per_joint_mpjpe_mm[j]) << '\n';
        }
    }
    s << "plots:";
    for (const auto& w : written) s << ' ' << w;
    s << '\n';
    s << "warnings: " << warnings.size() << '\n';
    for (const auto& w : warnings) s << "  - " << w << '\n';
    write_text(out / "summary.txt", s.str());
    for (const auto& w : warnings) ctx.log("warning: " + w);
    ctx.out << s.str();
    return kExitOk;
}

int cmd_gradcheck(Context& ctx, const std::optional<std::uint64_t>& seed_flag, double threshold) {
    const std::uint64_t seed = seed_override(seed_flag).value_or(0);
    const GradCheckResult r = grad_check(ModelConfig::tiny(), seed);
    json j = {{"seed", seed},
              {"max_rel_error", r.max_rel_error},
              {"worst_param", r.worst_param},
              {"worst_entry", r.worst_entry},
              {"entries_checked", r.entries_checked},
              {"one_sided_entries", r.one_sided_entries},
              {"threshold", threshold},
              {"pass", r.max_rel_error < threshold}};
    ctx.out << j.dump(2) << '\n';
    if (r.max_rel_error >= threshold) {
        ctx.log("gradient check failed: max relative error " + num(r.max_rel_error) + " in " + r.worst_param);
        return kExitInternal;
    }
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Context ctx{out, err, {}};
    CLI::App app{"gpfi: WiFi CSI 3D pose estimation with graph regression heads"};
    app.require_subcommand(1);
    std::function<int()> action;

    // synth
    std::string synth_config, synth_out;
    bool synth_force = false;
    std::optional<std::size_t> synth_n;
    std::optional<std::uint64_t> synth_seed;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
    synth->add_option("--config", synth_config, "JSON run config")->check(CLI::ExistingFile);
    synth->add_option("--out", synth_out, "Corpus root")->required();
    synth->add_option("--n-samples", synth_n, "Override synth.n_samples");
    synth->add_option("--seed", synth_seed, "Override all seeds");
    synth->add_flag("--force", synth_force, "Replace an existing corpus");
    synth->callback([&] { action = [&] { return cmd_synth(ctx, synth_config, synth_out, synth_force, synth_n, synth_seed); }; });

    // ingest
    std::string ingest_config, ingest_raw_dir, ingest_out;
    bool ingest_force = false;
    auto* ingest = app.add_subcommand("ingest", "Convert a raw complex-CSI corpus to the canonical layout");
    ingest->add_option("--config", ingest_config, "JSON run config")->check(CLI::ExistingFile);
    ingest->add_option("--raw", ingest_raw_dir, "Raw corpus root")->required();
    ingest->add_option("--out", ingest_out, "Canonical corpus root")->required();
    ingest->add_flag("--force", ingest_force, "Replace an existing corpus");
    ingest->callback([&] { action = [&] { return cmd_ingest(ctx, ingest_config, ingest_raw_dir, ingest_out, ingest_force); }; });

    // train / ablate share flags
    TrainFlags tf, af;
    std::size_t parallel = 1;
    auto train_flags = [](CLI::App* cmd, TrainFlags& f) {
        cmd->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
        cmd->add_option("--data", f.data, "Corpus root")->required();
        cmd->add_option("--out", f.out, "Output directory");
        cmd->add_option("--split", f.split, "S1, S2 or S3");
        cmd->add_option("--preset", f.preset, "full or desk");
        cmd->add_option("--epochs", f.epochs, "Override training.epochs");
        cmd->add_option("--batch-size", f.batch_size, "Override training.batch_size");
        cmd->add_option("--lr", f.lr0, "Override training.lr0");
        cmd->add_option("--seed", f.seed, "Override all seeds");
        cmd->add_flag("--force", f.force, "Overwrite existing outputs");
    };
    auto* train_cmd = app.add_subcommand("train", "Split, train and evaluate");
    train_flags(train_cmd, tf);
    train_cmd->add_flag("--dry-run", tf.dry_run, "Resolve config and split, print the plan, do not train");
    train_cmd->callback([&] {
        action = [&] {
            if (tf.out.empty() && !tf.dry_run) throw UsageError("train needs --out");
            return cmd_train(ctx, tf);
        };
    });

    auto* ablate = app.add_subcommand("ablate", "Run the aggregator and regression-head ablations");
    train_flags(ablate, af);
    ablate->add_option("--parallel", parallel, "Concurrent runs")->check(CLI::PositiveNumber);
    ablate->callback([&] {
        action = [&] {
            if (af.out.empty()) throw UsageError("ablate needs --out");
            return cmd_ablate(ctx, af, parallel);
        };
    });

    // eval
    std::string eval_ckpt, eval_data, eval_split, eval_out, eval_config;
    bool eval_force = false;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test side of its split");
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--data", eval_data, "Corpus root")->required();
    eval->add_option("--split", eval_split, "Override the checkpoint's split strategy");
    eval->add_option("--out", eval_out, "Write metrics.json and CSVs here");
    eval->add_option("--config", eval_config, "Expected model config")->check(CLI::ExistingFile);
    eval->add_flag("--force", eval_force, "Overwrite outputs; load despite an architecture mismatch");
    eval->callback([&] {
        action = [&] { return cmd_eval(ctx, eval_ckpt, eval_data, eval_split, eval_out, eval_config, eval_force); };
    });

    // report
    std::string report_run, report_out;
    bool report_force = false;
    auto* report = app.add_subcommand("report", "Render plots and a summary for a run directory");
    report->add_option("--run", report_run, "Run directory")->required();
    report->add_option("--out", report_out, "Output directory (default <run>/report)");
    report->add_flag("--force", report_force, "Overwrite an existing report");
    report->callback([&] { action = [&] { return cmd_report(ctx, report_run, report_out, report_force); }; });

    // gradcheck
    std::optional<std::uint64_t> gc_seed;
    double gc_threshold = 1e-4;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of the tiny network");
    gc->add_option("--seed", gc_seed, "Audit seed");
    gc->add_option("--threshold", gc_threshold, "Maximum accepted relative error");
    gc->callback([&] { action = [&] { return cmd_gradcheck(ctx, gc_seed, gc_threshold); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        return action ? action() : kExitUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const GraphError& e) {
        err << "skeleton error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const TrainingDiverged& e) {
        err << "training diverged: " << e.what() << '\n';
        return kExitInternal;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
}

}  // namespace gpfi::cli
