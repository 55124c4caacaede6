#include "gpfi/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "gpfi/digest.hpp"
#include "gpfi/skeleton_graph.hpp"

namespace fs = std::filesystem;

namespace gpfi {

// ---- preprocessing ----------------------------------------------------------

Tensor preprocess_window(std::span<const RawCsiFrame> frames, PhaseCalibration* calibration) {
    if (frames.empty()) throw DataError("preprocess_window: empty window");
    const auto A = static_cast<std::size_t>(frames.front().values.rows());
    const auto S = static_cast<std::size_t>(frames.front().values.cols());
    const std::size_t T = frames.size();
    if (A == 0 || S == 0) throw DataError("preprocess_window: frame has no antennas or subcarriers");
    for (std::size_t t = 0; t < T; ++t) {
        const auto& f = frames[t];
        if (static_cast<std::size_t>(f.values.rows()) != A || static_cast<std::size_t>(f.values.cols()) != S) {
            throw DataError("preprocess_window: frame " + std::to_string(t) + " shape differs from frame 0");
        }
        if (!f.values.allFinite()) throw DataError("preprocess_window: non-finite CSI in frame " + std::to_string(t));
        if (t > 0 && f.timestamp <= frames[t - 1].timestamp) {
            throw DataError("preprocess_window: timestamps must increase (frame " + std::to_string(t) + ")");
        }
    }

    Tensor out(Shape{A, S, T});
    if (calibration) *calibration = {Tensor(Shape{T, A}), Tensor(Shape{T, A}), Tensor(Shape{A, S, T})};

    // Least-squares line through (s, phase_s), s = 0..S-1.
    const double n = static_cast<double>(S);
    const double mean_s = (n - 1.0) / 2.0;
    double var_s = 0.0;
    for (std::size_t s = 0; s < S; ++s) var_s += (static_cast<double>(s) - mean_s) * (static_cast<double>(s) - mean_s);

    std::vector<double> phase(S);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t a = 0; a < A; ++a) {
            const auto row = frames[t].values.row(static_cast<Eigen::Index>(a));
            for (std::size_t s = 0; s < S; ++s) phase[s] = std::arg(row(static_cast<Eigen::Index>(s)));
            for (std::size_t s = 1; s < S; ++s) {
                double d = phase[s] - phase[s - 1];
                d -= 2.0 * std::numbers::pi * std::round(d / (2.0 * std::numbers::pi));
                phase[s] = phase[s - 1] + d;
            }
            double mean_p = 0.0;
            for (double p : phase) mean_p += p;
            mean_p /= n;
            double cov = 0.0;
            for (std::size_t s = 0; s < S; ++s) cov += (static_cast<double>(s) - mean_s) * (phase[s] - mean_p);
            const double slope = var_s > 0.0 ? cov / var_s : 0.0;
            const double intercept = mean_p - slope * mean_s;
            for (std::size_t s = 0; s < S; ++s) {
                const double trend = slope * static_cast<double>(s) + intercept;
                const std::complex<double> calibrated =
                    row(static_cast<Eigen::Index>(s)) * std::polar(1.0, -trend);
                out[(a * S + s) * T + t] = std::abs(calibrated);
                if (calibration) calibration->phase[(a * S + s) * T + t] = phase[s] - trend;
            }
            if (calibration) {
                calibration->slope[t * A + a] = slope;
                calibration->intercept[t * A + a] = intercept;
            }
        }
    }
    return out;
}

Tensor normalize_sample(const Tensor& z) {
    Tensor out(z.shape());
    if (z.empty()) return out;
    const double n = static_cast<double>(z.size());
    double mean = 0.0;
    for (double v : z.values()) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : z.values()) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);
    if (sd < 1e-8) return out;
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - mean) / sd;
    return out;
}

// ---- binary IO ----------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
    static_assert(sizeof(T) == 4);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

template <typename T>
T get_le(const unsigned char* p) {
    static_assert(sizeof(T) == 4);
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    T v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Header {
    std::uint32_t version;
    CorpusDims dims;
};

Header parse_header(const std::vector<unsigned char>& bytes, const char* magic, const fs::path& path) {
    if (bytes.size() < 24 || std::memcmp(bytes.data(), magic, 4) != 0) {
        throw DataError("malformed sample file " + path.string() + ": bad magic or truncated header");
    }
    Header h{};
    h.version = get_le<std::uint32_t>(bytes.data() + 4);
    h.dims.antennas = get_le<std::uint32_t>(bytes.data() + 8);
    h.dims.subcarriers = get_le<std::uint32_t>(bytes.data() + 12);
    h.dims.frames = get_le<std::uint32_t>(bytes.data() + 16);
    h.dims.joints = get_le<std::uint32_t>(bytes.data() + 20);
    if (h.version != kSampleFormatVersion) {
        throw DataError("malformed sample file " + path.string() + ": unsupported version " + std::to_string(h.version));
    }
    return h;
}

void write_header(std::ostream& os, const char* magic, const CorpusDims& d) {
    os.write(magic, 4);
    put_le<std::uint32_t>(os, kSampleFormatVersion);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.antennas));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.subcarriers));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.frames));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.joints));
}

std::string dims_str(const CorpusDims& d) {
    return "(A=" + std::to_string(d.antennas) + ", S=" + std::to_string(d.subcarriers) +
           ", T=" + std::to_string(d.frames) + ", J=" + std::to_string(d.joints) + ")";
}

CorpusDims dims_from_manifest(const nlohmann::json& m) {
    CorpusDims d;
    d.antennas = m.at("A").get<std::size_t>();
    d.subcarriers = m.at("S").get<std::size_t>();
    d.frames = m.at("T").get<std::size_t>();
    d.joints = m.at("J").get<std::size_t>();
    return d;
}

nlohmann::json read_manifest(const fs::path& root) {
    const fs::path p = root / "manifest.json";
    if (!fs::exists(p)) throw DataError("missing manifest: " + p.string());
    std::ifstream in(p);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p);
    if (!out) throw DataError("cannot write " + p.string());
    out << j.dump(1) << '\n';
}

// Natural order: numeric stems compare as numbers.
bool natural_less(const fs::path& a, const fs::path& b) {
    const std::string sa = a.stem().string(), sb = b.stem().string();
    const bool na = !sa.empty() && std::all_of(sa.begin(), sa.end(), ::isdigit);
    const bool nb = !sb.empty() && std::all_of(sb.begin(), sb.end(), ::isdigit);
    if (na && nb && sa.size() != sb.size()) return sa.size() < sb.size();
    return sa < sb;
}

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return out;
}

// Visits root/<subject>/<environment>/<action>/<file><ext> in sorted order.
template <typename Fn>
void walk_corpus(const fs::path& root, const std::string& ext, Fn fn) {
    for (const auto& subj : sorted_children(root, true))
        for (const auto& env : sorted_children(subj, true))
            for (const auto& act : sorted_children(env, true)) {
                auto files = sorted_children(act, false);
                std::sort(files.begin(), files.end(), natural_less);
                for (const auto& f : files)
                    if (f.extension() == ext)
                        fn(f, subj.filename().string(), env.filename().string(), act.filename().string());
            }
}

void write_manifest(const fs::path& root, const CorpusDims& d, const std::string& units,
                    const std::vector<IndexEntry>& entries, const std::string& digest, nlohmann::json extra) {
    std::set<std::string> subjects, envs;
    for (const auto& e : entries) {
        subjects.insert(e.subject_id);
        envs.insert(e.environment_id);
    }
    nlohmann::json m = {{"format", "GPFI-corpus"},
                        {"version", kSampleFormatVersion},
                        {"A", d.antennas},
                        {"S", d.subcarriers},
                        {"T", d.frames},
                        {"J", d.joints},
                        {"units", units},
                        {"subjects", subjects},
                        {"environments", envs},
                        {"n_samples", entries.size()},
                        {"corpus_digest", digest}};
    for (auto& [k, v] : extra.items()) m[k] = v;
    write_json(root / "manifest.json", m);
}

}  // namespace

void write_sample_file(const fs::path& path, const CsiSample& sample) {
    if (sample.z.rank() != 3) throw DataError("write_sample_file: z must be (A, S, T)");
    const CorpusDims d{sample.z.dim(0), sample.z.dim(1), sample.z.dim(2), sample.pose.size()};
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    write_header(os, "GPFI", d);
    for (double v : sample.z.values()) put_le<float>(os, static_cast<float>(v));
    for (Eigen::Index j = 0; j < sample.pose.joints.rows(); ++j)
        for (Eigen::Index c = 0; c < 3; ++c) put_le<float>(os, static_cast<float>(sample.pose.joints(j, c)));
}

CsiSample read_sample_file(const fs::path& path, const CorpusDims& expected) {
    const auto bytes = read_bytes(path);
    const Header h = parse_header(bytes, "GPFI", path);
    if (!(h.dims == expected)) {
        throw DataError("sample " + path.string() + " has shape " + dims_str(h.dims) + ", manifest declares " +
                        dims_str(expected));
    }
    const std::size_t nz = h.dims.antennas * h.dims.subcarriers * h.dims.frames;
    const std::size_t np = h.dims.joints * 3;
    if (bytes.size() != 24 + 4 * (nz + np)) {
        throw DataError("malformed sample file " + path.string() + ": expected " + std::to_string(24 + 4 * (nz + np)) +
                        " bytes, found " + std::to_string(bytes.size()));
    }
    CsiSample s;
    s.z = Tensor(Shape{h.dims.antennas, h.dims.subcarriers, h.dims.frames});
    const unsigned char* p = bytes.data() + 24;
    for (std::size_t i = 0; i < nz; ++i, p += 4) s.z[i] = get_le<float>(p);
    s.pose = Pose(h.dims.joints);
    for (std::size_t i = 0; i < np; ++i, p += 4)
        s.pose.joints(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3)) = get_le<float>(p);
    if (!s.z.all_finite() || !s.pose.all_finite()) throw DataError("malformed sample file " + path.string() + ": non-finite values");
    return s;
}

void write_raw_sample_file(const fs::path& path, const RawSampleFile& raw) {
    if (raw.frames.empty()) throw DataError("raw sample needs at least one frame");
    const CorpusDims d{static_cast<std::size_t>(raw.frames[0].values.rows()),
                       static_cast<std::size_t>(raw.frames[0].values.cols()), raw.frames.size(), raw.pose.size()};
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    write_header(os, "GPFR", d);
    for (const auto& f : raw.frames)
        for (Eigen::Index a = 0; a < f.values.rows(); ++a)
            for (Eigen::Index s = 0; s < f.values.cols(); ++s) {
                put_le<float>(os, static_cast<float>(f.values(a, s).real()));
                put_le<float>(os, static_cast<float>(f.values(a, s).imag()));
            }
    for (Eigen::Index j = 0; j < raw.pose.joints.rows(); ++j)
        for (Eigen::Index c = 0; c < 3; ++c) put_le<float>(os, static_cast<float>(raw.pose.joints(j, c)));
}

RawSampleFile read_raw_sample_file(const fs::path& path) {
    const auto bytes = read_bytes(path);
    const Header h = parse_header(bytes, "GPFR", path);
    const auto& d = h.dims;
    const std::size_t nc = d.frames * d.antennas * d.subcarriers;
    const std::size_t np = d.joints * 3;
    if (bytes.size() != 24 + 4 * (2 * nc + np)) throw DataError("malformed raw sample file " + path.string());
    RawSampleFile raw;
    const unsigned char* p = bytes.data() + 24;
    for (std::size_t t = 0; t < d.frames; ++t) {
        RawCsiFrame f;
        f.timestamp = t;
        f.values.resize(static_cast<Eigen::Index>(d.antennas), static_cast<Eigen::Index>(d.subcarriers));
        for (Eigen::Index a = 0; a < f.values.rows(); ++a)
            for (Eigen::Index s = 0; s < f.values.cols(); ++s, p += 8)
                f.values(a, s) = {get_le<float>(p), get_le<float>(p + 4)};
        raw.frames.push_back(std::move(f));
    }
    raw.pose = Pose(d.joints);
    for (std::size_t i = 0; i < np; ++i, p += 4)
        raw.pose.joints(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3)) = get_le<float>(p);
    return raw;
}

// ---- index -------------------------------------------------------------------

DatasetIndex::DatasetIndex(CorpusDims dims, std::string units, std::vector<IndexEntry> entries)
    : dims_(dims), units_(std::move(units)), entries_(std::move(entries)) {
    if (units_ != "mm" && units_ != "m") throw DataError("unsupported pose units '" + units_ + "'");
    std::set<fs::path> seen;
    for (const auto& e : entries_)
        if (!seen.insert(e.path).second) throw DataError("duplicate sample locator " + e.path.string());
}

std::map<std::string, std::size_t> DatasetIndex::counts_by_subject() const {
    std::map<std::string, std::size_t> m;
    for (const auto& e : entries_) ++m[e.subject_id];
    return m;
}

std::map<std::string, std::size_t> DatasetIndex::counts_by_environment() const {
    std::map<std::string, std::size_t> m;
    for (const auto& e : entries_) ++m[e.environment_id];
    return m;
}

DatasetIndex DatasetIndex::subset(const std::vector<std::size_t>& positions) const {
    std::vector<IndexEntry> out;
    out.reserve(positions.size());
    for (auto i : positions) out.push_back(entries_.at(i));
    return DatasetIndex(dims_, units_, std::move(out));
}

CsiSample DatasetIndex::load(std::size_t i) const {
    const auto& e = entries_.at(i);
    CsiSample s = read_sample_file(e.path, dims_);
    if (units_ == "m") s.pose.joints *= 1000.0;
    s.subject_id = e.subject_id;
    s.environment_id = e.environment_id;
    s.action_id = e.action_id;
    return s;
}

std::vector<CsiSample> DatasetIndex::load_all() const {
    std::vector<CsiSample> out;
    out.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) out.push_back(load(i));
    return out;
}

DatasetIndex load_mmfi(const fs::path& root) {
    const nlohmann::json m = read_manifest(root);
    CorpusDims dims;
    std::string units;
    try {
        dims = dims_from_manifest(m);
        units = m.value("units", std::string("mm"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest in " + root.string() + ": " + e.what());
    }
    std::vector<IndexEntry> entries;
    walk_corpus(root, ".bin", [&](const fs::path& f, const std::string& subj, const std::string& env, const std::string& act) {
        (void)read_sample_file(f, dims);
        entries.push_back({f, subj, env, act});
    });
    return DatasetIndex(dims, units, std::move(entries));
}

std::string corpus_digest(const DatasetIndex& index) {
    Fnv1a h;
    for (const auto& e : index.entries()) {
        const auto bytes = read_bytes(e.path);
        h.update(bytes.data(), bytes.size());
    }
    return h.hex();
}

DatasetIndex ingest_raw(const fs::path& raw_root, const fs::path& out_root) {
    const nlohmann::json m = read_manifest(raw_root);
    CorpusDims dims;
    std::string units;
    try {
        dims = dims_from_manifest(m);
        units = m.value("units", std::string("mm"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed raw manifest in " + raw_root.string() + ": " + e.what());
    }
    if (units != "mm" && units != "m") throw DataError("unsupported pose units '" + units + "'");
    const double to_mm = units == "m" ? 1000.0 : 1.0;
    std::vector<IndexEntry> entries;
    walk_corpus(raw_root, ".raw", [&](const fs::path& f, const std::string& subj, const std::string& env, const std::string& act) {
        RawSampleFile raw = read_raw_sample_file(f);
        CsiSample s;
        s.z = preprocess_window(raw.frames);
        s.pose = Pose(PoseMatrix(raw.pose.joints * to_mm));
        const CorpusDims got{s.z.dim(0), s.z.dim(1), s.z.dim(2), s.pose.size()};
        if (!(got == dims)) throw DataError("raw sample " + f.string() + " has shape " + dims_str(got) + ", manifest declares " + dims_str(dims));
        const fs::path dst = out_root / subj / env / act / (f.stem().string() + ".bin");
        write_sample_file(dst, s);
        entries.push_back({dst, subj, env, act});
    });
    DatasetIndex index(dims, "mm", entries);
    write_manifest(out_root, dims, "mm", entries, corpus_digest(index), {{"source", "ingest"}});
    return load_mmfi(out_root);
}

// ---- splits -------------------------------------------------------------------

std::string to_string(SplitStrategy s) {
    switch (s) {
        case SplitStrategy::random: return "S1";
        case SplitStrategy::cross_subject: return "S2";
        case SplitStrategy::cross_environment: return "S3";
    }
    return "?";
}

SplitStrategy parse_split(const std::string& s) {
    if (s == "S1" || s == "random") return SplitStrategy::random;
    if (s == "S2" || s == "cross_subject") return SplitStrategy::cross_subject;
    if (s == "S3" || s == "cross_environment") return SplitStrategy::cross_environment;
    throw DataError("unknown split '" + s + "' (expected S1, S2 or S3)");
}

namespace {

template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

std::size_t clamp_holdout(double wanted, std::size_t n) {
    auto k = static_cast<std::size_t>(std::llround(wanted));
    return std::clamp<std::size_t>(k, 1, n - 1);
}

Split partition(const DatasetIndex& index, const std::vector<bool>& is_test) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < index.size(); ++i) (is_test[i] ? te : tr).push_back(i);
    return {index.subset(tr), index.subset(te)};
}

}  // namespace

Split make_split(const DatasetIndex& index, const SplitSpec& spec) {
    if (index.empty()) throw DataError("cannot split an empty index");
    const auto& entries = index.entries();
    std::vector<bool> is_test(index.size(), false);
    switch (spec.strategy) {
        case SplitStrategy::random: {
            if (index.size() < 2) throw DataError("random split needs at least 2 samples");
            if (!(spec.test_ratio > 0.0 && spec.test_ratio < 1.0)) throw DataError("test_ratio must be in (0, 1)");
            std::vector<std::size_t> order(index.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            seeded_shuffle(order, spec.seed);
            const std::size_t n_test = clamp_holdout(spec.test_ratio * static_cast<double>(index.size()), index.size());
            for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
            break;
        }
        case SplitStrategy::cross_subject: {
            const auto counts = index.counts_by_subject();
            if (counts.size() < 2) {
                throw DataError("cross-subject split needs at least 2 subjects, corpus has " + std::to_string(counts.size()));
            }
            std::set<std::string> held;
            if (!spec.test_subjects.empty()) {
                for (const auto& s : spec.test_subjects) {
                    if (!counts.count(s)) throw DataError("test subject '" + s + "' not in corpus");
                    held.insert(s);
                }
                if (held.size() >= counts.size()) throw DataError("cross-subject split leaves no training subject");
            } else {
                std::vector<std::string> subjects;
                for (const auto& [s, _] : counts) subjects.push_back(s);
                seeded_shuffle(subjects, spec.seed);
                // 32/8 at 40 subjects; the same 4:1 ratio elsewhere.
                const std::size_t n_test = clamp_holdout(0.2 * static_cast<double>(subjects.size()), subjects.size());
                held.insert(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_test));
            }
            for (std::size_t i = 0; i < entries.size(); ++i) is_test[i] = held.count(entries[i].subject_id) != 0;
            break;
        }
        case SplitStrategy::cross_environment: {
            const auto counts = index.counts_by_environment();
            if (counts.size() < 2) {
                throw DataError("cross-environment split needs at least 2 environments, corpus has " +
                                std::to_string(counts.size()));
            }
            std::string held;
            if (spec.test_environment) {
                if (!counts.count(*spec.test_environment)) {
                    throw DataError("test environment '" + *spec.test_environment + "' not in corpus");
                }
                held = *spec.test_environment;
            } else {
                std::vector<std::string> envs;
                for (const auto& [e, _] : counts) envs.push_back(e);
                seeded_shuffle(envs, spec.seed);
                held = envs.front();
            }
            for (std::size_t i = 0; i < entries.size(); ++i) is_test[i] = entries[i].environment_id == held;
            break;
        }
    }
    return partition(index, is_test);
}

// ---- synthetic corpus ---------------------------------------------------------

void SynthConfig::validate() const {
    if (n_samples < 1 || n_subjects < 1 || n_environments < 1 || n_actions < 1) {
        throw DataError("synthetic corpus counts must be positive");
    }
    if (!(noise_sigma >= 0.0)) throw DataError("noise_sigma must be non-negative");
    if (!(wavelength_mm > 0.0)) throw DataError("wavelength_mm must be positive");
    if (dims.antennas < 1 || dims.subcarriers < 1 || dims.frames < 1) throw DataError("synthetic dims must be positive");
    if (dims.joints != kDefaultJoints) throw DataError("synthetic poses use the 17-joint skeleton");
}

nlohmann::json to_json(const SynthConfig& c) {
    return {{"n_samples", c.n_samples},       {"n_subjects", c.n_subjects},
            {"n_environments", c.n_environments}, {"n_actions", c.n_actions},
            {"noise_sigma", c.noise_sigma},   {"wavelength_mm", c.wavelength_mm},
            {"A", c.dims.antennas},           {"S", c.dims.subcarriers},
            {"T", c.dims.frames},             {"J", c.dims.joints},
            {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c) {
    if (!j.is_object()) throw DataError("synth config must be a JSON object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "n_samples") c.n_samples = v.get<std::size_t>();
            else if (k == "n_subjects") c.n_subjects = v.get<std::size_t>();
            else if (k == "n_environments") c.n_environments = v.get<std::size_t>();
            else if (k == "n_actions") c.n_actions = v.get<std::size_t>();
            else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
            else if (k == "wavelength_mm") c.wavelength_mm = v.get<double>();
            else if (k == "A") c.dims.antennas = v.get<std::size_t>();
            else if (k == "S") c.dims.subcarriers = v.get<std::size_t>();
            else if (k == "T") c.dims.frames = v.get<std::size_t>();
            else if (k == "J") c.dims.joints = v.get<std::size_t>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else throw DataError("unknown synth key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("synth config: ") + e.what());
    }
    return c;
}

namespace {

// Rest pose relative to Bot Torso, millimeters; x left, y up, z forward.
const double kRestPose[kDefaultJoints][3] = {
    {0, 0, 0},      {120, 0, 0},    {120, -440, 0},  {120, -880, 0}, {-120, 0, 0},  {-120, -440, 0},
    {-120, -880, 0}, {0, 230, 0},   {0, 480, 0},     {0, 560, 0},    {0, 680, 0},   {-160, 480, 0},
    {-160, 200, 0}, {-160, -50, 0}, {160, 480, 0},   {160, 200, 0},  {160, -50, 0}};

struct BoneMotion {
    double amplitude, frequency, phase;
    Eigen::Vector3d axis;
};

struct ActionMotion {
    std::vector<BoneMotion> bones;  // one per default edge
    double sway_x, sway_z, sway_freq, sway_phase;
};

struct SubjectBody {
    double scale, heading;
};

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Vector3d v(n(rng), n(rng), n(rng));
    return v.normalized();
}

// Forward kinematics along the default tree: bone lengths are preserved.
PoseMatrix pose_at(const ActionMotion& act, const SubjectBody& body, double yaw, const Eigen::Vector3d& origin, double t) {
    const auto& edges = default_skeleton_edges();
    PoseMatrix p = PoseMatrix::Zero(kDefaultJoints, 3);
    std::vector<Eigen::Matrix3d> rot(kDefaultJoints, Eigen::Matrix3d::Identity());
    rot[0] = Eigen::AngleAxisd(body.heading + yaw, Eigen::Vector3d::UnitY()).toRotationMatrix();
    const double w = 2.0 * std::numbers::pi * act.sway_freq * t + act.sway_phase;
    p.row(0) = (origin + Eigen::Vector3d(act.sway_x * std::sin(w), 0.0, act.sway_z * std::cos(w))).transpose();
    for (std::size_t b = 0; b < edges.size(); ++b) {
        const auto [parent, child] = edges[b];
        const auto& m = act.bones[b];
        const double angle = m.amplitude * std::sin(2.0 * std::numbers::pi * m.frequency * t + m.phase);
        rot[child] = rot[parent] * Eigen::AngleAxisd(angle, m.axis).toRotationMatrix();
        const Eigen::Vector3d bone(kRestPose[child][0] - kRestPose[parent][0], kRestPose[child][1] - kRestPose[parent][1],
                                   kRestPose[child][2] - kRestPose[parent][2]);
        p.row(static_cast<Eigen::Index>(child)) =
            p.row(static_cast<Eigen::Index>(parent)) + (body.scale * (rot[child] * bone)).transpose();
    }
    return p;
}

std::string label(char prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%02zu", prefix, i + 1);
    return buf;
}

}  // namespace

SynthCorpus generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t A = cfg.dims.antennas, S = cfg.dims.subcarriers, T = cfg.dims.frames, J = cfg.dims.joints;
    const std::size_t E = cfg.n_environments;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;

    // Multipath-style map: each joint acts as a reflector with its own gain,
    // delay (phase slope across subcarriers) and slow drift across frames.
    SynthCorpus corpus;
    SynthMap& map = corpus.map;
    map.wavelength_mm = cfg.wavelength_mm;
    map.weights.resize(A * S * J);
    map.phases.resize(A * S * T * J);
    map.directions.resize(J * 3);
    map.environment.resize(E * A * S);
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t j = 0; j < J; ++j) {
            const double gain = gauss(rng) / std::sqrt(static_cast<double>(J));
            const double ripple = 0.5 * unif(rng), ripple_freq = 3.0 * unif(rng), ripple_phase = two_pi * unif(rng);
            const double base = two_pi * unif(rng), delay = 4.0 * unif(rng), drift = 0.3 * gauss(rng);
            for (std::size_t s = 0; s < S; ++s) {
                const double u = static_cast<double>(s) / static_cast<double>(S);
                map.weights[(a * S + s) * J + j] = gain * (1.0 + ripple * std::cos(two_pi * ripple_freq * u + ripple_phase));
                for (std::size_t t = 0; t < T; ++t)
                    map.phases[((a * S + s) * T + t) * J + j] = base + two_pi * delay * u + drift * static_cast<double>(t);
            }
        }
    for (std::size_t j = 0; j < J; ++j) {
        const Eigen::Vector3d d = random_unit(rng);
        for (int c = 0; c < 3; ++c) map.directions[j * 3 + static_cast<std::size_t>(c)] = d(c);
    }
    for (auto& v : map.environment) v = 0.5 * gauss(rng);

    std::vector<SubjectBody> bodies(cfg.n_subjects);
    for (auto& b : bodies) b = {0.85 + 0.3 * unif(rng), 0.4 * (unif(rng) - 0.5)};
    std::vector<ActionMotion> actions(cfg.n_actions);
    for (auto& act : actions) {
        for (std::size_t b = 0; b < default_skeleton_edges().size(); ++b)
            act.bones.push_back({0.1 + 0.5 * unif(rng), 0.3 + 0.9 * unif(rng), two_pi * unif(rng), random_unit(rng)});
        act.sway_x = 50.0 + 250.0 * unif(rng);
        act.sway_z = 50.0 + 250.0 * unif(rng);
        act.sway_freq = 0.05 + 0.2 * unif(rng);
        act.sway_phase = two_pi * unif(rng);
    }

    const Eigen::Vector3d origin(0.0, 950.0, 3000.0);
    const double dt = 0.1;
    std::vector<PoseMatrix> frames(T);
    std::vector<double> proj(J);
    corpus.samples.reserve(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
        const std::size_t subj = i % cfg.n_subjects;
        const std::size_t env = (i / cfg.n_subjects) % E;
        const std::size_t act = static_cast<std::size_t>(rng() % cfg.n_actions);
        const double start = 20.0 * unif(rng);
        const double yaw = 0.6 * (unif(rng) - 0.5);
        for (std::size_t t = 0; t < T; ++t)
            frames[t] = pose_at(actions[act], bodies[subj], yaw, origin, start + dt * static_cast<double>(t));

        CsiSample s;
        s.z = Tensor(Shape{A, S, T});
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < J; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < 3; ++c)
                    dot += map.directions[j * 3 + c] * frames[t](static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
                proj[j] = dot / cfg.wavelength_mm;
            }
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t sc = 0; sc < S; ++sc) {
                    double v = map.environment[(env * A + a) * S + sc];
                    for (std::size_t j = 0; j < J; ++j)
                        v += map.weights[(a * S + sc) * J + j] * std::cos(proj[j] + map.phases[((a * S + sc) * T + t) * J + j]);
                    if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * gauss(rng);
                    s.z[(a * S + sc) * T + t] = static_cast<float>(v);
                }
        }
        s.pose = Pose(PoseMatrix(frames[T / 2].cast<float>().cast<double>()));
        s.subject_id = label('S', subj);
        s.environment_id = label('E', env);
        s.action_id = label('A', act);
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

DatasetIndex synth_dataset(const SynthConfig& config, const fs::path& out_root) {
    SynthCorpus corpus = generate_synthetic(config);
    fs::create_directories(out_root);
    std::vector<IndexEntry> entries;
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        const auto& s = corpus.samples[i];
        const fs::path p = out_root / s.subject_id / s.environment_id / s.action_id / (std::to_string(i) + ".bin");
        write_sample_file(p, s);
        entries.push_back({p, s.subject_id, s.environment_id, s.action_id});
    }
    // Digest in load order, which is the sorted tree walk.
    DatasetIndex written = [&] {
        std::vector<IndexEntry> sorted = entries;
        std::sort(sorted.begin(), sorted.end(), [](const IndexEntry& a, const IndexEntry& b) {
            if (a.subject_id != b.subject_id) return a.subject_id < b.subject_id;
            if (a.environment_id != b.environment_id) return a.environment_id < b.environment_id;
            if (a.action_id != b.action_id) return a.action_id < b.action_id;
            return natural_less(a.path, b.path);
        });
        return DatasetIndex(config.dims, "mm", std::move(sorted));
    }();
    const auto& m = corpus.map;
    nlohmann::json synth = to_json(config);
    synth["map"] = {{"wavelength_mm", m.wavelength_mm},
                    {"weights", m.weights},
                    {"directions", m.directions},
                    {"phases", m.phases},
                    {"environment", m.environment}};
    write_manifest(out_root, config.dims, "mm", entries, corpus_digest(written), {{"synthetic", synth}});
    return load_mmfi(out_root);
}

}  // namespace gpfi
