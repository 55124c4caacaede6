#include <doctest.h>

#include <fstream>
#include <numbers>
#include <set>

#include "gpfi/data.hpp"
#include "gpfi/metrics.hpp"
#include "gpfi/skeleton_graph.hpp"
#include "oracles.hpp"

using namespace gpfi;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("gpfi_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<RawCsiFrame> random_frames(oracle::Rng& rng, std::size_t A, std::size_t S, std::size_t T) {
    std::vector<RawCsiFrame> frames(T);
    for (std::size_t t = 0; t < T; ++t) {
        frames[t].values.resize(static_cast<Eigen::Index>(A), static_cast<Eigen::Index>(S));
        frames[t].timestamp = 1000 + 10 * t;
        for (Eigen::Index a = 0; a < static_cast<Eigen::Index>(A); ++a)
            for (Eigen::Index s = 0; s < static_cast<Eigen::Index>(S); ++s)
                frames[t].values(a, s) = std::polar(oracle::uniform(rng, 0.1, 5.0), oracle::uniform(rng, -3.1, 3.1));
    }
    return frames;
}

CsiSample random_sample(oracle::Rng& rng, const CorpusDims& d, const std::string& subj = "S01",
                        const std::string& env = "E01", const std::string& act = "A01") {
    CsiSample s;
    s.z = oracle::random_tensor({d.antennas, d.subcarriers, d.frames}, rng);
    s.pose = oracle::random_pose(rng, d.joints);
    s.subject_id = subj;
    s.environment_id = env;
    s.action_id = act;
    return s;
}

void write_manifest(const fs::path& root, const CorpusDims& d, const std::string& units) {
    std::ofstream(root / "manifest.json") << nlohmann::json{{"format", "GPFI-corpus"}, {"version", 1}, {"A", d.antennas},
                                                            {"S", d.subcarriers}, {"T", d.frames}, {"J", d.joints},
                                                            {"units", units}}
                                                 .dump();
}

DatasetIndex fake_index(std::size_t n, std::size_t subjects, std::size_t envs) {
    std::vector<IndexEntry> entries;
    for (std::size_t i = 0; i < n; ++i) {
        char s[8], e[8];
        std::snprintf(s, sizeof s, "S%02zu", i % subjects + 1);
        std::snprintf(e, sizeof e, "E%02zu", (i / subjects) % envs + 1);
        entries.push_back({fs::path("/nonexistent") / (std::to_string(i) + ".bin"), s, e, "A01"});
    }
    return DatasetIndex(CorpusDims{}, "mm", entries);
}

std::set<std::string> paths(const DatasetIndex& idx) {
    std::set<std::string> out;
    for (const auto& e : idx.entries()) out.insert(e.path.string());
    return out;
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

TEST_CASE("preprocessing returns the modulus after phase detrending") {
    oracle::Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t A = oracle::index(rng, 1, 3), S = oracle::index(rng, 2, 40), T = oracle::index(rng, 1, 6);
        const auto frames = random_frames(rng, A, S, T);
        const Tensor z = preprocess_window(frames);
        REQUIRE(z.shape() == Shape{A, S, T});
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t t = 0; t < T; ++t)
                    CHECK(std::abs(z.at({a, s, t}) - std::abs(frames[t].values(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)))) < 1e-12);
    }
}

TEST_CASE("phase calibration recovers a linear phase ramp") {
    oracle::Rng rng(2);
    const std::size_t A = 2, S = 30, T = 3;
    std::vector<RawCsiFrame> frames(T);
    std::vector<double> slope(T * A), icept(T * A);
    for (std::size_t t = 0; t < T; ++t) {
        frames[t].values.resize(A, S);
        frames[t].timestamp = t + 1;
        for (std::size_t a = 0; a < A; ++a) {
            slope[t * A + a] = oracle::uniform(rng, -1.5, 1.5);
            icept[t * A + a] = oracle::uniform(rng, -3.0, 3.0);
            for (std::size_t s = 0; s < S; ++s)
                frames[t].values(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) =
                    std::polar(2.0, slope[t * A + a] * static_cast<double>(s) + icept[t * A + a]);
        }
    }
    PhaseCalibration cal;
    (void)preprocess_window(frames, &cal);
    for (std::size_t i = 0; i < T * A; ++i) {
        CHECK(cal.slope[i] == doctest::Approx(slope[i]).epsilon(1e-9));
        // The intercept is recovered up to a multiple of 2 pi.
        const double d = cal.intercept[i] - icept[i];
        CHECK(std::abs(d - 2.0 * std::numbers::pi * std::round(d / (2.0 * std::numbers::pi))) < 1e-9);
    }
    for (double v : cal.phase.values()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("preprocessing rejects bad windows") {
    oracle::Rng rng(3);
    CHECK_THROWS_AS(preprocess_window({}), DataError);
    auto frames = random_frames(rng, 2, 8, 3);
    frames[2].timestamp = frames[1].timestamp;
    CHECK_THROWS_AS(preprocess_window(frames), DataError);
    frames = random_frames(rng, 2, 8, 3);
    frames[1].values.resize(2, 7);
    CHECK_THROWS_AS(preprocess_window(frames), DataError);
    frames = random_frames(rng, 2, 8, 3);
    frames[0].values(1, 1) = {std::nan(""), 0.0};
    CHECK_THROWS_AS(preprocess_window(frames), DataError);
}

TEST_CASE("per-sample normalization") {
    oracle::Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const Tensor z = oracle::random_tensor({3, 10, 4}, rng, oracle::uniform(rng, 0.1, 50.0));
        Tensor shifted = z;
        for (auto& v : shifted.values()) v = 7.0 + 3.0 * v;
        const Tensor n = normalize_sample(z);
        double mean = 0.0, sq = 0.0;
        for (double v : n.values()) mean += v / 120.0;
        for (double v : n.values()) sq += (v - mean) * (v - mean) / 120.0;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(std::abs(sq - 1.0) < 1e-12);
        const Tensor again = normalize_sample(n);
        CHECK(max_abs_diff(again, n) < 1e-12);
        CHECK(max_abs_diff(normalize_sample(shifted), n) < 1e-12);
    }
    const Tensor flat(Shape{2, 3, 4}, 5.5);
    const Tensor zeros = normalize_sample(flat);
    for (double v : zeros.values()) CHECK(v == 0.0);
}

TEST_CASE("sample files round trip at float32 precision") {
    TempDir tmp;
    oracle::Rng rng(5);
    const CorpusDims d{2, 8, 3, 17};
    const CsiSample s = random_sample(rng, d);
    const fs::path p = tmp.path / "a" / "0.bin";
    write_sample_file(p, s);
    CHECK(fs::file_size(p) == 24 + 4 * (2 * 8 * 3 + 17 * 3));
    const CsiSample back = read_sample_file(p, d);
    REQUIRE(back.z.shape() == s.z.shape());
    for (std::size_t i = 0; i < s.z.size(); ++i) CHECK(back.z[i] == f32(s.z[i]));
    for (Eigen::Index j = 0; j < 17; ++j)
        for (int c = 0; c < 3; ++c) CHECK(back.pose.joints(j, c) == f32(s.pose.joints(j, c)));
    // A second write of the reloaded sample is byte-identical.
    write_sample_file(tmp.path / "b.bin", back);
    std::ifstream x(p, std::ios::binary), y(tmp.path / "b.bin", std::ios::binary);
    CHECK(std::string(std::istreambuf_iterator<char>(x), {}) == std::string(std::istreambuf_iterator<char>(y), {}));
}

TEST_CASE("corrupted sample files name the offending path") {
    TempDir tmp;
    oracle::Rng rng(6);
    const CorpusDims d{2, 8, 3, 17};
    const fs::path p = tmp.path / "s.bin";
    write_sample_file(p, random_sample(rng, d));

    auto expect_error = [&](const CorpusDims& dims) {
        try {
            (void)read_sample_file(p, dims);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find(p.string()) != std::string::npos);
        }
    };
    SUBCASE("truncated") {
        fs::resize_file(p, fs::file_size(p) - 4);
        expect_error(d);
    }
    SUBCASE("bad magic") {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
        f.close();
        expect_error(d);
    }
    SUBCASE("shape differs from the manifest") { expect_error(CorpusDims{2, 8, 4, 17}); }
    SUBCASE("non-finite payload") {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(24);
        const float nan = std::numeric_limits<float>::quiet_NaN();
        f.write(reinterpret_cast<const char*>(&nan), 4);
        f.close();
        expect_error(d);
    }
    SUBCASE("missing file") {
        fs::remove(p);
        expect_error(d);
    }
}

TEST_CASE("corpus tree loading") {
    TempDir tmp;
    oracle::Rng rng(7);
    const CorpusDims d{2, 8, 3, 17};
    std::vector<std::pair<fs::path, CsiSample>> written;
    const std::vector<std::array<std::string, 4>> layout{
        {"S02", "E01", "A03", "10"}, {"S01", "E02", "A01", "2"}, {"S01", "E02", "A01", "10"}, {"S01", "E01", "A02", "0"}};
    for (const auto& [subj, env, act, idx] : layout) {
        const CsiSample s = random_sample(rng, d, subj, env, act);
        const fs::path p = tmp.path / subj / env / act / (idx + ".bin");
        write_sample_file(p, s);
        written.emplace_back(p, s);
    }
    std::ofstream(tmp.path / "S01" / "E01" / "A02" / "notes.txt") << "ignored";

    SUBCASE("millimeter corpus") {
        write_manifest(tmp.path, d, "mm");
        const DatasetIndex idx = load_mmfi(tmp.path);
        REQUIRE(idx.size() == 4);
        // Sorted walk, numeric order within a directory.
        CHECK(idx.entries()[0].path == written[3].first);
        CHECK(idx.entries()[1].path == written[1].first);
        CHECK(idx.entries()[2].path == written[2].first);
        CHECK(idx.entries()[3].path == written[0].first);
        CHECK(idx.counts_by_subject() == std::map<std::string, std::size_t>{{"S01", 3}, {"S02", 1}});
        CHECK(idx.counts_by_environment() == std::map<std::string, std::size_t>{{"E01", 2}, {"E02", 2}});
        const CsiSample s = idx.load(3);
        CHECK(s.subject_id == "S02");
        CHECK(s.action_id == "A03");
        CHECK(s.pose.joints(5, 1) == f32(written[0].second.pose.joints(5, 1)));
        CHECK(corpus_digest(idx) == corpus_digest(load_mmfi(tmp.path)));
        CHECK(corpus_digest(idx) != corpus_digest(idx.subset({0, 1, 2})));
    }
    SUBCASE("meter poses are converted on load") {
        write_manifest(tmp.path, d, "m");
        const DatasetIndex idx = load_mmfi(tmp.path);
        CHECK(idx.load(3).pose.joints(5, 1) == 1000.0 * f32(written[0].second.pose.joints(5, 1)));
    }
    SUBCASE("bad manifests") {
        CHECK_THROWS_AS(load_mmfi(tmp.path), DataError);
        std::ofstream(tmp.path / "manifest.json") << "{not json";
        CHECK_THROWS_AS(load_mmfi(tmp.path), DataError);
        std::ofstream(tmp.path / "manifest.json") << R"({"A": 2})";
        CHECK_THROWS_AS(load_mmfi(tmp.path), DataError);
        write_manifest(tmp.path, d, "furlongs");
        CHECK_THROWS_AS(load_mmfi(tmp.path), DataError);
        write_manifest(tmp.path, CorpusDims{2, 9, 3, 17}, "mm");
        CHECK_THROWS_AS(load_mmfi(tmp.path), DataError);
    }
}

TEST_CASE("raw ingest") {
    TempDir tmp;
    oracle::Rng rng(8);
    const CorpusDims d{2, 6, 3, 17};
    const fs::path raw = tmp.path / "raw", out = tmp.path / "out";
    std::vector<RawSampleFile> files;
    for (int i = 0; i < 3; ++i) {
        RawSampleFile r{random_frames(rng, 2, 6, 3), oracle::random_pose(rng, 17, 0.3)};
        // Round to what the file stores so the oracle sees the same input.
        for (auto& f : r.frames)
            for (Eigen::Index k = 0; k < f.values.size(); ++k)
                f.values(k) = {f32(f.values(k).real()), f32(f.values(k).imag())};
        r.pose.joints = r.pose.joints.cast<float>().cast<double>();
        write_raw_sample_file(raw / "S01" / "E01" / "A01" / (std::to_string(i) + ".raw"), r);
        files.push_back(r);
    }
    write_manifest(raw, d, "m");
    const RawSampleFile back = read_raw_sample_file(raw / "S01" / "E01" / "A01" / "1.raw");
    CHECK(back.frames.size() == 3);
    CHECK(back.frames[2].values == files[1].frames[2].values);

    const DatasetIndex idx = ingest_raw(raw, out);
    REQUIRE(idx.size() == 3);
    CHECK(idx.units() == "mm");
    CHECK(fs::exists(out / "manifest.json"));
    for (std::size_t i = 0; i < 3; ++i) {
        const CsiSample s = idx.load(i);
        for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t sc = 0; sc < 6; ++sc)
                for (std::size_t t = 0; t < 3; ++t)
                    CHECK(s.z.at({a, sc, t}) ==
                          doctest::Approx(std::abs(files[i].frames[t].values(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(sc)))).epsilon(1e-6));
        CHECK(s.pose.joints(0, 0) == doctest::Approx(1000.0 * files[i].pose.joints(0, 0)).epsilon(1e-6));
    }
}

TEST_CASE("S1 random split") {
    const DatasetIndex idx = fake_index(100, 5, 2);
    const Split sp = make_split(idx, {SplitStrategy::random, 3});
    CHECK(sp.train.size() == 75);
    CHECK(sp.test.size() == 25);
    std::set<std::string> all = paths(sp.train), te = paths(sp.test);
    for (const auto& p : te) CHECK(all.insert(p).second);
    CHECK(all == paths(idx));
    CHECK(paths(make_split(idx, {SplitStrategy::random, 3}).test) == te);
    CHECK(paths(make_split(idx, {SplitStrategy::random, 4}).test) != te);
    CHECK_THROWS_AS(make_split(fake_index(1, 1, 1), {SplitStrategy::random, 0}), DataError);
    SplitSpec bad{SplitStrategy::random, 0};
    bad.test_ratio = 1.0;
    CHECK_THROWS_AS(make_split(idx, bad), DataError);
}

TEST_CASE("S2 cross-subject split") {
    const DatasetIndex idx = fake_index(400, 40, 4);
    const Split sp = make_split(idx, {SplitStrategy::cross_subject, 11});
    CHECK(sp.train.counts_by_subject().size() == 32);
    CHECK(sp.test.counts_by_subject().size() == 8);
    for (const auto& [s, _] : sp.test.counts_by_subject()) CHECK(sp.train.counts_by_subject().count(s) == 0);
    CHECK(sp.train.size() + sp.test.size() == 400);
    CHECK(paths(make_split(idx, {SplitStrategy::cross_subject, 11}).test) == paths(sp.test));

    SplitSpec fixed{SplitStrategy::cross_subject, 0};
    fixed.test_subjects = {"S03", "S07"};
    const Split f = make_split(idx, fixed);
    CHECK(f.test.counts_by_subject() == std::map<std::string, std::size_t>{{"S03", 10}, {"S07", 10}});
    fixed.test_subjects = {"S99"};
    CHECK_THROWS_AS(make_split(idx, fixed), DataError);
    CHECK_THROWS_AS(make_split(fake_index(10, 1, 2), {SplitStrategy::cross_subject, 0}), DataError);
    // Small corpora keep at least one subject on each side.
    const Split two = make_split(fake_index(10, 2, 1), {SplitStrategy::cross_subject, 0});
    CHECK(two.train.counts_by_subject().size() == 1);
    CHECK(two.test.counts_by_subject().size() == 1);
}

TEST_CASE("S3 cross-environment split") {
    const DatasetIndex idx = fake_index(400, 40, 4);
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const Split sp = make_split(idx, {SplitStrategy::cross_environment, seed});
        REQUIRE(sp.test.counts_by_environment().size() == 1);
        CHECK(sp.train.counts_by_environment().size() == 3);
        CHECK(sp.train.counts_by_environment().count(sp.test.counts_by_environment().begin()->first) == 0);
        CHECK(sp.test.size() == idx.counts_by_environment().at(sp.test.entries().front().environment_id));
    }
    SplitSpec fixed{SplitStrategy::cross_environment, 0};
    fixed.test_environment = "E02";
    CHECK(make_split(idx, fixed).test.counts_by_environment().begin()->first == "E02");
    fixed.test_environment = "E09";
    CHECK_THROWS_AS(make_split(idx, fixed), DataError);
    CHECK_THROWS_AS(make_split(fake_index(10, 2, 1), {SplitStrategy::cross_environment, 0}), DataError);
}

TEST_CASE("split names") {
    CHECK(parse_split("S1") == SplitStrategy::random);
    CHECK(parse_split("S2") == SplitStrategy::cross_subject);
    CHECK(parse_split("S3") == SplitStrategy::cross_environment);
    CHECK(parse_split(to_string(SplitStrategy::cross_subject)) == SplitStrategy::cross_subject);
    CHECK_THROWS_AS(parse_split("S4"), DataError);
}

TEST_CASE("synthetic corpus shapes, metadata and determinism") {
    SynthConfig c;
    c.n_samples = 60;
    c.dims = {3, 16, 4, 17};
    c.seed = 9;
    const SynthCorpus a = generate_synthetic(c), b = generate_synthetic(c);
    REQUIRE(a.samples.size() == 60);
    std::set<std::string> subj, env;
    for (std::size_t i = 0; i < 60; ++i) {
        CHECK(a.samples[i].z.shape() == Shape{3, 16, 4});
        CHECK(a.samples[i].pose.size() == 17);
        CHECK(a.samples[i].z.storage() == b.samples[i].z.storage());
        CHECK(a.samples[i].pose.joints == b.samples[i].pose.joints);
        for (double v : a.samples[i].z.values()) CHECK(v == f32(v));
        subj.insert(a.samples[i].subject_id);
        env.insert(a.samples[i].environment_id);
    }
    CHECK(subj.size() == 8);
    CHECK(env.size() == 4);
    c.seed = 10;
    CHECK(generate_synthetic(c).samples[0].z.storage() != a.samples[0].z.storage());
    c.dims.joints = 5;
    CHECK_THROWS_AS(generate_synthetic(c), DataError);
    CHECK_THROWS_AS(synth_config_from_json({{"n_sample", 3}}), DataError);
    const SynthConfig back = synth_config_from_json(to_json(SynthConfig{}));
    CHECK(to_json(back) == to_json(SynthConfig{}));
}

TEST_CASE("synthetic poses keep bone lengths within a subject") {
    SynthConfig c;
    c.n_samples = 64;
    c.dims = {1, 4, 2, 17};
    c.seed = 12;
    const SynthCorpus corpus = generate_synthetic(c);
    std::map<std::string, std::vector<double>> first;
    for (const auto& s : corpus.samples) {
        std::vector<double> len;
        for (auto [p, q] : default_skeleton_edges())
            len.push_back((s.pose.joints.row(static_cast<Eigen::Index>(p)) - s.pose.joints.row(static_cast<Eigen::Index>(q))).norm());
        auto [it, fresh] = first.emplace(s.subject_id, len);
        if (!fresh)
            for (std::size_t k = 0; k < len.size(); ++k) CHECK(len[k] == doctest::Approx(it->second[k]).epsilon(1e-5));
    }
}

TEST_CASE("synthetic CSI follows the stored map") {
    SynthConfig c;
    c.n_samples = 20;
    c.dims = {2, 12, 1, 17};  // one frame: the labeled pose is the frame's pose
    c.noise_sigma = 0.0;
    c.seed = 13;
    const SynthCorpus corpus = generate_synthetic(c);
    const SynthMap& m = corpus.map;
    const std::size_t A = 2, S = 12, J = 17;
    for (const auto& s : corpus.samples) {
        const std::size_t e = static_cast<std::size_t>(std::stoi(s.environment_id.substr(1)) - 1);
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t sc = 0; sc < S; ++sc) {
                double v = m.environment[(e * A + a) * S + sc];
                for (std::size_t j = 0; j < J; ++j) {
                    double dot = 0.0;
                    for (int k = 0; k < 3; ++k) dot += m.directions[j * 3 + static_cast<std::size_t>(k)] * s.pose.joints(static_cast<Eigen::Index>(j), k);
                    v += m.weights[(a * S + sc) * J + j] * std::cos(dot / m.wavelength_mm + m.phases[(a * S + sc) * J + j]);
                }
                CHECK(std::abs(s.z.at({a, sc, 0}) - v) < 1e-4);
            }
    }
}

TEST_CASE("synthetic CSI carries pose information") {
    // Nearest neighbour in CSI space against the same predictor with shuffled labels.
    SynthConfig c;
    c.n_samples = 600;
    c.dims = {3, 32, 4, 17};
    c.seed = 14;
    const SynthCorpus corpus = generate_synthetic(c);
    std::vector<Tensor> z;
    for (const auto& s : corpus.samples) z.push_back(normalize_sample(s.z));
    const std::size_t n_train = 500;
    std::vector<std::size_t> shuffled(n_train);
    std::iota(shuffled.begin(), shuffled.end(), 0);
    oracle::Rng rng(14);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<Pose> nn, shuf, gt;
    for (std::size_t i = n_train; i < corpus.samples.size(); ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < n_train; ++k) {
            double d = 0.0;
            for (std::size_t q = 0; q < z[i].size(); ++q) d += (z[i][q] - z[k][q]) * (z[i][q] - z[k][q]);
            if (d < best_d) best_d = d, best = k;
        }
        nn.push_back(corpus.samples[best].pose);
        shuf.push_back(corpus.samples[shuffled[best]].pose);
        gt.push_back(corpus.samples[i].pose);
    }
    const double err_nn = evaluate_poses(nn, gt).mpjpe_mm, err_shuf = evaluate_poses(shuf, gt).mpjpe_mm;
    MESSAGE("nearest neighbour " << err_nn << " mm, shuffled " << err_shuf << " mm");
    CHECK(err_nn < 0.7 * err_shuf);
}

TEST_CASE("synthetic corpus on disk") {
    TempDir tmp;
    SynthConfig c;
    c.n_samples = 24;
    c.dims = {2, 8, 2, 17};
    c.seed = 15;
    const DatasetIndex a = synth_dataset(c, tmp.path / "a");
    const DatasetIndex b = synth_dataset(c, tmp.path / "b");
    REQUIRE(a.size() == 24);
    CHECK(a.dims() == c.dims);
    CHECK(corpus_digest(a) == corpus_digest(b));
    std::ifstream mf(tmp.path / "a" / "manifest.json");
    const auto m = nlohmann::json::parse(mf);
    CHECK(m.at("corpus_digest").get<std::string>() == corpus_digest(a));
    CHECK(m.at("n_samples").get<std::size_t>() == 24);
    CHECK(m.contains("synthetic"));
    const SynthCorpus mem = generate_synthetic(c);
    std::multiset<Storage> disk, ram;
    for (const auto& s : a.load_all()) disk.insert(s.z.storage());
    for (const auto& s : mem.samples) ram.insert(s.z.storage());
    CHECK(disk == ram);
}
