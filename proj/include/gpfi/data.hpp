#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpfi/pose.hpp"
#include "gpfi/tensor.hpp"

namespace gpfi {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One CSI snapshot: complex response per (antenna, subcarrier).
struct RawCsiFrame {
    Eigen::MatrixXcd values;  // (A, S)
    std::uint64_t timestamp = 0;
};

struct CsiSample {
    Tensor z;  // (A, S, T)
    Pose pose;  // (J, 3), millimeters
    std::string subject_id;
    std::string environment_id;
    std::string action_id;
};

/// Per-frame linear phase fit removed before taking magnitudes.
struct PhaseCalibration {
    Tensor slope;      // (T, A), radians per subcarrier
    Tensor intercept;  // (T, A), radians
    Tensor phase;      // (A, S, T), detrended unwrapped phase
};

/// Calibrated amplitude of a window of T frames as (A, S, T). The linear
/// phase detrend (unwrap along subcarriers, least-squares slope + offset) is
/// a unit-modulus rotation, so the output equals the element-wise modulus;
/// the fitted phase terms are returned through `calibration` when requested.
Tensor preprocess_window(std::span<const RawCsiFrame> frames, PhaseCalibration* calibration = nullptr);

/// Per-sample z-score over all entries; zeros when the std is below 1e-8.
Tensor normalize_sample(const Tensor& z);

/// Tensor dimensions shared by every sample of a corpus.
struct CorpusDims {
    std::size_t antennas = 3;
    std::size_t subcarriers = 114;
    std::size_t frames = 10;
    std::size_t joints = 17;

    bool operator==(const CorpusDims&) const = default;
};

struct IndexEntry {
    std::filesystem::path path;
    std::string subject_id;
    std::string environment_id;
    std::string action_id;
};

/// Immutable list of sample locators with the corpus metadata.
class DatasetIndex {
public:
    DatasetIndex() = default;
    DatasetIndex(CorpusDims dims, std::string units, std::vector<IndexEntry> entries);

    const CorpusDims& dims() const { return dims_; }
    const std::string& units() const { return units_; }
    const std::vector<IndexEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    std::map<std::string, std::size_t> counts_by_subject() const;
    std::map<std::string, std::size_t> counts_by_environment() const;

    /// Entries at the given positions, same metadata.
    DatasetIndex subset(const std::vector<std::size_t>& positions) const;

    /// Reads and validates one sample; poses converted to millimeters.
    CsiSample load(std::size_t i) const;
    std::vector<CsiSample> load_all() const;

private:
    CorpusDims dims_;
    std::string units_ = "mm";
    std::vector<IndexEntry> entries_;
};

// ---- on-disk formats --------------------------------------------------------

inline constexpr std::uint32_t kSampleFormatVersion = 1;

/// "GPFI" | u32 version | u32 A,S,T,J | f32 z[A*S*T] | f32 pose[J*3], little-endian.
void write_sample_file(const std::filesystem::path& path, const CsiSample& sample);
/// Raw payload in file units (no unit conversion).
CsiSample read_sample_file(const std::filesystem::path& path, const CorpusDims& expected);

/// Raw ingest input: "GPFR" | u32 version | u32 A,S,T,J | f32 (re,im)[T*A*S] | f32 pose[J*3].
struct RawSampleFile {
    std::vector<RawCsiFrame> frames;
    Pose pose;
};
void write_raw_sample_file(const std::filesystem::path& path, const RawSampleFile& raw);
RawSampleFile read_raw_sample_file(const std::filesystem::path& path);

/// Loads root/manifest.json and every root/<subject>/<environment>/<action>/<idx>.bin.
DatasetIndex load_mmfi(const std::filesystem::path& root);

/// Digest over every sample's bytes in index order.
std::string corpus_digest(const DatasetIndex& index);

/// Converts a raw corpus (manifest.json + .raw files, same tree layout) to the
/// canonical layout; poses are stored in millimeters.
DatasetIndex ingest_raw(const std::filesystem::path& raw_root, const std::filesystem::path& out_root);

// ---- splits ----------------------------------------------------------------

enum class SplitStrategy { random, cross_subject, cross_environment };

std::string to_string(SplitStrategy s);
/// Accepts S1/S2/S3 and the long names.
SplitStrategy parse_split(const std::string& s);

struct SplitSpec {
    SplitStrategy strategy = SplitStrategy::random;
    std::uint64_t seed = 0;
    double test_ratio = 0.25;                       // S1
    std::vector<std::string> test_subjects;         // S2; empty -> drawn by seed
    std::optional<std::string> test_environment;    // S3; empty -> drawn by seed
};

struct Split {
    DatasetIndex train;
    DatasetIndex test;
};

/// S1: random 3:1. S2: 32/8 subjects at 40 subjects, otherwise 80/20 rounded
/// with at least one subject per side. S3: one held-out environment.
Split make_split(const DatasetIndex& index, const SplitSpec& spec);

// ---- synthetic corpus -------------------------------------------------------

struct SynthConfig {
    std::size_t n_samples = 2000;
    std::size_t n_subjects = 8;
    std::size_t n_environments = 4;
    std::size_t n_actions = 14;
    double noise_sigma = 0.05;
    /// Length scale of the pose-to-phase map, millimeters.
    double wavelength_mm = 150.0;
    CorpusDims dims;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {});

/// Fixed random map from poses to CSI amplitudes, drawn once per seed.
struct SynthMap {
    std::vector<double> weights;      // (A, S, J)
    std::vector<double> directions;   // (J, 3), unit rows
    std::vector<double> phases;       // (A, S, T, J)
    std::vector<double> environment;  // (E, A, S) static multipath offsets
    double wavelength_mm = 150.0;
};

struct SynthCorpus {
    SynthMap map;
    std::vector<CsiSample> samples;  // values already rounded to float32
};

/// In-memory generation; deterministic in config.seed.
SynthCorpus generate_synthetic(const SynthConfig& config);

/// Generates and writes a canonical corpus (manifest stores config and map).
DatasetIndex synth_dataset(const SynthConfig& config, const std::filesystem::path& out_root);

}  // namespace gpfi
