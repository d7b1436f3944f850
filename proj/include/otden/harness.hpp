/**
 * @file harness.hpp
 * @brief Run configuration, experiment orchestration and report emission for
 * the command-line tool.
 */
#pragma once

#include "otden/baselines.hpp"
#include "otden/datasets.hpp"
#include "otden/denoiser.hpp"
#include "otden/noise_models.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace otden {

/// Parse or validation failure in a config file. `line` is 0 when the problem
/// is not tied to a line (a missing mandatory key, an inconsistent pair).
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, int line, const std::string& what);
    const std::string& field() const { return field_; }
    int line() const { return line_; }

private:
    std::string field_;
    int line_;
};

inline const std::vector<std::string> kAllMethods{"ot",       "n2c",           "n2n",        "dist_only",
                                                  "identity", "gaussian_filter", "median_filter"};

struct TrainConfig {
    std::uint64_t seed = 0;
    SceneSpec scene;
    NoiseSpec noise;
    /// Empty means NetSpec::default_unet(channels).
    std::string net_descriptor;
    int channels = 16;
    LossSpec loss;
    TrainOptions train;
    DomainCounts counts;
    std::size_t validation_patches = 128;
    std::size_t test_patches = 512;
    std::size_t w1_subsample = 0;
    SupervisedNorm supervised_norm = SupervisedNorm::l1;
    double gaussian_filter_sigma = 1.0;
    int median_filter_size = 3;
    std::vector<std::string> methods = kAllMethods;
    std::size_t previews = 16;
    std::filesystem::path output_dir = "runs";
    /// The text the config was parsed from, echoed into the run directory.
    std::string source;

    NetSpec net() const;
    /// Throws ConfigError naming the offending field.
    void validate() const;
    /// Canonical key = value listing of every field.
    std::string to_text() const;
    nlohmann::json to_json() const;
};

/// Flat "key = value" lines; '#' starts a comment. `seed` is mandatory, every
/// other key has a default. Reals accept a fraction such as 25/255.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

/// Key, type and default of every config field, for --help output.
std::string config_reference();

/// Noisy/clean training domains and held-out splits, each with its own scene
/// and noise streams derived from the config seed.
struct ExperimentData {
    DomainPair unpaired;  ///< OT and distribution-only methods
    DomainPair paired;    ///< N2C and N2N
    std::vector<ImagePatch> second_noisy;  ///< N2N targets
    ValidationSet validation;
    DomainPair test;
};

ExperimentData make_experiment_data(const TrainConfig& config);

struct MethodResult {
    std::string method;
    ReportRow row;
    std::vector<EpochRecord> curve;  ///< empty for filters
    std::optional<DenoiserParams> params;
    std::vector<ImagePatch> test_outputs;
};

struct RunReport {
    TrainConfig config;
    std::vector<MethodResult> methods;
    std::vector<AuditCheck> audits;
    double wall_clock_seconds = 0.0;

    const MethodResult& method(const std::string& name) const;
    std::vector<ReportRow> rows() const;
    nlohmann::json to_json() const;
};

/// Trains and evaluates every configured method on the test split.
/// TrainingDiverged propagates.
RunReport run_experiment(const TrainConfig& config, const ExperimentData& data);
RunReport run_experiment(const TrainConfig& config);

/// Measured noise statistics on the test split (noisy - clean). Lag-1
/// autocorrelation is compared with the kernel's for Brown Gaussian noise and
/// with 0 otherwise.
std::vector<AuditCheck> audit_synthesized_noise(const TrainConfig& config, const ExperimentData& data);

struct SweepPoint {
    double lambda = 0.0;
    double train_fidelity = 0.0;  ///< final-epoch fidelity term
    double train_w1 = 0.0;        ///< final-epoch minibatch W1 term
    double best_val_psnr = 0.0;
    MetricsReport test;
};

struct SweepReport {
    TrainConfig config;
    std::vector<SweepPoint> points;
    std::vector<MethodResult> runs;
    double wall_clock_seconds = 0.0;

    std::vector<ReportRow> rows() const;
    nlohmann::json to_json() const;
};

/// One OT training per lambda on shared data and seed.
SweepReport run_sweep(const TrainConfig& config, const std::vector<double>& lambdas);

void write_sweep_table(std::ostream& out, const SweepReport& report);

struct VerifyOptions {
    std::size_t instances = 100;
    std::vector<double> lambdas{1.5, 2.0, 10.0};
    std::size_t max_points = 4;
    std::size_t max_dim = 2;
    std::uint64_t seed = 1;
};

struct VerifyLambda {
    double lambda = 0.0;
    std::size_t instances = 0;
    std::size_t holds = 0;
    std::size_t min_matches = 0;
    std::size_t pushforward_violations = 0;
    double max_min_gap = 0.0;  ///< max |relaxed min - W1(p_X, p_Y)|
    /// Equivalence is only required above 1; smaller lambdas are reported.
    bool required = false;
    bool passed = false;
};

struct VerifyReport {
    VerifyOptions options;
    std::vector<VerifyLambda> lambdas;
    double wall_clock_seconds = 0.0;
    bool passed() const;
    nlohmann::json to_json() const;
};

/// Instance i has n = 2 + i mod (max_points - 1) points per side in dimension
/// 1 + (i / (max_points - 1)) mod max_dim, seeded from derive_seed(seed, i).
VerifyReport run_verify(const VerifyOptions& options);

/// "<output_dir>/<UTC yyyymmdd-hhmmss>-s<seed>", suffixed until unused, created.
std::filesystem::path make_run_directory(const std::filesystem::path& output_dir, std::uint64_t seed);

/// config.txt (verbatim), report.csv, report.json, curves.csv, one checkpoint
/// per trained method and previews/*.pgm.
void write_run_artifacts(const std::filesystem::path& dir, const RunReport& report, const ExperimentData& data);

void write_curves_csv(std::ostream& out, const std::vector<MethodResult>& methods);

}  // namespace otden
