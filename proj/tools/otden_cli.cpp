// otden: command-line front end.
//
// Exit codes: 0 success, 1 verification or audit failure, 2 usage or config
// error, 3 runtime failure (divergence, I/O).

#include "otden/harness.hpp"
#include "otden/metrics.hpp"
#include "otden/noise_models.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace otden;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kRuntime = 3 };

void print_rows(const std::vector<ReportRow>& rows) {
    std::printf("%-16s %8s %10s %8s %10s %10s\n", "method", "lambda", "psnr_db", "ssim", "w1_clean", "fidelity");
    for (const auto& r : rows) {
        std::printf("%-16s %8.4g %10s %8.4f %10.4f %10.4f\n", r.method.c_str(), r.lambda,
                    format_psnr(r.metrics.psnr_db).c_str(), r.metrics.ssim, r.metrics.w1_to_clean,
                    r.metrics.fidelity_to_noisy);
    }
}

void print_audits(const std::vector<AuditCheck>& audits) {
    for (const auto& a : audits) {
        std::printf("%-4s %-40s %12.6f in [%.6f, %.6f]\n", a.passed ? "ok" : "FAIL", a.name.c_str(), a.value, a.lower,
                    a.upper);
    }
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

TrainConfig config_with_overrides(const std::string& path, const std::string& out_dir) {
    TrainConfig c = load_config(path);
    if (!out_dir.empty()) c.output_dir = out_dir;
    return c;
}

int cmd_verify(const VerifyOptions& opt, const std::string& out_dir) {
    const VerifyReport report = run_verify(opt);
    for (const auto& v : report.lambdas) {
        std::printf("lambda %-8g %zu/%zu equivalent, max |min - W1| %.3g, %zu pushforward violations%s\n", v.lambda,
                    v.holds, v.instances, v.max_min_gap, v.pushforward_violations,
                    v.required ? (v.passed ? "  PASS" : "  FAIL") : "  (lambda <= 1, reported only)");
    }
    const auto dir = make_run_directory(out_dir, opt.seed);
    write_file(dir / "verify.json", report.to_json().dump(2) + "\n");
    std::printf("report: %s\n", (dir / "verify.json").c_str());
    return report.passed() ? kOk : kFailed;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    const TrainConfig config = config_with_overrides(config_path, out_dir);
    const ExperimentData data = make_experiment_data(config);
    const RunReport report = run_experiment(config, data);
    const auto dir = make_run_directory(config.output_dir, config.seed);
    write_run_artifacts(dir, report, data);
    print_rows(report.rows());
    print_audits(report.audits);
    std::printf("run directory: %s (%.1f s)\n", dir.c_str(), report.wall_clock_seconds);
    return kOk;
}

int cmd_sweep(const std::string& config_path, const std::vector<double>& lambdas, const std::string& out_dir) {
    const TrainConfig config = config_with_overrides(config_path, out_dir);
    const SweepReport report = run_sweep(config, lambdas);
    const auto dir = make_run_directory(config.output_dir, config.seed);
    write_file(dir / "config.txt", config.source);
    {
        std::ofstream f(dir / "sweep.csv", std::ios::binary);
        write_sweep_table(f, report);
    }
    {
        std::ofstream f(dir / "report.csv", std::ios::binary);
        write_csv(f, report.rows());
    }
    {
        std::ofstream f(dir / "curves.csv", std::ios::binary);
        write_curves_csv(f, report.runs);
    }
    write_file(dir / "report.json", report.to_json().dump(2) + "\n");
    write_sweep_table(std::cout, report);
    std::printf("run directory: %s (%.1f s)\n", dir.c_str(), report.wall_clock_seconds);
    return kOk;
}

int cmd_noise_audit(std::uint64_t seed, const std::string& config_path) {
    std::vector<AuditCheck> checks = run_noise_audit(seed);
    if (!config_path.empty()) {
        const TrainConfig config = load_config(config_path);
        const auto extra = audit_synthesized_noise(config, make_experiment_data(config));
        for (auto a : extra) {
            a.name = to_string(config.noise.kind) + " (config): " + a.name;
            checks.push_back(a);
        }
    }
    print_audits(checks);
    const bool ok = std::all_of(checks.begin(), checks.end(), [](const AuditCheck& a) { return a.passed; });
    return ok ? kOk : kFailed;
}

int cmd_metrics(const std::string& restored_path, const std::string& clean_path, const std::string& noisy_path,
                int patch, std::size_t subsample, std::uint64_t seed) {
    const ImagePatch restored = load_pgm(restored_path), clean = load_pgm(clean_path);
    if (!restored.same_shape(clean)) throw std::invalid_argument("images differ in shape");
    const int window = std::min({8, clean.height, clean.width});
    std::printf("psnr_db %s\n", format_psnr(psnr(restored, clean)).c_str());
    std::printf("ssim %.6f\n", ssim(restored, clean, window));
    if (patch > std::min(clean.height, clean.width)) throw std::invalid_argument("patch size exceeds the image");
    const auto pr = extract_patches(restored, patch, patch, kNoLimit, 0);
    const auto pc = extract_patches(clean, patch, patch, kNoLimit, 0);
    std::printf("w1_to_clean %.6f\n", patchset_w1(pr, pc, subsample, seed));
    if (!noisy_path.empty()) {
        const ImagePatch noisy = load_pgm(noisy_path);
        if (!noisy.same_shape(clean)) throw std::invalid_argument("images differ in shape");
        std::printf("fidelity_to_noisy %.6f\n", evaluate({restored}, {clean}, {noisy}).fidelity_to_noisy);
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unpaired denoising by optimal transport: verification, training and evaluation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");

    VerifyOptions vopt;
    std::string verify_out = "runs";
    auto* verify = app.add_subcommand("verify", "Check relaxed/constrained minimizer equivalence on random instances");
    verify->add_option("--instances", vopt.instances, "instances per lambda")->capture_default_str()
        ->check(CLI::PositiveNumber);
    verify->add_option("--lambda", vopt.lambdas, "lambda grid; values <= 1 are reported without failing")
        ->capture_default_str()->check(CLI::PositiveNumber);
    verify->add_option("--max-points", vopt.max_points, "largest n per side")->capture_default_str()
        ->check(CLI::Range(2, 6));
    verify->add_option("--max-dim", vopt.max_dim, "largest dimension")->capture_default_str()
        ->check(CLI::PositiveNumber);
    verify->add_option("--seed", vopt.seed, "instance seed")->capture_default_str();
    verify->add_option("--out", verify_out, "parent directory of the report")->capture_default_str();

    std::string config_path, out_override;
    auto* train_cmd = app.add_subcommand("train", "Train and evaluate every configured method");
    train_cmd->add_option("config", config_path, "config file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", out_override, "override output_dir");
    train_cmd->footer("Config keys:\n" + config_reference());

    std::vector<double> sweep_lambdas;
    auto* sweep = app.add_subcommand("sweep", "One OT training per lambda on shared data");
    sweep->add_option("config", config_path, "config file")->required()->check(CLI::ExistingFile);
    sweep->add_option("--lambda", sweep_lambdas, "lambda grid")->required()->check(CLI::PositiveNumber);
    sweep->add_option("--out", out_override, "override output_dir");

    std::uint64_t audit_seed = 1;
    std::string audit_config;
    auto* audit = app.add_subcommand("noise-audit", "Moment and correlation checks of the noise models");
    audit->add_option("--seed", audit_seed, "audit seed")->capture_default_str();
    audit->add_option("--config", audit_config, "also audit the noise synthesized for this config")
        ->check(CLI::ExistingFile);

    std::string restored_path, clean_path, noisy_path;
    int patch = 8;
    std::size_t subsample = 0;
    std::uint64_t metrics_seed = 0;
    auto* metrics = app.add_subcommand("metrics", "PSNR, SSIM and patch-set W1 between two PGM images");
    metrics->add_option("restored", restored_path, "restored image")->required()->check(CLI::ExistingFile);
    metrics->add_option("clean", clean_path, "reference image")->required()->check(CLI::ExistingFile);
    metrics->add_option("--noisy", noisy_path, "noisy input, adds the fidelity")->check(CLI::ExistingFile);
    metrics->add_option("--patch", patch, "patch side for W1")->capture_default_str()->check(CLI::Range(1, 4096));
    metrics->add_option("--subsample", subsample, "patches per set for W1, 0 = all")->capture_default_str();
    metrics->add_option("--seed", metrics_seed, "subsample seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*verify) return cmd_verify(vopt, verify_out);
        if (*train_cmd) return cmd_train(config_path, out_override);
        if (*sweep) return cmd_sweep(config_path, sweep_lambdas, out_override);
        if (*audit) return cmd_noise_audit(audit_seed, audit_config);
        if (*metrics) return cmd_metrics(restored_path, clean_path, noisy_path, patch, subsample, metrics_seed);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const TrainingDiverged& e) {
        std::fprintf(stderr, "error: training diverged after %zu epochs: %s\n", e.curve().size(), e.what());
        return kRuntime;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kRuntime;
    }
    return kUsage;
}
