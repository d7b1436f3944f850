/**
 * @file baselines.hpp
 * @brief Reference restorations (identity, Gaussian and median filters), the
 * supervised and distribution-only training baselines, and report rows.
 */
#pragma once

#include "otden/datasets.hpp"
#include "otden/denoiser.hpp"
#include "otden/metrics.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace otden {

ImagePatch baseline_identity(const ImagePatch& patch);

/// Gaussian kernel of width 2 ceil(2 sigma) + 1 unless `kernel_size` is given.
/// Throws std::invalid_argument when the kernel is wider than the patch.
ImagePatch baseline_gaussian_filter(const ImagePatch& patch, double sigma_f, int kernel_size = 0);

/// k x k median with reflect padding; k odd and at most min(height, width).
ImagePatch baseline_median_filter(const ImagePatch& patch, int k);

/// Needs paired domains; minimizes the L1 distance to the clean patches.
TrainResult train_n2c(const NetSpec& spec, const TrainOptions& options, const DomainPair& domains,
                      const ValidationSet& validation, SupervisedNorm norm = SupervisedNorm::l1);

/// Needs paired domains; the targets are `second`, an independent noisy copy
/// of each clean patch (see second_realization).
TrainResult train_n2n(const NetSpec& spec, const TrainOptions& options, const DomainPair& domains,
                      const std::vector<ImagePatch>& second, const ValidationSet& validation,
                      SupervisedNorm norm = SupervisedNorm::l1);

/// Only the lambda-weighted W1 term: `loss` with fidelity_weight set to 0.
TrainResult train_dist_only(const NetSpec& spec, LossSpec loss, const TrainOptions& options,
                            const DomainPair& domains, const ValidationSet& validation);

struct ReportRow {
    std::string method;
    std::string noise_kind;
    double sigma = 0.0;
    double lambda = 0.0;  ///< 0 for methods without a distribution term
    MetricsReport metrics;
    std::uint64_t seed = 0;
};

inline constexpr const char* kReportColumns =
    "method,noise_kind,sigma,lambda,psnr_db,ssim,w1_to_clean,fidelity_to_noisy,seed";

/// Fixed-precision line without trailing newline; PSNR uses format_psnr.
std::string to_csv(const ReportRow& row);
void write_csv(std::ostream& out, const std::vector<ReportRow>& rows);

}  // namespace otden
