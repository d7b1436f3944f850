/**
 * @file metrics.hpp
 * @brief PSNR, SSIM and the patch-set W1 distance between collections of patches.
 */
#pragma once

#include "otden/image.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace otden {

/// PSNR of identical images. Reports print it as "inf"; it is never NaN.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

double mse(const ImagePatch& x, const ImagePatch& y);
/// 10 log10(peak^2 / MSE), or kPsnrIdentical when MSE is zero.
double psnr(const ImagePatch& x, const ImagePatch& y, double peak = 1.0);
/// PSNR of the pooled MSE over all pixels of both sets.
double psnr(const std::vector<ImagePatch>& x, const std::vector<ImagePatch>& y, double peak = 1.0);
std::string format_psnr(double db);

/// Mean SSIM over all window x window positions (stride 1, uniform weights,
/// unbiased local variances).
double ssim(const ImagePatch& x, const ImagePatch& y, int window = 8, double k1 = 0.01, double k2 = 0.03,
            double peak = 1.0);
double mean_ssim(const std::vector<ImagePatch>& x, const std::vector<ImagePatch>& y, int window = 8);

/// W1 between the uniform empirical measures of the flattened patches, with
/// Euclidean ground cost. Sets larger than `subsample` (0 = no limit) are
/// reduced to a seeded subset first.
double patchset_w1(const std::vector<ImagePatch>& a, const std::vector<ImagePatch>& b, std::size_t subsample = 0,
                   std::uint64_t seed = 0);

struct MetricsReport {
    double psnr_db = 0.0;
    double ssim = 0.0;
    double w1_to_clean = 0.0;
    double fidelity_to_noisy = 0.0;
};

/// Distortion and W1 use the restored patches clipped to [0,1]; fidelity
/// is the mean ||noisy - restored|| of the raw outputs.
MetricsReport evaluate(const std::vector<ImagePatch>& restored, const std::vector<ImagePatch>& clean,
                       const std::vector<ImagePatch>& noisy, std::size_t w1_subsample = 0, std::uint64_t seed = 0);

}  // namespace otden
