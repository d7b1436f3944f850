/**
 * @file noise_models.hpp
 * @brief Additive Gaussian, Poisson (photon counting) and Brown Gaussian
 * (low-pass filtered) degradations, plus statistical audits of each.
 */
#pragma once

#include "otden/image.hpp"
#include "otden/ot_core.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace otden {

enum class NoiseKind { gaussian, poisson, brown_gaussian };

std::string to_string(NoiseKind kind);
/// Throws std::invalid_argument on unknown names.
NoiseKind parse_noise_kind(const std::string& name);

struct NoiseSpec {
    NoiseKind kind = NoiseKind::gaussian;
    double sigma = 25.0 / 255.0;  ///< std in [0,1] pixel units
    double lambda_p = 30.0;       ///< Poisson maximum event count
    int kernel_size = 5;
    double kernel_sigma = 1.0;
    bool clip = false;
    std::uint64_t seed = 0;

    void validate() const;
    /// Copy with the seed of patch `index`: splitmix64(seed ^ index).
    NoiseSpec for_patch(std::uint64_t index) const;
};

/// size x size kernel proportional to exp(-(i^2 + j^2) / (2 sigma^2)), summing to 1.
Matrix gaussian_kernel(int size, double sigma);

/// 2-D correlation with reflect padding; output has the input's shape.
ImagePatch filter_reflect(const ImagePatch& image, const Matrix& kernel);

ImagePatch add_gaussian(const ImagePatch& x, const NoiseSpec& spec);
ImagePatch add_poisson(const ImagePatch& x, const NoiseSpec& spec);
/// White N(0, sigma^2) filtered by the Gaussian kernel, rescaled by
/// 1/||kernel||_2 so the per-pixel variance stays sigma^2.
ImagePatch add_brown_gaussian(const ImagePatch& x, const NoiseSpec& spec);
/// Dispatch on spec.kind.
ImagePatch add_noise(const ImagePatch& x, const NoiseSpec& spec);

/// Sample Pearson correlation between horizontally and vertically adjacent
/// pixels of a (zero-mean) field, pooled over both directions.
double lag1_autocorrelation(const ImagePatch& field);
/// Lag-1 autocorrelation implied by filtering white noise with `kernel`:
/// sum k(i,j) k(i,j+1) / sum k(i,j)^2.
double kernel_lag1_autocorrelation(const Matrix& kernel);

struct AuditCheck {
    std::string name;
    double value = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    bool passed = false;
};

/// Moment and correlation checks of the three noise models on 64 x 64
/// constant patches (Gaussian sigma 25/255, Poisson lambda_p 30 at 0.5,
/// Brown Gaussian sigma 50/255 with a 5 x 5 kernel).
std::vector<AuditCheck> run_noise_audit(std::uint64_t seed);

}  // namespace otden
