#include "otden/baselines.hpp"

#include "otden/noise_models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace otden {

ImagePatch baseline_identity(const ImagePatch& patch) { return patch; }

ImagePatch baseline_gaussian_filter(const ImagePatch& patch, double sigma_f, int kernel_size) {
    if (!(sigma_f > 0.0)) throw std::invalid_argument("gaussian filter: sigma must be positive");
    if (kernel_size == 0) kernel_size = 2 * static_cast<int>(std::ceil(2.0 * sigma_f)) + 1;
    if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("gaussian filter: kernel size must be odd");
    if (kernel_size > std::min(patch.height, patch.width)) {
        throw std::invalid_argument("gaussian filter: kernel exceeds patch");
    }
    return filter_reflect(patch, gaussian_kernel(kernel_size, sigma_f));
}

ImagePatch baseline_median_filter(const ImagePatch& patch, int k) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("median filter: kernel size must be odd");
    if (k > std::min(patch.height, patch.width)) throw std::invalid_argument("median filter: kernel exceeds patch");
    const int r = k / 2;
    ImagePatch out(patch.height, patch.width);
    std::vector<double> window(static_cast<std::size_t>(k) * k);
    for (int i = 0; i < patch.height; ++i) {
        for (int j = 0; j < patch.width; ++j) {
            std::size_t n = 0;
            for (int di = -r; di <= r; ++di) {
                for (int dj = -r; dj <= r; ++dj) {
                    window[n++] = patch.at(reflect_index(i + di, patch.height), reflect_index(j + dj, patch.width));
                }
            }
            auto mid = window.begin() + static_cast<std::ptrdiff_t>(window.size() / 2);
            std::nth_element(window.begin(), mid, window.end());
            out.at(i, j) = *mid;
        }
    }
    return out;
}

namespace {

void require_paired(const DomainPair& domains, const char* who) {
    if (!domains.paired || domains.noisy_patches.size() != domains.clean_patches.size()) {
        throw std::invalid_argument(std::string(who) + ": supervised training needs paired domains");
    }
}

}  // namespace

TrainResult train_n2c(const NetSpec& spec, const TrainOptions& options, const DomainPair& domains,
                      const ValidationSet& validation, SupervisedNorm norm) {
    require_paired(domains, "train_n2c");
    return train_supervised(spec, norm, options, domains.noisy_patches, domains.clean_patches, validation);
}

TrainResult train_n2n(const NetSpec& spec, const TrainOptions& options, const DomainPair& domains,
                      const std::vector<ImagePatch>& second, const ValidationSet& validation, SupervisedNorm norm) {
    require_paired(domains, "train_n2n");
    if (second.size() != domains.noisy_patches.size()) {
        throw std::invalid_argument("train_n2n: second realization does not match the noisy domain");
    }
    return train_supervised(spec, norm, options, domains.noisy_patches, second, validation);
}

TrainResult train_dist_only(const NetSpec& spec, LossSpec loss, const TrainOptions& options,
                            const DomainPair& domains, const ValidationSet& validation) {
    loss.fidelity_weight = 0.0;
    return train(spec, loss, options, domains.noisy_patches, domains.clean_patches, validation);
}

std::string to_csv(const ReportRow& row) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6g,%s,%.6f,%.6f,%.6f,%llu", row.method.c_str(),
                  row.noise_kind.c_str(), row.sigma, row.lambda, format_psnr(row.metrics.psnr_db).c_str(),
                  row.metrics.ssim, row.metrics.w1_to_clean, row.metrics.fidelity_to_noisy,
                  static_cast<unsigned long long>(row.seed));
    return buf;
}

void write_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
    out << kReportColumns << '\n';
    for (const auto& r : rows) out << to_csv(r) << '\n';
}

}  // namespace otden
