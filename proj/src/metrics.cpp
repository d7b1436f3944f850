#include "otden/metrics.hpp"

#include "otden/ot_core.hpp"
#include "otden/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace otden {

namespace {

void require_same_shape(const ImagePatch& x, const ImagePatch& y, const char* who) {
    if (!x.same_shape(y)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

void require_same_sets(const std::vector<ImagePatch>& x, const std::vector<ImagePatch>& y, const char* who) {
    if (x.size() != y.size()) throw std::invalid_argument(std::string(who) + ": set sizes differ");
    if (x.empty()) throw std::invalid_argument(std::string(who) + ": empty set");
}

double to_db(double mse_value, double peak) {
    if (mse_value == 0.0) return kPsnrIdentical;
    return 10.0 * std::log10(peak * peak / mse_value);
}

}  // namespace

double mse(const ImagePatch& x, const ImagePatch& y) {
    require_same_shape(x, y, "mse");
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += (x.pixels[k] - y.pixels[k]) * (x.pixels[k] - y.pixels[k]);
    return s / static_cast<double>(x.size());
}

double psnr(const ImagePatch& x, const ImagePatch& y, double peak) {
    require_same_shape(x, y, "psnr");
    return to_db(mse(x, y), peak);
}

double psnr(const std::vector<ImagePatch>& x, const std::vector<ImagePatch>& y, double peak) {
    require_same_sets(x, y, "psnr");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += mse(x[i], y[i]) * static_cast<double>(x[i].size());
        n += x[i].size();
    }
    return to_db(s / static_cast<double>(n), peak);
}

std::string format_psnr(double db) {
    if (std::isinf(db) && db > 0) return "inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", db);
    return buf;
}

double ssim(const ImagePatch& x, const ImagePatch& y, int window, double k1, double k2, double peak) {
    require_same_shape(x, y, "ssim");
    if (window < 2 || window > std::min(x.height, x.width)) {
        throw std::invalid_argument("ssim: window must lie in [2, min(height, width)]");
    }
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);
    const double n = static_cast<double>(window) * window;
    double total = 0.0;
    int count = 0;
    for (int r0 = 0; r0 + window <= x.height; ++r0) {
        for (int c0 = 0; c0 + window <= x.width; ++c0) {
            double mx = 0.0, my = 0.0;
            for (int r = r0; r < r0 + window; ++r) {
                for (int c = c0; c < c0 + window; ++c) {
                    mx += x.at(r, c);
                    my += y.at(r, c);
                }
            }
            mx /= n;
            my /= n;
            double vx = 0.0, vy = 0.0, cov = 0.0;
            for (int r = r0; r < r0 + window; ++r) {
                for (int c = c0; c < c0 + window; ++c) {
                    const double dx = x.at(r, c) - mx, dy = y.at(r, c) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            vx /= n - 1.0;
            vy /= n - 1.0;
            cov /= n - 1.0;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / count;
}

double mean_ssim(const std::vector<ImagePatch>& x, const std::vector<ImagePatch>& y, int window) {
    require_same_sets(x, y, "mean_ssim");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += ssim(x[i], y[i], window);
    return s / static_cast<double>(x.size());
}

namespace {

std::vector<std::size_t> subset(std::size_t n, std::size_t limit, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (limit == 0 || n <= limit) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
    return idx;
}

EmpiricalMeasure flatten(const std::vector<ImagePatch>& set, const std::vector<std::size_t>& idx) {
    const std::size_t dim = set[idx.front()].size();
    std::vector<double> points;
    points.reserve(idx.size() * dim);
    for (std::size_t i : idx) {
        if (set[i].size() != dim) throw std::invalid_argument("patchset_w1: patches differ in size");
        points.insert(points.end(), set[i].pixels.begin(), set[i].pixels.end());
    }
    return EmpiricalMeasure::uniform(std::move(points), dim);
}

}  // namespace

double patchset_w1(const std::vector<ImagePatch>& a, const std::vector<ImagePatch>& b, std::size_t subsample,
                   std::uint64_t seed) {
    if (a.empty() || b.empty()) throw std::invalid_argument("patchset_w1: empty set");
    Rng rng(seed);
    const EmpiricalMeasure ma = flatten(a, subset(a.size(), subsample, rng));
    const EmpiricalMeasure mb = flatten(b, subset(b.size(), subsample, rng));
    if (ma.dim() != mb.dim()) throw std::invalid_argument("patchset_w1: patch sizes differ between sets");
    return kantorovich_lp(ma, mb, CostSpec{1.0}).value;
}

MetricsReport evaluate(const std::vector<ImagePatch>& restored, const std::vector<ImagePatch>& clean,
                       const std::vector<ImagePatch>& noisy, std::size_t w1_subsample, std::uint64_t seed) {
    require_same_sets(restored, clean, "evaluate");
    require_same_sets(restored, noisy, "evaluate");
    std::vector<ImagePatch> clipped;
    clipped.reserve(restored.size());
    for (const auto& p : restored) clipped.push_back(p.clipped());
    MetricsReport r;
    r.psnr_db = psnr(clipped, clean);
    r.ssim = mean_ssim(clipped, clean, std::min({8, clean.front().height, clean.front().width}));
    r.w1_to_clean = patchset_w1(clipped, clean, w1_subsample, seed);
    double fid = 0.0;
    for (std::size_t i = 0; i < restored.size(); ++i) fid += euclidean_distance(noisy[i].pixels, restored[i].pixels);
    r.fidelity_to_noisy = fid / static_cast<double>(restored.size());
    return r;
}

}  // namespace otden
