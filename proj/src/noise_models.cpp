#include "otden/noise_models.hpp"

#include "otden/rng.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace otden {

std::string to_string(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::gaussian: return "gaussian";
        case NoiseKind::poisson: return "poisson";
        case NoiseKind::brown_gaussian: return "brown_gaussian";
    }
    return "unknown";
}

NoiseKind parse_noise_kind(const std::string& name) {
    if (name == "gaussian") return NoiseKind::gaussian;
    if (name == "poisson") return NoiseKind::poisson;
    if (name == "brown_gaussian") return NoiseKind::brown_gaussian;
    throw std::invalid_argument("unknown noise kind '" + name + "'");
}

void NoiseSpec::validate() const {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("NoiseSpec: sigma must be >= 0");
    if (!(lambda_p > 0.0) || !std::isfinite(lambda_p)) throw std::invalid_argument("NoiseSpec: lambda_p must be > 0");
    if (kernel_size < 3 || kernel_size % 2 == 0) throw std::invalid_argument("NoiseSpec: kernel_size must be odd and >= 3");
    if (!(kernel_sigma > 0.0)) throw std::invalid_argument("NoiseSpec: kernel_sigma must be > 0");
}

NoiseSpec NoiseSpec::for_patch(std::uint64_t index) const {
    NoiseSpec s = *this;
    s.seed = derive_seed(seed, index);
    return s;
}

Matrix gaussian_kernel(int size, double sigma) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("gaussian_kernel: size must be odd");
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
    const int h = size / 2;
    Matrix k(static_cast<std::size_t>(size), static_cast<std::size_t>(size));
    double total = 0.0;
    for (int i = -h; i <= h; ++i) {
        for (int j = -h; j <= h; ++j) {
            const double v = std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
            k(static_cast<std::size_t>(i + h), static_cast<std::size_t>(j + h)) = v;
            total += v;
        }
    }
    for (std::size_t i = 0; i < k.rows(); ++i) {
        for (std::size_t j = 0; j < k.cols(); ++j) k(i, j) /= total;
    }
    return k;
}

ImagePatch filter_reflect(const ImagePatch& image, const Matrix& kernel) {
    const int kh = static_cast<int>(kernel.rows()) / 2;
    const int kw = static_cast<int>(kernel.cols()) / 2;
    ImagePatch out(image.height, image.width);
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            double s = 0.0;
            for (int i = -kh; i <= kh; ++i) {
                const int rr = reflect_index(r + i, image.height);
                for (int j = -kw; j <= kw; ++j) {
                    s += kernel(static_cast<std::size_t>(i + kh), static_cast<std::size_t>(j + kw)) *
                         image.at(rr, reflect_index(c + j, image.width));
                }
            }
            out.at(r, c) = s;
        }
    }
    return out;
}

namespace {

ImagePatch finish(ImagePatch y, bool clip) { return clip ? y.clipped() : y; }

void require_kind(const NoiseSpec& spec, NoiseKind kind) {
    spec.validate();
    if (spec.kind != kind) throw std::invalid_argument("noise spec kind is '" + to_string(spec.kind) + "'");
}

}  // namespace

ImagePatch add_gaussian(const ImagePatch& x, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::gaussian);
    ImagePatch y = x;
    if (spec.sigma == 0.0) return finish(std::move(y), spec.clip);
    Rng rng(spec.seed);
    std::normal_distribution<double> normal(0.0, spec.sigma);
    for (double& p : y.pixels) p += normal(rng);
    return finish(std::move(y), spec.clip);
}

ImagePatch add_poisson(const ImagePatch& x, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::poisson);
    Rng rng(spec.seed);
    ImagePatch y = x;
    for (double& p : y.pixels) {
        const double rate = spec.lambda_p * std::max(p, 0.0);
        if (rate <= 0.0) {
            p = 0.0;
            continue;
        }
        std::poisson_distribution<long long> poisson(rate);
        p = static_cast<double>(poisson(rng)) / spec.lambda_p;
    }
    return finish(std::move(y), spec.clip);
}

ImagePatch add_brown_gaussian(const ImagePatch& x, const NoiseSpec& spec) {
    require_kind(spec, NoiseKind::brown_gaussian);
    ImagePatch y = x;
    if (spec.sigma == 0.0) return finish(std::move(y), spec.clip);
    Rng rng(spec.seed);
    std::normal_distribution<double> normal(0.0, spec.sigma);
    ImagePatch white(x.height, x.width);
    for (double& p : white.pixels) p = normal(rng);
    const Matrix kernel = gaussian_kernel(spec.kernel_size, spec.kernel_sigma);
    double energy = 0.0;
    for (double k : kernel.data()) energy += k * k;
    const double rescale = 1.0 / std::sqrt(energy);
    const ImagePatch filtered = filter_reflect(white, kernel);
    for (std::size_t k = 0; k < y.pixels.size(); ++k) y.pixels[k] += rescale * filtered.pixels[k];
    return finish(std::move(y), spec.clip);
}

ImagePatch add_noise(const ImagePatch& x, const NoiseSpec& spec) {
    switch (spec.kind) {
        case NoiseKind::gaussian: return add_gaussian(x, spec);
        case NoiseKind::poisson: return add_poisson(x, spec);
        case NoiseKind::brown_gaussian: return add_brown_gaussian(x, spec);
    }
    throw std::invalid_argument("add_noise: unknown kind");
}

double lag1_autocorrelation(const ImagePatch& field) {
    double mean = 0.0;
    for (double p : field.pixels) mean += p;
    mean /= static_cast<double>(field.size());
    double var = 0.0;
    for (double p : field.pixels) var += (p - mean) * (p - mean);
    var /= static_cast<double>(field.size());
    double cov = 0.0;
    std::size_t pairs = 0;
    for (int r = 0; r < field.height; ++r) {
        for (int c = 0; c < field.width; ++c) {
            if (c + 1 < field.width) {
                cov += (field.at(r, c) - mean) * (field.at(r, c + 1) - mean);
                ++pairs;
            }
            if (r + 1 < field.height) {
                cov += (field.at(r, c) - mean) * (field.at(r + 1, c) - mean);
                ++pairs;
            }
        }
    }
    return (cov / static_cast<double>(pairs)) / var;
}

double kernel_lag1_autocorrelation(const Matrix& kernel) {
    // Autocorrelation of the kernel with itself at horizontal offset 1.
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < kernel.rows(); ++i) {
        for (std::size_t j = 0; j < kernel.cols(); ++j) {
            den += kernel(i, j) * kernel(i, j);
            if (j + 1 < kernel.cols()) num += kernel(i, j) * kernel(i, j + 1);
        }
    }
    return num / den;
}

namespace {

AuditCheck make_check(std::string name, double value, double lower, double upper) {
    return {std::move(name), value, lower, upper, value >= lower && value <= upper};
}

struct Moments {
    double mean = 0.0;
    double var = 0.0;
};

Moments moments(const std::vector<double>& v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= static_cast<double>(v.size() - 1);
    return m;
}

}  // namespace

std::vector<AuditCheck> run_noise_audit(std::uint64_t seed) {
    constexpr int kSide = 64;
    constexpr int kPooledPatches = 32;
    std::vector<AuditCheck> checks;
    const ImagePatch half(kSide, kSide, 0.5);

    {
        NoiseSpec spec{NoiseKind::gaussian, 25.0 / 255.0, 30.0, 5, 1.0, false, derive_seed(seed, 1)};
        const ImagePatch y = add_gaussian(half, spec);
        std::vector<double> n(y.size());
        for (std::size_t k = 0; k < n.size(); ++k) n[k] = y.pixels[k] - half.pixels[k];
        const Moments m = moments(n);
        const double se = 3.0 * spec.sigma / kSide;
        checks.push_back(make_check("gaussian_mean", m.mean, -se, se));
        checks.push_back(make_check("gaussian_std", std::sqrt(m.var), 0.9 * spec.sigma, 1.1 * spec.sigma));
    }
    {
        NoiseSpec spec{NoiseKind::poisson, 0.0, 30.0, 5, 1.0, false, derive_seed(seed, 2)};
        const ImagePatch y = add_poisson(half, spec);
        const Moments m = moments(y.pixels);
        const double var = 0.5 / spec.lambda_p;
        const double band = 3.0 * std::sqrt(var) / kSide;
        checks.push_back(make_check("poisson_mean", m.mean, 0.5 - band, 0.5 + band));
        checks.push_back(make_check("poisson_variance", m.var, 0.8 * var, 1.2 * var));

        const ImagePatch zero = add_poisson(ImagePatch(kSide, kSide, 0.0), spec);
        double worst = 0.0;
        for (double p : zero.pixels) worst = std::max(worst, std::abs(p));
        checks.push_back(make_check("poisson_zero_input", worst, 0.0, 0.0));

        NoiseSpec bright = spec;
        bright.lambda_p = 1e6;
        const ImagePatch yb = add_poisson(half, bright);
        worst = 0.0;
        for (std::size_t k = 0; k < yb.size(); ++k) worst = std::max(worst, std::abs(yb.pixels[k] - 0.5));
        checks.push_back(make_check("poisson_large_count_max_dev", worst, 0.0, 1e-2));
    }
    {
        const double sigma = 50.0 / 255.0;
        NoiseSpec brown{NoiseKind::brown_gaussian, sigma, 30.0, 5, 1.0, false, derive_seed(seed, 3)};
        NoiseSpec white{NoiseKind::gaussian, sigma, 30.0, 5, 1.0, false, derive_seed(seed, 4)};
        const ImagePatch zero(kSide, kSide, 0.0);
        double brown_rho = 0.0, white_rho = 0.0;
        std::vector<double> pooled;
        for (int p = 0; p < kPooledPatches; ++p) {
            const ImagePatch nb = add_brown_gaussian(zero, brown.for_patch(static_cast<std::uint64_t>(p)));
            const ImagePatch nw = add_gaussian(zero, white.for_patch(static_cast<std::uint64_t>(p)));
            brown_rho += lag1_autocorrelation(nb) / kPooledPatches;
            white_rho += lag1_autocorrelation(nw) / kPooledPatches;
            pooled.insert(pooled.end(), nb.pixels.begin(), nb.pixels.end());
        }
        const Matrix kernel = gaussian_kernel(5, 1.0);
        double energy = 0.0;
        for (double k : kernel.data()) energy += k * k;
        const Moments m = moments(pooled);
        // Mean of the rescaled filtered field has variance sigma^2 / (N ||k||^2).
        const double mean_se = sigma / std::sqrt(static_cast<double>(pooled.size()) * energy);
        checks.push_back(make_check("brown_lag1_autocorrelation", brown_rho, 0.5, 1.0));
        checks.push_back(make_check("white_lag1_autocorrelation", white_rho, -0.05, 0.05));
        checks.push_back(make_check("brown_variance_ratio", m.var / (sigma * sigma), 0.95, 1.05));
        checks.push_back(make_check("brown_mean", m.mean, -3.0 * mean_se, 3.0 * mean_se));
        checks.push_back(make_check("brown_kernel_lag1_oracle", kernel_lag1_autocorrelation(kernel), 0.5, 1.0));
    }
    return checks;
}

}  // namespace otden
