#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace otden {

/// Grayscale H x W image, row-major, nominal range [0, 1]. Values outside the
/// range are allowed before clipping (e.g. unclipped noisy training inputs).
struct ImagePatch {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    ImagePatch() = default;
    ImagePatch(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0) throw std::invalid_argument("ImagePatch: dimensions must be positive");
    }
    ImagePatch(int h, int w, std::vector<double> values) : height(h), width(w), pixels(std::move(values)) {
        if (h <= 0 || w <= 0 || pixels.size() != static_cast<std::size_t>(h) * w) {
            throw std::invalid_argument("ImagePatch: pixel buffer does not match dimensions");
        }
    }

    std::size_t size() const { return pixels.size(); }
    double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
    bool same_shape(const ImagePatch& o) const { return height == o.height && width == o.width; }

    ImagePatch clipped() const {
        ImagePatch out = *this;
        for (double& p : out.pixels) p = std::clamp(p, 0.0, 1.0);
        return out;
    }

    friend bool operator==(const ImagePatch&, const ImagePatch&) = default;
};

/// Reflect (mirror without repeating the edge) index into [0, n).
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace otden
