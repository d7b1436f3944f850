#include "otden/datasets.hpp"

#include "otden/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace otden {

std::string to_string(SceneKind kind) {
    switch (kind) {
        case SceneKind::piecewise_constant_shapes: return "piecewise_constant_shapes";
        case SceneKind::smooth_gradient: return "smooth_gradient";
        case SceneKind::sinusoid_texture: return "sinusoid_texture";
    }
    return "unknown";
}

SceneKind parse_scene_kind(const std::string& name) {
    if (name == "piecewise_constant_shapes") return SceneKind::piecewise_constant_shapes;
    if (name == "smooth_gradient") return SceneKind::smooth_gradient;
    if (name == "sinusoid_texture") return SceneKind::sinusoid_texture;
    throw std::invalid_argument("unknown scene kind '" + name + "'");
}

void SceneSpec::validate() const {
    if (size < 1) throw std::invalid_argument("SceneSpec: size must be positive");
    if (min_shapes < 0 || max_shapes < min_shapes) throw std::invalid_argument("SceneSpec: bad shape count range");
    if (!(intensity_lo >= 0.0 && intensity_hi <= 1.0 && intensity_lo <= intensity_hi)) {
        throw std::invalid_argument("SceneSpec: intensity range must lie in [0,1]");
    }
}

ImagePatch generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> level(spec.intensity_lo, spec.intensity_hi);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int n = spec.size;
    const double span = spec.intensity_hi - spec.intensity_lo;

    switch (spec.kind) {
        case SceneKind::piecewise_constant_shapes: {
            ImagePatch img(n, n, level(rng));
            const int shapes = std::uniform_int_distribution<int>(spec.min_shapes, spec.max_shapes)(rng);
            const int min_extent = std::max(1, n / 8);
            const int max_extent = std::max(min_extent, n / 2);
            std::uniform_int_distribution<int> extent(min_extent, max_extent);
            std::uniform_int_distribution<int> centre(0, n - 1);
            for (int s = 0; s < shapes; ++s) {
                const double v = level(rng);
                const bool disc = unit(rng) < 0.5;
                const int cr = centre(rng);
                const int cc = centre(rng);
                if (disc) {
                    const double radius = 0.5 * extent(rng);
                    for (int r = 0; r < n; ++r) {
                        for (int c = 0; c < n; ++c) {
                            const double dr = r - cr, dc = c - cc;
                            if (dr * dr + dc * dc <= radius * radius) img.at(r, c) = v;
                        }
                    }
                } else {
                    const int h = extent(rng), w = extent(rng);
                    for (int r = std::max(0, cr - h / 2); r <= std::min(n - 1, cr + h / 2); ++r) {
                        for (int c = std::max(0, cc - w / 2); c <= std::min(n - 1, cc + w / 2); ++c) img.at(r, c) = v;
                    }
                }
            }
            return img;
        }
        case SceneKind::smooth_gradient: {
            const double a = level(rng);
            const double angle = 2.0 * 3.141592653589793 * unit(rng);
            const double slope = span * unit(rng) / std::max(1, n);
            ImagePatch img(n, n);
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < n; ++c) {
                    const double t = a + slope * ((c - n / 2.0) * std::cos(angle) + (r - n / 2.0) * std::sin(angle));
                    img.at(r, c) = std::clamp(t, spec.intensity_lo, spec.intensity_hi);
                }
            }
            return img;
        }
        case SceneKind::sinusoid_texture: {
            const double mid = 0.5 * (spec.intensity_lo + spec.intensity_hi);
            struct Wave {
                double fr, fc, phase, amp;
            };
            std::vector<Wave> waves(2);
            for (Wave& w : waves) w = {0.5 * unit(rng), 0.5 * unit(rng), 6.283185307179586 * unit(rng), 0.25 * span};
            ImagePatch img(n, n);
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < n; ++c) {
                    double t = mid;
                    for (const Wave& w : waves) t += w.amp * std::sin(w.fr * r + w.fc * c + w.phase);
                    img.at(r, c) = std::clamp(t, spec.intensity_lo, spec.intensity_hi);
                }
            }
            return img;
        }
    }
    throw std::invalid_argument("generate_scene: unknown kind");
}

std::vector<PatchPosition> patch_positions(int height, int width, int patch_size, int stride, std::size_t limit,
                                           std::uint64_t seed) {
    if (patch_size < 1 || stride < 1) throw std::invalid_argument("patch_positions: patch size and stride must be positive");
    if (patch_size > height || patch_size > width) throw std::invalid_argument("patch_positions: patch larger than image");
    std::vector<PatchPosition> grid;
    for (int r = 0; r + patch_size <= height; r += stride) {
        for (int c = 0; c + patch_size <= width; c += stride) grid.push_back({r, c});
    }
    if (grid.size() <= limit) return grid;
    std::vector<std::size_t> order(grid.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(limit);
    std::sort(order.begin(), order.end());
    std::vector<PatchPosition> kept;
    kept.reserve(limit);
    for (std::size_t k : order) kept.push_back(grid[k]);
    return kept;
}

ImagePatch crop(const ImagePatch& image, PatchPosition at, int patch_size) {
    ImagePatch p(patch_size, patch_size);
    for (int r = 0; r < patch_size; ++r) {
        for (int c = 0; c < patch_size; ++c) p.at(r, c) = image.at(at.row + r, at.col + c);
    }
    return p;
}

std::vector<ImagePatch> extract_patches(const ImagePatch& image, int patch_size, int stride, std::size_t limit,
                                        std::uint64_t seed) {
    std::vector<ImagePatch> out;
    for (const PatchPosition& at : patch_positions(image.height, image.width, patch_size, stride, limit, seed)) {
        out.push_back(crop(image, at, patch_size));
    }
    return out;
}

std::vector<std::uint64_t> scene_seeds(std::uint64_t base_seed, std::uint64_t role, std::size_t count) {
    const std::uint64_t stream_seed = derive_seed(derive_seed(base_seed, stream::kScenes), role);
    std::vector<std::uint64_t> seeds(count);
    for (std::size_t i = 0; i < count; ++i) seeds[i] = derive_seed(stream_seed, i);
    return seeds;
}

std::vector<ImagePatch> patches_from_scenes(const SceneSpec& base, const std::vector<std::uint64_t>& seeds,
                                            const DomainCounts& counts, std::size_t total) {
    std::vector<ImagePatch> out;
    out.reserve(total);
    for (std::uint64_t seed : seeds) {
        if (out.size() >= total) break;
        SceneSpec spec = base;
        spec.seed = seed;
        const ImagePatch scene = generate_scene(spec);
        auto patches = extract_patches(scene, counts.patch_size, counts.stride, counts.patches_per_scene,
                                       derive_seed(seed, stream::kPatches));
        for (auto& p : patches) {
            if (out.size() >= total) break;
            out.push_back(std::move(p));
        }
    }
    if (out.size() < total) throw std::invalid_argument("patches_from_scenes: insufficient scenes for requested patch count");
    return out;
}

namespace {

std::size_t scenes_needed(const DomainCounts& counts, std::size_t patches) {
    if (counts.patches_per_scene == 0) throw std::invalid_argument("build_domains: patches_per_scene must be positive");
    const std::size_t n = (patches + counts.patches_per_scene - 1) / counts.patches_per_scene;
    if (n > counts.max_scenes) throw std::invalid_argument("build_domains: insufficient scenes (max_scenes too small)");
    return n;
}

}  // namespace

std::vector<ImagePatch> add_noise_all(const std::vector<ImagePatch>& clean, const NoiseSpec& noise, std::uint64_t offset) {
    std::vector<ImagePatch> out;
    out.reserve(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) out.push_back(add_noise(clean[i], noise.for_patch(offset + i)));
    return out;
}

DomainPair build_domains(const SceneSpec& base, const NoiseSpec& noise, bool paired, const DomainCounts& counts,
                         std::uint64_t base_seed) {
    base.validate();
    noise.validate();
    if (counts.clean == 0 || counts.noisy == 0) throw std::invalid_argument("build_domains: domain sizes must be positive");
    DomainPair d;
    d.paired = paired;
    if (paired) {
        if (counts.clean != counts.noisy) throw std::invalid_argument("build_domains: paired domains need equal counts");
        d.clean_scene_seeds = scene_seeds(base_seed, 0, scenes_needed(counts, counts.clean));
        d.clean_patches = patches_from_scenes(base, d.clean_scene_seeds, counts, counts.clean);
        d.noisy_scene_seeds = d.clean_scene_seeds;
        d.noisy_sources = d.clean_patches;
        d.noisy_patches = add_noise_all(d.clean_patches, noise);
        d.pair_index.resize(counts.clean);
        std::iota(d.pair_index.begin(), d.pair_index.end(), 0);
        return d;
    }
    d.clean_scene_seeds = scene_seeds(base_seed, 0, scenes_needed(counts, counts.clean));
    d.noisy_scene_seeds = scene_seeds(base_seed, 1, scenes_needed(counts, counts.noisy));
    const std::set<std::uint64_t> clean_set(d.clean_scene_seeds.begin(), d.clean_scene_seeds.end());
    for (std::uint64_t s : d.noisy_scene_seeds) {
        if (clean_set.count(s)) throw std::logic_error("build_domains: clean and noisy scene seeds intersect");
    }
    d.clean_patches = patches_from_scenes(base, d.clean_scene_seeds, counts, counts.clean);
    d.noisy_sources = patches_from_scenes(base, d.noisy_scene_seeds, counts, counts.noisy);
    d.noisy_patches = add_noise_all(d.noisy_sources, noise);
    return d;
}

std::vector<ImagePatch> second_realization(const DomainPair& paired, const NoiseSpec& noise) {
    if (!paired.paired) throw std::invalid_argument("second_realization: domains are not paired");
    return add_noise_all(paired.clean_patches, noise, paired.clean_patches.size());
}

// =============================================================================
// PGM
// =============================================================================

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    for (;;) {
        ch = in.get();
        if (ch == EOF) throw PgmError("PGM: truncated header");
        if (ch == '#') {
            while (ch != '\n' && ch != '\r' && ch != EOF) ch = in.get();
            continue;
        }
        if (!std::isspace(ch)) break;
    }
    while (ch != EOF && !std::isspace(ch) && ch != '#') {
        tok.push_back(static_cast<char>(ch));
        ch = in.get();
    }
    if (ch == '#') in.unget();
    return tok;
}

int parse_positive(const std::string& tok, const char* what) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw PgmError(std::string("PGM: malformed ") + what);
    }
    const long v = std::stol(tok);
    if (v <= 0 || v > 1 << 24) throw PgmError(std::string("PGM: invalid ") + what);
    return static_cast<int>(v);
}

}  // namespace

ImagePatch load_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PgmError("PGM: cannot open " + path.string());
    if (next_token(in) != "P5") throw PgmError("PGM: not a binary graymap (P5)");
    const int width = parse_positive(next_token(in), "width");
    const int height = parse_positive(next_token(in), "height");
    const int maxval = parse_positive(next_token(in), "maxval");
    if (maxval != 255 && maxval != 65535) throw PgmError("PGM: unsupported maxval " + std::to_string(maxval));
    // next_token consumed exactly one whitespace byte after maxval.
    const std::size_t bytes_per = maxval == 255 ? 1 : 2;
    const std::size_t count = static_cast<std::size_t>(width) * height;
    std::vector<unsigned char> raw(count * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw PgmError("PGM: truncated payload");
    ImagePatch img(height, width);
    for (std::size_t k = 0; k < count; ++k) {
        const unsigned v = bytes_per == 1 ? raw[k] : (static_cast<unsigned>(raw[2 * k]) << 8) | raw[2 * k + 1];
        img.pixels[k] = static_cast<double>(v) / maxval;
    }
    return img;
}

void save_pgm(const ImagePatch& patch, const std::filesystem::path& path, int maxval) {
    if (maxval != 255 && maxval != 65535) throw PgmError("PGM: unsupported maxval " + std::to_string(maxval));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PgmError("PGM: cannot write " + path.string());
    out << "P5\n" << patch.width << ' ' << patch.height << '\n' << maxval << '\n';
    for (double p : patch.pixels) {
        const auto v = static_cast<unsigned>(std::lround(std::clamp(p, 0.0, 1.0) * maxval));
        if (maxval == 255) {
            out.put(static_cast<char>(v));
        } else {
            out.put(static_cast<char>(v >> 8));
            out.put(static_cast<char>(v & 0xFF));
        }
    }
    if (!out) throw PgmError("PGM: write failed for " + path.string());
}

void write_manifest(const std::filesystem::path& path, const SceneSpec& base, const DomainPair& domains) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << "# scene manifest\n";
    out << "kind=" << to_string(base.kind) << " size=" << base.size << " shapes=" << base.min_shapes << ".."
        << base.max_shapes << " intensity=" << base.intensity_lo << ".." << base.intensity_hi << '\n';
    out << "paired=" << (domains.paired ? "true" : "false") << '\n';
    for (std::size_t i = 0; i < domains.clean_scene_seeds.size(); ++i) {
        out << "clean " << i << ' ' << domains.clean_scene_seeds[i] << '\n';
    }
    for (std::size_t i = 0; i < domains.noisy_scene_seeds.size(); ++i) {
        out << "noisy " << i << ' ' << domains.noisy_scene_seeds[i] << '\n';
    }
}

}  // namespace otden
