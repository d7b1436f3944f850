/**
 * @file datasets.hpp
 * @brief Procedural clean scenes, patch extraction, paired and unpaired domain
 * construction, and binary PGM (P5) I/O.
 */
#pragma once

#include "otden/image.hpp"
#include "otden/noise_models.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace otden {

enum class SceneKind { piecewise_constant_shapes, smooth_gradient, sinusoid_texture };

std::string to_string(SceneKind kind);
SceneKind parse_scene_kind(const std::string& name);

struct SceneSpec {
    SceneKind kind = SceneKind::piecewise_constant_shapes;
    int size = 32;
    int min_shapes = 1;
    int max_shapes = 4;
    double intensity_lo = 0.1;
    double intensity_hi = 0.9;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Deterministic given spec.seed. Piecewise scenes draw axis-aligned
/// rectangles and discs over a constant background.
ImagePatch generate_scene(const SceneSpec& spec);

struct PatchPosition {
    int row = 0;
    int col = 0;
    friend bool operator==(const PatchPosition&, const PatchPosition&) = default;
};

inline constexpr std::size_t kNoLimit = std::numeric_limits<std::size_t>::max();

/// Top-left corners of the strided grid; when the grid holds more than
/// `limit` positions a seeded subset is kept, in grid order.
std::vector<PatchPosition> patch_positions(int height, int width, int patch_size, int stride, std::size_t limit,
                                           std::uint64_t seed);
ImagePatch crop(const ImagePatch& image, PatchPosition at, int patch_size);
std::vector<ImagePatch> extract_patches(const ImagePatch& image, int patch_size, int stride, std::size_t limit,
                                        std::uint64_t seed);

struct DomainCounts {
    std::size_t clean = 512;
    std::size_t noisy = 512;
    int patch_size = 8;
    int stride = 4;
    std::size_t patches_per_scene = 16;
    std::size_t max_scenes = 100000;
};

struct DomainPair {
    std::vector<ImagePatch> clean_patches;
    std::vector<ImagePatch> noisy_patches;
    bool paired = false;
    std::vector<std::uint64_t> clean_scene_seeds;
    std::vector<std::uint64_t> noisy_scene_seeds;
    /// Clean originals of noisy_patches. Evaluation only; in unpaired mode
    /// they come from the noisy-domain scenes, never from clean_patches.
    std::vector<ImagePatch> noisy_sources;
    /// Paired mode: noisy_patches[i] was synthesized from clean_patches[i].
    std::vector<std::size_t> pair_index;
};

/// Scene seeds of `role` (0 = clean domain, 1 = noisy domain, 2+ = held-out
/// splits) are drawn from disjoint splitmix streams of `base_seed`.
std::vector<std::uint64_t> scene_seeds(std::uint64_t base_seed, std::uint64_t role, std::size_t count);

/// Patches from the scenes with the given seeds, `per_scene` from each.
std::vector<ImagePatch> patches_from_scenes(const SceneSpec& base, const std::vector<std::uint64_t>& seeds,
                                            const DomainCounts& counts, std::size_t total);

/// Unpaired: clean and noisy domains come from disjoint scene seeds (asserted).
/// Paired: noisy_patches[i] = noise(clean_patches[i]).
DomainPair build_domains(const SceneSpec& base, const NoiseSpec& noise, bool paired, const DomainCounts& counts,
                         std::uint64_t base_seed);

/// A second, independent noisy realization of each paired clean patch.
std::vector<ImagePatch> second_realization(const DomainPair& paired, const NoiseSpec& noise);

/// Noisy copies with per-patch seeds noise.for_patch(offset + i).
std::vector<ImagePatch> add_noise_all(const std::vector<ImagePatch>& clean, const NoiseSpec& noise,
                                      std::uint64_t offset = 0);

class PgmError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary P5 graymap, maxval 255 or 65535 (16-bit big-endian); pixels scaled to [0,1].
ImagePatch load_pgm(const std::filesystem::path& path);
/// Pixels are clipped to [0,1] and rounded to the nearest level.
void save_pgm(const ImagePatch& patch, const std::filesystem::path& path, int maxval = 255);

/// One line per scene: role, index, seed, followed by the scene spec.
void write_manifest(const std::filesystem::path& path, const SceneSpec& base, const DomainPair& domains);

}  // namespace otden
