#include "doctest.h"

#include "otden/datasets.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace otden;

namespace {

std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "otden_test_datasets";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("scene generation") {
    SceneSpec spec;
    spec.size = 24;
    SUBCASE("no shapes gives a constant background") {
        spec.min_shapes = spec.max_shapes = 0;
        spec.seed = 3;
        const ImagePatch img = generate_scene(spec);
        for (double p : img.pixels) CHECK(p == img.pixels.front());
    }
    SUBCASE("deterministic per seed") {
        for (SceneKind kind : {SceneKind::piecewise_constant_shapes, SceneKind::smooth_gradient, SceneKind::sinusoid_texture}) {
            spec.kind = kind;
            spec.seed = 11;
            CHECK(generate_scene(spec) == generate_scene(spec));
            SceneSpec other = spec;
            other.seed = 12;
            CHECK_FALSE(generate_scene(spec) == generate_scene(other));
        }
    }
    SUBCASE("generation audit over 1000 scenes") {
        int multi_level = 0;
        for (std::uint64_t s = 0; s < 1000; ++s) {
            spec.seed = s;
            const ImagePatch img = generate_scene(spec);
            std::set<double> levels;
            for (double p : img.pixels) {
                REQUIRE(p >= 0.0);
                REQUIRE(p <= 1.0);
                levels.insert(p);
            }
            multi_level += levels.size() >= 2 ? 1 : 0;
        }
        CHECK(multi_level >= 990);
    }
    SUBCASE("other kinds stay in range") {
        for (SceneKind kind : {SceneKind::smooth_gradient, SceneKind::sinusoid_texture}) {
            spec.kind = kind;
            for (std::uint64_t s = 0; s < 50; ++s) {
                spec.seed = s;
                for (double p : generate_scene(spec).pixels) CHECK((p >= spec.intensity_lo && p <= spec.intensity_hi));
            }
        }
    }
    SUBCASE("invalid specs") {
        spec.intensity_hi = 1.5;
        CHECK_THROWS_AS(generate_scene(spec), std::invalid_argument);
        spec.intensity_hi = 0.9;
        spec.min_shapes = 5;
        spec.max_shapes = 2;
        CHECK_THROWS_AS(generate_scene(spec), std::invalid_argument);
        CHECK(parse_scene_kind("sinusoid_texture") == SceneKind::sinusoid_texture);
        CHECK_THROWS_AS(parse_scene_kind("bsds"), std::invalid_argument);
    }
}

TEST_CASE("patch extraction") {
    ImagePatch img(16, 16);
    for (std::size_t k = 0; k < img.size(); ++k) img.pixels[k] = static_cast<double>(k) / 256.0;

    SUBCASE("whole image") {
        const ImagePatch small(8, 8, 0.3);
        const auto patches = extract_patches(small, 8, 8, kNoLimit, 0);
        REQUIRE(patches.size() == 1);
        CHECK(patches[0] == small);
    }
    SUBCASE("tiling") {
        const auto patches = extract_patches(img, 8, 8, kNoLimit, 0);
        REQUIRE(patches.size() == 4);
        const int corners[4][2] = {{0, 0}, {0, 8}, {8, 0}, {8, 8}};
        for (int p = 0; p < 4; ++p) {
            for (int r = 0; r < 8; ++r) {
                for (int c = 0; c < 8; ++c) CHECK(patches[p].at(r, c) == img.at(corners[p][0] + r, corners[p][1] + c));
            }
        }
    }
    SUBCASE("seeded subset is reproducible") {
        ImagePatch big(64, 64, 0.0);
        const auto a = patch_positions(64, 64, 8, 2, 100, 99);
        const auto b = patch_positions(64, 64, 8, 2, 100, 99);
        const auto c = patch_positions(64, 64, 8, 2, 100, 100);
        CHECK(a.size() == 100);
        CHECK(a == b);
        CHECK_FALSE(a == c);
        std::set<std::pair<int, int>> distinct;
        for (const auto& p : a) {
            CHECK(p.row + 8 <= 64);
            CHECK(p.col + 8 <= 64);
            distinct.insert({p.row, p.col});
        }
        CHECK(distinct.size() == 100);
        CHECK(extract_patches(big, 8, 2, 100, 99).size() == 100);
    }
    SUBCASE("patch larger than image") {
        CHECK_THROWS_AS(extract_patches(img, 17, 1, kNoLimit, 0), std::invalid_argument);
    }
}

TEST_CASE("domain construction") {
    SceneSpec scene;
    scene.size = 16;
    DomainCounts counts;
    counts.clean = 40;
    counts.noisy = 40;
    counts.patches_per_scene = 9;
    NoiseSpec noise;
    noise.seed = 5;

    SUBCASE("paired with zero noise") {
        noise.sigma = 0.0;
        const DomainPair d = build_domains(scene, noise, true, counts, 1);
        REQUIRE(d.noisy_patches.size() == d.clean_patches.size());
        for (std::size_t i = 0; i < d.clean_patches.size(); ++i) CHECK(d.noisy_patches[i] == d.clean_patches[i]);
        CHECK(d.pair_index.size() == 40);
    }
    SUBCASE("unpaired seeds are disjoint") {
        const DomainPair d = build_domains(scene, noise, false, counts, 1);
        CHECK_FALSE(d.paired);
        CHECK(d.clean_patches.size() == 40);
        CHECK(d.noisy_patches.size() == 40);
        CHECK(d.pair_index.empty());
        std::set<std::uint64_t> clean(d.clean_scene_seeds.begin(), d.clean_scene_seeds.end());
        for (std::uint64_t s : d.noisy_scene_seeds) CHECK(clean.count(s) == 0);
    }
    SUBCASE("noise-to-noise realizations") {
        const DomainPair d = build_domains(scene, noise, true, counts, 2);
        const auto second = second_realization(d, noise);
        REQUIRE(second.size() == d.noisy_patches.size());
        for (std::size_t i = 0; i < second.size(); ++i) {
            CHECK(d.clean_patches[d.pair_index[i]] == d.noisy_sources[i]);
            CHECK_FALSE(second[i] == d.noisy_patches[i]);
        }
        const DomainPair u = build_domains(scene, noise, false, counts, 2);
        CHECK_THROWS_AS(second_realization(u, noise), std::invalid_argument);
    }
    SUBCASE("insufficient scenes") {
        counts.max_scenes = 2;
        CHECK_THROWS_AS(build_domains(scene, noise, false, counts, 1), std::invalid_argument);
    }
    SUBCASE("manifest") {
        const DomainPair d = build_domains(scene, noise, false, counts, 1);
        const auto path = scratch("manifest.txt");
        write_manifest(path, scene, d);
        std::ifstream in(path);
        std::string line;
        int seeds = 0;
        while (std::getline(in, line)) seeds += line.rfind("clean ", 0) == 0 || line.rfind("noisy ", 0) == 0;
        CHECK(seeds == static_cast<int>(d.clean_scene_seeds.size() + d.noisy_scene_seeds.size()));
    }
}

TEST_CASE("pgm io") {
    SUBCASE("8-bit round trip") {
        ImagePatch p(7, 5);
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : p.pixels) v = u(rng);
        const auto path = scratch("rt8.pgm");
        save_pgm(p, path);
        const ImagePatch q = load_pgm(path);
        REQUIRE(q.same_shape(p));
        for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(q.pixels[k] - p.pixels[k]) <= 0.5 / 255.0 + 1e-15);
        // A second trip is exact.
        save_pgm(q, path);
        CHECK(load_pgm(path) == q);
    }
    SUBCASE("16-bit round trip") {
        ImagePatch p(3, 4);
        for (std::size_t k = 0; k < p.size(); ++k) p.pixels[k] = static_cast<double>(k) / 11.0;
        const auto path = scratch("rt16.pgm");
        save_pgm(p, path, 65535);
        const ImagePatch q = load_pgm(path);
        for (std::size_t k = 0; k < p.size(); ++k) CHECK(std::abs(q.pixels[k] - p.pixels[k]) <= 0.5 / 65535.0 + 1e-15);
    }
    SUBCASE("single white pixel") {
        const auto path = scratch("one.pgm");
        write_bytes(path, std::string("P5\n1 1\n255\n") + '\xff');
        const ImagePatch q = load_pgm(path);
        CHECK(q.height == 1);
        CHECK(q.width == 1);
        CHECK(q.pixels[0] == 1.0);
    }
    SUBCASE("comments in header") {
        const auto path = scratch("comment.pgm");
        write_bytes(path, std::string("P5\n# made by hand\n2 # width\n1\n# maxval next\n255\n") + '\x00' + '\x80');
        const ImagePatch q = load_pgm(path);
        CHECK(q.width == 2);
        CHECK(q.height == 1);
        CHECK(q.pixels[0] == 0.0);
        CHECK(q.pixels[1] == doctest::Approx(128.0 / 255.0));
    }
    SUBCASE("errors") {
        const auto path = scratch("bad.pgm");
        write_bytes(path, "P2\n1 1\n255\n0");
        CHECK_THROWS_AS(load_pgm(path), PgmError);
        write_bytes(path, "P5\n2 2\n255\n\x01\x02");
        CHECK_THROWS_AS(load_pgm(path), PgmError);
        write_bytes(path, "P5\n1 1\n1023\n\x01\x02");
        CHECK_THROWS_AS(load_pgm(path), PgmError);
        write_bytes(path, "P5\nx 1\n255\n\x01");
        CHECK_THROWS_AS(load_pgm(path), PgmError);
        write_bytes(path, "P5\n1");
        CHECK_THROWS_AS(load_pgm(path), PgmError);
        CHECK_THROWS_AS(load_pgm(scratch("missing.pgm")), PgmError);
        CHECK_THROWS_AS(save_pgm(ImagePatch(1, 1), path, 100), PgmError);
    }
}
