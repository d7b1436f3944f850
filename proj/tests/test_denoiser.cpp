#include "doctest.h"

#include "otden/datasets.hpp"
#include "otden/denoiser.hpp"
#include "otden/metrics.hpp"
#include "otden/rng.hpp"

#include "gradient_check.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace otden;

using testing::random_params;
using testing::random_patches;

TEST_CASE("network description") {
    const NetSpec spec = NetSpec::default_unet();
    SUBCASE("default network is consistent") {
        CHECK_NOTHROW(spec.validate(8, 8));
        CHECK_NOTHROW(spec.validate(16, 16));
        const auto s = spec.shapes(8, 8);
        CHECK(s[3] == Shape{16, 4, 4});
        CHECK(s[5] == Shape{16, 2, 2});
        CHECK(s.back() == Shape{1, 8, 8});
        CHECK(receptive_field(spec, 16, 16) >= 5);
        CHECK(NetSpec::parse(spec.descriptor()) == spec);
    }
    SUBCASE("inconsistent networks are rejected") {
        NetSpec bad = spec;
        bad.layers[2].in_ch = 8;
        CHECK_THROWS_AS(bad.validate(8, 8), std::invalid_argument);

        NetSpec down;
        down.layers = {Layer::conv(3, 1, 1, 2)};
        CHECK_THROWS_AS(down.validate(8, 8), std::invalid_argument);

        NetSpec narrow;
        narrow.layers = {Layer::conv(3, 1, 1)};
        CHECK(receptive_field(narrow, 8, 8) == 3);
        CHECK_THROWS_AS(narrow.validate(8, 8), std::invalid_argument);

        NetSpec skip_ahead;
        skip_ahead.layers = {Layer::conv(5, 1, 1), Layer::skip_add(3)};
        CHECK_THROWS_AS(skip_ahead.validate(8, 8), std::invalid_argument);

        CHECK_THROWS_AS(NetSpec::parse("conv 3 1"), std::invalid_argument);
        CHECK_THROWS_AS(NetSpec::parse("pool 2"), std::invalid_argument);
    }
    SUBCASE("parameter layout") {
        const DenoiserParams p = init_params(spec, 1);
        CHECK(p.values.size() == spec.param_count());
        CHECK(spec.layers[0].param_count() == 16 * 9 + 16);
        CHECK(spec.layers[6].param_count() == 16 * 16 * 16 + 16);
        CHECK(p.all_finite());
    }
}

TEST_CASE("forward pass") {
    const NetSpec spec = NetSpec::default_unet(8);
    const auto batch = random_patches(5, 8, 3);
    SUBCASE("zero head is the identity") {
        const auto out = forward(init_params(spec, 42), spec, batch);
        for (std::size_t i = 0; i < batch.size(); ++i) CHECK(out[i] == batch[i]);
    }
    SUBCASE("zero input and zero biases give zero output") {
        const auto out = forward(init_params(spec, 42, false), spec, ImagePatch(8, 8, 0.0));
        for (double v : out.pixels) CHECK(v == 0.0);
    }
    SUBCASE("bit-identical across runs") {
        const DenoiserParams p = random_params(spec, 9);
        const auto a = forward(p, spec, batch);
        const auto b = forward(random_params(spec, 9), spec, batch);
        CHECK(a == b);
        CHECK_FALSE(a == batch);
    }
    SUBCASE("shape mismatch") {
        std::vector<ImagePatch> mixed = batch;
        mixed.push_back(ImagePatch(4, 4));
        CHECK_THROWS_AS(forward(init_params(spec, 1), spec, mixed), std::invalid_argument);
        CHECK_THROWS_AS(forward(DenoiserParams{}, spec, batch), std::invalid_argument);
    }
}

TEST_CASE("loss values") {
    const NetSpec spec = NetSpec::default_unet(4);
    const DenoiserParams identity = init_params(spec, 5);
    const auto noisy = random_patches(4, 8, 11);
    LossSpec loss;
    loss.lambda = 2.0;
    SUBCASE("identity on the clean set itself") {
        const std::vector<ImagePatch> clean{noisy[2], noisy[0], noisy[3], noisy[1]};
        const LossResult r = loss_and_grad(identity, spec, loss, noisy, clean);
        CHECK(r.loss == 0.0);
        CHECK(r.w1 == 0.0);
    }
    SUBCASE("lambda zero with the identity") {
        loss.lambda = 0.0;
        const LossResult r = loss_and_grad(identity, spec, loss, noisy, random_patches(4, 8, 12));
        CHECK(r.loss == 0.0);
        for (double g : r.grad) CHECK(g == 0.0);
    }
    SUBCASE("penalty is the LP value on the same batches") {
        const DenoiserParams p = random_params(spec, 3);
        const auto clean = random_patches(4, 8, 13);
        const LossResult r = loss_and_grad(p, spec, loss, noisy, clean);
        const auto out = forward(p, spec, noisy);
        std::vector<double> zs, xs;
        for (std::size_t i = 0; i < 4; ++i) {
            zs.insert(zs.end(), out[i].pixels.begin(), out[i].pixels.end());
            xs.insert(xs.end(), clean[i].pixels.begin(), clean[i].pixels.end());
        }
        const double lp = kantorovich_lp(EmpiricalMeasure::uniform(zs, 64), EmpiricalMeasure::uniform(xs, 64), CostSpec{1.0}).value;
        CHECK(r.w1 == lp);
        CHECK(r.loss == r.fidelity + 2.0 * r.w1);
        CHECK(loss_with_plan(p, spec, loss, noisy, clean, r.plan) == doctest::Approx(r.loss).epsilon(1e-12));
    }
    SUBCASE("coincident output and clean patch") {
        const std::vector<ImagePatch> clean{noisy[0], ImagePatch(8, 8, 0.5), ImagePatch(8, 8, 0.1), ImagePatch(8, 8, 0.9)};
        const LossResult r = loss_and_grad(identity, spec, loss, noisy, clean);
        for (double g : r.grad) REQUIRE(std::isfinite(g));
    }
    SUBCASE("batch size mismatch") {
        CHECK_THROWS_AS(loss_and_grad(identity, spec, loss, noisy, random_patches(3, 8, 1)), std::invalid_argument);
        loss.beta = 0.5;
        CHECK_THROWS_AS(loss_and_grad(identity, spec, loss, noisy, noisy), std::invalid_argument);
    }
}

TEST_CASE("gradient against central differences") {
    const testing::GradientCheck g = testing::run_gradient_check(20);
    INFO("coordinates checked: " << g.checked << ", straddling a kink: " << g.straddling);
    CHECK(g.checked > 1000);
    CHECK(g.straddling * 50 < g.checked);
    CHECK(g.worst < 1e-3);
}

TEST_CASE("envelope step does not increase the loss") {
    const NetSpec spec = NetSpec::default_unet(4);
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        const DenoiserParams p = random_params(spec, 500 + trial);
        const auto noisy = random_patches(4, 8, 600 + trial);
        const auto clean = random_patches(4, 8, 700 + trial);
        LossSpec loss;
        loss.lambda = 1.5;
        const LossResult r = loss_and_grad(p, spec, loss, noisy, clean);
        double norm = 0.0;
        for (double g : r.grad) norm += g * g;
        norm = std::sqrt(norm);
        REQUIRE(norm > 0.0);
        DenoiserParams q = p;
        for (std::size_t k = 0; k < q.values.size(); ++k) q.values[k] -= 1e-4 * r.grad[k] / norm;
        CHECK(loss_with_plan(q, spec, loss, noisy, clean, r.plan) <= r.loss + 1e-8);
        CHECK(loss_and_grad(q, spec, loss, noisy, clean).loss <= r.loss + 1e-8);
    }
}

TEST_CASE("critic") {
    SUBCASE("zero critic pays the full gradient penalty") {
        CriticParams c = CriticParams::init(3, 4, 1);
        std::fill(c.values.begin(), c.values.end(), 0.0);
        Matrix real(5, 3, 0.2), fake(5, 3, 0.7);
        const auto [l, g] = critic_loss_and_grads(c, real, fake, 10.0, 3);
        CHECK(l.critic == doctest::Approx(10.0).epsilon(1e-15));
        CHECK(l.w1_estimate == 0.0);
        CHECK(l.penalty == 1.0);
    }
    SUBCASE("critic gradient matches central differences") {
        Rng rng(8);
        std::normal_distribution<double> n01(0.0, 1.0);
        Matrix real(6, 3), fake(6, 3);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t d = 0; d < 3; ++d) {
                real(i, d) = n01(rng);
                fake(i, d) = n01(rng) + 1.0;
            }
        }
        for (int hidden : {0, 5}) {
            CriticParams c = CriticParams::init(3, hidden, 4);
            const auto [l, g] = critic_loss_and_grads(c, real, fake, 2.0, 77);
            double worst = 0.0;
            for (std::size_t k = 0; k < c.values.size(); ++k) {
                if (std::abs(g.critic[k]) <= 1e-6) continue;
                CriticParams plus = c, minus = c;
                plus.values[k] += 1e-6;
                minus.values[k] -= 1e-6;
                const double fd = (critic_loss_and_grads(plus, real, fake, 2.0, 77).first.critic -
                                   critic_loss_and_grads(minus, real, fake, 2.0, 77).first.critic) / 2e-6;
                worst = std::max(worst, std::abs(fd - g.critic[k]) / std::max(std::abs(fd), std::abs(g.critic[k])));
            }
            CHECK(worst < 1e-5);
        }
    }
    SUBCASE("same distribution gives a near-zero estimate") {
        Rng rng(21);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Matrix real(2000, 1), fake(2000, 1);
        std::vector<double> a, b;
        for (std::size_t i = 0; i < 2000; ++i) {
            a.push_back(real(i, 0) = u(rng));
            b.push_back(fake(i, 0) = u(rng));
        }
        CriticSpec spec;
        spec.hidden = 16;
        CriticParams c = CriticParams::init(1, 16, 5);
        const double est = fit_critic(c, real, fake, spec, 1500, 6);
        const double exact = w1_1d(EmpiricalMeasure::uniform_1d(a), EmpiricalMeasure::uniform_1d(b));
        CHECK(std::abs(est) < 0.05);
        CHECK(std::abs(est - exact) < 0.05);
    }
    SUBCASE("two point masses with a Lipschitz linear critic") {
        Matrix real(1, 1, 1.0), fake(1, 1, 0.0);
        CriticSpec spec;
        spec.hidden = 0;
        spec.lipschitz_bound = 1.0;
        spec.learning_rate = 1e-2;
        CriticParams c = CriticParams::init(1, 0, 2);
        const double est = fit_critic(c, real, fake, spec, 500, 3);
        CHECK(est >= 0.8);
        // (w + b) - b carries one rounding of the bias.
        CHECK(est <= 1.0 + 1e-12);
    }
    SUBCASE("non-finite input is reported") {
        CriticParams c = CriticParams::init(1, 0, 2);
        Matrix real(1, 1, std::nan("")), fake(1, 1, 0.0);
        CHECK_THROWS_AS(critic_loss_and_grads(c, real, fake, 1.0, 1), DivergenceError);
    }
}

TEST_CASE("rmsprop") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        OptimizerState s(3, 1e-2);
        std::vector<double> p{1.0, -2.0, 3.0};
        rmsprop_step(s, p, {0.0, 0.0, 0.0});
        CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
    }
    SUBCASE("quadratic converges") {
        OptimizerState s(1, 1e-2);
        std::vector<double> x{1.0};
        for (int t = 0; t < 200; ++t) rmsprop_step(s, x, {2.0 * x[0]});
        CHECK(std::abs(x[0]) < 1e-2);
    }
    SUBCASE("decay boundary") {
        OptimizerState before(1, 1e-3), after(1, 1e-3);
        before.decay_epoch = after.decay_epoch = 100;
        before.epoch = 99;
        after.epoch = 100;
        std::vector<double> a{0.0}, b{0.0};
        rmsprop_step(before, a, {1.0});
        rmsprop_step(after, b, {1.0});
        CHECK(std::abs(b[0] / a[0] - 0.1) <= 1e-12);
    }
    SUBCASE("non-finite gradient aborts") {
        OptimizerState s(1, 1e-2);
        std::vector<double> x{1.0};
        CHECK_THROWS_AS(rmsprop_step(s, x, {std::nan("")}), DivergenceError);
    }
}

namespace {

struct ToyData {
    std::vector<ImagePatch> noisy, clean;
    ValidationSet val;
};

ToyData toy_data(double sigma) {
    SceneSpec scene;
    scene.size = 32;
    NoiseSpec noise;
    noise.sigma = sigma;
    noise.seed = 3;
    DomainCounts counts;
    counts.clean = counts.noisy = 64;
    const DomainPair d = build_domains(scene, noise, false, counts, 10);
    counts.clean = counts.noisy = 32;
    const DomainPair v = build_domains(scene, noise, true, counts, 11);
    return {d.noisy_patches, d.clean_patches, {v.noisy_patches, v.clean_patches}};
}

TrainOptions toy_options(int epochs) {
    TrainOptions opt;
    opt.epochs = epochs;
    opt.batch_size = 8;
    opt.decay_epoch = epochs / 2;
    opt.seed = 4;
    return opt;
}

}  // namespace

TEST_CASE("training") {
    const NetSpec spec = NetSpec::default_unet(4);
    const ToyData data = toy_data(25.0 / 255.0);
    SUBCASE("lambda zero stays at the identity") {
        LossSpec loss;
        loss.lambda = 0.0;
        const TrainResult r = train(spec, loss, toy_options(3), data.noisy, data.clean, data.val);
        std::vector<ImagePatch> clipped;
        for (const auto& y : data.val.noisy) clipped.push_back(y.clipped());
        const double noisy_psnr = psnr(clipped, data.val.clean);
        REQUIRE(r.curve.size() == 3);
        CHECK(std::abs(r.curve.back().val_psnr - noisy_psnr) <= 0.5);
    }
    SUBCASE("a dominant penalty moves outputs towards the clean set") {
        LossSpec loss;
        loss.lambda = 1e3;
        const TrainResult r = train(spec, loss, toy_options(10), data.noisy, data.clean, data.val);
        const auto out = forward(r.params, spec, data.noisy);
        CHECK(patchset_w1(out, data.clean) < patchset_w1(data.noisy, data.clean));
    }
    SUBCASE("deterministic given the seed") {
        LossSpec loss;
        loss.lambda = 2.0;
        const TrainResult a = train(spec, loss, toy_options(2), data.noisy, data.clean, data.val);
        const TrainResult b = train(spec, loss, toy_options(2), data.noisy, data.clean, data.val);
        CHECK(a.params.values == b.params.values);
        CHECK(a.curve.back().loss == b.curve.back().loss);
    }
    SUBCASE("divergence aborts with the partial curve") {
        LossSpec loss;
        TrainOptions opt = toy_options(5);
        opt.divergence_bound = 1e-9;
        try {
            train(spec, loss, opt, data.noisy, data.clean, data.val);
            FAIL("expected divergence");
        } catch (const TrainingDiverged& e) {
            CHECK(e.curve().size() == 1);
        }
    }
    SUBCASE("too little data") {
        LossSpec loss;
        const std::vector<ImagePatch> few(data.noisy.begin(), data.noisy.begin() + 10);
        CHECK_THROWS_AS(train(spec, loss, toy_options(1), few, data.clean, data.val), std::invalid_argument);
    }
    SUBCASE("critic mode runs") {
        LossSpec loss;
        loss.penalty_mode = PenaltyMode::critic_wgan_gp;
        loss.critic.hidden = 8;
        loss.critic.critic_steps = 2;
        const TrainResult r = train(spec, loss, toy_options(2), data.noisy, data.clean, data.val);
        CHECK(r.params.all_finite());
        CHECK(std::isfinite(r.curve.back().w1));
    }
}

TEST_CASE("supervised training with clean inputs stays at the identity") {
    const NetSpec spec = NetSpec::default_unet(4);
    const ToyData data = toy_data(0.0);
    const TrainResult r = train_supervised(spec, SupervisedNorm::l1, toy_options(3), data.clean, data.clean, {});
    CHECK(r.curve.back().loss < 1e-3);
    CHECK_THROWS_AS(train_supervised(spec, SupervisedNorm::l1, toy_options(1), data.clean,
                                     std::vector<ImagePatch>(data.clean.begin(), data.clean.end() - 1), {}),
                    std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
    const NetSpec spec = NetSpec::default_unet(4);
    const DenoiserParams p = random_params(spec, 31);
    const auto dir = std::filesystem::temp_directory_path() / "otden_test_denoiser";
    std::filesystem::create_directories(dir);
    const auto path = dir / "net.ckpt";
    save_checkpoint(path, spec, p);
    const auto [spec2, p2] = load_checkpoint(path);
    CHECK(spec2 == spec);
    CHECK(p2.values == p.values);

    // Last eight bytes are the final parameter, least significant byte first.
    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::uint64_t bits = 0;
    for (int k = 7; k >= 0; --k) bits = (bits << 8) | bytes[bytes.size() - 8 + static_cast<std::size_t>(k)];
    double last;
    std::memcpy(&last, &bits, sizeof last);
    CHECK(last == p.values.back());

    std::ofstream(dir / "bad.ckpt") << "OTDENCKPT 2\nrelu\n0\n";
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), std::runtime_error);
    std::ofstream(dir / "short.ckpt") << "OTDENCKPT 1\n" << spec.descriptor() << "\n" << spec.param_count() << "\nabc";
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), std::runtime_error);
}
