/**
 * @file denoiser.hpp
 * @brief Miniature convolutional encoder-decoder with hand-written reverse-mode
 * gradients, trained on the relaxed OT objective
 *
 *     (1/B) sum_i ||y_i - f(y_i)||^beta + lambda * W1(f(Y_batch), X_batch)
 *
 * with W1 computed exactly by the transportation LP on each minibatch, or
 * estimated by a WGAN-GP critic.
 */
#pragma once

#include "otden/errors.hpp"
#include "otden/image.hpp"
#include "otden/ot_core.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace otden {

enum class LayerKind { conv, tconv, relu, skip_add };

/// conv: zero padding `pad`, output (H + 2 pad - k) / stride + 1.
/// tconv: output (H - 1) stride - 2 pad + k.
/// skip_add: adds the activation `from` (0 = network input, i + 1 = output of layer i).
struct Layer {
    LayerKind kind = LayerKind::relu;
    int kernel = 0;
    int in_ch = 0;
    int out_ch = 0;
    int stride = 1;
    int pad = 0;
    int from = 0;

    static Layer conv(int k, int in, int out, int stride = 1) { return {LayerKind::conv, k, in, out, stride, k / 2, 0}; }
    static Layer tconv(int k, int in, int out, int stride, int pad) { return {LayerKind::tconv, k, in, out, stride, pad, 0}; }
    static Layer relu() { return {}; }
    static Layer skip_add(int from) { return {LayerKind::skip_add, 0, 0, 0, 1, 0, from}; }

    std::size_t param_count() const;
    friend bool operator==(const Layer&, const Layer&) = default;
};

struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

struct NetSpec {
    std::vector<Layer> layers;

    /// Activation shapes for an H x W single-channel input; index 0 is the
    /// input. Throws std::invalid_argument on any inconsistency.
    std::vector<Shape> shapes(int height, int width) const;
    /// Chain-consistent, output shape == input shape, receptive field >= 5.
    void validate(int height, int width) const;
    std::size_t param_count() const;
    /// One line, e.g. "conv 3 1 16 1 1; relu; skip 0".
    std::string descriptor() const;
    static NetSpec parse(const std::string& descriptor);

    /// Two stride-2 convs down, two stride-2 transposed convs up, additive
    /// skips at each resolution and from the input; zero-initialized head.
    static NetSpec default_unet(int channels = 16);

    friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

/// Width of the input window that influences the centre output pixel.
int receptive_field(const NetSpec& spec, int height, int width);

/// Flat parameter vector; layer i owns [offsets[i], offsets[i] + layers[i].param_count()).
/// conv weights are [out][in][k][k], tconv weights [in][out][k][k], biases follow.
struct DenoiserParams {
    std::vector<double> values;
    std::vector<std::size_t> offsets;

    static DenoiserParams zeros(const NetSpec& spec);
    bool all_finite() const;
};

/// He-uniform weights, zero biases, last parametric layer zero (so f starts
/// as the identity through the input skip) unless `zero_head` is false.
DenoiserParams init_params(const NetSpec& spec, std::uint64_t seed, bool zero_head = true);

std::vector<ImagePatch> forward(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch);
ImagePatch forward(const DenoiserParams& params, const NetSpec& spec, const ImagePatch& patch);

/// Sign of every ReLU input over the batch, in layer order. Two parameter
/// vectors with the same pattern lie in the same smooth piece of f.
std::vector<bool> relu_pattern(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch);

/// Accumulates d(loss)/d(params) for the per-sample output gradients `grad_out`.
void backward(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch,
              const std::vector<ImagePatch>& grad_out, std::vector<double>& grad);

enum class PenaltyMode { exact_minibatch_w1, critic_wgan_gp };
std::string to_string(PenaltyMode mode);
PenaltyMode parse_penalty_mode(const std::string& name);

struct CriticSpec {
    int hidden = 32;  ///< 0 gives a linear critic
    double gp_weight = 10.0;
    int critic_steps = 5;
    double learning_rate = 1e-3;
    /// When positive, weights are projected after each step so the critic is
    /// at most this Lipschitz (linear critics only).
    double lipschitz_bound = 0.0;

    void validate() const;
};

struct LossSpec {
    double beta = 1.0;
    double lambda = 1.0;
    /// 0 drops the fidelity term, leaving the distribution penalty alone.
    double fidelity_weight = 1.0;
    PenaltyMode penalty_mode = PenaltyMode::exact_minibatch_w1;
    CriticSpec critic;

    void validate() const;
};

struct LossResult {
    double loss = 0.0;
    double fidelity = 0.0;  ///< (1/B) sum ||y_i - f(y_i)||^beta
    double w1 = 0.0;        ///< exact minibatch W1
    Matrix plan;            ///< optimal coupling between outputs and clean patches
    std::vector<double> grad;
};

/// Exact minibatch objective. The W1 gradient holds the optimal coupling fixed;
/// coincident output/clean pairs contribute zero.
LossResult loss_and_grad(const DenoiserParams& params, const NetSpec& spec, const LossSpec& loss,
                         const std::vector<ImagePatch>& noisy_batch, const std::vector<ImagePatch>& clean_batch);

/// Objective with the coupling `plan` fixed instead of optimized.
double loss_with_plan(const DenoiserParams& params, const NetSpec& spec, const LossSpec& loss,
                      const std::vector<ImagePatch>& noisy_batch, const std::vector<ImagePatch>& clean_batch,
                      const Matrix& plan);

// ---------------------------------------------------------------------------
// Critic mode
// ---------------------------------------------------------------------------

/// D(x) = w2 . relu(W1 x + b1) + b2, or w . x + b when hidden == 0.
struct CriticParams {
    int input_dim = 0;
    int hidden = 0;
    std::vector<double> values;

    static CriticParams init(int input_dim, int hidden, std::uint64_t seed);
    double operator()(std::span<const double> x) const;
    std::vector<double> input_gradient(std::span<const double> x) const;
    void project_lipschitz(double bound);
};

struct CriticLosses {
    double critic = 0.0;      ///< E D(fake) - E D(real) + gp_weight * gradient penalty
    double penalty = 0.0;     ///< E (||grad D(x_hat)|| - 1)^2
    double w1_estimate = 0.0; ///< E D(real) - E D(fake)
    double generator = 0.0;   ///< -E D(fake)
};

struct CriticGrads {
    std::vector<double> critic;
    std::vector<double> fake;  ///< d(generator loss)/d(fake point), row-major B x dim
};

/// Rows of `real` and `fake` are samples. Interpolates use t ~ U(0,1) from `seed`.
/// Throws DivergenceError on a non-finite loss.
std::pair<CriticLosses, CriticGrads> critic_loss_and_grads(const CriticParams& critic, const Matrix& real,
                                                           const Matrix& fake, double gp_weight, std::uint64_t seed);

/// Trains a critic between two fixed point clouds and returns the final W1
/// estimate, averaged over the last tenth of the steps.
double fit_critic(CriticParams& critic, const Matrix& real, const Matrix& fake, const CriticSpec& spec, int steps,
                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct OptimizerState {
    std::vector<double> accumulator;
    double learning_rate = 1e-3;
    double rho = 0.99;
    double eps = 1e-8;
    int decay_epoch = 100;  ///< learning rate multiplied by decay_factor from this epoch on
    double decay_factor = 0.1;
    int epoch = 0;

    explicit OptimizerState(std::size_t n = 0, double lr = 1e-3) : accumulator(n, 0.0), learning_rate(lr) {}
    double effective_learning_rate() const;
};

/// acc = rho acc + (1 - rho) g^2;  p -= lr_eff g / (sqrt(acc) + eps).
/// Throws DivergenceError on a non-finite gradient or parameter.
void rmsprop_step(OptimizerState& state, std::vector<double>& params, const std::vector<double>& grad);

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double fidelity = 0.0;
    double w1 = 0.0;
    double val_psnr = 0.0;
    double learning_rate = 0.0;
};

struct TrainOptions {
    int epochs = 200;
    int batch_size = 16;
    double learning_rate = 1e-3;
    int decay_epoch = 100;
    double decay_factor = 0.1;
    double rho = 0.99;
    double divergence_bound = 1e6;
    std::uint64_t seed = 0;
};

struct TrainResult {
    DenoiserParams params;
    std::vector<EpochRecord> curve;
};

/// Thrown when the loss exceeds the divergence bound; carries the curve so far.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, std::vector<EpochRecord> curve)
        : DivergenceError(what), curve_(std::move(curve)) {}
    const std::vector<EpochRecord>& curve() const { return curve_; }

private:
    std::vector<EpochRecord> curve_;
};

/// Validation pairs; PSNR of the clipped outputs is recorded after every epoch.
struct ValidationSet {
    std::vector<ImagePatch> noisy;
    std::vector<ImagePatch> clean;
};

/// Unpaired training: noisy and clean batches are drawn from independent
/// permutations of the two domains each epoch.
TrainResult train(const NetSpec& spec, const LossSpec& loss, const TrainOptions& options,
                  const std::vector<ImagePatch>& noisy, const std::vector<ImagePatch>& clean,
                  const ValidationSet& validation);

enum class SupervisedNorm { l1, l2 };

/// Paired training of f(inputs[i]) towards targets[i], minimizing
/// (1/B) sum_i ||f(y_i) - t_i||_1 (or the squared L2 norm).
TrainResult train_supervised(const NetSpec& spec, SupervisedNorm norm, const TrainOptions& options,
                             const std::vector<ImagePatch>& inputs, const std::vector<ImagePatch>& targets,
                             const ValidationSet& validation);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

/// "OTDENCKPT <version>\n<descriptor>\n<count>\n" then count little-endian float64.
void save_checkpoint(const std::filesystem::path& path, const NetSpec& spec, const DenoiserParams& params);
std::pair<NetSpec, DenoiserParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace otden
