#include "otden/denoiser.hpp"

#include "otden/metrics.hpp"
#include "otden/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace otden {

// =============================================================================
// Network description
// =============================================================================

std::size_t Layer::param_count() const {
    if (kind == LayerKind::conv || kind == LayerKind::tconv) {
        return static_cast<std::size_t>(in_ch) * out_ch * kernel * kernel + out_ch;
    }
    return 0;
}

std::vector<Shape> NetSpec::shapes(int height, int width) const {
    if (height < 1 || width < 1) throw std::invalid_argument("NetSpec: input must be non-empty");
    std::vector<Shape> s{{1, height, width}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        const Shape in = s.back();
        const std::string where = "NetSpec layer " + std::to_string(i) + ": ";
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::tconv: {
                if (l.kernel < 1 || l.stride < 1 || l.pad < 0 || l.in_ch < 1 || l.out_ch < 1) {
                    throw std::invalid_argument(where + "invalid convolution parameters");
                }
                if (in.channels != l.in_ch) throw std::invalid_argument(where + "channel mismatch");
                Shape out{l.out_ch, 0, 0};
                if (l.kind == LayerKind::conv) {
                    const int eh = in.height + 2 * l.pad - l.kernel, ew = in.width + 2 * l.pad - l.kernel;
                    if (eh < 0 || ew < 0) throw std::invalid_argument(where + "kernel larger than padded input");
                    out.height = eh / l.stride + 1;
                    out.width = ew / l.stride + 1;
                } else {
                    out.height = (in.height - 1) * l.stride - 2 * l.pad + l.kernel;
                    out.width = (in.width - 1) * l.stride - 2 * l.pad + l.kernel;
                    if (out.height < 1 || out.width < 1) throw std::invalid_argument(where + "empty output");
                }
                s.push_back(out);
                break;
            }
            case LayerKind::relu: s.push_back(in); break;
            case LayerKind::skip_add:
                if (l.from < 0 || static_cast<std::size_t>(l.from) > i) {
                    throw std::invalid_argument(where + "skip source must precede the layer");
                }
                if (!(s[static_cast<std::size_t>(l.from)] == in)) throw std::invalid_argument(where + "skip shape mismatch");
                s.push_back(in);
                break;
        }
    }
    return s;
}

void NetSpec::validate(int height, int width) const {
    if (layers.empty()) throw std::invalid_argument("NetSpec: no layers");
    const auto s = shapes(height, width);
    if (!(s.back() == s.front())) throw std::invalid_argument("NetSpec: output shape differs from input shape");
    if (receptive_field(*this, height, width) < std::min({5, height, width})) {
        throw std::invalid_argument("NetSpec: receptive field below 5");
    }
}

std::size_t NetSpec::param_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.param_count();
    return n;
}

std::string NetSpec::descriptor() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        if (i) os << "; ";
        switch (l.kind) {
            case LayerKind::conv:
            case LayerKind::tconv:
                os << (l.kind == LayerKind::conv ? "conv " : "tconv ") << l.kernel << ' ' << l.in_ch << ' ' << l.out_ch
                   << ' ' << l.stride << ' ' << l.pad;
                break;
            case LayerKind::relu: os << "relu"; break;
            case LayerKind::skip_add: os << "skip " << l.from; break;
        }
    }
    return os.str();
}

NetSpec NetSpec::parse(const std::string& descriptor) {
    NetSpec spec;
    std::istringstream all(descriptor);
    std::string item;
    while (std::getline(all, item, ';')) {
        std::istringstream is(item);
        std::string kind;
        if (!(is >> kind)) continue;
        Layer l;
        if (kind == "conv" || kind == "tconv") {
            l.kind = kind == "conv" ? LayerKind::conv : LayerKind::tconv;
            if (!(is >> l.kernel >> l.in_ch >> l.out_ch >> l.stride >> l.pad)) {
                throw std::invalid_argument("NetSpec: malformed layer '" + item + "'");
            }
        } else if (kind == "relu") {
            l.kind = LayerKind::relu;
        } else if (kind == "skip") {
            l.kind = LayerKind::skip_add;
            if (!(is >> l.from)) throw std::invalid_argument("NetSpec: malformed layer '" + item + "'");
        } else {
            throw std::invalid_argument("NetSpec: unknown layer kind '" + kind + "'");
        }
        std::string extra;
        if (is >> extra) throw std::invalid_argument("NetSpec: trailing tokens in '" + item + "'");
        spec.layers.push_back(l);
    }
    if (spec.layers.empty()) throw std::invalid_argument("NetSpec: empty descriptor");
    return spec;
}

NetSpec NetSpec::default_unet(int c) {
    NetSpec s;
    s.layers = {
        Layer::conv(3, 1, c),        Layer::relu(),                   // act 2: full resolution
        Layer::conv(3, c, c, 2),     Layer::relu(),                   // act 4: 1/2
        Layer::conv(3, c, c, 2),     Layer::relu(),                   // act 6: 1/4
        Layer::tconv(4, c, c, 2, 1), Layer::skip_add(4), Layer::relu(),
        Layer::tconv(4, c, c, 2, 1), Layer::skip_add(2), Layer::relu(),
        Layer::conv(3, c, 1),        Layer::skip_add(0),
    };
    return s;
}

DenoiserParams DenoiserParams::zeros(const NetSpec& spec) {
    DenoiserParams p;
    std::size_t off = 0;
    for (const Layer& l : spec.layers) {
        p.offsets.push_back(off);
        off += l.param_count();
    }
    p.values.assign(off, 0.0);
    return p;
}

bool DenoiserParams::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

DenoiserParams init_params(const NetSpec& spec, std::uint64_t seed, bool zero_head) {
    DenoiserParams p = DenoiserParams::zeros(spec);
    Rng rng(seed);
    std::size_t head = spec.layers.size();
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (spec.layers[i].param_count()) head = i;
    }
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& l = spec.layers[i];
        if (!l.param_count()) continue;
        const std::size_t nw = l.param_count() - static_cast<std::size_t>(l.out_ch);
        if (zero_head && i == head) continue;
        double fan_in = static_cast<double>(l.in_ch) * l.kernel * l.kernel;
        if (l.kind == LayerKind::tconv) fan_in /= static_cast<double>(l.stride) * l.stride;
        std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
        for (std::size_t k = 0; k < nw; ++k) p.values[p.offsets[i] + k] = u(rng);
    }
    return p;
}

// =============================================================================
// Forward / backward
// =============================================================================

namespace {

using Tape = std::vector<std::vector<double>>;

void conv_forward(const Layer& l, const double* w, const Shape& is, const std::vector<double>& in, const Shape& os,
                  std::vector<double>& out) {
    const double* b = w + static_cast<std::size_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
    const int plane = os.height * os.width;
    for (int o = 0; o < l.out_ch; ++o) std::fill(out.begin() + o * plane, out.begin() + (o + 1) * plane, b[o]);
    for (int o = 0; o < l.out_ch; ++o) {
        double* op = out.data() + static_cast<std::size_t>(o) * plane;
        for (int i = 0; i < l.in_ch; ++i) {
            const double* ip = in.data() + static_cast<std::size_t>(i) * is.height * is.width;
            for (int ky = 0; ky < l.kernel; ++ky) {
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const double wv = w[((static_cast<std::size_t>(o) * l.in_ch + i) * l.kernel + ky) * l.kernel + kx];
                    for (int y = 0; y < os.height; ++y) {
                        const int iy = y * l.stride - l.pad + ky;
                        if (iy < 0 || iy >= is.height) continue;
                        for (int x = 0; x < os.width; ++x) {
                            const int ix = x * l.stride - l.pad + kx;
                            if (ix < 0 || ix >= is.width) continue;
                            op[y * os.width + x] += wv * ip[iy * is.width + ix];
                        }
                    }
                }
            }
        }
    }
}

void conv_backward(const Layer& l, const double* w, const Shape& is, const std::vector<double>& in, const Shape& os,
                   const std::vector<double>& gout, std::vector<double>& gin, double* gw) {
    double* gb = gw + static_cast<std::size_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
    const int plane = os.height * os.width;
    for (int o = 0; o < l.out_ch; ++o) {
        const double* gp = gout.data() + static_cast<std::size_t>(o) * plane;
        for (int k = 0; k < plane; ++k) gb[o] += gp[k];
        for (int i = 0; i < l.in_ch; ++i) {
            const double* ip = in.data() + static_cast<std::size_t>(i) * is.height * is.width;
            double* gi = gin.data() + static_cast<std::size_t>(i) * is.height * is.width;
            for (int ky = 0; ky < l.kernel; ++ky) {
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const std::size_t wi = ((static_cast<std::size_t>(o) * l.in_ch + i) * l.kernel + ky) * l.kernel + kx;
                    const double wv = w[wi];
                    double acc = 0.0;
                    for (int y = 0; y < os.height; ++y) {
                        const int iy = y * l.stride - l.pad + ky;
                        if (iy < 0 || iy >= is.height) continue;
                        for (int x = 0; x < os.width; ++x) {
                            const int ix = x * l.stride - l.pad + kx;
                            if (ix < 0 || ix >= is.width) continue;
                            const double g = gp[y * os.width + x];
                            acc += g * ip[iy * is.width + ix];
                            gi[iy * is.width + ix] += wv * g;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
}

void tconv_forward(const Layer& l, const double* w, const Shape& is, const std::vector<double>& in, const Shape& os,
                   std::vector<double>& out) {
    const double* b = w + static_cast<std::size_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
    const int plane = os.height * os.width;
    for (int o = 0; o < l.out_ch; ++o) std::fill(out.begin() + o * plane, out.begin() + (o + 1) * plane, b[o]);
    for (int i = 0; i < l.in_ch; ++i) {
        const double* ip = in.data() + static_cast<std::size_t>(i) * is.height * is.width;
        for (int o = 0; o < l.out_ch; ++o) {
            double* op = out.data() + static_cast<std::size_t>(o) * plane;
            for (int ky = 0; ky < l.kernel; ++ky) {
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const double wv = w[((static_cast<std::size_t>(i) * l.out_ch + o) * l.kernel + ky) * l.kernel + kx];
                    for (int y = 0; y < is.height; ++y) {
                        const int oy = y * l.stride - l.pad + ky;
                        if (oy < 0 || oy >= os.height) continue;
                        for (int x = 0; x < is.width; ++x) {
                            const int ox = x * l.stride - l.pad + kx;
                            if (ox < 0 || ox >= os.width) continue;
                            op[oy * os.width + ox] += wv * ip[y * is.width + x];
                        }
                    }
                }
            }
        }
    }
}

void tconv_backward(const Layer& l, const double* w, const Shape& is, const std::vector<double>& in, const Shape& os,
                    const std::vector<double>& gout, std::vector<double>& gin, double* gw) {
    double* gb = gw + static_cast<std::size_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
    const int plane = os.height * os.width;
    for (int o = 0; o < l.out_ch; ++o) {
        for (int k = 0; k < plane; ++k) gb[o] += gout[static_cast<std::size_t>(o) * plane + k];
    }
    for (int i = 0; i < l.in_ch; ++i) {
        const double* ip = in.data() + static_cast<std::size_t>(i) * is.height * is.width;
        double* gi = gin.data() + static_cast<std::size_t>(i) * is.height * is.width;
        for (int o = 0; o < l.out_ch; ++o) {
            const double* gp = gout.data() + static_cast<std::size_t>(o) * plane;
            for (int ky = 0; ky < l.kernel; ++ky) {
                for (int kx = 0; kx < l.kernel; ++kx) {
                    const std::size_t wi = ((static_cast<std::size_t>(i) * l.out_ch + o) * l.kernel + ky) * l.kernel + kx;
                    const double wv = w[wi];
                    double acc = 0.0;
                    for (int y = 0; y < is.height; ++y) {
                        const int oy = y * l.stride - l.pad + ky;
                        if (oy < 0 || oy >= os.height) continue;
                        for (int x = 0; x < is.width; ++x) {
                            const int ox = x * l.stride - l.pad + kx;
                            if (ox < 0 || ox >= os.width) continue;
                            const double g = gp[oy * os.width + ox];
                            acc += g * ip[y * is.width + x];
                            gi[y * is.width + x] += wv * g;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
}

void check_params(const DenoiserParams& params, const NetSpec& spec) {
    if (params.values.size() != spec.param_count() || params.offsets.size() != spec.layers.size()) {
        throw std::invalid_argument("DenoiserParams do not match NetSpec");
    }
}

Tape run_forward(const DenoiserParams& params, const NetSpec& spec, const std::vector<Shape>& shapes,
                 const ImagePatch& input) {
    Tape act(spec.layers.size() + 1);
    act[0] = input.pixels;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& l = spec.layers[i];
        std::vector<double>& out = act[i + 1];
        out.assign(shapes[i + 1].size(), 0.0);
        const double* w = params.values.data() + params.offsets[i];
        switch (l.kind) {
            case LayerKind::conv: conv_forward(l, w, shapes[i], act[i], shapes[i + 1], out); break;
            case LayerKind::tconv: tconv_forward(l, w, shapes[i], act[i], shapes[i + 1], out); break;
            case LayerKind::relu:
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = act[i][k] > 0.0 ? act[i][k] : 0.0;
                break;
            case LayerKind::skip_add: {
                const auto& src = act[static_cast<std::size_t>(l.from)];
                for (std::size_t k = 0; k < out.size(); ++k) out[k] = act[i][k] + src[k];
                break;
            }
        }
    }
    return act;
}

void run_backward(const DenoiserParams& params, const NetSpec& spec, const std::vector<Shape>& shapes, const Tape& act,
                  const std::vector<double>& grad_out, std::vector<double>& grad) {
    const std::size_t n = spec.layers.size();
    Tape g(n + 1);
    for (std::size_t i = 0; i <= n; ++i) g[i].assign(shapes[i].size(), 0.0);
    g[n] = grad_out;
    for (std::size_t i = n; i-- > 0;) {
        const Layer& l = spec.layers[i];
        const double* w = params.values.data() + params.offsets[i];
        double* gw = grad.data() + params.offsets[i];
        switch (l.kind) {
            case LayerKind::conv: conv_backward(l, w, shapes[i], act[i], shapes[i + 1], g[i + 1], g[i], gw); break;
            case LayerKind::tconv: tconv_backward(l, w, shapes[i], act[i], shapes[i + 1], g[i + 1], g[i], gw); break;
            case LayerKind::relu:
                for (std::size_t k = 0; k < g[i].size(); ++k) g[i][k] += act[i][k] > 0.0 ? g[i + 1][k] : 0.0;
                break;
            case LayerKind::skip_add: {
                auto& src = g[static_cast<std::size_t>(l.from)];
                for (std::size_t k = 0; k < g[i].size(); ++k) {
                    g[i][k] += g[i + 1][k];
                    src[k] += g[i + 1][k];
                }
                break;
            }
        }
    }
}

std::vector<Shape> batch_shapes(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch) {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    check_params(params, spec);
    for (const auto& p : batch) {
        if (!p.same_shape(batch.front())) throw std::invalid_argument("forward: patches differ in shape");
    }
    auto shapes = spec.shapes(batch.front().height, batch.front().width);
    if (!(shapes.back() == shapes.front())) throw std::invalid_argument("forward: output shape differs from input");
    return shapes;
}

}  // namespace

int receptive_field(const NetSpec& spec, int height, int width) {
    const auto shapes = spec.shapes(height, width);
    if (!(shapes.back() == shapes.front())) throw std::invalid_argument("receptive_field: output shape differs from input");
    DenoiserParams ones = DenoiserParams::zeros(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& l = spec.layers[i];
        const std::size_t nw = l.param_count() ? l.param_count() - static_cast<std::size_t>(l.out_ch) : 0;
        std::fill_n(ones.values.begin() + static_cast<std::ptrdiff_t>(ones.offsets[i]), nw, 1.0);
    }
    // Positive weights keep every activation nonnegative, so the support of
    // the response to an impulse is exactly the influence region.
    ImagePatch impulse(height, width);
    impulse.at(height / 2, width / 2) = 1.0;
    const Tape act = run_forward(ones, spec, shapes, impulse);
    const auto& out = act.back();
    int lo = width, hi = -1;
    for (int c = 0; c < width; ++c) {
        if (out[static_cast<std::size_t>(height / 2) * width + c] != 0.0) {
            lo = std::min(lo, c);
            hi = std::max(hi, c);
        }
    }
    return hi < lo ? 0 : hi - lo + 1;
}

std::vector<ImagePatch> forward(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch) {
    const auto shapes = batch_shapes(params, spec, batch);
    std::vector<ImagePatch> out;
    out.reserve(batch.size());
    for (const auto& p : batch) out.emplace_back(p.height, p.width, std::move(run_forward(params, spec, shapes, p).back()));
    return out;
}

ImagePatch forward(const DenoiserParams& params, const NetSpec& spec, const ImagePatch& patch) {
    return forward(params, spec, std::vector<ImagePatch>{patch}).front();
}

std::vector<bool> relu_pattern(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch) {
    const auto shapes = batch_shapes(params, spec, batch);
    std::vector<bool> pattern;
    for (const auto& p : batch) {
        const Tape act = run_forward(params, spec, shapes, p);
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            if (spec.layers[i].kind != LayerKind::relu) continue;
            for (double v : act[i]) pattern.push_back(v > 0.0);
        }
    }
    return pattern;
}

void backward(const DenoiserParams& params, const NetSpec& spec, const std::vector<ImagePatch>& batch,
              const std::vector<ImagePatch>& grad_out, std::vector<double>& grad) {
    const auto shapes = batch_shapes(params, spec, batch);
    if (grad_out.size() != batch.size()) throw std::invalid_argument("backward: gradient count mismatch");
    grad.resize(params.values.size(), 0.0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        run_backward(params, spec, shapes, run_forward(params, spec, shapes, batch[b]), grad_out[b].pixels, grad);
    }
}

// =============================================================================
// Loss
// =============================================================================

std::string to_string(PenaltyMode mode) {
    return mode == PenaltyMode::exact_minibatch_w1 ? "exact_minibatch_w1" : "critic_wgan_gp";
}

PenaltyMode parse_penalty_mode(const std::string& name) {
    if (name == "exact_minibatch_w1") return PenaltyMode::exact_minibatch_w1;
    if (name == "critic_wgan_gp") return PenaltyMode::critic_wgan_gp;
    throw std::invalid_argument("unknown penalty mode '" + name + "'");
}

void CriticSpec::validate() const {
    if (hidden < 0) throw std::invalid_argument("CriticSpec: hidden must be >= 0");
    if (!(gp_weight > 0.0)) throw std::invalid_argument("CriticSpec: gp_weight must be > 0");
    if (critic_steps < 1) throw std::invalid_argument("CriticSpec: critic_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("CriticSpec: learning_rate must be > 0");
    if (lipschitz_bound < 0.0) throw std::invalid_argument("CriticSpec: lipschitz_bound must be >= 0");
    if (lipschitz_bound > 0.0 && hidden != 0) throw std::invalid_argument("CriticSpec: projection needs a linear critic");
}

void LossSpec::validate() const {
    if (!(beta >= 1.0)) throw std::invalid_argument("LossSpec: beta must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("LossSpec: lambda must be >= 0");
    if (!(fidelity_weight >= 0.0)) throw std::invalid_argument("LossSpec: fidelity_weight must be >= 0");
    if (penalty_mode == PenaltyMode::critic_wgan_gp) critic.validate();
}

namespace {

void check_batches(const std::vector<ImagePatch>& noisy, const std::vector<ImagePatch>& clean) {
    if (noisy.empty() || noisy.size() != clean.size()) throw std::invalid_argument("loss: batch sizes differ or are empty");
    for (const auto& p : clean) {
        if (!p.same_shape(noisy.front())) throw std::invalid_argument("loss: clean patch shape differs");
    }
}

EmpiricalMeasure as_measure(const std::vector<std::vector<double>>& rows) {
    std::vector<double> pts;
    pts.reserve(rows.size() * rows.front().size());
    for (const auto& r : rows) pts.insert(pts.end(), r.begin(), r.end());
    return EmpiricalMeasure::uniform(std::move(pts), rows.front().size());
}

// Adds w * beta ||d||^(beta-1) d/||d|| for d = z - y into g; returns ||d||^beta.
double fidelity_term(std::span<const double> z, std::span<const double> y, double beta, double w, std::vector<double>* g) {
    const double n = euclidean_distance(z, y);
    if (g && n > 0.0) {
        const double scale = w * beta * std::pow(n, beta - 1.0) / n;
        for (std::size_t k = 0; k < z.size(); ++k) (*g)[k] += scale * (z[k] - y[k]);
    }
    return std::pow(n, beta);
}

}  // namespace

LossResult loss_and_grad(const DenoiserParams& params, const NetSpec& spec, const LossSpec& loss,
                         const std::vector<ImagePatch>& noisy_batch, const std::vector<ImagePatch>& clean_batch) {
    loss.validate();
    check_batches(noisy_batch, clean_batch);
    const auto shapes = batch_shapes(params, spec, noisy_batch);
    const std::size_t batch = noisy_batch.size();
    const double inv_b = 1.0 / static_cast<double>(batch);

    std::vector<Tape> tapes;
    std::vector<std::vector<double>> z, x;
    for (std::size_t i = 0; i < batch; ++i) {
        tapes.push_back(run_forward(params, spec, shapes, noisy_batch[i]));
        z.push_back(tapes.back().back());
        x.push_back(clean_batch[i].pixels);
    }

    LossResult r;
    std::vector<std::vector<double>> gz(batch, std::vector<double>(z.front().size(), 0.0));
    for (std::size_t i = 0; i < batch; ++i) {
        r.fidelity += inv_b * fidelity_term(z[i], noisy_batch[i].pixels, loss.beta, loss.fidelity_weight * inv_b, &gz[i]);
    }

    const LpSolution lp = kantorovich_lp(as_measure(z), as_measure(x), CostSpec{1.0});
    r.w1 = lp.value;
    r.plan = lp.coupling.plan;
    if (loss.lambda > 0.0) {
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < batch; ++j) {
                const double pij = r.plan(i, j);
                if (pij == 0.0) continue;
                const double d = euclidean_distance(z[i], x[j]);
                if (d == 0.0) continue;
                const double s = loss.lambda * pij / d;
                for (std::size_t k = 0; k < z[i].size(); ++k) gz[i][k] += s * (z[i][k] - x[j][k]);
            }
        }
    }
    r.loss = loss.fidelity_weight * r.fidelity + loss.lambda * r.w1;

    r.grad.assign(params.values.size(), 0.0);
    for (std::size_t i = 0; i < batch; ++i) run_backward(params, spec, shapes, tapes[i], gz[i], r.grad);
    return r;
}

double loss_with_plan(const DenoiserParams& params, const NetSpec& spec, const LossSpec& loss,
                      const std::vector<ImagePatch>& noisy_batch, const std::vector<ImagePatch>& clean_batch,
                      const Matrix& plan) {
    check_batches(noisy_batch, clean_batch);
    const std::size_t batch = noisy_batch.size();
    if (plan.rows() != batch || plan.cols() != batch) throw std::invalid_argument("loss_with_plan: plan shape mismatch");
    const auto z = forward(params, spec, noisy_batch);
    double fid = 0.0, w1 = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        fid += fidelity_term(z[i].pixels, noisy_batch[i].pixels, loss.beta, 0.0, nullptr) / static_cast<double>(batch);
        for (std::size_t j = 0; j < batch; ++j) {
            if (plan(i, j) != 0.0) w1 += plan(i, j) * euclidean_distance(z[i].pixels, clean_batch[j].pixels);
        }
    }
    return loss.fidelity_weight * fid + loss.lambda * w1;
}

// =============================================================================
// Critic
// =============================================================================

CriticParams CriticParams::init(int input_dim, int hidden, std::uint64_t seed) {
    if (input_dim < 1 || hidden < 0) throw std::invalid_argument("CriticParams: bad dimensions");
    CriticParams c;
    c.input_dim = input_dim;
    c.hidden = hidden;
    Rng rng(seed);
    if (hidden == 0) {
        c.values.assign(static_cast<std::size_t>(input_dim) + 1, 0.0);
        std::uniform_real_distribution<double> u(-1.0 / std::sqrt(input_dim), 1.0 / std::sqrt(input_dim));
        for (int d = 0; d < input_dim; ++d) c.values[static_cast<std::size_t>(d)] = u(rng);
        return c;
    }
    const std::size_t h = static_cast<std::size_t>(hidden), dim = static_cast<std::size_t>(input_dim);
    c.values.assign(h * dim + h + h + 1, 0.0);
    std::uniform_real_distribution<double> u1(-std::sqrt(6.0 / input_dim), std::sqrt(6.0 / input_dim));
    std::uniform_real_distribution<double> u2(-std::sqrt(6.0 / hidden), std::sqrt(6.0 / hidden));
    for (std::size_t k = 0; k < h * dim; ++k) c.values[k] = u1(rng);
    for (std::size_t k = 0; k < h; ++k) c.values[h * dim + h + k] = u2(rng);
    return c;
}

namespace {

// Layout views of CriticParams::values.
struct CriticView {
    std::size_t dim, h;
    std::size_t w1() const { return 0; }
    std::size_t b1() const { return h * dim; }
    std::size_t w2() const { return h * dim + h; }
    std::size_t b2() const { return h * dim + 2 * h; }
};

std::vector<double> hidden_pre(const CriticParams& c, std::span<const double> x) {
    const CriticView v{static_cast<std::size_t>(c.input_dim), static_cast<std::size_t>(c.hidden)};
    std::vector<double> a(v.h);
    for (std::size_t k = 0; k < v.h; ++k) {
        double s = c.values[v.b1() + k];
        for (std::size_t d = 0; d < v.dim; ++d) s += c.values[v.w1() + k * v.dim + d] * x[d];
        a[k] = s;
    }
    return a;
}

}  // namespace

double CriticParams::operator()(std::span<const double> x) const {
    if (x.size() != static_cast<std::size_t>(input_dim)) throw std::invalid_argument("critic: input dimension mismatch");
    const std::size_t dim = static_cast<std::size_t>(input_dim);
    if (hidden == 0) {
        double s = values[dim];
        for (std::size_t d = 0; d < dim; ++d) s += values[d] * x[d];
        return s;
    }
    const CriticView v{dim, static_cast<std::size_t>(hidden)};
    const auto a = hidden_pre(*this, x);
    double s = values[v.b2()];
    for (std::size_t k = 0; k < v.h; ++k) s += values[v.w2() + k] * std::max(a[k], 0.0);
    return s;
}

std::vector<double> CriticParams::input_gradient(std::span<const double> x) const {
    const std::size_t dim = static_cast<std::size_t>(input_dim);
    if (hidden == 0) return {values.begin(), values.begin() + static_cast<std::ptrdiff_t>(dim)};
    const CriticView v{dim, static_cast<std::size_t>(hidden)};
    const auto a = hidden_pre(*this, x);
    std::vector<double> g(dim, 0.0);
    for (std::size_t k = 0; k < v.h; ++k) {
        if (a[k] <= 0.0) continue;
        const double m = values[v.w2() + k];
        for (std::size_t d = 0; d < dim; ++d) g[d] += m * values[v.w1() + k * dim + d];
    }
    return g;
}

void CriticParams::project_lipschitz(double bound) {
    if (hidden != 0) throw std::invalid_argument("project_lipschitz: linear critics only");
    double n = 0.0;
    for (int d = 0; d < input_dim; ++d) n += values[static_cast<std::size_t>(d)] * values[static_cast<std::size_t>(d)];
    n = std::sqrt(n);
    if (n <= bound) return;
    double scale = bound / n;
    for (;;) {
        double m = 0.0;
        for (int d = 0; d < input_dim; ++d) m += std::pow(values[static_cast<std::size_t>(d)] * scale, 2);
        if (std::sqrt(m) <= bound) break;
        scale = std::nextafter(scale, 0.0);
    }
    for (int d = 0; d < input_dim; ++d) values[static_cast<std::size_t>(d)] *= scale;
}

namespace {

// Accumulates scale * d D(x) / d params.
void critic_param_grad(const CriticParams& c, std::span<const double> x, double scale, std::vector<double>& g) {
    const std::size_t dim = static_cast<std::size_t>(c.input_dim);
    if (c.hidden == 0) {
        for (std::size_t d = 0; d < dim; ++d) g[d] += scale * x[d];
        g[dim] += scale;
        return;
    }
    const CriticView v{dim, static_cast<std::size_t>(c.hidden)};
    const auto a = hidden_pre(c, x);
    for (std::size_t k = 0; k < v.h; ++k) {
        g[v.w2() + k] += scale * std::max(a[k], 0.0);
        if (a[k] <= 0.0) continue;
        const double m = scale * c.values[v.w2() + k];
        g[v.b1() + k] += m;
        for (std::size_t d = 0; d < dim; ++d) g[v.w1() + k * dim + d] += m * x[d];
    }
    g[v.b2()] += scale;
}

// Accumulates scale * d (||grad_x D|| - 1)^2 / d params; returns the penalty.
double penalty_param_grad(const CriticParams& c, std::span<const double> x, double scale, std::vector<double>& g) {
    const std::size_t dim = static_cast<std::size_t>(c.input_dim);
    const auto gx = c.input_gradient(x);
    double n = 0.0;
    for (double v : gx) n += v * v;
    n = std::sqrt(n);
    const double pen = (n - 1.0) * (n - 1.0);
    if (n == 0.0) return pen;
    std::vector<double> u(dim);
    for (std::size_t d = 0; d < dim; ++d) u[d] = 2.0 * (n - 1.0) * gx[d] / n;
    if (c.hidden == 0) {
        for (std::size_t d = 0; d < dim; ++d) g[d] += scale * u[d];
        return pen;
    }
    const CriticView v{dim, static_cast<std::size_t>(c.hidden)};
    const auto a = hidden_pre(c, x);
    for (std::size_t k = 0; k < v.h; ++k) {
        if (a[k] <= 0.0) continue;
        const double w2 = c.values[v.w2() + k];
        double wu = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            g[v.w1() + k * dim + d] += scale * w2 * u[d];
            wu += c.values[v.w1() + k * dim + d] * u[d];
        }
        g[v.w2() + k] += scale * wu;
    }
    return pen;
}

}  // namespace

std::pair<CriticLosses, CriticGrads> critic_loss_and_grads(const CriticParams& critic, const Matrix& real,
                                                           const Matrix& fake, double gp_weight, std::uint64_t seed) {
    if (real.rows() == 0 || real.rows() != fake.rows() || real.cols() != fake.cols() ||
        real.cols() != static_cast<std::size_t>(critic.input_dim)) {
        throw std::invalid_argument("critic_loss_and_grads: batch shapes mismatch");
    }
    const std::size_t batch = real.rows(), dim = real.cols();
    const double inv_b = 1.0 / static_cast<double>(batch);
    CriticLosses l;
    CriticGrads g;
    g.critic.assign(critic.values.size(), 0.0);
    g.fake.assign(batch * dim, 0.0);
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> interp(dim);
    for (std::size_t i = 0; i < batch; ++i) {
        const double dr = critic(real.row(i)), df = critic(fake.row(i));
        l.w1_estimate += inv_b * (dr - df);
        critic_param_grad(critic, real.row(i), -inv_b, g.critic);
        critic_param_grad(critic, fake.row(i), inv_b, g.critic);
        const auto gf = critic.input_gradient(fake.row(i));
        for (std::size_t d = 0; d < dim; ++d) g.fake[i * dim + d] = -inv_b * gf[d];

        const double t = unit(rng);
        for (std::size_t d = 0; d < dim; ++d) interp[d] = t * real(i, d) + (1.0 - t) * fake(i, d);
        l.penalty += inv_b * penalty_param_grad(critic, interp, gp_weight * inv_b, g.critic);
        l.generator -= inv_b * df;
    }
    l.critic = -l.w1_estimate + gp_weight * l.penalty;
    if (!std::isfinite(l.critic) || !std::isfinite(l.generator)) {
        throw DivergenceError("critic loss is not finite (critic " + std::to_string(l.critic) + ", penalty " +
                              std::to_string(l.penalty) + ")");
    }
    return {l, g};
}

double fit_critic(CriticParams& critic, const Matrix& real, const Matrix& fake, const CriticSpec& spec, int steps,
                  std::uint64_t seed) {
    spec.validate();
    if (steps < 1) throw std::invalid_argument("fit_critic: steps must be positive");
    OptimizerState state(critic.values.size(), spec.learning_rate);
    state.decay_epoch = 0;
    const int tail = std::max(1, steps / 10);
    double estimate = 0.0;
    for (int s = 0; s < steps; ++s) {
        auto [losses, grads] = critic_loss_and_grads(critic, real, fake, spec.gp_weight, derive_seed(seed, static_cast<std::uint64_t>(s)));
        rmsprop_step(state, critic.values, grads.critic);
        if (spec.lipschitz_bound > 0.0) critic.project_lipschitz(spec.lipschitz_bound);
        if (s >= steps - tail) {
            double e = 0.0;
            for (std::size_t i = 0; i < real.rows(); ++i) e += critic(real.row(i)) - critic(fake.row(i));
            estimate += e / static_cast<double>(real.rows()) / tail;
        }
    }
    return estimate;
}

// =============================================================================
// Optimization
// =============================================================================

double OptimizerState::effective_learning_rate() const {
    return decay_epoch > 0 && epoch >= decay_epoch ? learning_rate * decay_factor : learning_rate;
}

void rmsprop_step(OptimizerState& state, std::vector<double>& params, const std::vector<double>& grad) {
    if (grad.size() != params.size()) throw std::invalid_argument("rmsprop_step: gradient size mismatch");
    if (state.accumulator.size() != params.size()) state.accumulator.assign(params.size(), 0.0);
    const double lr = state.effective_learning_rate();
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!std::isfinite(grad[k])) throw DivergenceError("rmsprop_step: non-finite gradient at index " + std::to_string(k));
        double& acc = state.accumulator[k];
        acc = state.rho * acc + (1.0 - state.rho) * grad[k] * grad[k];
        params[k] -= lr * grad[k] / (std::sqrt(acc) + state.eps);
        if (!std::isfinite(params[k])) {
            throw DivergenceError("rmsprop_step: parameter " + std::to_string(k) + " became non-finite");
        }
    }
}

namespace {

double validation_psnr(const DenoiserParams& params, const NetSpec& spec, const ValidationSet& val) {
    if (val.noisy.empty()) return 0.0;
    auto out = forward(params, spec, val.noisy);
    for (auto& p : out) p = p.clipped();
    return psnr(out, val.clean);
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

Matrix rows_of(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t d = 0; d < rows[i].size(); ++d) m(i, d) = rows[i][d];
    }
    return m;
}

void check_training_data(const NetSpec& spec, const TrainOptions& opt, const std::vector<ImagePatch>& a,
                         const std::vector<ImagePatch>& b) {
    if (opt.epochs < 1 || opt.batch_size < 1) throw std::invalid_argument("train: epochs and batch_size must be positive");
    if (!(opt.learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    const std::size_t need = 2 * static_cast<std::size_t>(opt.batch_size);
    if (a.size() < need || b.size() < need) throw std::invalid_argument("train: each domain needs at least 2 batches of patches");
    spec.validate(a.front().height, a.front().width);
}

OptimizerState make_optimizer(std::size_t n, const TrainOptions& opt) {
    OptimizerState s(n, opt.learning_rate);
    s.rho = opt.rho;
    s.decay_epoch = opt.decay_epoch;
    s.decay_factor = opt.decay_factor;
    return s;
}

void check_divergence(double loss, const TrainOptions& opt, EpochRecord& rec, std::vector<EpochRecord>& curve) {
    if (std::isfinite(loss) && loss <= opt.divergence_bound) return;
    curve.push_back(rec);
    throw TrainingDiverged("training diverged at epoch " + std::to_string(rec.epoch) + " (loss " + std::to_string(loss) + ")",
                           curve);
}

}  // namespace

TrainResult train(const NetSpec& spec, const LossSpec& loss, const TrainOptions& opt,
                  const std::vector<ImagePatch>& noisy, const std::vector<ImagePatch>& clean,
                  const ValidationSet& validation) {
    loss.validate();
    check_training_data(spec, opt, noisy, clean);
    const bool critic_mode = loss.penalty_mode == PenaltyMode::critic_wgan_gp;
    const std::size_t batch = static_cast<std::size_t>(opt.batch_size);
    const std::size_t batches = std::min(noisy.size(), clean.size()) / batch;
    const auto shapes = spec.shapes(noisy.front().height, noisy.front().width);

    TrainResult result{init_params(spec, derive_seed(opt.seed, stream::kInit)), {}};
    OptimizerState state = make_optimizer(result.params.values.size(), opt);
    Rng rng(derive_seed(opt.seed, stream::kBatches));

    CriticParams critic;
    OptimizerState critic_state;
    if (critic_mode) {
        critic = CriticParams::init(static_cast<int>(noisy.front().size()), loss.critic.hidden,
                                    derive_seed(opt.seed, stream::kCritic));
        critic_state = OptimizerState(critic.values.size(), loss.critic.learning_rate);
        critic_state.decay_epoch = 0;
    }
    std::uint64_t critic_calls = 0;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        state.epoch = epoch;
        const auto pn = permutation(noisy.size(), rng);
        const auto pc = permutation(clean.size(), rng);
        EpochRecord rec{epoch, 0.0, 0.0, 0.0, 0.0, state.effective_learning_rate()};
        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<ImagePatch> yb, xb;
            for (std::size_t i = 0; i < batch; ++i) {
                yb.push_back(noisy[pn[b * batch + i]]);
                xb.push_back(clean[pc[b * batch + i]]);
            }
            if (!critic_mode) {
                LossResult r = loss_and_grad(result.params, spec, loss, yb, xb);
                check_divergence(r.loss, opt, rec, result.curve);
                rmsprop_step(state, result.params.values, r.grad);
                rec.loss += r.loss / static_cast<double>(batches);
                rec.fidelity += r.fidelity / static_cast<double>(batches);
                rec.w1 += r.w1 / static_cast<double>(batches);
                continue;
            }
            std::vector<Tape> tapes;
            std::vector<std::vector<double>> z, x;
            for (std::size_t i = 0; i < batch; ++i) {
                tapes.push_back(run_forward(result.params, spec, shapes, yb[i]));
                z.push_back(tapes.back().back());
                x.push_back(xb[i].pixels);
            }
            const Matrix real = rows_of(x), fake = rows_of(z);
            for (int s = 0; s < loss.critic.critic_steps; ++s) {
                auto [cl, cg] = critic_loss_and_grads(critic, real, fake, loss.critic.gp_weight,
                                                      derive_seed(opt.seed ^ stream::kCritic, critic_calls++));
                rmsprop_step(critic_state, critic.values, cg.critic);
                if (loss.critic.lipschitz_bound > 0.0) critic.project_lipschitz(loss.critic.lipschitz_bound);
            }
            auto [cl, cg] = critic_loss_and_grads(critic, real, fake, loss.critic.gp_weight,
                                                  derive_seed(opt.seed ^ stream::kCritic, critic_calls++));
            std::vector<double> grad(result.params.values.size(), 0.0);
            double fid = 0.0;
            for (std::size_t i = 0; i < batch; ++i) {
                std::vector<double> gz(z[i].size(), 0.0);
                fid += fidelity_term(z[i], yb[i].pixels, loss.beta, loss.fidelity_weight / static_cast<double>(batch), &gz) /
                       static_cast<double>(batch);
                for (std::size_t d = 0; d < gz.size(); ++d) gz[d] += loss.lambda * cg.fake[i * gz.size() + d];
                run_backward(result.params, spec, shapes, tapes[i], gz, grad);
            }
            const double total = loss.fidelity_weight * fid + loss.lambda * cl.generator;
            check_divergence(std::abs(total), opt, rec, result.curve);
            rmsprop_step(state, result.params.values, grad);
            rec.loss += total / static_cast<double>(batches);
            rec.fidelity += fid / static_cast<double>(batches);
            rec.w1 += cl.w1_estimate / static_cast<double>(batches);
        }
        rec.val_psnr = validation_psnr(result.params, spec, validation);
        result.curve.push_back(rec);
    }
    return result;
}

TrainResult train_supervised(const NetSpec& spec, SupervisedNorm norm, const TrainOptions& opt,
                             const std::vector<ImagePatch>& inputs, const std::vector<ImagePatch>& targets,
                             const ValidationSet& validation) {
    check_training_data(spec, opt, inputs, targets);
    if (inputs.size() != targets.size()) throw std::invalid_argument("train_supervised: inputs and targets are not paired");
    const std::size_t batch = static_cast<std::size_t>(opt.batch_size);
    const std::size_t batches = inputs.size() / batch;
    const auto shapes = spec.shapes(inputs.front().height, inputs.front().width);

    TrainResult result{init_params(spec, derive_seed(opt.seed, stream::kInit)), {}};
    OptimizerState state = make_optimizer(result.params.values.size(), opt);
    Rng rng(derive_seed(opt.seed, stream::kBatches));
    const double inv_b = 1.0 / static_cast<double>(batch);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        state.epoch = epoch;
        const auto perm = permutation(inputs.size(), rng);
        EpochRecord rec{epoch, 0.0, 0.0, 0.0, 0.0, state.effective_learning_rate()};
        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<double> grad(result.params.values.size(), 0.0);
            double l = 0.0, fid = 0.0;
            for (std::size_t i = 0; i < batch; ++i) {
                const std::size_t k = perm[b * batch + i];
                const Tape tape = run_forward(result.params, spec, shapes, inputs[k]);
                const auto& z = tape.back();
                const auto& t = targets[k].pixels;
                std::vector<double> gz(z.size());
                for (std::size_t d = 0; d < z.size(); ++d) {
                    const double e = z[d] - t[d];
                    if (norm == SupervisedNorm::l1) {
                        l += inv_b * std::abs(e);
                        gz[d] = inv_b * (e > 0.0 ? 1.0 : e < 0.0 ? -1.0 : 0.0);
                    } else {
                        l += inv_b * e * e;
                        gz[d] = inv_b * 2.0 * e;
                    }
                }
                fid += inv_b * euclidean_distance(z, inputs[k].pixels);
                run_backward(result.params, spec, shapes, tape, gz, grad);
            }
            check_divergence(l, opt, rec, result.curve);
            rmsprop_step(state, result.params.values, grad);
            rec.loss += l / static_cast<double>(batches);
            rec.fidelity += fid / static_cast<double>(batches);
        }
        rec.val_psnr = validation_psnr(result.params, spec, validation);
        result.curve.push_back(rec);
    }
    return result;
}

// =============================================================================
// Checkpoints
// =============================================================================

void save_checkpoint(const std::filesystem::path& path, const NetSpec& spec, const DenoiserParams& params) {
    check_params(params, spec);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << "OTDENCKPT " << kCheckpointVersion << '\n' << spec.descriptor() << '\n' << params.values.size() << '\n';
    for (double v : params.values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int k = 0; k < 8; ++k) out.put(static_cast<char>((bits >> (8 * k)) & 0xFF));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

std::pair<NetSpec, DenoiserParams> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string magic, descriptor, count_line;
    int version = 0;
    if (!(in >> magic >> version) || magic != "OTDENCKPT") throw std::runtime_error("checkpoint: bad magic");
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    in.ignore(1);
    if (!std::getline(in, descriptor) || !std::getline(in, count_line)) throw std::runtime_error("checkpoint: truncated header");
    NetSpec spec = NetSpec::parse(descriptor);
    DenoiserParams params = DenoiserParams::zeros(spec);
    if (std::stoull(count_line) != params.values.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (double& v : params.values) {
        unsigned char b[8];
        if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated parameters");
        std::uint64_t bits = 0;
        for (int k = 7; k >= 0; --k) bits = (bits << 8) | b[k];
        std::memcpy(&v, &bits, sizeof v);
    }
    return {spec, params};
}

}  // namespace otden
