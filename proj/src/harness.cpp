#include "otden/harness.hpp"

#include "otden/rng.hpp"
#include "otden/theory_checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <sstream>

namespace otden {

ConfigError::ConfigError(const std::string& field, int line, const std::string& what)
    : std::runtime_error(line > 0 ? "config line " + std::to_string(line) + ", field '" + field + "': " + what
                                  : "config field '" + field + "': " + what),
      field_(field),
      line_(line) {}

// =============================================================================
// Config schema
// =============================================================================

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Shortest %g form that reads back to the same double.
std::string fmt_real(double v) {
    char buf[64];
    for (int precision = 6; precision < 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Field {
    std::string key;
    std::string type;
    std::string help;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

// Conversion failures throw std::invalid_argument with a short reason; the
// parser attaches the field and line.
long long to_integer(const std::string& v) {
    std::size_t used = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected an integer, got '" + v + "'");
    }
    if (used != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
    return x;
}

int to_int(const std::string& v) {
    const long long x = to_integer(v);
    if (x < -2147483647LL || x > 2147483647LL) throw std::invalid_argument("integer out of range");
    return static_cast<int>(x);
}

std::size_t to_count(const std::string& v) {
    const long long x = to_integer(v);
    if (x < 0) throw std::invalid_argument("expected a nonnegative integer, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

std::uint64_t to_u64(const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("");
        x = std::stoull(v, &used, 0);
    } catch (const std::exception&) {
        throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
    }
    if (used != v.size()) throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
    return x;
}

double to_real(const std::string& v) {
    auto one = [&](const std::string& s) {
        std::size_t used = 0;
        double x = 0;
        try {
            x = std::stod(s, &used);
        } catch (const std::exception&) {
            throw std::invalid_argument("expected a real number, got '" + v + "'");
        }
        if (used != s.size() || !std::isfinite(x)) throw std::invalid_argument("expected a real number, got '" + v + "'");
        return x;
    };
    const auto slash = v.find('/');
    if (slash == std::string::npos) return one(v);
    const double den = one(trim(v.substr(slash + 1)));
    if (den == 0.0) throw std::invalid_argument("division by zero in '" + v + "'");
    return one(trim(v.substr(0, slash))) / den;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
}

std::string norm_name(SupervisedNorm n) { return n == SupervisedNorm::l1 ? "l1" : "l2"; }

#define OTDEN_INT(key, member, help) \
    Field{key, "int", help, [](TrainConfig& c, const std::string& v) { c.member = to_int(v); }, \
          [](const TrainConfig& c) { return std::to_string(c.member); }}
#define OTDEN_COUNT(key, member, help) \
    Field{key, "count", help, [](TrainConfig& c, const std::string& v) { c.member = to_count(v); }, \
          [](const TrainConfig& c) { return std::to_string(c.member); }}
#define OTDEN_REAL(key, member, help) \
    Field{key, "real", help, [](TrainConfig& c, const std::string& v) { c.member = to_real(v); }, \
          [](const TrainConfig& c) { return fmt_real(c.member); }}

const std::vector<Field>& schema() {
    static const std::vector<Field> fields{
        Field{"seed", "u64", "master seed (mandatory)",
              [](TrainConfig& c, const std::string& v) { c.seed = to_u64(v); },
              [](const TrainConfig& c) { return std::to_string(c.seed); }},
        Field{"scene.kind", "name", "piecewise_constant_shapes | smooth_gradient | sinusoid_texture",
              [](TrainConfig& c, const std::string& v) { c.scene.kind = parse_scene_kind(v); },
              [](const TrainConfig& c) { return to_string(c.scene.kind); }},
        OTDEN_INT("scene.size", scene.size, "scene side in pixels"),
        OTDEN_INT("scene.min_shapes", scene.min_shapes, "fewest shapes per scene"),
        OTDEN_INT("scene.max_shapes", scene.max_shapes, "most shapes per scene"),
        OTDEN_REAL("scene.intensity_lo", scene.intensity_lo, "lowest shape intensity"),
        OTDEN_REAL("scene.intensity_hi", scene.intensity_hi, "highest shape intensity"),
        Field{"noise.kind", "name", "gaussian | poisson | brown_gaussian",
              [](TrainConfig& c, const std::string& v) { c.noise.kind = parse_noise_kind(v); },
              [](const TrainConfig& c) { return to_string(c.noise.kind); }},
        OTDEN_REAL("noise.sigma", noise.sigma, "noise std in [0,1] units, fractions like 25/255 allowed"),
        OTDEN_REAL("noise.lambda_p", noise.lambda_p, "Poisson peak count"),
        OTDEN_INT("noise.kernel_size", noise.kernel_size, "Brown Gaussian kernel width"),
        OTDEN_REAL("noise.kernel_sigma", noise.kernel_sigma, "Brown Gaussian kernel std"),
        Field{"noise.clip", "bool", "clip noisy pixels to [0,1]",
              [](TrainConfig& c, const std::string& v) { c.noise.clip = to_bool(v); },
              [](const TrainConfig& c) { return std::string(c.noise.clip ? "true" : "false"); }},
        OTDEN_INT("net.channels", channels, "width of the default encoder-decoder"),
        Field{"net.descriptor", "text", "layer list overriding net.channels, e.g. 'conv 3 1 8 1 1; relu; ...'",
              [](TrainConfig& c, const std::string& v) { c.net_descriptor = v; },
              [](const TrainConfig& c) { return c.net_descriptor; }},
        OTDEN_REAL("loss.beta", loss.beta, "fidelity exponent"),
        OTDEN_REAL("loss.lambda", loss.lambda, "weight of the W1 term"),
        Field{"loss.penalty_mode", "name", "exact_minibatch_w1 | critic_wgan_gp",
              [](TrainConfig& c, const std::string& v) { c.loss.penalty_mode = parse_penalty_mode(v); },
              [](const TrainConfig& c) { return to_string(c.loss.penalty_mode); }},
        OTDEN_INT("critic.hidden", loss.critic.hidden, "critic hidden units, 0 for linear"),
        OTDEN_REAL("critic.gp_weight", loss.critic.gp_weight, "gradient penalty weight"),
        OTDEN_INT("critic.steps", loss.critic.critic_steps, "critic updates per generator step"),
        OTDEN_REAL("critic.learning_rate", loss.critic.learning_rate, "critic learning rate"),
        OTDEN_INT("train.epochs", train.epochs, "epochs"),
        OTDEN_INT("train.batch_size", train.batch_size, "minibatch size"),
        OTDEN_REAL("train.learning_rate", train.learning_rate, "RMSprop learning rate"),
        OTDEN_INT("train.decay_epoch", train.decay_epoch, "epoch from which the rate is decayed, 0 = never"),
        OTDEN_REAL("train.decay_factor", train.decay_factor, "learning rate multiplier after decay_epoch"),
        OTDEN_REAL("train.rho", train.rho, "RMSprop averaging constant"),
        OTDEN_REAL("train.divergence_bound", train.divergence_bound, "abort when the loss exceeds this"),
        OTDEN_INT("data.patch_size", counts.patch_size, "patch side"),
        OTDEN_INT("data.stride", counts.stride, "patch grid stride"),
        OTDEN_COUNT("data.patches_per_scene", counts.patches_per_scene, "patches drawn from each scene"),
        Field{"data.train_patches", "count", "patches in each training domain",
              [](TrainConfig& c, const std::string& v) { c.counts.clean = c.counts.noisy = to_count(v); },
              [](const TrainConfig& c) { return std::to_string(c.counts.clean); }},
        OTDEN_COUNT("data.validation_patches", validation_patches, "validation pairs"),
        OTDEN_COUNT("data.test_patches", test_patches, "test pairs"),
        OTDEN_COUNT("eval.w1_subsample", w1_subsample, "patches per set for W1, 0 = all"),
        Field{"supervised.norm", "name", "l1 | l2",
              [](TrainConfig& c, const std::string& v) {
                  if (v == "l1") c.supervised_norm = SupervisedNorm::l1;
                  else if (v == "l2") c.supervised_norm = SupervisedNorm::l2;
                  else throw std::invalid_argument("expected l1 or l2, got '" + v + "'");
              },
              [](const TrainConfig& c) { return norm_name(c.supervised_norm); }},
        OTDEN_REAL("baseline.gaussian_sigma", gaussian_filter_sigma, "Gaussian filter std in pixels"),
        OTDEN_INT("baseline.median_size", median_filter_size, "median filter width"),
        Field{"methods", "list", "comma list of " + join(kAllMethods),
              [](TrainConfig& c, const std::string& v) { c.methods = split_list(v); },
              [](const TrainConfig& c) { return join(c.methods); }},
        OTDEN_COUNT("previews", previews, "test patches written as PGM"),
        Field{"output_dir", "path", "parent of the run directories",
              [](TrainConfig& c, const std::string& v) { c.output_dir = v; },
              [](const TrainConfig& c) { return c.output_dir.string(); }},
    };
    return fields;
}

#undef OTDEN_INT
#undef OTDEN_COUNT
#undef OTDEN_REAL

}  // namespace

NetSpec TrainConfig::net() const {
    return net_descriptor.empty() ? NetSpec::default_unet(channels) : NetSpec::parse(net_descriptor);
}

void TrainConfig::validate() const {
    auto check = [](const std::string& field, const std::function<void()>& fn) {
        try {
            fn();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(field, 0, e.what());
        }
    };
    check("scene", [&] { scene.validate(); });
    check("noise", [&] { noise.validate(); });
    check("loss", [&] { loss.validate(); });
    if (counts.patch_size < 2 || counts.patch_size > scene.size) {
        throw ConfigError("data.patch_size", 0, "must lie in [2, scene.size]");
    }
    if (channels < 1) throw ConfigError("net.channels", 0, "must be positive");
    check(net_descriptor.empty() ? "net.channels" : "net.descriptor",
          [&] { net().validate(counts.patch_size, counts.patch_size); });
    if (counts.stride < 1) throw ConfigError("data.stride", 0, "must be positive");
    if (counts.patches_per_scene < 1) throw ConfigError("data.patches_per_scene", 0, "must be positive");
    if (counts.clean < 2) throw ConfigError("data.train_patches", 0, "need at least 2 patches");
    if (test_patches < 1) throw ConfigError("data.test_patches", 0, "must be positive");
    if (train.epochs < 1) throw ConfigError("train.epochs", 0, "must be positive");
    if (train.batch_size < 1 || static_cast<std::size_t>(train.batch_size) > counts.clean) {
        throw ConfigError("train.batch_size", 0, "must lie in [1, data.train_patches]");
    }
    if (!(train.learning_rate > 0.0)) throw ConfigError("train.learning_rate", 0, "must be positive");
    if (train.decay_epoch < 0) throw ConfigError("train.decay_epoch", 0, "must be nonnegative");
    if (!(train.decay_factor > 0.0)) throw ConfigError("train.decay_factor", 0, "must be positive");
    if (!(train.rho > 0.0 && train.rho < 1.0)) throw ConfigError("train.rho", 0, "must lie in (0,1)");
    if (!(train.divergence_bound > 0.0)) throw ConfigError("train.divergence_bound", 0, "must be positive");
    if (!(gaussian_filter_sigma > 0.0)) throw ConfigError("baseline.gaussian_sigma", 0, "must be positive");
    if (median_filter_size < 1 || median_filter_size % 2 == 0 || median_filter_size > counts.patch_size) {
        throw ConfigError("baseline.median_size", 0, "must be odd and at most data.patch_size");
    }
    if (methods.empty()) throw ConfigError("methods", 0, "no methods selected");
    for (const auto& m : methods) {
        if (std::find(kAllMethods.begin(), kAllMethods.end(), m) == kAllMethods.end()) {
            throw ConfigError("methods", 0, "unknown method '" + m + "'");
        }
    }
}

std::string TrainConfig::to_text() const {
    std::string s;
    for (const auto& f : schema()) s += f.key + " = " + f.get(*this) + "\n";
    return s;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : schema()) j[f.key] = f.get(*this);
    return j;
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    c.source = text;
    std::map<std::string, int> seen;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(line, line_no, "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto& fields = schema();
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
        if (it == fields.end()) throw ConfigError(key, line_no, "unknown key");
        if (seen.count(key)) {
            throw ConfigError(key, line_no, "duplicate key (first set on line " + std::to_string(seen[key]) + ")");
        }
        seen[key] = line_no;
        if (value.empty() && it->type != "text") throw ConfigError(key, line_no, "missing value");
        try {
            it->set(c, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key, line_no, e.what());
        }
    }
    if (!seen.count("seed")) throw ConfigError("seed", 0, "mandatory key missing");
    c.train.seed = c.seed;
    c.validate();
    return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string config_reference() {
    const TrainConfig defaults;
    std::string s;
    for (const auto& f : schema()) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "  %-24s %-6s %s", f.key.c_str(), f.type.c_str(), f.help.c_str());
        s += buf;
        if (f.key != "seed") s += " [" + f.get(defaults) + "]";
        s += "\n";
    }
    return s;
}

// =============================================================================
// Experiment
// =============================================================================

namespace {

enum Split : std::uint64_t { kUnpaired = 0, kPaired = 1, kValidation = 2, kTest = 3 };

DomainPair split_domains(const TrainConfig& c, Split split, bool paired, std::size_t count) {
    NoiseSpec noise = c.noise;
    noise.seed = derive_seed(derive_seed(c.seed, stream::kNoise), split);
    DomainCounts counts = c.counts;
    counts.clean = counts.noisy = count;
    return build_domains(c.scene, noise, paired, counts, derive_seed(derive_seed(c.seed, stream::kScenes), split));
}

NoiseSpec split_noise(const TrainConfig& c, Split split) {
    NoiseSpec noise = c.noise;
    noise.seed = derive_seed(derive_seed(c.seed, stream::kNoise), split);
    return noise;
}

nlohmann::json psnr_json(double db) {
    if (std::isinf(db)) return format_psnr(db);
    return db;
}

nlohmann::json metrics_json(const MetricsReport& m) {
    return {{"psnr_db", psnr_json(m.psnr_db)},
            {"ssim", m.ssim},
            {"w1_to_clean", m.w1_to_clean},
            {"fidelity_to_noisy", m.fidelity_to_noisy}};
}

nlohmann::json curve_json(const std::vector<EpochRecord>& curve) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : curve) {
        a.push_back({{"epoch", e.epoch},
                     {"loss", e.loss},
                     {"fidelity", e.fidelity},
                     {"w1", e.w1},
                     {"val_psnr", psnr_json(e.val_psnr)},
                     {"learning_rate", e.learning_rate}});
    }
    return a;
}

nlohmann::json audits_json(const std::vector<AuditCheck>& audits) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& c : audits) {
        a.push_back({{"name", c.name}, {"value", c.value}, {"lower", c.lower}, {"upper", c.upper}, {"passed", c.passed}});
    }
    return a;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MethodResult finish(const TrainConfig& c, const ExperimentData& d, std::string method, double lambda,
                    std::vector<ImagePatch> outputs) {
    MethodResult r;
    r.method = std::move(method);
    r.row.method = r.method;
    r.row.noise_kind = to_string(c.noise.kind);
    r.row.sigma = c.noise.sigma;
    r.row.lambda = lambda;
    r.row.seed = c.seed;
    r.row.metrics = evaluate(outputs, d.test.clean_patches, d.test.noisy_patches, c.w1_subsample,
                             derive_seed(c.seed, stream::kPatches));
    r.test_outputs = std::move(outputs);
    return r;
}

MethodResult finish_trained(const TrainConfig& c, const ExperimentData& d, const NetSpec& net, std::string method,
                            double lambda, TrainResult trained) {
    MethodResult r = finish(c, d, std::move(method), lambda, forward(trained.params, net, d.test.noisy_patches));
    r.curve = std::move(trained.curve);
    r.params = std::move(trained.params);
    return r;
}

template <class F>
std::vector<ImagePatch> map_patches(const std::vector<ImagePatch>& in, F f) {
    std::vector<ImagePatch> out;
    out.reserve(in.size());
    for (const auto& p : in) out.push_back(f(p));
    return out;
}

MethodResult run_method(const TrainConfig& c, const ExperimentData& d, const std::string& method) {
    const NetSpec net = c.net();
    TrainOptions opt = c.train;
    opt.seed = c.seed;
    if (method == "ot") {
        return finish_trained(c, d, net, method, c.loss.lambda,
                              train(net, c.loss, opt, d.unpaired.noisy_patches, d.unpaired.clean_patches,
                                    d.validation));
    }
    if (method == "dist_only") {
        return finish_trained(c, d, net, method, c.loss.lambda, train_dist_only(net, c.loss, opt, d.unpaired, d.validation));
    }
    if (method == "n2c") {
        return finish_trained(c, d, net, method, 0.0, train_n2c(net, opt, d.paired, d.validation, c.supervised_norm));
    }
    if (method == "n2n") {
        return finish_trained(c, d, net, method, 0.0,
                              train_n2n(net, opt, d.paired, d.second_noisy, d.validation, c.supervised_norm));
    }
    if (method == "identity") return finish(c, d, method, 0.0, map_patches(d.test.noisy_patches, baseline_identity));
    if (method == "gaussian_filter") {
        return finish(c, d, method, 0.0, map_patches(d.test.noisy_patches, [&](const ImagePatch& p) {
                          return baseline_gaussian_filter(p, c.gaussian_filter_sigma);
                      }));
    }
    if (method == "median_filter") {
        return finish(c, d, method, 0.0, map_patches(d.test.noisy_patches, [&](const ImagePatch& p) {
                          return baseline_median_filter(p, c.median_filter_size);
                      }));
    }
    throw std::invalid_argument("unknown method '" + method + "'");
}

}  // namespace

ExperimentData make_experiment_data(const TrainConfig& c) {
    ExperimentData d;
    d.unpaired = split_domains(c, kUnpaired, false, c.counts.clean);
    d.paired = split_domains(c, kPaired, true, c.counts.clean);
    d.second_noisy = second_realization(d.paired, split_noise(c, kPaired));
    if (c.validation_patches > 0) {
        const DomainPair v = split_domains(c, kValidation, true, c.validation_patches);
        d.validation = {v.noisy_patches, v.clean_patches};
    }
    d.test = split_domains(c, kTest, true, c.test_patches);
    return d;
}

std::vector<AuditCheck> audit_synthesized_noise(const TrainConfig& c, const ExperimentData& d) {
    std::vector<AuditCheck> out;
    const auto& clean = d.test.clean_patches;
    const auto& noisy = d.test.noisy_patches;
    double sum = 0.0, sq = 0.0, expected_var = 0.0, cov = 0.0;
    std::size_t n = 0, pairs = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const ImagePatch& x = clean[i];
        ImagePatch r = noisy[i];
        for (std::size_t k = 0; k < r.size(); ++k) {
            r.pixels[k] -= x.pixels[k];
            sum += r.pixels[k];
            sq += r.pixels[k] * r.pixels[k];
            expected_var += c.noise.kind == NoiseKind::poisson ? x.pixels[k] / c.noise.lambda_p
                                                               : c.noise.sigma * c.noise.sigma;
        }
        n += r.size();
        for (int row = 0; row < r.height; ++row) {
            for (int col = 0; col < r.width; ++col) {
                if (col + 1 < r.width) cov += r.at(row, col) * r.at(row, col + 1), ++pairs;
                if (row + 1 < r.height) cov += r.at(row, col) * r.at(row + 1, col), ++pairs;
            }
        }
    }
    if (c.noise.clip || n == 0 || expected_var == 0.0) return out;
    const double N = static_cast<double>(n);
    const double mean = sum / N, var = sq / N;
    expected_var /= N;
    // Brown Gaussian pixels are correlated, so the effective sample is smaller.
    const double se = std::sqrt(expected_var / N) * (c.noise.kind == NoiseKind::brown_gaussian ? 3.0 : 1.0);
    out.push_back({"residual mean", mean, -4.0 * se, 4.0 * se, std::abs(mean) <= 4.0 * se});
    out.push_back({"residual variance / expected", var / expected_var, 0.9, 1.1,
                   var / expected_var >= 0.9 && var / expected_var <= 1.1});
    const double rho = (cov / static_cast<double>(pairs)) / var;
    const double target = c.noise.kind == NoiseKind::brown_gaussian
                              ? kernel_lag1_autocorrelation(gaussian_kernel(c.noise.kernel_size, c.noise.kernel_sigma))
                              : 0.0;
    out.push_back({"lag-1 autocorrelation", rho, target - 0.05, target + 0.05, std::abs(rho - target) <= 0.05});
    return out;
}

RunReport run_experiment(const TrainConfig& config, const ExperimentData& data) {
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    RunReport report;
    report.config = config;
    report.audits = audit_synthesized_noise(config, data);
    for (const auto& m : config.methods) report.methods.push_back(run_method(config, data, m));
    report.wall_clock_seconds = seconds_since(t0);
    return report;
}

RunReport run_experiment(const TrainConfig& config) {
    return run_experiment(config, make_experiment_data(config));
}

const MethodResult& RunReport::method(const std::string& name) const {
    for (const auto& m : methods) {
        if (m.method == name) return m;
    }
    throw std::out_of_range("run report has no method '" + name + "'");
}

std::vector<ReportRow> RunReport::rows() const {
    std::vector<ReportRow> r;
    for (const auto& m : methods) r.push_back(m.row);
    return r;
}

nlohmann::json RunReport::to_json() const {
    nlohmann::json j;
    j["config"] = config.to_json();
    j["config_text"] = config.source;
    j["methods"] = nlohmann::json::array();
    for (const auto& m : methods) {
        j["methods"].push_back({{"method", m.method},
                                {"lambda", m.row.lambda},
                                {"metrics", metrics_json(m.row.metrics)},
                                {"curve", curve_json(m.curve)}});
    }
    j["noise_audit"] = audits_json(audits);
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
}

// =============================================================================
// Sweep
// =============================================================================

SweepReport run_sweep(const TrainConfig& config, const std::vector<double>& lambdas) {
    if (lambdas.empty()) throw std::invalid_argument("sweep: empty lambda grid");
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    const ExperimentData data = make_experiment_data(config);
    SweepReport report;
    report.config = config;
    for (double lambda : lambdas) {
        TrainConfig c = config;
        c.loss.lambda = lambda;
        try {
            c.loss.validate();
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("sweep: lambda " + fmt_real(lambda) + ": " + e.what());
        }
        MethodResult r = run_method(c, data, "ot");
        SweepPoint p;
        p.lambda = lambda;
        p.train_fidelity = r.curve.back().fidelity;
        p.train_w1 = r.curve.back().w1;
        p.best_val_psnr = -std::numeric_limits<double>::infinity();
        for (const auto& e : r.curve) p.best_val_psnr = std::max(p.best_val_psnr, e.val_psnr);
        p.test = r.row.metrics;
        report.points.push_back(p);
        report.runs.push_back(std::move(r));
    }
    report.wall_clock_seconds = seconds_since(t0);
    return report;
}

std::vector<ReportRow> SweepReport::rows() const {
    std::vector<ReportRow> r;
    for (const auto& m : runs) r.push_back(m.row);
    return r;
}

nlohmann::json SweepReport::to_json() const {
    nlohmann::json j;
    j["config"] = config.to_json();
    j["config_text"] = config.source;
    j["points"] = nlohmann::json::array();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        j["points"].push_back({{"lambda", p.lambda},
                               {"train_fidelity", p.train_fidelity},
                               {"train_w1", p.train_w1},
                               {"best_val_psnr", psnr_json(p.best_val_psnr)},
                               {"test", metrics_json(p.test)},
                               {"curve", curve_json(runs[i].curve)}});
    }
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
}

void write_sweep_table(std::ostream& out, const SweepReport& report) {
    out << "lambda,train_fidelity,train_w1,best_val_psnr,psnr_db,ssim,w1_to_clean,fidelity_to_noisy\n";
    char buf[512];
    for (const auto& p : report.points) {
        std::snprintf(buf, sizeof buf, "%.6g,%.6f,%.6f,%s,%s,%.6f,%.6f,%.6f\n", p.lambda, p.train_fidelity, p.train_w1,
                      format_psnr(p.best_val_psnr).c_str(), format_psnr(p.test.psnr_db).c_str(), p.test.ssim,
                      p.test.w1_to_clean, p.test.fidelity_to_noisy);
        out << buf;
    }
}

// =============================================================================
// Theorem verification
// =============================================================================

VerifyReport run_verify(const VerifyOptions& o) {
    if (o.instances == 0) throw std::invalid_argument("verify: instance count must be positive");
    if (o.lambdas.empty()) throw std::invalid_argument("verify: empty lambda grid");
    if (o.max_points < 2 || o.max_points > 6) throw std::invalid_argument("verify: max points must lie in [2, 6]");
    if (o.max_dim < 1) throw std::invalid_argument("verify: max dimension must be positive");
    for (double l : o.lambdas) {
        if (!(l > 0.0) || !std::isfinite(l)) throw std::invalid_argument("verify: lambdas must be positive");
    }
    const auto t0 = std::chrono::steady_clock::now();
    VerifyReport report;
    report.options = o;
    for (double lambda : o.lambdas) {
        VerifyLambda v;
        v.lambda = lambda;
        v.required = lambda > 1.0;
        for (std::size_t i = 0; i < o.instances; ++i) {
            const std::size_t n = 2 + i % (o.max_points - 1);
            const std::size_t d = 1 + (i / (o.max_points - 1)) % o.max_dim;
            const TheoremVerdict t = verify_theorem1(random_instance(derive_seed(o.seed, i), n, d, lambda));
            ++v.instances;
            v.holds += t.holds;
            v.min_matches += t.min_matches;
            v.pushforward_violations += t.pushforward_violation;
            v.max_min_gap = std::max(v.max_min_gap, std::abs(t.relaxed_min - t.w1_xy));
        }
        v.passed = !v.required || (v.holds == v.instances && v.max_min_gap <= kArgminTolerance);
        report.lambdas.push_back(v);
    }
    report.wall_clock_seconds = seconds_since(t0);
    return report;
}

bool VerifyReport::passed() const {
    return std::all_of(lambdas.begin(), lambdas.end(), [](const VerifyLambda& v) { return v.passed; });
}

nlohmann::json VerifyReport::to_json() const {
    nlohmann::json j;
    j["instances"] = options.instances;
    j["max_points"] = options.max_points;
    j["max_dim"] = options.max_dim;
    j["seed"] = options.seed;
    j["lambdas"] = nlohmann::json::array();
    for (const auto& v : lambdas) {
        j["lambdas"].push_back({{"lambda", v.lambda},
                                {"instances", v.instances},
                                {"equivalence_holds", v.holds},
                                {"min_matches", v.min_matches},
                                {"pushforward_violations", v.pushforward_violations},
                                {"max_min_gap", v.max_min_gap},
                                {"required", v.required},
                                {"passed", v.passed}});
    }
    j["passed"] = passed();
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
}

// =============================================================================
// Artifacts
// =============================================================================

std::filesystem::path make_run_directory(const std::filesystem::path& output_dir, std::uint64_t seed) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    const std::string base = std::string(stamp) + "-s" + std::to_string(seed);
    std::filesystem::create_directories(output_dir);
    std::filesystem::path dir = output_dir / base;
    for (int k = 2; !std::filesystem::create_directory(dir); ++k) dir = output_dir / (base + "-" + std::to_string(k));
    return dir;
}

void write_curves_csv(std::ostream& out, const std::vector<MethodResult>& methods) {
    out << "method,lambda,epoch,loss,fidelity,w1,val_psnr,learning_rate\n";
    char buf[512];
    for (const auto& m : methods) {
        for (const auto& e : m.curve) {
            std::snprintf(buf, sizeof buf, "%s,%.6g,%d,%.9g,%.9g,%.9g,%s,%.6g\n", m.method.c_str(), m.row.lambda,
                          e.epoch, e.loss, e.fidelity, e.w1, format_psnr(e.val_psnr).c_str(), e.learning_rate);
            out << buf;
        }
    }
}

void write_run_artifacts(const std::filesystem::path& dir, const RunReport& report, const ExperimentData& data) {
    auto open = [&](const std::string& name) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("config.txt");
        f << (report.config.source.empty() ? report.config.to_text() : report.config.source);
    }
    {
        auto f = open("report.csv");
        write_csv(f, report.rows());
    }
    {
        auto f = open("report.json");
        f << report.to_json().dump(2) << '\n';
    }
    {
        auto f = open("curves.csv");
        write_curves_csv(f, report.methods);
    }
    const NetSpec net = report.config.net();
    for (const auto& m : report.methods) {
        if (m.params) save_checkpoint(dir / (m.method + ".ckpt"), net, *m.params);
    }
    const std::size_t n = std::min(report.config.previews, data.test.clean_patches.size());
    if (n == 0) return;
    const auto previews = dir / "previews";
    std::filesystem::create_directories(previews);
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "%03zu", i);
        save_pgm(data.test.clean_patches[i], previews / (std::string(id) + "_clean.pgm"));
        save_pgm(data.test.noisy_patches[i], previews / (std::string(id) + "_noisy.pgm"));
        for (const auto& m : report.methods) save_pgm(m.test_outputs[i], previews / (std::string(id) + "_" + m.method + ".pgm"));
    }
}

}  // namespace otden
