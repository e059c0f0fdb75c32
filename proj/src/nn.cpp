#include "svne/nn.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "svne/rng.hpp"

namespace svne {

namespace {

double activate(Activation a, double z) {
    switch (a) {
        case Activation::Tanh: return std::tanh(z);
        case Activation::Relu: return z > 0.0 ? z : 0.0;
    }
    return z;
}

// Derivative expressed through the activation value where possible.
double activate_grad(Activation a, double z, double value) {
    switch (a) {
        case Activation::Tanh: return 1.0 - value * value;
        case Activation::Relu: return z > 0.0 ? 1.0 : 0.0;
    }
    return 1.0;
}

double softplus(double z) {
    // log(1 + e^z), stable for large |z|
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double log_sum_exp(const Vector& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace

std::size_t MlpArchitecture::param_count() const {
    std::size_t d = 0;
    for (std::size_t l = 1; l < layer_sizes.size(); ++l)
        d += layer_sizes[l] * layer_sizes[l - 1] + layer_sizes[l];
    return d;
}

void MlpArchitecture::validate() const {
    if (layer_sizes.size() < 2)
        throw std::invalid_argument("MlpArchitecture: need at least input and output sizes");
    for (std::size_t s : layer_sizes)
        if (s == 0) throw std::invalid_argument("MlpArchitecture: layer sizes must be positive");
    switch (head) {
        case Head::GaussianRegression:
            if (output_dim() != 2)
                throw std::invalid_argument("MlpArchitecture: regression head needs 2 outputs (mean, log-variance)");
            break;
        case Head::BinaryClassification:
            if (output_dim() != 1)
                throw std::invalid_argument("MlpArchitecture: binary head needs 1 logit");
            break;
        case Head::Multiclass:
            if (output_dim() < 2)
                throw std::invalid_argument("MlpArchitecture: multiclass head needs >= 2 logits");
            break;
    }
}

std::vector<LayerSlice> layer_slices(const MlpArchitecture& arch) {
    std::vector<LayerSlice> slices;
    std::size_t offset = 0;
    for (std::size_t l = 1; l < arch.layer_sizes.size(); ++l) {
        LayerSlice s;
        s.layer_index = l - 1;
        s.offset = offset;
        s.fan_in = arch.layer_sizes[l - 1];
        s.fan_out = arch.layer_sizes[l];
        s.length = s.fan_in * s.fan_out + s.fan_out;
        offset += s.length;
        slices.push_back(s);
    }
    return slices;
}

LayerSlice last_layer_slice(const MlpArchitecture& arch) {
    return layer_slices(arch).back();
}

FlatParams init_params(const MlpArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    FlatParams params(arch.param_count(), 0.0);
    Rng rng(seed, 0x696e6974u);  // weights stream; biases stay zero
    for (const LayerSlice& s : layer_slices(arch)) {
        double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
        for (std::size_t i = 0; i < s.fan_out * s.fan_in; ++i)
            params[s.offset + i] = rng.uniform(-bound, bound);
    }
    return params;
}

ForwardTrace forward_trace(const MlpArchitecture& arch, const FlatParams& params, const Vector& x) {
    if (x.size() != arch.input_dim())
        throw std::invalid_argument("forward: input dimension mismatch");
    if (params.size() != arch.param_count())
        throw std::invalid_argument("forward: parameter vector length mismatch");

    ForwardTrace trace;
    trace.activations.push_back(x);
    const auto slices = layer_slices(arch);
    const std::size_t layers = slices.size();
    for (std::size_t l = 0; l < layers; ++l) {
        const LayerSlice& s = slices[l];
        const Vector& in = trace.activations.back();
        Vector z(s.fan_out, 0.0);
        const double* w = params.data() + s.offset;
        const double* b = params.data() + s.offset + s.fan_out * s.fan_in;
        for (std::size_t o = 0; o < s.fan_out; ++o) {
            double acc = b[o];
            const double* row = w + o * s.fan_in;
            for (std::size_t i = 0; i < s.fan_in; ++i) acc += row[i] * in[i];
            z[o] = acc;
        }
        if (!all_finite(z)) throw PoisonedParametersError("forward: non-finite activation");
        Vector a(s.fan_out);
        const bool last = (l + 1 == layers);
        for (std::size_t o = 0; o < s.fan_out; ++o)
            a[o] = last ? z[o] : activate(arch.activation, z[o]);
        trace.pre_activations.push_back(std::move(z));
        trace.activations.push_back(std::move(a));
    }
    return trace;
}

Vector forward(const MlpArchitecture& arch, const FlatParams& params, const Vector& x) {
    return forward_trace(arch, params, x).outputs();
}

Vector backprop_params(const MlpArchitecture& arch, const FlatParams& params,
                       const ForwardTrace& trace, const Vector& output_cotangent) {
    const auto slices = layer_slices(arch);
    if (output_cotangent.size() != arch.output_dim())
        throw std::invalid_argument("backprop: cotangent dimension mismatch");

    Vector grad(params.size(), 0.0);
    Vector delta = output_cotangent;  // sensitivity at current layer pre-activation
    for (std::size_t l = slices.size(); l-- > 0;) {
        const LayerSlice& s = slices[l];
        const Vector& in = trace.activations[l];
        double* gw = grad.data() + s.offset;
        double* gb = grad.data() + s.offset + s.fan_out * s.fan_in;
        for (std::size_t o = 0; o < s.fan_out; ++o) {
            double d = delta[o];
            gb[o] = d;
            double* row = gw + o * s.fan_in;
            for (std::size_t i = 0; i < s.fan_in; ++i) row[i] = d * in[i];
        }
        if (l > 0) {
            const double* w = params.data() + s.offset;
            Vector prev(s.fan_in, 0.0);
            for (std::size_t o = 0; o < s.fan_out; ++o) {
                double d = delta[o];
                const double* row = w + o * s.fan_in;
                for (std::size_t i = 0; i < s.fan_in; ++i) prev[i] += row[i] * d;
            }
            // trace.activations[l] is the post-activation output of layer l-1
            const Vector& z = trace.pre_activations[l - 1];
            const Vector& a = trace.activations[l];
            for (std::size_t i = 0; i < s.fan_in; ++i)
                prev[i] *= activate_grad(arch.activation, z[i], a[i]);
            delta = std::move(prev);
        }
    }
    return grad;
}

JacobianPack output_jacobian_pack(const MlpArchitecture& arch, const FlatParams& params,
                                  const ForwardTrace& trace) {
    const auto slices = layer_slices(arch);
    const std::size_t k = arch.output_dim();
    const std::size_t layers = slices.size();

    JacobianPack pack;
    pack.jacobian = DenseMatrix(k, params.size());
    pack.layer_deltas.resize(layers);

    // delta(c, o): d output_c / d z_l[o], swept from the output layer down.
    DenseMatrix delta = DenseMatrix::identity(k);
    for (std::size_t l = layers; l-- > 0;) {
        const LayerSlice& s = slices[l];
        pack.layer_deltas[l] = delta;
        const Vector& in = trace.activations[l];
        for (std::size_t c = 0; c < k; ++c) {
            double* grow = pack.jacobian.data.data() + c * params.size() + s.offset;
            for (std::size_t o = 0; o < s.fan_out; ++o) {
                double d = delta(c, o);
                grow[s.fan_out * s.fan_in + o] = d;
                double* wrow = grow + o * s.fan_in;
                for (std::size_t i = 0; i < s.fan_in; ++i) wrow[i] = d * in[i];
            }
        }
        if (l > 0) {
            const double* w = params.data() + s.offset;
            const Vector& z = trace.pre_activations[l - 1];
            const Vector& a = trace.activations[l];
            DenseMatrix prev(k, s.fan_in);
            for (std::size_t c = 0; c < k; ++c) {
                for (std::size_t o = 0; o < s.fan_out; ++o) {
                    double d = delta(c, o);
                    if (d == 0.0) continue;
                    const double* row = w + o * s.fan_in;
                    for (std::size_t i = 0; i < s.fan_in; ++i) prev(c, i) += row[i] * d;
                }
                for (std::size_t i = 0; i < s.fan_in; ++i)
                    prev(c, i) *= activate_grad(arch.activation, z[i], a[i]);
            }
            delta = std::move(prev);
        }
    }
    return pack;
}

DenseMatrix per_sample_output_jacobian(const MlpArchitecture& arch, const FlatParams& params,
                                       const Vector& x) {
    ForwardTrace trace = forward_trace(arch, params, x);
    return output_jacobian_pack(arch, params, trace).jacobian;
}

// --- heads -------------------------------------------------------------------

double head_log_likelihood(Head head, const Vector& outputs, const Vector& target) {
    switch (head) {
        case Head::GaussianRegression: {
            double mu = outputs[0];
            double var = std::max(std::exp(outputs[1]), kVarianceFloor);
            double r = target[0] - mu;
            return -0.5 * (std::log(var) + r * r / var);  // constant omitted
        }
        case Head::BinaryClassification: {
            double z = outputs[0];
            return target[0] * z - softplus(z);
        }
        case Head::Multiclass: {
            std::size_t label = static_cast<std::size_t>(target[0]);
            if (label >= outputs.size())
                throw std::invalid_argument("head_log_likelihood: class label out of range");
            return outputs[label] - log_sum_exp(outputs);
        }
    }
    return 0.0;
}

Vector head_log_likelihood_grad(Head head, const Vector& outputs, const Vector& target) {
    switch (head) {
        case Head::GaussianRegression: {
            double mu = outputs[0];
            double v = std::exp(outputs[1]);
            bool clamped = v < kVarianceFloor;
            double var = clamped ? kVarianceFloor : v;
            double r = target[0] - mu;
            Vector g(2, 0.0);
            g[0] = r / var;
            g[1] = clamped ? 0.0 : 0.5 * (r * r / var - 1.0);
            return g;
        }
        case Head::BinaryClassification: {
            double p = sigmoid(outputs[0]);
            return {target[0] - p};
        }
        case Head::Multiclass: {
            std::size_t label = static_cast<std::size_t>(target[0]);
            double lse = log_sum_exp(outputs);
            Vector g(outputs.size());
            for (std::size_t c = 0; c < outputs.size(); ++c)
                g[c] = (c == label ? 1.0 : 0.0) - std::exp(outputs[c] - lse);
            return g;
        }
    }
    return {};
}

DenseMatrix head_output_precision(Head head, const Vector& outputs) {
    switch (head) {
        case Head::GaussianRegression: {
            double v = std::exp(outputs[1]);
            bool clamped = v < kVarianceFloor;
            double var = clamped ? kVarianceFloor : v;
            DenseMatrix lam(2, 2);
            lam(0, 0) = 1.0 / var;
            lam(1, 1) = clamped ? 0.0 : 0.5;
            return lam;
        }
        case Head::BinaryClassification: {
            double p = sigmoid(outputs[0]);
            DenseMatrix lam(1, 1);
            lam(0, 0) = p * (1.0 - p);
            return lam;
        }
        case Head::Multiclass: {
            double lse = log_sum_exp(outputs);
            std::size_t k = outputs.size();
            Vector p(k);
            for (std::size_t c = 0; c < k; ++c) p[c] = std::exp(outputs[c] - lse);
            DenseMatrix lam(k, k);
            for (std::size_t c = 0; c < k; ++c) {
                for (std::size_t e = 0; e < k; ++e) lam(c, e) = -p[c] * p[e];
                lam(c, c) += p[c];
            }
            return lam;
        }
    }
    return {};
}

Vector head_sample(Head head, const Vector& outputs, Rng& rng) {
    switch (head) {
        case Head::GaussianRegression: {
            double var = std::max(std::exp(outputs[1]), kVarianceFloor);
            return {outputs[0] + std::sqrt(var) * rng.normal()};
        }
        case Head::BinaryClassification: {
            double p = sigmoid(outputs[0]);
            return {rng.uniform() < p ? 1.0 : 0.0};
        }
        case Head::Multiclass: {
            double lse = log_sum_exp(outputs);
            double u = rng.uniform();
            double acc = 0.0;
            for (std::size_t c = 0; c < outputs.size(); ++c) {
                acc += std::exp(outputs[c] - lse);
                if (u < acc) return {static_cast<double>(c)};
            }
            return {static_cast<double>(outputs.size() - 1)};
        }
    }
    return {};
}

Vector per_sample_grad(const MlpArchitecture& arch, const FlatParams& params,
                       const Vector& x, const Vector& target) {
    ForwardTrace trace = forward_trace(arch, params, x);
    Vector cot = head_log_likelihood_grad(arch.head, trace.outputs(), target);
    return backprop_params(arch, params, trace, cot);
}

// --- checkpoints ----------------------------------------------------------------

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ostringstream out;
    out << "{\n  \"architecture\": {\n    \"layer_sizes\": [";
    for (std::size_t i = 0; i < ckpt.arch.layer_sizes.size(); ++i)
        out << (i ? ", " : "") << ckpt.arch.layer_sizes[i];
    out << "],\n    \"activation\": \"" << activation_name(ckpt.arch.activation) << "\",\n"
        << "    \"head\": \"" << head_name(ckpt.arch.head) << "\"\n  },\n"
        << "  \"seed\": " << ckpt.seed << ",\n  \"particles\": [\n";
    for (std::size_t p = 0; p < ckpt.particles.size(); ++p) {
        out << "    [";
        const FlatParams& vec = ckpt.particles[p];
        for (std::size_t i = 0; i < vec.size(); ++i)
            out << (i ? ", " : "") << format_double(vec[i]);
        out << "]" << (p + 1 < ckpt.particles.size() ? "," : "") << "\n";
    }
    out << "  ]\n}\n";

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        f << out.str();
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f);

    Checkpoint ckpt;
    const auto& arch = j.at("architecture");
    ckpt.arch.layer_sizes = arch.at("layer_sizes").get<std::vector<std::size_t>>();
    ckpt.arch.activation = activation_from_name(arch.at("activation").get<std::string>());
    ckpt.arch.head = head_from_name(arch.at("head").get<std::string>());
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("particles")) ckpt.particles.push_back(p.get<FlatParams>());
    for (const FlatParams& p : ckpt.particles)
        if (p.size() != ckpt.arch.param_count())
            throw std::runtime_error("load_checkpoint: particle length does not match architecture");
    return ckpt;
}

std::string activation_name(Activation a) {
    return a == Activation::Tanh ? "tanh" : "relu";
}

std::string head_name(Head h) {
    switch (h) {
        case Head::GaussianRegression: return "gaussian_regression";
        case Head::BinaryClassification: return "binary_classification";
        case Head::Multiclass: return "multiclass";
    }
    return "?";
}

Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw std::invalid_argument("unknown activation: " + s);
}

Head head_from_name(const std::string& s) {
    if (s == "gaussian_regression") return Head::GaussianRegression;
    if (s == "binary_classification") return Head::BinaryClassification;
    if (s == "multiclass") return Head::Multiclass;
    throw std::invalid_argument("unknown head: " + s);
}

}  // namespace svne
