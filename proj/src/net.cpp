#include "bsdef/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "bsdef/errors.hpp"
#include "bsdef/rng.hpp"

namespace bsdef {

namespace {

// Pre-activation clamp of the exponential head.
constexpr double kExpClamp = 60.0;

std::vector<int> layer_sizes(const MlpSpec& spec) {
    std::vector<int> sizes;
    sizes.push_back(spec.input_dim);
    for (int l = 0; l < spec.num_hidden_layers; ++l) sizes.push_back(spec.hidden_dim);
    sizes.push_back(spec.output_dim);
    return sizes;
}

}  // namespace

MlpSpec w_net_spec(int input_dim) {
    return MlpSpec{input_dim, 128, 3, 1, OutputActivation::Exponential};
}

MlpSpec v_net_spec(int input_dim, int d) {
    return MlpSpec{input_dim, 32, 3, d, OutputActivation::None};
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        n += static_cast<std::size_t>(weights[l].size()) + biases[l].size();
    }
    return n;
}

MlpParams init_mlp(const MlpSpec& spec, std::uint64_t seed, double final_scale,
                   double final_bias) {
    MlpParams p;
    p.spec = spec;
    const std::vector<int> sizes = layer_sizes(spec);
    const int L = static_cast<int>(sizes.size()) - 1;
    for (int l = 0; l < L; ++l) {
        const int fan_in = sizes[l];
        const int fan_out = sizes[l + 1];
        const double limit = std::sqrt(6.0 / fan_in);
        MatrixXd w(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r) {
            for (int c = 0; c < fan_in; ++c) {
                w(r, c) = limit * (2.0 * rng::uniform(seed, rng::kInit, l, r * fan_in + c) - 1.0);
            }
        }
        if (l == L - 1) w *= final_scale;
        p.weights.push_back(std::move(w));
        VectorXd b = VectorXd::Zero(fan_out);
        if (l == L - 1) b.setConstant(final_bias);
        p.biases.push_back(std::move(b));
    }
    return p;
}

MatrixXd forward_batch(const MlpParams& params, const MatrixXd& input, ForwardCache* cache) {
    if (input.rows() != params.spec.input_dim) {
        throw std::invalid_argument("forward: input dimension mismatch");
    }
    if (cache) {
        cache->input = input;
        cache->activations.clear();
    }
    MatrixXd a = input;
    const int L = params.num_layers();
    for (int l = 0; l < L - 1; ++l) {
        a = ((params.weights[l] * a).colwise() + params.biases[l]).cwiseMax(0.0);
        if (cache) cache->activations.push_back(a);
    }
    MatrixXd pre = (params.weights[L - 1] * a).colwise() + params.biases[L - 1];
    if (cache) cache->out_pre = pre;
    MatrixXd out;
    if (params.spec.output_activation == OutputActivation::Exponential) {
        out = pre.cwiseMin(kExpClamp).cwiseMax(-kExpClamp).array().exp().matrix();
    } else {
        out = pre;
    }
    if (cache) cache->out = out;
    return out;
}

VectorXd forward(const MlpParams& params, const VectorXd& input) {
    return forward_batch(params, input);
}

MlpGradients zero_gradients(const MlpParams& params) {
    MlpGradients g;
    for (int l = 0; l < params.num_layers(); ++l) {
        g.weights.push_back(MatrixXd::Zero(params.weights[l].rows(), params.weights[l].cols()));
        g.biases.push_back(VectorXd::Zero(params.biases[l].size()));
    }
    return g;
}

void MlpGradients::add_scaled(const MlpGradients& other, double scale) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
        weights[l] += scale * other.weights[l];
        biases[l] += scale * other.biases[l];
    }
}

bool MlpGradients::all_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    }
    return true;
}

MlpGradients backward_batch(const MlpParams& params, const ForwardCache& cache,
                            const MatrixXd& cotangent, MatrixXd* input_gradient) {
    if (cotangent.rows() != params.spec.output_dim || cotangent.cols() != cache.input.cols()) {
        throw std::invalid_argument("backward: cotangent shape mismatch");
    }
    const int L = params.num_layers();
    MlpGradients g;
    g.weights.resize(L);
    g.biases.resize(L);

    MatrixXd delta;
    if (params.spec.output_activation == OutputActivation::Exponential) {
        // d exp(clamp(z)) / dz: exp value inside the clamp window, 0 outside.
        const auto inside = (cache.out_pre.array().abs() < kExpClamp).cast<double>();
        delta = (cotangent.array() * cache.out.array() * inside).matrix();
    } else {
        delta = cotangent;
    }
    for (int l = L - 1; l >= 0; --l) {
        const MatrixXd& prev = (l == 0) ? cache.input : cache.activations[l - 1];
        g.weights[l] = delta * prev.transpose();
        g.biases[l] = delta.rowwise().sum();
        if (l > 0) {
            delta = params.weights[l].transpose() * delta;
            // ReLU subgradient at 0 is 0.
            delta = (delta.array() * (cache.activations[l - 1].array() > 0.0).cast<double>())
                        .matrix();
        } else if (input_gradient) {
            *input_gradient = params.weights[0].transpose() * delta;
        }
    }
    return g;
}

AdamState make_adam(const MlpParams& params, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    for (int l = 0; l < params.num_layers(); ++l) {
        s.m_w.push_back(MatrixXd::Zero(params.weights[l].rows(), params.weights[l].cols()));
        s.v_w.push_back(MatrixXd::Zero(params.weights[l].rows(), params.weights[l].cols()));
        s.m_b.push_back(VectorXd::Zero(params.biases[l].size()));
        s.v_b.push_back(VectorXd::Zero(params.biases[l].size()));
    }
    return s;
}

void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state) {
    if (!grads.all_finite()) throw NumericalError("adam_step: non-finite gradients");
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (int l = 0; l < params.num_layers(); ++l) {
        state.m_w[l] = b1 * state.m_w[l] + (1.0 - b1) * grads.weights[l];
        state.v_w[l] = b2 * state.v_w[l] + (1.0 - b2) * grads.weights[l].cwiseProduct(grads.weights[l]);
        params.weights[l].array() -=
            state.learning_rate * (state.m_w[l].array() / bc1) /
            ((state.v_w[l].array() / bc2).sqrt() + state.epsilon);
        state.m_b[l] = b1 * state.m_b[l] + (1.0 - b1) * grads.biases[l];
        state.v_b[l] = b2 * state.v_b[l] + (1.0 - b2) * grads.biases[l].cwiseProduct(grads.biases[l]);
        params.biases[l].array() -=
            state.learning_rate * (state.m_b[l].array() / bc1) /
            ((state.v_b[l].array() / bc2).sqrt() + state.epsilon);
    }
}

namespace {

constexpr char kNetMagic[8] = {'B', 'S', 'D', 'E', 'N', 'E', 'T', '1'};

template <typename T>
void append(std::vector<std::uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw ArtifactError("network file truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize(const MlpParams& params) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kNetMagic, kNetMagic + sizeof(kNetMagic));
    append<std::int64_t>(out, params.spec.input_dim);
    append<std::int64_t>(out, params.spec.hidden_dim);
    append<std::int64_t>(out, params.spec.num_hidden_layers);
    append<std::int64_t>(out, params.spec.output_dim);
    append<std::int64_t>(out, static_cast<std::int64_t>(params.spec.output_activation));
    for (int l = 0; l < params.num_layers(); ++l) {
        for (Eigen::Index r = 0; r < params.weights[l].rows(); ++r) {
            for (Eigen::Index c = 0; c < params.weights[l].cols(); ++c) {
                append<double>(out, params.weights[l](r, c));
            }
        }
        for (Eigen::Index i = 0; i < params.biases[l].size(); ++i) {
            append<double>(out, params.biases[l][i]);
        }
    }
    return out;
}

MlpParams deserialize(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < sizeof(kNetMagic) ||
        std::memcmp(bytes.data(), kNetMagic, sizeof(kNetMagic)) != 0) {
        throw ArtifactError("not a network parameter stream");
    }
    std::size_t pos = sizeof(kNetMagic);
    MlpSpec spec;
    spec.input_dim = static_cast<int>(take<std::int64_t>(bytes, pos));
    spec.hidden_dim = static_cast<int>(take<std::int64_t>(bytes, pos));
    spec.num_hidden_layers = static_cast<int>(take<std::int64_t>(bytes, pos));
    spec.output_dim = static_cast<int>(take<std::int64_t>(bytes, pos));
    spec.output_activation = static_cast<OutputActivation>(take<std::int64_t>(bytes, pos));
    if (spec.input_dim < 1 || spec.hidden_dim < 1 || spec.num_hidden_layers < 0 ||
        spec.output_dim < 1) {
        throw ArtifactError("invalid network spec header");
    }
    MlpParams p;
    p.spec = spec;
    const std::vector<int> sizes = layer_sizes(spec);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        MatrixXd w(sizes[l + 1], sizes[l]);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = take<double>(bytes, pos);
        }
        VectorXd b(sizes[l + 1]);
        for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = take<double>(bytes, pos);
        p.weights.push_back(std::move(w));
        p.biases.push_back(std::move(b));
    }
    if (pos != bytes.size()) throw ArtifactError("trailing bytes in network stream");
    return p;
}

void save_params(const MlpParams& params, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize(params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ArtifactError("write failed: " + path);
}

MlpParams load_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace bsdef
