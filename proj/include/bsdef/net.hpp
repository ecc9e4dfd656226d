#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bsdef {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class OutputActivation : int { None = 0, Exponential = 1 };

// Fully connected ReLU network: input -> (hidden)^L -> output, optionally
// followed by exp on the (clamped) output pre-activation.
struct MlpSpec {
    int input_dim = 1;
    int hidden_dim = 32;
    int num_hidden_layers = 3;
    int output_dim = 1;
    OutputActivation output_activation = OutputActivation::None;
};

// w-network of the paper: 128 hidden units, scalar exponential output.
MlpSpec w_net_spec(int input_dim);
// v-network: 32 hidden units, linear output of dimension d.
MlpSpec v_net_spec(int input_dim, int d);

struct MlpParams {
    MlpSpec spec;
    std::vector<MatrixXd> weights;  // weights[l]: out_l x in_l
    std::vector<VectorXd> biases;

    int num_layers() const { return static_cast<int>(weights.size()); }
    std::size_t parameter_count() const;
};

// He-uniform hidden layers, zero biases. The final layer is scaled by
// `final_scale` and its bias set to `final_bias` (an exponential head with
// final_bias = log(c) starts near the constant c).
MlpParams init_mlp(const MlpSpec& spec, std::uint64_t seed, double final_scale = 1.0,
                   double final_bias = 0.0);

struct ForwardCache {
    MatrixXd input;                   // in x M
    std::vector<MatrixXd> activations;  // post-ReLU, hidden x M per hidden layer
    MatrixXd out_pre;                 // pre-activation of the output layer
    MatrixXd out;
};

// Batched forward pass; columns of `input` are samples.
MatrixXd forward_batch(const MlpParams& params, const MatrixXd& input,
                       ForwardCache* cache = nullptr);
VectorXd forward(const MlpParams& params, const VectorXd& input);

struct MlpGradients {
    std::vector<MatrixXd> weights;
    std::vector<VectorXd> biases;

    void add_scaled(const MlpGradients& other, double scale);
    bool all_finite() const;
};

MlpGradients zero_gradients(const MlpParams& params);

// Reverse-mode gradients, summed over the batch columns of `cotangent`
// (out x M). Optionally also returns d loss / d input.
MlpGradients backward_batch(const MlpParams& params, const ForwardCache& cache,
                            const MatrixXd& cotangent, MatrixXd* input_gradient = nullptr);

struct AdamState {
    std::vector<MatrixXd> m_w, v_w;
    std::vector<VectorXd> m_b, v_b;
    long step = 0;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

AdamState make_adam(const MlpParams& params, double learning_rate = 1e-4);

// Standard Adam with bias correction; throws NumericalError on non-finite
// gradients without touching the parameters.
void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state);

// Parameter file: magic "BSDENET1" + spec header + raw little-endian doubles.
std::vector<std::uint8_t> serialize(const MlpParams& params);
MlpParams deserialize(const std::vector<std::uint8_t>& bytes);
void save_params(const MlpParams& params, const std::string& path);
MlpParams load_params(const std::string& path);

}  // namespace bsdef
