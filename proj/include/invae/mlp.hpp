#pragma once

#include <string>
#include <vector>

#include "invae/graph.hpp"
#include "invae/tensor.hpp"

namespace invae {

class Rng;

enum class Activation { Relu, Tanh, Softplus, Identity };
enum class FinalActivation { None, Softmax, Softplus };

// Fully connected feed-forward net: widths and activations only; the
// parameters live in a ParamStore under "<prefix>.w<l>" / "<prefix>.b<l>",
// weights stored [fan_in, fan_out].
struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 1;
    Activation activation = Activation::Relu;
    FinalActivation final_activation = FinalActivation::None;

    std::size_t layer_count() const { return hidden.size() + 1; }
    void validate() const;
};

Unary activation_kind(Activation a);

std::vector<std::string> mlp_param_names(const MlpSpec& spec, const std::string& prefix);

// Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.
void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store, Rng& rng);

// Value-only forward. Input is [in] or [batch, in]; output rank matches.
Tensor mlp_forward(const MlpSpec& spec, const ParamStore& params, const Tensor& input,
                   const std::string& prefix);

// Forward on the tape; input var must be [batch, in].
Graph::Var mlp_forward_tape(Graph& g, const MlpSpec& spec, const std::string& prefix, Graph::Var input);

// Forward plus exact per-input-coordinate first and second derivatives of
// the outputs, all as tape nodes so parameter gradients can flow through
// them. d1[j] and d2[j] are [batch, out]: d out / d in_j and d^2 out / d in_j^2
// evaluated row-wise. Requires final_activation == None.
struct MlpTangents {
    Graph::Var out;
    std::vector<Graph::Var> d1;
    std::vector<Graph::Var> d2;
};

MlpTangents mlp_forward_with_tangents(Graph& g, const MlpSpec& spec, const std::string& prefix,
                                      Graph::Var input);

// Adam with bias correction. Moments are allocated lazily per parameter
// name; frozen parameters are skipped entirely (values and moments).
struct AdamState {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step_count = 0;

    struct Moments {
        Tensor m;
        Tensor v;
    };
    std::map<std::string, Moments> moments;
};

void adam_step(AdamState& state, ParamStore& params, const GradMap& grads);

} // namespace invae
