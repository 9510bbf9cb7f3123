#include "invae/mlp.hpp"

#include <cmath>
#include <stdexcept>

#include "invae/rng.hpp"

namespace invae {

void MlpSpec::validate() const {
    if (input_dim < 1 || output_dim < 1) {
        throw std::invalid_argument("MlpSpec: dims must be >= 1");
    }
    for (std::size_t h : hidden) {
        if (h < 1) {
            throw std::invalid_argument("MlpSpec: hidden dims must be >= 1");
        }
    }
}

Unary activation_kind(Activation a) {
    switch (a) {
    case Activation::Relu:
        return Unary::Relu;
    case Activation::Tanh:
        return Unary::Tanh;
    case Activation::Softplus:
        return Unary::Softplus;
    case Activation::Identity:
        return Unary::Identity;
    }
    throw std::logic_error("activation_kind: unknown activation");
}

namespace {

std::vector<std::size_t> layer_dims(const MlpSpec& spec) {
    std::vector<std::size_t> dims;
    dims.push_back(spec.input_dim);
    for (std::size_t h : spec.hidden) {
        dims.push_back(h);
    }
    dims.push_back(spec.output_dim);
    return dims;
}

std::string wname(const std::string& prefix, std::size_t l) { return prefix + ".w" + std::to_string(l); }
std::string bname(const std::string& prefix, std::size_t l) { return prefix + ".b" + std::to_string(l); }

} // namespace

std::vector<std::string> mlp_param_names(const MlpSpec& spec, const std::string& prefix) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        names.push_back(wname(prefix, l));
        names.push_back(bname(prefix, l));
    }
    return names;
}

void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store, Rng& rng) {
    spec.validate();
    const auto dims = layer_dims(spec);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        Tensor w({dims[l], dims[l + 1]});
        const double bound = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
        fill_uniform(w, rng, bound);
        store.add(wname(prefix, l), std::move(w));
        store.add(bname(prefix, l), Tensor({dims[l + 1]}, 0.0));
    }
}

namespace {

void softmax_rows_inplace(Tensor& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double mx = -1e300;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            mx = std::max(mx, m.at(r, c));
        }
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m.at(r, c) = std::exp(m.at(r, c) - mx);
            s += m.at(r, c);
        }
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m.at(r, c) /= s;
        }
    }
}

} // namespace

Tensor mlp_forward(const MlpSpec& spec, const ParamStore& params, const Tensor& input,
                   const std::string& prefix) {
    spec.validate();
    const bool vector_in = input.rank() == 1;
    Tensor h = vector_in ? Tensor({1, input.shape[0]}, input.values) : input;
    if (h.rank() != 2 || h.cols() != spec.input_dim) {
        throw std::invalid_argument("mlp_forward: input dim mismatch for " + prefix);
    }
    const Unary act = activation_kind(spec.activation);
    const std::size_t layers = spec.layer_count();
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& w = params.get(wname(prefix, l));
        const Tensor& b = params.get(bname(prefix, l));
        h = matmul(h, w);
        for (std::size_t r = 0; r < h.rows(); ++r) {
            for (std::size_t c = 0; c < h.cols(); ++c) {
                h.at(r, c) += b.at(c);
            }
        }
        if (l + 1 < layers) {
            for (double& x : h.values) {
                x = unary_eval(act, x);
            }
        }
    }
    if (spec.final_activation == FinalActivation::Softmax) {
        softmax_rows_inplace(h);
    } else if (spec.final_activation == FinalActivation::Softplus) {
        for (double& x : h.values) {
            x = unary_eval(Unary::Softplus, x);
        }
    }
    h.check_finite("mlp_forward(" + prefix + ")");
    if (vector_in) {
        return Tensor({h.cols()}, std::move(h.values));
    }
    return h;
}

Graph::Var mlp_forward_tape(Graph& g, const MlpSpec& spec, const std::string& prefix, Graph::Var input) {
    spec.validate();
    const Unary act = activation_kind(spec.activation);
    const std::size_t layers = spec.layer_count();
    Graph::Var h = input;
    for (std::size_t l = 0; l < layers; ++l) {
        Graph::Var pre = g.add_rowvec(g.matmul(h, g.param(wname(prefix, l))), g.param(bname(prefix, l)));
        h = (l + 1 < layers) ? g.unary(act, pre) : pre;
    }
    if (spec.final_activation == FinalActivation::Softmax) {
        h = g.softmax_rows(h);
    } else if (spec.final_activation == FinalActivation::Softplus) {
        h = g.unary(Unary::Softplus, h);
    }
    return h;
}

MlpTangents mlp_forward_with_tangents(Graph& g, const MlpSpec& spec, const std::string& prefix,
                                      Graph::Var input) {
    spec.validate();
    if (spec.final_activation != FinalActivation::None) {
        throw std::logic_error("mlp_forward_with_tangents: final activation must be None");
    }
    const Unary act = activation_kind(spec.activation);
    const Unary act_d = unary_deriv(act);
    const Unary act_dd = unary_deriv(act_d);
    const std::size_t layers = spec.layer_count();
    const std::size_t batch = g.value(input).rows();
    const std::size_t in_dim = spec.input_dim;

    MlpTangents result;
    result.d1.resize(in_dim);
    result.d2.resize(in_dim);

    // Unit-direction tangent seeds, one per input coordinate.
    std::vector<Graph::Var> t(in_dim), r(in_dim);
    for (std::size_t j = 0; j < in_dim; ++j) {
        Tensor seed({batch, in_dim}, 0.0);
        for (std::size_t row = 0; row < batch; ++row) {
            seed.at(row, j) = 1.0;
        }
        t[j] = g.input(std::move(seed));
        r[j] = g.input(Tensor({batch, in_dim}, 0.0));
    }

    Graph::Var h = input;
    for (std::size_t l = 0; l < layers; ++l) {
        Graph::Var w = g.param(wname(prefix, l));
        Graph::Var b = g.param(bname(prefix, l));
        Graph::Var pre = g.add_rowvec(g.matmul(h, w), b);
        std::vector<Graph::Var> u(in_dim), s(in_dim);
        for (std::size_t j = 0; j < in_dim; ++j) {
            u[j] = g.matmul(t[j], w);
            s[j] = g.matmul(r[j], w);
        }
        if (l + 1 < layers) {
            Graph::Var fp = g.unary(act_d, pre);
            Graph::Var fpp = g.unary(act_dd, pre);
            h = g.unary(act, pre);
            for (std::size_t j = 0; j < in_dim; ++j) {
                // t' = f'(a) u ; r' = f''(a) u^2 + f'(a) s
                t[j] = g.mul(fp, u[j]);
                r[j] = g.add(g.mul(fpp, g.mul(u[j], u[j])), g.mul(fp, s[j]));
            }
        } else {
            h = pre;
            t = u;
            r = s;
        }
    }
    result.out = h;
    result.d1 = t;
    result.d2 = r;
    return result;
}

void adam_step(AdamState& state, ParamStore& params, const GradMap& grads) {
    ++state.step_count;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (const auto& [name, g] : grads) {
        if (params.is_frozen(name)) {
            continue;
        }
        Tensor& p = params.get(name);
        if (!p.same_shape(g)) {
            throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
        }
        auto& mom = state.moments[name];
        if (mom.m.size() == 0) {
            mom.m = Tensor(p.shape, 0.0);
            mom.v = Tensor(p.shape, 0.0);
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g.values[i];
            mom.m.values[i] = state.beta1 * mom.m.values[i] + (1.0 - state.beta1) * gi;
            mom.v.values[i] = state.beta2 * mom.v.values[i] + (1.0 - state.beta2) * gi * gi;
            const double mhat = mom.m.values[i] / bc1;
            const double vhat = mom.v.values[i] / bc2;
            p.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        p.check_finite("adam_step(" + name + ")");
    }
}

} // namespace invae
