#include "invae/distributions.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "invae/rng.hpp"
#include "invae/special.hpp"

namespace invae {

namespace {
constexpr double kHalfLogTwoPi = 0.91893853320467274178;
}

void DiagGaussianParams::validate() const {
    if (!mean.same_shape(log_variance)) {
        throw std::invalid_argument("DiagGaussianParams: mean/log_variance shape mismatch");
    }
    mean.check_finite("DiagGaussianParams.mean");
    log_variance.check_finite("DiagGaussianParams.log_variance");
}

double gaussian_log_pdf(const Tensor& z, const DiagGaussianParams& p) {
    if (!z.same_shape(p.mean)) {
        throw std::invalid_argument("gaussian_log_pdf: dim mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double lv = p.log_variance.values[i];
        const double r = z.values[i] - p.mean.values[i];
        s += -kHalfLogTwoPi - 0.5 * lv - 0.5 * r * r * std::exp(-lv);
    }
    return s;
}

Tensor gaussian_sample(const DiagGaussianParams& p, const Tensor& noise) {
    if (!noise.same_shape(p.mean)) {
        throw std::invalid_argument("gaussian_sample: dim mismatch");
    }
    Tensor out = p.mean;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values[i] += std::exp(0.5 * p.log_variance.values[i]) * noise.values[i];
    }
    return out;
}

double gaussian_kl(const DiagGaussianParams& q, const DiagGaussianParams& p) {
    if (!q.mean.same_shape(p.mean)) {
        throw std::invalid_argument("gaussian_kl: dim mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < q.mean.size(); ++i) {
        const double lq = q.log_variance.values[i];
        const double lp = p.log_variance.values[i];
        const double d = q.mean.values[i] - p.mean.values[i];
        s += 0.5 * (std::exp(lq - lp) + d * d * std::exp(-lp) - 1.0 + lp - lq);
    }
    return s;
}

void NBParams::validate() const {
    if (!mean.same_shape(inverse_dispersion)) {
        throw std::invalid_argument("NBParams: mean/inverse_dispersion shape mismatch");
    }
    for (double m : mean.values) {
        if (!(m >= 0.0) || !std::isfinite(m)) {
            throw std::invalid_argument("NBParams: mean must be finite and >= 0");
        }
    }
    for (double t : inverse_dispersion.values) {
        if (!(t > 0.0) || !std::isfinite(t)) {
            throw std::invalid_argument("NBParams: inverse dispersion must be finite and > 0");
        }
    }
}

double nb_log_pmf(const std::vector<std::uint64_t>& x, const NBParams& p) {
    p.validate();
    if (x.size() != p.dim()) {
        throw std::invalid_argument("nb_log_pmf: dim mismatch");
    }
    double s = 0.0;
    for (std::size_t g = 0; g < x.size(); ++g) {
        const double xv = static_cast<double>(x[g]);
        const double mu = p.mean.values[g];
        const double th = p.inverse_dispersion.values[g];
        if (mu == 0.0) {
            if (x[g] == 0) {
                continue; // point mass at zero
            }
            return -std::numeric_limits<double>::infinity();
        }
        s += log_gamma(xv + th) - log_gamma(th) - log_gamma(xv + 1.0) +
             th * (std::log(th) - std::log(th + mu)) + xv * (std::log(mu) - std::log(th + mu));
    }
    return s;
}

std::vector<std::uint64_t> nb_sample(const NBParams& p, Rng& rng) {
    p.validate();
    std::vector<std::uint64_t> out(p.dim(), 0);
    for (std::size_t g = 0; g < out.size(); ++g) {
        const double mu = p.mean.values[g];
        const double th = p.inverse_dispersion.values[g];
        if (mu == 0.0) {
            continue;
        }
        // Gamma-Poisson mixture: rate ~ Gamma(shape theta, mean mu).
        const double rate = rng.gamma(th) * (mu / th);
        out[g] = rng.poisson(rate);
    }
    return out;
}

void EFInvariantPrior::validate() const {
    t_nn.validate();
    lambda_nn.validate();
    lambda_f.validate();
    if (t_nn.output_dim != lambda_nn.output_dim) {
        throw std::invalid_argument("EFInvariantPrior: T_nn and lambda_nn output dims differ");
    }
    if (lambda_f.output_dim != 2 * t_nn.input_dim) {
        throw std::invalid_argument("EFInvariantPrior: lambda_f output dim must be 2 * latent dim");
    }
    if (lambda_nn.input_dim != lambda_f.input_dim) {
        throw std::invalid_argument("EFInvariantPrior: lambda nets disagree on conditioning dim");
    }
}

void EFInvariantPrior::init_params(ParamStore& store, Rng& rng) const {
    validate();
    mlp_init(t_nn, t_nn_prefix(), store, rng);
    mlp_init(lambda_nn, lambda_nn_prefix(), store, rng);
    mlp_init(lambda_f, lambda_f_prefix(), store, rng);
    // Bias the factorized natural parameters toward a standard Gaussian
    // (quadratic coefficients -1/2) so the initial prior is proper.
    Tensor& lf_bias = store.get(lambda_f_prefix() + ".b" + std::to_string(lambda_f.layer_count() - 1));
    const std::size_t i = latent_dim();
    for (std::size_t j = 0; j < i; ++j) {
        lf_bias.at(i + j) = -0.5;
    }
}

std::vector<std::string> EFInvariantPrior::param_names() const {
    std::vector<std::string> names;
    for (const auto& n : mlp_param_names(t_nn, t_nn_prefix())) names.push_back(n);
    for (const auto& n : mlp_param_names(lambda_nn, lambda_nn_prefix())) names.push_back(n);
    for (const auto& n : mlp_param_names(lambda_f, lambda_f_prefix())) names.push_back(n);
    return names;
}

double ef_unnorm_log_density(const Tensor& z, const Tensor& d_embed, const EFInvariantPrior& prior,
                             const ParamStore& params) {
    prior.validate();
    if (z.size() != prior.latent_dim()) {
        throw std::invalid_argument("ef_unnorm_log_density: z dim mismatch");
    }
    if (d_embed.size() != prior.lambda_nn.input_dim) {
        throw std::invalid_argument("ef_unnorm_log_density: d dim mismatch");
    }
    const Tensor t = mlp_forward(prior.t_nn, params, z, prior.t_nn_prefix());
    const Tensor lam = mlp_forward(prior.lambda_nn, params, d_embed, prior.lambda_nn_prefix());
    const Tensor lf = mlp_forward(prior.lambda_f, params, d_embed, prior.lambda_f_prefix());
    double s = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
        s += t.values[k] * lam.values[k];
    }
    const std::size_t i = prior.latent_dim();
    for (std::size_t j = 0; j < i; ++j) {
        s += z.values[j] * lf.values[j] + z.values[j] * z.values[j] * lf.values[i + j];
    }
    return s;
}

Graph::Var ef_log_density_rows_tape(Graph& g, const EFInvariantPrior& prior, Graph::Var z_var,
                                    Graph::Var d_var) {
    prior.validate();
    Graph::Var t = mlp_forward_tape(g, prior.t_nn, prior.t_nn_prefix(), z_var);
    Graph::Var lam = mlp_forward_tape(g, prior.lambda_nn, prior.lambda_nn_prefix(), d_var);
    Graph::Var lf = mlp_forward_tape(g, prior.lambda_f, prior.lambda_f_prefix(), d_var);
    Graph::Var nn_part = g.row_sum(g.mul(t, lam));
    Graph::Var tf = g.concat_cols(z_var, g.mul(z_var, z_var));
    Graph::Var f_part = g.row_sum(g.mul(tf, lf));
    return g.add(nn_part, f_part);
}

Graph::Var ef_log_density_scalar_tape(Graph& g, const EFInvariantPrior& prior, Graph::Var z_row,
                                      const Tensor& d_embed) {
    Tensor drow = d_embed.rank() == 1 ? Tensor({1, d_embed.size()}, d_embed.values) : d_embed;
    Graph::Var d_var = g.input(std::move(drow));
    Graph::Var z2 = g.value(z_row).rank() == 1
                        ? g.reshape(z_row, {1, g.value(z_row).size()})
                        : z_row;
    return g.sum(ef_log_density_rows_tape(g, prior, z2, d_var));
}

} // namespace invae
