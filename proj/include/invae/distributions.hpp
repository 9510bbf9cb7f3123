#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invae/graph.hpp"
#include "invae/mlp.hpp"
#include "invae/tensor.hpp"

namespace invae {

class Rng;

// Diagonal Gaussian given by mean and log variance vectors.
struct DiagGaussianParams {
    Tensor mean;
    Tensor log_variance;

    std::size_t dim() const { return mean.size(); }
    void validate() const;
};

double gaussian_log_pdf(const Tensor& z, const DiagGaussianParams& p);
Tensor gaussian_sample(const DiagGaussianParams& p, const Tensor& noise);
double gaussian_kl(const DiagGaussianParams& q, const DiagGaussianParams& p);

// Negative binomial with per-gene mean mu = l * rho and inverse dispersion
// theta > 0. Variance is mu + mu^2 / theta.
struct NBParams {
    Tensor mean;
    Tensor inverse_dispersion;

    std::size_t dim() const { return mean.size(); }
    void validate() const;
};

double nb_log_pmf(const std::vector<std::uint64_t>& x, const NBParams& p);
std::vector<std::uint64_t> nb_sample(const NBParams& p, Rng& rng);

// Unnormalized non-factorized exponential-family prior:
//   log p~(z | d) = <T_nn(z), lambda_nn(d)> + <(z, z^2), lambda_f(d)>
// Base measure and normalizer are never evaluated; score matching and the
// frozen-prior ELBO term only need the unnormalized form.
struct EFInvariantPrior {
    MlpSpec t_nn;      // z -> K
    MlpSpec lambda_nn; // d -> K
    MlpSpec lambda_f;  // d -> 2 * latent_dim
    std::string prefix;

    std::size_t latent_dim() const { return t_nn.input_dim; }
    std::string t_nn_prefix() const { return prefix + ".tnn"; }
    std::string lambda_nn_prefix() const { return prefix + ".lnn"; }
    std::string lambda_f_prefix() const { return prefix + ".lf"; }

    void validate() const;
    void init_params(ParamStore& store, Rng& rng) const;
    std::vector<std::string> param_names() const;
};

double ef_unnorm_log_density(const Tensor& z, const Tensor& d_embed, const EFInvariantPrior& prior,
                             const ParamStore& params);

// Per-row log p~ for a batch on the tape: z_var [B, i], d_var [B, dd] -> [B].
Graph::Var ef_log_density_rows_tape(Graph& g, const EFInvariantPrior& prior, Graph::Var z_var,
                                    Graph::Var d_var);

// Scalar log p~ builder for a single point (for latent_hessian_diag and
// value-level use); d_embed enters as a constant.
Graph::Var ef_log_density_scalar_tape(Graph& g, const EFInvariantPrior& prior, Graph::Var z_row,
                                      const Tensor& d_embed);

} // namespace invae
