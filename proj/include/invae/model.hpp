#pragma once

#include <optional>
#include <string>
#include <vector>

#include "invae/distributions.hpp"
#include "invae/graph.hpp"
#include "invae/mlp.hpp"
#include "invae/tensor.hpp"

namespace invae {

class Rng;

enum class Variant { InVae, IVae, NfIVae };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Per-sample prior knowledge columns. Categorical columns are one-hot
// encoded against a fixed vocabulary; continuous columns pass through.
struct CovariateColumn {
    std::string name;
    bool categorical = true;
    std::vector<std::string> levels; // categorical only
};

struct CovariateSchema {
    std::vector<CovariateColumn> columns;

    std::size_t raw_dim() const;
    // Encode one cell's values (strings for categorical, parsed doubles for
    // continuous). Unknown levels throw in strict mode and map to all-zero
    // in lenient mode.
    Tensor encode_raw(const std::vector<std::string>& values, bool lenient) const;
};

struct ModelConfig {
    std::size_t n_genes = 0;
    std::size_t invariant_dim = 1;  // i
    std::size_t spurious_dim = 0;   // s
    std::size_t n_env = 1;
    CovariateSchema schema;
    std::vector<std::size_t> hidden = {128, 128};
    std::vector<std::size_t> prior_hidden = {128, 128};
    std::size_t t_nn_dim = 0;    // 0 => 2 * prior latent dim
    std::size_t d_embed_dim = 0; // 0 => schema raw dim
    Variant variant = Variant::InVae;

    std::size_t latent_dim() const { return invariant_dim + spurious_dim; }
    void validate() const;
};

struct CovariateEncoding {
    Tensor one_hot_e; // [n_env]
    Tensor d_embed;
};

struct LatentSplit {
    Tensor z_invariant;
    Tensor z_spurious;

    Tensor concat() const;
};

// Per-gene standardization of log1p counts, computed on the training split.
struct Standardization {
    Tensor mean;
    Tensor sd;

    Tensor apply_log1p(const Tensor& counts_row_major) const; // [N,n] -> [N,n]
};

// The conditional VAE: posterior encoder, covariate embedding, NB decoder,
// spurious Gaussian prior table, and the variant-dependent latent prior.
class InvaeModel {
  public:
    static InvaeModel init(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    const MlpSpec& encoder_spec() const { return encoder_spec_; }
    const MlpSpec& decoder_spec() const { return decoder_spec_; }
    const EFInvariantPrior& invariant_prior() const { return inv_prior_; }
    const MlpSpec& ivae_prior_spec() const { return ivae_prior_spec_; }

    // Parameter-name scopes for the two-step training protocol.
    std::vector<std::string> elbo_scope() const;
    std::vector<std::string> sm_scope() const;
    bool has_ef_prior() const { return cfg_.variant != Variant::IVae; }

    // Value-level operations (deterministic; used by embed and tests).
    Tensor encode_covariates(const Tensor& d_raw, bool lenient_unused = false) const;
    DiagGaussianParams encode(const Tensor& x_counts, const CovariateEncoding& cov,
                              const Standardization& st) const;
    NBParams decode(const LatentSplit& z, double library_size) const;
    DiagGaussianParams spurious_prior_params(std::size_t env_index) const;
    LatentSplit sample_latent(const DiagGaussianParams& enc, const Tensor& noise) const;

    // Conditioning dimension of the EF prior's lambda networks.
    std::size_t prior_cond_dim() const;
    // Latent dimension covered by the EF prior (i for invae, m for nfivae).
    std::size_t prior_latent_dim() const;

    std::size_t encoder_input_dim() const;
    std::size_t d_embed_dim() const { return d_embed_dim_; }

  private:
    ModelConfig cfg_;
    ParamStore params_;
    MlpSpec encoder_spec_;
    MlpSpec decoder_spec_;
    EFInvariantPrior inv_prior_;
    MlpSpec ivae_prior_spec_;
    std::size_t d_embed_dim_ = 0;
};

// Soft log-variance bound used by the encoder head: 10 * tanh(x / 10).
Graph::Var bounded_logvar_tape(Graph& g, Graph::Var raw);
double bounded_logvar(double raw);

} // namespace invae
