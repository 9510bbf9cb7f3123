#include "invae/model.hpp"

#include <cmath>
#include <stdexcept>

#include "invae/rng.hpp"

namespace invae {

std::string variant_name(Variant v) {
    switch (v) {
    case Variant::InVae:
        return "invae";
    case Variant::IVae:
        return "ivae";
    case Variant::NfIVae:
        return "nfivae";
    }
    throw std::logic_error("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "invae") return Variant::InVae;
    if (name == "ivae") return Variant::IVae;
    if (name == "nfivae") return Variant::NfIVae;
    throw std::invalid_argument("unknown variant '" + name + "' (expected invae|ivae|nfivae)");
}

std::size_t CovariateSchema::raw_dim() const {
    std::size_t d = 0;
    for (const auto& col : columns) {
        d += col.categorical ? col.levels.size() : 1;
    }
    return d;
}

Tensor CovariateSchema::encode_raw(const std::vector<std::string>& values, bool lenient) const {
    if (values.size() != columns.size()) {
        throw std::invalid_argument("covariate encode: expected " + std::to_string(columns.size()) +
                                    " values, got " + std::to_string(values.size()));
    }
    Tensor out({raw_dim()}, 0.0);
    std::size_t off = 0;
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const auto& col = columns[c];
        if (col.categorical) {
            bool found = false;
            for (std::size_t l = 0; l < col.levels.size(); ++l) {
                if (col.levels[l] == values[c]) {
                    out.at(off + l) = 1.0;
                    found = true;
                    break;
                }
            }
            if (!found && !lenient) {
                throw std::invalid_argument("unseen level '" + values[c] + "' in covariate column '" +
                                            col.name + "'");
            }
            off += col.levels.size();
        } else {
            std::size_t pos = 0;
            double v = 0.0;
            try {
                v = std::stod(values[c], &pos);
            } catch (const std::exception&) {
                throw std::invalid_argument("covariate column '" + col.name + "': non-numeric value '" +
                                            values[c] + "'");
            }
            if (pos != values[c].size()) {
                throw std::invalid_argument("covariate column '" + col.name + "': non-numeric value '" +
                                            values[c] + "'");
            }
            out.at(off) = v;
            off += 1;
        }
    }
    return out;
}

void ModelConfig::validate() const {
    if (n_genes < 1) {
        throw std::invalid_argument("ModelConfig: n_genes must be >= 1");
    }
    if (invariant_dim < 1) {
        throw std::invalid_argument("ModelConfig: invariant dim must be >= 1");
    }
    if (latent_dim() > n_genes) {
        throw std::invalid_argument("ModelConfig: latent dim exceeds gene count");
    }
    if (n_env < 1) {
        throw std::invalid_argument("ModelConfig: n_env must be >= 1");
    }
}

Tensor LatentSplit::concat() const {
    Tensor out({z_invariant.size() + z_spurious.size()});
    for (std::size_t j = 0; j < z_invariant.size(); ++j) {
        out.at(j) = z_invariant.at(j);
    }
    for (std::size_t j = 0; j < z_spurious.size(); ++j) {
        out.at(z_invariant.size() + j) = z_spurious.at(j);
    }
    return out;
}

Tensor Standardization::apply_log1p(const Tensor& counts) const {
    Tensor out = counts;
    const std::size_t n = mean.size();
    if (counts.rank() != 2 || counts.cols() != n) {
        throw std::invalid_argument("standardization: gene dim mismatch");
    }
    for (std::size_t r = 0; r < counts.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out.at(r, c) = (std::log1p(counts.at(r, c)) - mean.at(c)) / sd.at(c);
        }
    }
    return out;
}

double bounded_logvar(double raw) { return 10.0 * std::tanh(raw / 10.0); }

Graph::Var bounded_logvar_tape(Graph& g, Graph::Var raw) {
    return g.affine(g.unary(Unary::Tanh, g.affine(raw, 0.1, 0.0)), 10.0, 0.0);
}

InvaeModel InvaeModel::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    InvaeModel model;
    model.cfg_ = cfg;
    model.d_embed_dim_ = cfg.d_embed_dim > 0 ? cfg.d_embed_dim : cfg.schema.raw_dim();
    if (model.d_embed_dim_ == 0) {
        model.d_embed_dim_ = 1; // degenerate schema still needs a conditioning slot
    }

    const std::size_t m = cfg.latent_dim();
    model.encoder_spec_ = MlpSpec{cfg.n_genes + cfg.n_env + model.d_embed_dim_, cfg.hidden, 2 * m,
                                  Activation::Relu, FinalActivation::None};
    model.decoder_spec_ = MlpSpec{m, cfg.hidden, cfg.n_genes, Activation::Relu, FinalActivation::None};

    Rng rng(seed);

    // D_psi: single linear covariate embedding.
    const std::size_t raw = std::max<std::size_t>(cfg.schema.raw_dim(), 1);
    {
        Tensor w({raw, model.d_embed_dim_});
        if (raw == model.d_embed_dim_) {
            for (std::size_t j = 0; j < raw; ++j) {
                w.at(j, j) = 1.0; // identity start keeps covariates readable
            }
        } else {
            fill_uniform(w, rng, std::sqrt(6.0 / static_cast<double>(raw + model.d_embed_dim_)));
        }
        model.params_.add("dpsi.w", std::move(w));
        model.params_.add("dpsi.b", Tensor({model.d_embed_dim_}, 0.0));
    }

    mlp_init(model.encoder_spec_, "enc", model.params_, rng);
    mlp_init(model.decoder_spec_, "dec", model.params_, rng);

    // Per-gene inverse dispersion, softplus(raw) + 1e-6; raw 0.5413 => theta ~ 1.
    model.params_.add("disp.raw", Tensor({cfg.n_genes}, 0.54132485461292));

    if (cfg.variant == Variant::InVae && cfg.spurious_dim > 0) {
        model.params_.add("sprior.mean", Tensor({cfg.n_env, cfg.spurious_dim}, 0.0));
        model.params_.add("sprior.logvar", Tensor({cfg.n_env, cfg.spurious_dim}, 0.0));
    }

    if (cfg.variant == Variant::IVae) {
        model.ivae_prior_spec_ = MlpSpec{model.d_embed_dim_ + cfg.n_env, cfg.prior_hidden, 2 * m,
                                         Activation::Relu, FinalActivation::None};
        mlp_init(model.ivae_prior_spec_, "uprior", model.params_, rng);
    } else {
        const std::size_t pl = cfg.variant == Variant::InVae ? cfg.invariant_dim : m;
        const std::size_t cond = cfg.variant == Variant::InVae ? model.d_embed_dim_
                                                               : model.d_embed_dim_ + cfg.n_env;
        const std::size_t k = cfg.t_nn_dim > 0 ? cfg.t_nn_dim : 2 * pl;
        model.inv_prior_.prefix = "iprior";
        model.inv_prior_.t_nn = MlpSpec{pl, cfg.prior_hidden, k, Activation::Relu, FinalActivation::None};
        model.inv_prior_.lambda_nn =
            MlpSpec{cond, cfg.prior_hidden, k, Activation::Relu, FinalActivation::None};
        model.inv_prior_.lambda_f =
            MlpSpec{cond, cfg.prior_hidden, 2 * pl, Activation::Relu, FinalActivation::None};
        model.inv_prior_.init_params(model.params_, rng);
    }
    return model;
}

std::vector<std::string> InvaeModel::elbo_scope() const {
    std::vector<std::string> names;
    for (const auto& n : params_.names()) {
        if (n.rfind("iprior.", 0) != 0) {
            names.push_back(n);
        }
    }
    return names;
}

std::vector<std::string> InvaeModel::sm_scope() const { return params_.names_with_prefix("iprior."); }

std::size_t InvaeModel::prior_cond_dim() const {
    return cfg_.variant == Variant::NfIVae ? d_embed_dim_ + cfg_.n_env : d_embed_dim_;
}

std::size_t InvaeModel::prior_latent_dim() const {
    return cfg_.variant == Variant::NfIVae ? cfg_.latent_dim() : cfg_.invariant_dim;
}

std::size_t InvaeModel::encoder_input_dim() const { return encoder_spec_.input_dim; }

Tensor InvaeModel::encode_covariates(const Tensor& d_raw, bool) const {
    Tensor row = d_raw.rank() == 1 ? Tensor({1, d_raw.size()}, d_raw.values) : d_raw;
    const Tensor& w = params_.get("dpsi.w");
    const Tensor& b = params_.get("dpsi.b");
    if (row.cols() != w.rows()) {
        throw std::invalid_argument("encode_covariates: raw dim mismatch");
    }
    Tensor out = matmul(row, w);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out.at(r, c) += b.at(c);
        }
    }
    out.check_finite("encode_covariates");
    if (d_raw.rank() == 1) {
        return Tensor({out.cols()}, std::move(out.values));
    }
    return out;
}

DiagGaussianParams InvaeModel::encode(const Tensor& x_counts, const CovariateEncoding& cov,
                                      const Standardization& st) const {
    if (x_counts.size() != cfg_.n_genes) {
        throw std::invalid_argument("encode: expected " + std::to_string(cfg_.n_genes) + " genes, got " +
                                    std::to_string(x_counts.size()));
    }
    for (double v : x_counts.values) {
        if (v < 0.0 || std::floor(v) != v) {
            throw std::invalid_argument("encode: counts must be non-negative integers");
        }
    }
    if (cov.one_hot_e.size() != cfg_.n_env || cov.d_embed.size() != d_embed_dim_) {
        throw std::invalid_argument("encode: covariate encoding dim mismatch");
    }
    Tensor xs = st.apply_log1p(Tensor({1, cfg_.n_genes}, x_counts.values));
    Tensor in({1, encoder_input_dim()});
    std::size_t off = 0;
    for (std::size_t c = 0; c < cfg_.n_genes; ++c) in.at(0, off++) = xs.at(0, c);
    for (std::size_t c = 0; c < cfg_.n_env; ++c) in.at(0, off++) = cov.one_hot_e.at(c);
    for (std::size_t c = 0; c < d_embed_dim_; ++c) in.at(0, off++) = cov.d_embed.at(c);

    Tensor out = mlp_forward(encoder_spec_, params_, in, "enc");
    const std::size_t m = cfg_.latent_dim();
    DiagGaussianParams p;
    p.mean = Tensor({m});
    p.log_variance = Tensor({m});
    for (std::size_t j = 0; j < m; ++j) {
        p.mean.at(j) = out.at(0, j);
        p.log_variance.at(j) = bounded_logvar(out.at(0, m + j));
    }
    p.validate();
    return p;
}

NBParams InvaeModel::decode(const LatentSplit& z, double library_size) const {
    if (!(library_size > 0.0)) {
        throw std::invalid_argument("decode: library size must be positive");
    }
    Tensor zc = z.concat();
    zc.check_finite("decode.z");
    if (zc.size() != cfg_.latent_dim()) {
        throw std::invalid_argument("decode: latent dim mismatch");
    }
    Tensor logits = mlp_forward(decoder_spec_, params_, Tensor({1, zc.size()}, zc.values), "dec");
    // softmax over genes
    double mx = -1e300;
    for (double v : logits.values) mx = std::max(mx, v);
    double s = 0.0;
    for (double& v : logits.values) {
        v = std::exp(v - mx);
        s += v;
    }
    NBParams p;
    p.mean = Tensor({cfg_.n_genes});
    p.inverse_dispersion = Tensor({cfg_.n_genes});
    const Tensor& disp = params_.get("disp.raw");
    for (std::size_t g = 0; g < cfg_.n_genes; ++g) {
        p.mean.at(g) = library_size * (logits.values[g] / s);
        p.inverse_dispersion.at(g) = unary_eval(Unary::Softplus, disp.at(g)) + 1e-6;
    }
    p.validate();
    return p;
}

DiagGaussianParams InvaeModel::spurious_prior_params(std::size_t env_index) const {
    if (env_index >= cfg_.n_env) {
        throw std::out_of_range("spurious_prior_params: invalid environment index");
    }
    DiagGaussianParams p;
    p.mean = Tensor({cfg_.spurious_dim});
    p.log_variance = Tensor({cfg_.spurious_dim});
    if (cfg_.spurious_dim == 0 || cfg_.variant != Variant::InVae) {
        return p;
    }
    const Tensor& mu = params_.get("sprior.mean");
    const Tensor& lv = params_.get("sprior.logvar");
    for (std::size_t j = 0; j < cfg_.spurious_dim; ++j) {
        p.mean.at(j) = mu.at(env_index, j);
        p.log_variance.at(j) = lv.at(env_index, j);
    }
    return p;
}

LatentSplit InvaeModel::sample_latent(const DiagGaussianParams& enc, const Tensor& noise) const {
    if (noise.size() != cfg_.latent_dim()) {
        throw std::invalid_argument("sample_latent: noise dim mismatch");
    }
    Tensor z = gaussian_sample(enc, noise);
    LatentSplit split;
    split.z_invariant = Tensor({cfg_.invariant_dim});
    split.z_spurious = Tensor({cfg_.spurious_dim});
    for (std::size_t j = 0; j < cfg_.invariant_dim; ++j) {
        split.z_invariant.at(j) = z.at(j);
    }
    for (std::size_t j = 0; j < cfg_.spurious_dim; ++j) {
        split.z_spurious.at(j) = z.at(cfg_.invariant_dim + j);
    }
    return split;
}

} // namespace invae
