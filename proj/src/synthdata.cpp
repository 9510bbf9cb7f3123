#include "invae/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "invae/distributions.hpp"
#include "invae/errors.hpp"
#include "invae/mlp.hpp"
#include "invae/rng.hpp"

namespace invae {

void SynthConfig::validate() const {
    if (n_env < 2) {
        throw ConfigError("synth.env_count must be >= 2");
    }
    if (n_classes < 2) {
        throw ConfigError("synth.class_count must be >= 2");
    }
    if (zi_dim < 1 || n_genes < 1 || cells_per_cell < 1) {
        throw ConfigError("synth: dims and cell counts must be positive");
    }
    if (rho_corr <= -1.0 / static_cast<double>(std::max<std::size_t>(zi_dim, 2) - 1) || rho_corr >= 1.0) {
        throw ConfigError("synth.rho_corr outside the positive-definite range");
    }
    for (double a : assoc_strength) {
        if (a < 0.0 || a > 1.0) {
            throw ConfigError("synth.assoc_strength entries must be in [0, 1]");
        }
    }
    for (int e : heldout_envs) {
        if (e < 0 || e >= n_env) {
            throw ConfigError("synth.heldout_envs entry out of range");
        }
    }
    if (label_flip < 0.0 || label_flip > 1.0) {
        throw ConfigError("synth.label_flip must be in [0, 1]");
    }
    if (!(theta > 0.0)) {
        throw ConfigError("synth.theta must be positive");
    }
}

bool SynthConfig::is_heldout(int e) const {
    return std::find(heldout_envs.begin(), heldout_envs.end(), e) != heldout_envs.end();
}

int SynthConfig::preferred_class(int e) const {
    const int base = e % n_classes;
    return is_heldout(e) ? (base + 1) % n_classes : base;
}

std::vector<std::vector<std::size_t>> SynthConfig::design_counts() const {
    std::vector<std::vector<std::size_t>> counts(n_env, std::vector<std::size_t>(n_classes, 0));
    for (int e = 0; e < n_env; ++e) {
        const double alpha = e < static_cast<int>(assoc_strength.size()) ? assoc_strength[e] : 0.0;
        const std::size_t total = cells_per_cell * static_cast<std::size_t>(n_classes);
        const int pref = preferred_class(e);
        std::vector<double> weights(n_classes);
        for (int d = 0; d < n_classes; ++d) {
            weights[d] = (1.0 - alpha) / static_cast<double>(n_classes) + (d == pref ? alpha : 0.0);
        }
        // Largest-remainder rounding so the design is exact and seedless.
        std::vector<double> exact(n_classes);
        std::size_t assigned = 0;
        for (int d = 0; d < n_classes; ++d) {
            exact[d] = weights[d] * static_cast<double>(total);
            counts[e][d] = static_cast<std::size_t>(std::floor(exact[d]));
            assigned += counts[e][d];
        }
        std::vector<int> order(n_classes);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
        });
        for (std::size_t k = 0; assigned < total; ++k, ++assigned) {
            counts[e][order[k % order.size()]] += 1;
        }
        for (int d = 0; d < n_classes; ++d) {
            if (counts[e][d] == 0) {
                throw ConfigError("synth: design cell (env " + std::to_string(e) + ", class " +
                                  std::to_string(d) + ") is empty; lower assoc_strength");
            }
        }
    }
    return counts;
}

namespace {

// Lower Cholesky factor of sigma^2-scaled equicorrelation + per-coordinate
// variances: Sigma = D^{1/2} R D^{1/2}, R = (1-rho) I + rho 11'.
std::vector<double> chol_equicorr(const std::vector<double>& var, double rho) {
    const std::size_t n = var.size();
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double r = i == j ? 1.0 : rho;
            a[i * n + j] = r * std::sqrt(var[i] * var[j]);
        }
    }
    std::vector<double> l(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) {
                s -= l[i * n + k] * l[j * n + k];
            }
            if (i == j) {
                if (s <= 0.0) {
                    throw ConfigError("synth: covariance not positive definite");
                }
                l[i * n + i] = std::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    return l;
}

} // namespace

SynthDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t i = cfg.zi_dim;
    const std::size_t s = cfg.zs_dim;
    const int L = cfg.n_label_classes > 0 ? cfg.n_label_classes : cfg.n_classes;

    // Structural parameters come from a stream forked from the data seed so
    // that the whole dataset is a pure function of the config.
    Rng seed_rng(cfg.seed);
    Rng structure_rng = seed_rng.fork(1);
    Rng draw_rng = seed_rng.fork(2);

    std::vector<Tensor> class_mean(cfg.n_classes);
    std::vector<std::vector<double>> class_chol(cfg.n_classes);
    for (int d = 0; d < cfg.n_classes; ++d) {
        class_mean[d] = Tensor({i});
        std::vector<double> var(i);
        for (std::size_t k = 0; k < i; ++k) {
            class_mean[d].at(k) = cfg.class_mean_scale * structure_rng.normal();
            var[k] = structure_rng.uniform(cfg.class_var_min, cfg.class_var_max);
        }
        class_chol[d] = chol_equicorr(var, cfg.rho_corr);
    }
    std::vector<Tensor> env_mean(cfg.n_env), env_sd(cfg.n_env);
    for (int e = 0; e < cfg.n_env; ++e) {
        env_mean[e] = Tensor({std::max<std::size_t>(s, 1)});
        env_sd[e] = Tensor({std::max<std::size_t>(s, 1)});
        for (std::size_t k = 0; k < s; ++k) {
            env_mean[e].at(k) = cfg.env_mean_scale * structure_rng.normal();
            env_sd[e].at(k) = std::sqrt(structure_rng.uniform(cfg.env_var_min, cfg.env_var_max));
        }
    }
    Tensor w_y({static_cast<std::size_t>(L), i});
    for (double& v : w_y.values) {
        v = structure_rng.normal();
    }

    // Seeded generator map: z -> softmax logits, independent of the data seed.
    MlpSpec dec_spec{i + s, std::vector<std::size_t>(cfg.dec_depth, cfg.dec_width), cfg.n_genes,
                     Activation::Tanh, FinalActivation::None};
    ParamStore dec_params;
    Rng dec_rng(cfg.dec_seed);
    mlp_init(dec_spec, "gen", dec_params, dec_rng);

    const auto design = cfg.design_counts();
    std::size_t total_cells = 0;
    for (const auto& row : design) {
        for (std::size_t c : row) {
            total_cells += c;
        }
    }

    SynthDataset out;
    Dataset& ds = out.data;
    ds.counts = Tensor({total_cells, cfg.n_genes});
    ds.true_z_invariant = Tensor({total_cells, i});
    ds.true_z_spurious = Tensor({total_cells, s});
    out.library_draws = Tensor({total_cells});
    out.label_weights = w_y;
    ds.gene_names.reserve(cfg.n_genes);
    for (std::size_t g = 0; g < cfg.n_genes; ++g) {
        ds.gene_names.push_back("g" + std::to_string(g + 1));
    }
    ObsColumn bio;
    bio.name = "bio_class";
    bio.categorical = true;

    Tensor z({1, i + s});
    std::size_t cell = 0;
    for (int e = 0; e < cfg.n_env; ++e) {
        for (int d = 0; d < cfg.n_classes; ++d) {
            for (std::size_t k = 0; k < design[e][d]; ++k, ++cell) {
                // z_I ~ N(mu_d, Sigma_d)
                std::vector<double> raw(i);
                for (std::size_t j = 0; j < i; ++j) {
                    raw[j] = draw_rng.normal();
                }
                for (std::size_t j = 0; j < i; ++j) {
                    double v = class_mean[d].at(j);
                    for (std::size_t c = 0; c <= j; ++c) {
                        v += class_chol[d][j * i + c] * raw[c];
                    }
                    ds.true_z_invariant.at(cell, j) = v;
                    z.at(0, j) = v;
                }
                // z_S ~ N(mu_e, diag sigma_e^2)
                for (std::size_t j = 0; j < s; ++j) {
                    const double v = env_mean[e].at(j) + env_sd[e].at(j) * draw_rng.normal();
                    ds.true_z_spurious.at(cell, j) = v;
                    z.at(0, i + j) = v;
                }
                // counts ~ NB(l * softmax(scale * f(z)), theta)
                Tensor logits = mlp_forward(dec_spec, dec_params, z, "gen");
                double mx = -1e300;
                for (double& v : logits.values) {
                    v *= cfg.dec_scale;
                    mx = std::max(mx, v);
                }
                double sum = 0.0;
                for (double& v : logits.values) {
                    v = std::exp(v - mx);
                    sum += v;
                }
                const double lib = draw_rng.lognormal(cfg.lib_log_mean, cfg.lib_log_sd);
                out.library_draws.at(cell) = lib;
                for (std::size_t g = 0; g < cfg.n_genes; ++g) {
                    const double mu = lib * logits.values[g] / sum;
                    const double rate = draw_rng.gamma(cfg.theta) * (mu / cfg.theta);
                    ds.counts.at(cell, g) = static_cast<double>(draw_rng.poisson(rate));
                }
                // y = argmax(W_y z_I), flipped with probability label_flip
                std::size_t best = 0;
                double best_v = -1e300;
                for (int l = 0; l < L; ++l) {
                    double v = 0.0;
                    for (std::size_t j = 0; j < i; ++j) {
                        v += w_y.at(l, j) * ds.true_z_invariant.at(cell, j);
                    }
                    if (v > best_v) {
                        best_v = v;
                        best = static_cast<std::size_t>(l);
                    }
                }
                if (cfg.label_flip > 0.0 && draw_rng.uniform() < cfg.label_flip) {
                    const std::size_t shift = 1 + draw_rng.uniform_index(static_cast<std::uint64_t>(L - 1));
                    best = (best + shift) % static_cast<std::size_t>(L);
                }
                ds.cell_ids.push_back("c" + std::to_string(cell + 1));
                bio.values.push_back("d" + std::to_string(d));
                ds.env.push_back("e" + std::to_string(e));
                ds.labels.push_back("y" + std::to_string(best));
                out.env_index.push_back(e);
                out.class_index.push_back(d);
            }
        }
    }
    ds.d_columns.push_back(std::move(bio));
    ds.validate();
    return out;
}

std::vector<NamedConfig> default_suite() {
    std::vector<NamedConfig> suite;
    {
        SynthConfig c;
        c.n_env = 4;
        c.n_classes = 3;
        c.zi_dim = 5;
        c.zs_dim = 3;
        c.n_genes = 100;
        c.cells_per_cell = 1000;
        c.rho_corr = 0.5;
        c.dec_depth = 1;
        c.dec_width = 64;
        c.label_flip = 0.05;
        suite.push_back({"identifiability", c});
    }
    {
        SynthConfig c;
        c.n_env = 4;
        c.n_classes = 3;
        c.zi_dim = 5;
        c.zs_dim = 3;
        c.n_genes = 100;
        c.cells_per_cell = 500;
        c.rho_corr = 0.3;
        c.dec_depth = 1;
        c.dec_width = 64;
        c.label_flip = 0.25;
        c.assoc_strength = {0.9, 0.9, 0.9, 0.9};
        c.heldout_envs = {3};
        suite.push_back({"ood-prediction", c});
    }
    {
        SynthConfig c;
        c.n_env = 2;
        c.n_classes = 2;
        c.zi_dim = 3;
        c.zs_dim = 2;
        c.n_genes = 40;
        c.cells_per_cell = 250;
        c.dec_scale = 0.0; // counts carry no latent signal
        c.class_mean_scale = 0.0;
        c.env_mean_scale = 0.0;
        suite.push_back({"null", c});
    }
    return suite;
}

std::string synth_manifest_json(const SynthConfig& cfg) {
    nlohmann::ordered_json j;
    j["env_count"] = cfg.n_env;
    j["class_count"] = cfg.n_classes;
    j["zi_dim"] = cfg.zi_dim;
    j["zs_dim"] = cfg.zs_dim;
    j["genes"] = cfg.n_genes;
    j["cells_per_cell"] = cfg.cells_per_cell;
    j["class_mean_scale"] = cfg.class_mean_scale;
    j["rho_corr"] = cfg.rho_corr;
    j["class_var_min"] = cfg.class_var_min;
    j["class_var_max"] = cfg.class_var_max;
    j["env_mean_scale"] = cfg.env_mean_scale;
    j["env_var_min"] = cfg.env_var_min;
    j["env_var_max"] = cfg.env_var_max;
    j["dec_depth"] = cfg.dec_depth;
    j["dec_width"] = cfg.dec_width;
    j["dec_seed"] = cfg.dec_seed;
    j["dec_scale"] = cfg.dec_scale;
    j["lib_log_mean"] = cfg.lib_log_mean;
    j["lib_log_sd"] = cfg.lib_log_sd;
    j["theta"] = cfg.theta;
    j["label_flip"] = cfg.label_flip;
    j["label_classes"] = cfg.n_label_classes;
    j["assoc_strength"] = cfg.assoc_strength;
    j["heldout_envs"] = cfg.heldout_envs;
    j["seed"] = cfg.seed;
    return j.dump(1);
}

} // namespace invae
