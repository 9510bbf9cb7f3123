#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invae/dataset.hpp"
#include "invae/tensor.hpp"

namespace invae {

// Generator for the assumed data-generating process: z_I | d drawn from a
// class-specific correlated Gaussian, z_S | e from an environment-specific
// diagonal Gaussian, counts from a seeded nonlinear map through a negative
// binomial, labels a (possibly noisy) linear readout of z_I only.
struct SynthConfig {
    int n_env = 2;
    int n_classes = 2;
    std::size_t zi_dim = 2;
    std::size_t zs_dim = 1;
    std::size_t n_genes = 20;
    std::size_t cells_per_cell = 100; // per (d, e) design cell

    double class_mean_scale = 2.0;
    double rho_corr = 0.0;           // equicorrelation within each class covariance
    double class_var_min = 0.6;
    double class_var_max = 1.6;
    double env_mean_scale = 2.0;
    double env_var_min = 0.5;
    double env_var_max = 1.5;

    std::size_t dec_depth = 1;
    std::size_t dec_width = 32;
    std::uint64_t dec_seed = 1234;   // fixed "biology": independent of data seed
    double dec_scale = 1.0;          // 0 disconnects counts from latents

    double lib_log_mean = 7.3132204; // log(1500)
    double lib_log_sd = 0.3;
    double theta = 2.0;

    double label_flip = 0.0;
    int n_label_classes = 0; // 0 => n_classes

    // Per-environment mixing weight of the d | e distribution toward the
    // environment's preferred class; preferred classes are shifted by one
    // for held-out environments, reversing the association.
    std::vector<double> assoc_strength;
    std::vector<int> heldout_envs;

    std::uint64_t seed = 0;

    void validate() const;
    bool is_heldout(int e) const;
    int preferred_class(int e) const;
    // Deterministic per-(e, d) cell counts (largest-remainder rounding).
    std::vector<std::vector<std::size_t>> design_counts() const;
};

struct SynthDataset {
    Dataset data;
    Tensor library_draws;  // [N]
    Tensor label_weights;  // [L, i], the readout matrix W_y
    std::vector<int> env_index;
    std::vector<int> class_index;
};

SynthDataset generate(const SynthConfig& cfg);

struct NamedConfig {
    std::string name;
    SynthConfig config;
};

// "identifiability", "ood-prediction" and "null".
std::vector<NamedConfig> default_suite();

std::string synth_manifest_json(const SynthConfig& cfg);

} // namespace invae
