#pragma once

#include <map>
#include <string>
#include <vector>

#include "invae/model.hpp"
#include "invae/synthdata.hpp"
#include "invae/training.hpp"

namespace invae {

// Flat `key = value` run configuration. Lines starting with '#' and blank
// lines are ignored. Keys are namespaced: synth.*, model.*, train.*.
// Unknown keys are hard errors.
struct RunConfig {
    SynthConfig synth;
    bool has_synth = false;

    // model.* (n_genes, n_env and schema come from the data)
    std::size_t model_zi_dim = 5;
    std::size_t model_zs_dim = 3;
    std::vector<std::size_t> model_hidden = {128, 128};
    std::vector<std::size_t> model_prior_hidden = {128, 128};
    std::size_t model_t_nn_dim = 0;
    std::size_t model_d_embed_dim = 0;
    Variant model_variant = Variant::InVae;

    TrainConfig train;

    ModelConfig make_model_config() const;
};

RunConfig parse_run_config_file(const std::string& path);
RunConfig parse_run_config_text(const std::string& text);

// `--help` documentation of every recognized key.
std::string run_config_key_help();

} // namespace invae
