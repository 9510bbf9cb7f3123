#include "invae/runconfig.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "invae/errors.hpp"

namespace invae {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) {
        return "";
    }
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

double parse_num(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    }
    if (pos != value.size()) {
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    const double v = parse_num(key, value);
    if (v < 0.0) {
        throw ConfigError("key '" + key + "': must be non-negative");
    }
    return static_cast<std::uint64_t>(v);
}

std::vector<double> parse_num_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ' ')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(parse_num(key, item));
        }
    }
    return out;
}

} // namespace

ModelConfig RunConfig::make_model_config() const {
    ModelConfig cfg;
    cfg.invariant_dim = model_zi_dim;
    cfg.spurious_dim = model_zs_dim;
    cfg.hidden = model_hidden;
    cfg.prior_hidden = model_prior_hidden;
    cfg.t_nn_dim = model_t_nn_dim;
    cfg.d_embed_dim = model_d_embed_dim;
    cfg.variant = model_variant;
    return cfg;
}

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig rc;
    std::stringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }

        if (key.rfind("synth.", 0) == 0) {
            rc.has_synth = true;
        }
        if (key == "synth.suite") {
            bool found = false;
            for (const auto& named : default_suite()) {
                if (named.name == value) {
                    rc.synth = named.config;
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw ConfigError("key 'synth.suite': unknown suite '" + value + "'");
            }
        } else if (key == "synth.env_count") {
            rc.synth.n_env = static_cast<int>(parse_num(key, value));
        } else if (key == "synth.class_count") {
            rc.synth.n_classes = static_cast<int>(parse_num(key, value));
        } else if (key == "synth.zi_dim") {
            rc.synth.zi_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.zs_dim") {
            rc.synth.zs_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.genes") {
            rc.synth.n_genes = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.cells_per_cell") {
            rc.synth.cells_per_cell = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.class_mean_scale") {
            rc.synth.class_mean_scale = parse_num(key, value);
        } else if (key == "synth.rho_corr") {
            rc.synth.rho_corr = parse_num(key, value);
        } else if (key == "synth.class_var_min") {
            rc.synth.class_var_min = parse_num(key, value);
        } else if (key == "synth.class_var_max") {
            rc.synth.class_var_max = parse_num(key, value);
        } else if (key == "synth.env_mean_scale") {
            rc.synth.env_mean_scale = parse_num(key, value);
        } else if (key == "synth.env_var_min") {
            rc.synth.env_var_min = parse_num(key, value);
        } else if (key == "synth.env_var_max") {
            rc.synth.env_var_max = parse_num(key, value);
        } else if (key == "synth.dec_depth") {
            rc.synth.dec_depth = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.dec_width") {
            rc.synth.dec_width = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "synth.dec_seed") {
            rc.synth.dec_seed = parse_u64(key, value);
        } else if (key == "synth.dec_scale") {
            rc.synth.dec_scale = parse_num(key, value);
        } else if (key == "synth.lib_log_mean") {
            rc.synth.lib_log_mean = parse_num(key, value);
        } else if (key == "synth.lib_log_sd") {
            rc.synth.lib_log_sd = parse_num(key, value);
        } else if (key == "synth.theta") {
            rc.synth.theta = parse_num(key, value);
        } else if (key == "synth.label_flip") {
            rc.synth.label_flip = parse_num(key, value);
        } else if (key == "synth.label_classes") {
            rc.synth.n_label_classes = static_cast<int>(parse_num(key, value));
        } else if (key == "synth.assoc_strength") {
            rc.synth.assoc_strength = parse_num_list(key, value);
        } else if (key == "synth.heldout_envs") {
            rc.synth.heldout_envs.clear();
            for (double v : parse_num_list(key, value)) {
                rc.synth.heldout_envs.push_back(static_cast<int>(v));
            }
        } else if (key == "synth.seed") {
            rc.synth.seed = parse_u64(key, value);
        } else if (key == "model.zi_dim") {
            rc.model_zi_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "model.zs_dim") {
            rc.model_zs_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "model.hidden") {
            rc.model_hidden.clear();
            for (double v : parse_num_list(key, value)) {
                rc.model_hidden.push_back(static_cast<std::size_t>(v));
            }
        } else if (key == "model.prior_hidden") {
            rc.model_prior_hidden.clear();
            for (double v : parse_num_list(key, value)) {
                rc.model_prior_hidden.push_back(static_cast<std::size_t>(v));
            }
        } else if (key == "model.t_nn_dim") {
            rc.model_t_nn_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "model.d_embed_dim") {
            rc.model_d_embed_dim = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "model.variant") {
            try {
                rc.model_variant = variant_from_name(value);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("key 'model.variant': ") + e.what());
            }
        } else if (key == "train.epochs") {
            rc.train.epochs = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "train.batch_size") {
            rc.train.batch_size = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "train.lr") {
            rc.train.lr = parse_num(key, value);
        } else if (key == "train.lr_final_fraction") {
            rc.train.lr_final_fraction = parse_num(key, value);
        } else if (key == "train.beta") {
            rc.train.beta = parse_num(key, value);
        } else if (key == "train.lambda_reg_sm") {
            rc.train.lambda_reg_sm = parse_num(key, value);
        } else if (key == "train.mc_samples") {
            rc.train.mc_samples = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "train.sm_steps") {
            rc.train.sm_steps = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "train.seed") {
            rc.train.seed = parse_u64(key, value);
        } else if (key == "train.patience") {
            rc.train.patience = static_cast<std::size_t>(parse_u64(key, value));
        } else if (key == "train.val_fraction") {
            rc.train.val_fraction = parse_num(key, value);
        } else {
            throw ConfigError("unknown configuration key '" + key + "'");
        }
    }
    return rc;
}

RunConfig parse_run_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str());
}

std::string run_config_key_help() {
    return
        "Configuration file: one 'key = value' per line, '#' comments.\n"
        "Synthetic data keys:\n"
        "  synth.suite            load a named preset first (identifiability|ood-prediction|null)\n"
        "  synth.env_count        number of environments E (>= 2)\n"
        "  synth.class_count      number of biological classes D (>= 2)\n"
        "  synth.zi_dim           invariant latent dimension\n"
        "  synth.zs_dim           spurious latent dimension\n"
        "  synth.genes            gene count\n"
        "  synth.cells_per_cell   cells per (class, environment) design cell\n"
        "  synth.class_mean_scale spread of per-class latent means\n"
        "  synth.rho_corr         equicorrelation of the class covariance\n"
        "  synth.class_var_min/max  per-coordinate class variance range\n"
        "  synth.env_mean_scale   spread of per-environment latent means\n"
        "  synth.env_var_min/max  per-coordinate environment variance range\n"
        "  synth.dec_depth/dec_width  generator network size\n"
        "  synth.dec_seed         generator weight seed (bio map)\n"
        "  synth.dec_scale        logit scale (0 disconnects counts from latents)\n"
        "  synth.lib_log_mean/lib_log_sd  log-normal library size\n"
        "  synth.theta            generator inverse dispersion\n"
        "  synth.label_flip       label noise probability\n"
        "  synth.label_classes    label classes (default class_count)\n"
        "  synth.assoc_strength   per-env class association in [0,1], space separated\n"
        "  synth.heldout_envs     env indices with reversed association, space separated\n"
        "  synth.seed             data seed\n"
        "Model keys:\n"
        "  model.zi_dim model.zs_dim model.hidden model.prior_hidden\n"
        "  model.t_nn_dim model.d_embed_dim model.variant (invae|ivae|nfivae)\n"
        "Training keys:\n"
        "  train.epochs train.batch_size train.lr train.lr_final_fraction train.beta train.lambda_reg_sm\n"
        "  train.mc_samples train.sm_steps train.seed train.patience train.val_fraction\n";
}

} // namespace invae
