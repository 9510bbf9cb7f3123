#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "invae/dataset.hpp"
#include "invae/errors.hpp"
#include "invae/evaluation.hpp"
#include "invae/runconfig.hpp"
#include "invae/synthdata.hpp"
#include "invae/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace invae;

namespace {

json report_to_json(const TrainReport& report) {
    json j;
    j["best_epoch"] = report.best_epoch;
    json rows = json::array();
    for (const auto& e : report.epochs) {
        json r;
        r["train_elbo"] = e.train_elbo;
        r["train_sm"] = e.train_sm;
        r["train_tc"] = e.train_tc;
        r["train_total"] = e.train_total;
        r["val_elbo"] = e.val_elbo;
        r["val_sm"] = e.val_sm;
        r["val_tc"] = e.val_tc;
        r["val_total"] = e.val_total;
        r["seconds"] = e.seconds;
        rows.push_back(std::move(r));
    }
    j["epochs"] = std::move(rows);
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    out << text;
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

void write_embedding_csv(const std::string& path, const std::vector<std::string>& cell_ids,
                         const Tensor& zi, const Tensor& zs, const std::string& block) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header = {"cell_id"};
    const bool want_i = block == "invariant" || block == "all";
    const bool want_s = (block == "spurious" || block == "all") && zs.size() > 0;
    if (want_i) {
        for (std::size_t c = 0; c < zi.cols(); ++c) {
            header.push_back("zI_" + std::to_string(c + 1));
        }
    }
    if (want_s) {
        for (std::size_t c = 0; c < zs.cols(); ++c) {
            header.push_back("zS_" + std::to_string(c + 1));
        }
    }
    rows.push_back(std::move(header));
    for (std::size_t r = 0; r < cell_ids.size(); ++r) {
        std::vector<std::string> row = {cell_ids[r]};
        if (want_i) {
            for (std::size_t c = 0; c < zi.cols(); ++c) {
                row.push_back(format_double(zi.at(r, c)));
            }
        }
        if (want_s) {
            for (std::size_t c = 0; c < zs.cols(); ++c) {
                row.push_back(format_double(zs.at(r, c)));
            }
        }
        rows.push_back(std::move(row));
    }
    write_csv(path, rows);
}

struct EmbeddingFile {
    std::vector<std::string> cell_ids;
    Tensor zi;
    Tensor zs;
};

EmbeddingFile read_embedding_csv(const std::string& path) {
    auto rows = read_csv(path);
    if (rows.size() < 2 || rows[0].empty() || rows[0][0] != "cell_id") {
        throw SchemaError("embedding CSV: expected header 'cell_id,zI_*...,zS_*...'");
    }
    std::size_t zi_cols = 0, zs_cols = 0;
    for (std::size_t c = 1; c < rows[0].size(); ++c) {
        if (rows[0][c].rfind("zI_", 0) == 0) {
            ++zi_cols;
        } else if (rows[0][c].rfind("zS_", 0) == 0) {
            ++zs_cols;
        } else {
            throw SchemaError("embedding CSV: unexpected column '" + rows[0][c] + "'");
        }
    }
    EmbeddingFile emb;
    const std::size_t n = rows.size() - 1;
    emb.zi = Tensor({n, zi_cols});
    emb.zs = Tensor({n, zs_cols});
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) {
            throw SchemaError("embedding CSV: row " + std::to_string(r) + " has wrong field count");
        }
        emb.cell_ids.push_back(rows[r][0]);
        for (std::size_t c = 0; c < zi_cols; ++c) {
            emb.zi.at(r - 1, c) = std::stod(rows[r][1 + c]);
        }
        for (std::size_t c = 0; c < zs_cols; ++c) {
            emb.zs.at(r - 1, c) = std::stod(rows[r][1 + zi_cols + c]);
        }
    }
    return emb;
}

struct ObsFile {
    std::vector<std::string> cell_ids;
    std::vector<std::string> env;
    std::vector<std::string> labels; // may be empty
};

ObsFile read_obs_csv(const std::string& path) {
    auto rows = read_csv(path);
    if (rows.size() < 2 || rows[0].empty() || rows[0][0] != "cell_id") {
        throw SchemaError("obs CSV: expected header 'cell_id,...,env[,label]'");
    }
    std::size_t env_col = rows[0].size();
    for (std::size_t c = 1; c < rows[0].size(); ++c) {
        if (rows[0][c] == "env") {
            env_col = c;
        }
    }
    if (env_col == rows[0].size()) {
        throw SchemaError("obs CSV: missing 'env' column");
    }
    const bool has_label = env_col + 1 < rows[0].size() && rows[0][env_col + 1] == "label";
    ObsFile obs;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        obs.cell_ids.push_back(rows[r][0]);
        obs.env.push_back(rows[r][env_col]);
        if (has_label) {
            obs.labels.push_back(rows[r][env_col + 1]);
        }
    }
    return obs;
}

json metrics_to_json(const MetricsReport& report, std::uint64_t seed) {
    json j;
    json metrics = json::object();
    for (const auto& [name, value] : report.metrics) {
        metrics[name] = value;
    }
    j["metrics"] = std::move(metrics);
    json skipped = json::array();
    for (const auto& [name, reason] : report.skipped) {
        skipped.push_back({{"name", name}, {"reason", reason}});
    }
    j["skipped"] = std::move(skipped);
    j["meta"] = {{"seed", seed}, {"versions", {{"invae", "1.0.0"}, {"format", 1}}}};
    return j;
}

MetricsReport evaluate_embedding(const EmbeddingFile& emb, const ObsFile& obs,
                                 const std::string& true_latents_path,
                                 const std::vector<std::string>& probe_train_env_names,
                                 std::uint64_t seed, std::vector<std::string>* env_vocab_out) {
    if (emb.cell_ids != obs.cell_ids) {
        throw SchemaError("embedding and obs files disagree on cell ids or order");
    }
    ReportInputs in;
    in.z_invariant = emb.zi;
    in.z_spurious = emb.zs;
    in.seed = seed;
    std::vector<std::string> env_vocab;
    in.batch_labels = encode_labels(obs.env, &env_vocab);
    if (!obs.labels.empty()) {
        in.type_labels = encode_labels(obs.labels);
    }
    if (!true_latents_path.empty()) {
        auto rows = read_csv(true_latents_path);
        if (rows.size() != emb.cell_ids.size() + 1) {
            throw SchemaError("true latents: row count mismatch");
        }
        std::size_t zi_cols = 0, zs_cols = 0;
        for (std::size_t c = 1; c < rows[0].size(); ++c) {
            if (rows[0][c].rfind("zI_", 0) == 0) ++zi_cols;
            if (rows[0][c].rfind("zS_", 0) == 0) ++zs_cols;
        }
        Tensor tzi({emb.cell_ids.size(), zi_cols}), tzs({emb.cell_ids.size(), zs_cols});
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r][0] != emb.cell_ids[r - 1]) {
                throw SchemaError("true latents: cell id mismatch at row " + std::to_string(r));
            }
            for (std::size_t c = 0; c < zi_cols; ++c) {
                tzi.at(r - 1, c) = std::stod(rows[r][1 + c]);
            }
            for (std::size_t c = 0; c < zs_cols; ++c) {
                tzs.at(r - 1, c) = std::stod(rows[r][1 + zi_cols + c]);
            }
        }
        in.true_z_invariant = std::move(tzi);
        in.true_z_spurious = std::move(tzs);
    }
    for (const auto& name : probe_train_env_names) {
        bool found = false;
        for (std::size_t i = 0; i < env_vocab.size(); ++i) {
            if (env_vocab[i] == name) {
                in.probe_train_envs.push_back(static_cast<int>(i));
                found = true;
                break;
            }
        }
        if (!found) {
            throw SchemaError("probe train environment '" + name + "' not present in obs file");
        }
    }
    if (env_vocab_out) {
        *env_vocab_out = env_vocab;
    }
    return metrics_report(in);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        std::size_t pos = s.find(',', start);
        if (pos == std::string::npos) {
            if (start < s.size()) {
                out.push_back(s.substr(start));
            }
            break;
        }
        if (pos > start) {
            out.push_back(s.substr(start, pos - start));
        }
        start = pos + 1;
    }
    return out;
}

int run_generate(const std::string& config_path, const std::string& out_dir) {
    RunConfig rc = parse_run_config_file(config_path);
    SynthDataset synth = generate(rc.synth);
    write_dataset_dir(synth.data, out_dir, synth_manifest_json(rc.synth));
    std::cout << "wrote " << synth.data.n_cells() << " cells x " << synth.data.n_genes()
              << " genes to " << out_dir << "\n";
    return kExitOk;
}

int run_train(const std::string& data_dir, const std::string& config_path, const std::string& out_path,
              const std::string& variant_override, const std::string& report_path) {
    RunConfig rc = parse_run_config_file(config_path);
    if (!variant_override.empty()) {
        try {
            rc.model_variant = variant_from_name(variant_override);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    Dataset ds = read_dataset_dir(data_dir);
    auto [ckpt, report] = train(ds, rc.make_model_config(), rc.train);
    save_checkpoint(ckpt, out_path);
    const std::string rpath = report_path.empty() ? out_path + ".report.json" : report_path;
    write_text(rpath, report_to_json(report).dump(1) + "\n");
    const auto& last = report.epochs.back();
    std::printf("trained %zu epochs (best %zu): elbo %.4f sm %.4f tc %.4f total %.4f\n",
                report.epochs.size(), report.best_epoch, last.val_elbo, last.val_sm, last.val_tc,
                last.val_total);
    return kExitOk;
}

int run_embed(const std::string& data_dir, const std::string& ckpt_path, const std::string& out_path,
              const std::string& block, bool lenient) {
    if (block != "invariant" && block != "spurious" && block != "all") {
        throw ConfigError("--block must be invariant|spurious|all");
    }
    Dataset ds = read_dataset_dir(data_dir);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    Embeddings emb = embed(ds, ckpt, lenient);
    write_embedding_csv(out_path, ds.cell_ids, emb.z_invariant, emb.z_spurious, block);
    std::cout << "wrote embeddings for " << ds.n_cells() << " cells to " << out_path << "\n";
    return kExitOk;
}

int run_eval(const std::string& emb_path, const std::string& obs_path, const std::string& true_path,
             const std::string& probe_envs, const std::string& out_path, std::uint64_t seed,
             const std::string& dump_umap_input) {
    EmbeddingFile emb = read_embedding_csv(emb_path);
    ObsFile obs = read_obs_csv(obs_path);
    MetricsReport report =
        evaluate_embedding(emb, obs, true_path, split_list(probe_envs), seed, nullptr);
    write_text(out_path, metrics_to_json(report, seed).dump(1) + "\n");
    if (!dump_umap_input.empty()) {
        write_embedding_csv(dump_umap_input, emb.cell_ids, emb.zi, emb.zs,
                            emb.zs.size() > 0 ? "all" : "invariant");
    }
    std::cout << "wrote " << report.metrics.size() << " metrics to " << out_path << "\n";
    return kExitOk;
}

int run_benchmark(const std::string& config_path, const std::string& out_dir, int n_seeds,
                  const std::string& variants_csv, std::uint64_t base_seed) {
    RunConfig rc = parse_run_config_file(config_path);
    fs::create_directories(out_dir);
    std::vector<std::string> variants = split_list(variants_csv);
    if (variants.empty()) {
        variants = {"invae", "ivae", "nfivae"};
    }

    // Probe training environments: everything not held out.
    std::vector<std::string> probe_train_envs;
    for (int e = 0; e < rc.synth.n_env; ++e) {
        if (!rc.synth.is_heldout(e)) {
            probe_train_envs.push_back("e" + std::to_string(e));
        }
    }

    std::vector<std::vector<std::string>> table;
    table.push_back({"variant", "seed", "metric", "value"});
    json results = json::array();

    for (int s = 0; s < n_seeds; ++s) {
        SynthConfig sc = rc.synth;
        sc.seed = base_seed + static_cast<std::uint64_t>(s);
        const std::string data_dir = (fs::path(out_dir) / ("data_seed" + std::to_string(s))).string();
        SynthDataset synth = generate(sc);
        write_dataset_dir(synth.data, data_dir, synth_manifest_json(sc));
        Dataset ds = read_dataset_dir(data_dir);

        for (const auto& vname : variants) {
            json entry;
            entry["variant"] = vname;
            entry["seed"] = s;
            try {
                ModelConfig mc = rc.make_model_config();
                mc.variant = variant_from_name(vname);
                TrainConfig tc = rc.train;
                tc.seed = base_seed + static_cast<std::uint64_t>(s);
                auto [ckpt, report] = train(ds, mc, tc);
                const std::string stem =
                    (fs::path(out_dir) / (vname + "_seed" + std::to_string(s))).string();
                save_checkpoint(ckpt, stem + ".ckpt.json");
                write_text(stem + ".report.json", report_to_json(report).dump(1) + "\n");
                Embeddings emb = embed(ds, ckpt);
                write_embedding_csv(stem + ".emb.csv", ds.cell_ids, emb.z_invariant, emb.z_spurious,
                                    "all");

                EmbeddingFile embf = read_embedding_csv(stem + ".emb.csv");
                ObsFile obs;
                obs.cell_ids = ds.cell_ids;
                obs.env = ds.env;
                obs.labels = ds.labels;
                MetricsReport mr = evaluate_embedding(
                    embf, obs, (fs::path(data_dir) / "latents_true.csv").string(), probe_train_envs,
                    tc.seed, nullptr);
                write_text(stem + ".metrics.json", metrics_to_json(mr, tc.seed).dump(1) + "\n");
                json jm = json::object();
                for (const auto& [name, value] : mr.metrics) {
                    table.push_back({vname, std::to_string(s), name, format_double(value)});
                    jm[name] = value;
                }
                entry["metrics"] = std::move(jm);
                entry["ok"] = true;
            } catch (const std::exception& e) {
                entry["ok"] = false;
                entry["error"] = e.what();
                table.push_back({vname, std::to_string(s), "error", e.what()});
                std::cerr << "benchmark: " << vname << " seed " << s << " failed: " << e.what()
                          << "\n";
            }
            results.push_back(std::move(entry));
        }
    }
    write_csv((fs::path(out_dir) / "benchmark.csv").string(), table);
    write_text((fs::path(out_dir) / "benchmark.json").string(), results.dump(1) + "\n");
    std::cout << "benchmark table written to " << out_dir << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"inVAE: invariant identifiable VAE for multi-environment count data"};
    app.require_subcommand(1);
    app.footer(run_config_key_help());

    std::string config_path, out_path, data_dir, ckpt_path, variant, block = "all";
    std::string emb_path, obs_path, true_path, probe_envs, report_path, dump_umap;
    std::string variants_csv;
    bool lenient = false;
    int n_seeds = 3;
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset directory");
    gen->add_option("--config", config_path, "run configuration file")->required();
    gen->add_option("--out", out_path, "output dataset directory")->required();

    auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--config", config_path, "run configuration file")->required();
    tr->add_option("--out", out_path, "checkpoint output path (JSON)")->required();
    tr->add_option("--variant", variant, "invae|ivae|nfivae (overrides config)");
    tr->add_option("--report", report_path, "training report path (default <out>.report.json)");

    auto* em = app.add_subcommand("embed", "Write posterior-mean embeddings as CSV");
    em->add_option("--data", data_dir, "dataset directory")->required();
    em->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    em->add_option("--out", out_path, "embedding CSV path")->required();
    em->add_option("--block", block, "invariant|spurious|all (default all)");
    em->add_flag("--lenient", lenient, "map unseen covariate levels to zero with a warning");

    auto* ev = app.add_subcommand("eval", "Compute integration metrics for an embedding");
    ev->add_option("--emb", emb_path, "embedding CSV")->required();
    ev->add_option("--obs", obs_path, "obs CSV with env and optional label")->required();
    ev->add_option("--true-latents", true_path, "ground-truth latents CSV");
    ev->add_option("--probe-train-envs", probe_envs, "comma-separated env levels for the probe");
    ev->add_option("--out", out_path, "metrics JSON path")->required();
    ev->add_option("--seed", seed, "seed for clustering/kbet subsampling");
    ev->add_option("--dump-umap-input", dump_umap, "also write the embedding CSV for external plotting");

    auto* bm = app.add_subcommand("benchmark", "generate/train/embed/eval across variants and seeds");
    bm->add_option("--config", config_path, "run configuration file")->required();
    bm->add_option("--out", out_path, "output directory")->required();
    bm->add_option("--seeds", n_seeds, "number of seeds (default 3)");
    bm->add_option("--variants", variants_csv, "comma-separated variants (default all three)");
    bm->add_option("--seed", seed, "base seed (default 0)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e); // --help
        }
        std::cerr << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (gen->parsed()) {
            return run_generate(config_path, out_path);
        }
        if (tr->parsed()) {
            return run_train(data_dir, config_path, out_path, variant, report_path);
        }
        if (em->parsed()) {
            return run_embed(data_dir, ckpt_path, out_path, block, lenient);
        }
        if (ev->parsed()) {
            return run_eval(emb_path, obs_path, true_path, probe_envs, out_path, seed, dump_umap);
        }
        if (bm->parsed()) {
            return run_benchmark(config_path, out_path, n_seeds, variants_csv, seed);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return kExitSchema;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
