#include "invae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <json.hpp>

#include "invae/errors.hpp"
#include "invae/rng.hpp"

namespace invae {

using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ConfigError("train.epochs must be >= 1");
    }
    if (batch_size < 4) {
        throw ConfigError("train.batch_size must be >= 4");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("train.lr must be positive");
    }
    if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0)) {
        throw ConfigError("train.lr_final_fraction must be in (0, 1]");
    }
    if (mc_samples < 1) {
        throw ConfigError("train.mc_samples must be >= 1");
    }
    if (sm_steps < 1) {
        throw ConfigError("train.sm_steps must be >= 1");
    }
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        throw ConfigError("train.val_fraction must be in [0, 1)");
    }
}

namespace {

// Materialize batch tensors for a set of cell rows.
struct PreparedData {
    Tensor counts;   // [N, n]
    Tensor x_std;    // [N, n]
    Tensor onehot_e; // [N, E]
    Tensor d_raw;    // [N, raw]
    Tensor library;  // [N]
    std::vector<std::size_t> group;
    std::vector<double> group_total;
};

Batch make_batch(const PreparedData& data, const std::vector<std::size_t>& rows) {
    Batch b;
    const std::size_t n = data.counts.cols();
    const std::size_t e = data.onehot_e.cols();
    const std::size_t raw = data.d_raw.cols();
    b.counts = Tensor({rows.size(), n});
    b.x_std = Tensor({rows.size(), n});
    b.onehot_e = Tensor({rows.size(), e});
    b.d_raw = Tensor({rows.size(), raw});
    b.library = Tensor({rows.size()});
    b.group.resize(rows.size());
    b.group_total = data.group_total;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        std::memcpy(&b.counts.at(i, 0), data.counts.values.data() + r * n, n * sizeof(double));
        std::memcpy(&b.x_std.at(i, 0), data.x_std.values.data() + r * n, n * sizeof(double));
        std::memcpy(&b.onehot_e.at(i, 0), data.onehot_e.values.data() + r * e, e * sizeof(double));
        std::memcpy(&b.d_raw.at(i, 0), data.d_raw.values.data() + r * raw, raw * sizeof(double));
        b.library.at(i) = data.library.at(r);
        b.group[i] = data.group[r];
    }
    return b;
}

Tensor normal_noise(Rng& rng, std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    for (double& v : t.values) {
        v = rng.normal();
    }
    return t;
}

std::size_t env_index_of(const std::vector<std::string>& vocab, const std::string& value,
                         bool lenient) {
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (vocab[i] == value) {
            return i;
        }
    }
    if (lenient) {
        return vocab.size(); // all-zero encoding
    }
    throw SchemaError("unseen environment level '" + value + "'");
}

} // namespace

std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& indices,
                                                         const std::vector<std::size_t>& group_of,
                                                         std::size_t batch_size, Rng& rng) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t idx : indices) {
        groups[group_of[idx]].push_back(idx);
    }
    const std::size_t total = indices.size();
    const std::size_t n_batches = std::max<std::size_t>(1, (total + batch_size - 1) / batch_size);
    std::vector<std::vector<std::size_t>> batches(n_batches);
    // Each group is shuffled and split into n_batches nearly equal chunks,
    // so every batch mirrors the group proportions of the dataset.
    for (auto& [gid, rows] : groups) {
        rng.shuffle(rows);
        const std::size_t g = rows.size();
        for (std::size_t k = 0; k < n_batches; ++k) {
            const std::size_t lo = k * g / n_batches;
            const std::size_t hi = (k + 1) * g / n_batches;
            for (std::size_t t = lo; t < hi; ++t) {
                batches[k].push_back(rows[t]);
            }
        }
    }
    batches.erase(std::remove_if(batches.begin(), batches.end(),
                                 [](const auto& b) { return b.empty(); }),
                  batches.end());
    return batches;
}

namespace {

PreparedData prepare(const Dataset& ds, const InvaeModel& model,
                     const std::vector<std::string>& env_vocab, const Standardization& st,
                     bool lenient) {
    const auto& cfg = model.config();
    PreparedData data;
    data.counts = ds.counts;
    data.x_std = st.apply_log1p(ds.counts);
    data.onehot_e = Tensor({ds.n_cells(), cfg.n_env});
    data.library = Tensor({ds.n_cells()});
    data.group = ds.group_ids(&data.group_total);

    const std::size_t raw = std::max<std::size_t>(cfg.schema.raw_dim(), 1);
    data.d_raw = Tensor({ds.n_cells(), raw});
    std::vector<std::string> values(ds.d_columns.size());
    for (std::size_t r = 0; r < ds.n_cells(); ++r) {
        const std::size_t e = env_index_of(env_vocab, ds.env[r], lenient);
        if (e < cfg.n_env) {
            data.onehot_e.at(r, e) = 1.0;
        }
        for (std::size_t c = 0; c < ds.d_columns.size(); ++c) {
            values[c] = ds.d_columns[c].values[r];
        }
        if (!ds.d_columns.empty()) {
            Tensor enc = cfg.schema.encode_raw(values, lenient);
            std::memcpy(&data.d_raw.at(r, 0), enc.values.data(), enc.size() * sizeof(double));
        }
        double lib = 0.0;
        for (std::size_t c = 0; c < ds.n_genes(); ++c) {
            lib += ds.counts.at(r, c);
        }
        if (!(lib > 0.0)) {
            throw NumericError("cell '" + ds.cell_ids[r] + "' has zero total counts");
        }
        data.library.at(r) = lib;
    }
    return data;
}

Standardization compute_standardization(const Dataset& ds, const std::vector<std::size_t>& rows) {
    const std::size_t n = ds.n_genes();
    Standardization st;
    st.mean = Tensor({n}, 0.0);
    st.sd = Tensor({n}, 0.0);
    for (std::size_t r : rows) {
        for (std::size_t c = 0; c < n; ++c) {
            st.mean.at(c) += std::log1p(ds.counts.at(r, c));
        }
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (std::size_t c = 0; c < n; ++c) {
        st.mean.at(c) *= inv;
    }
    for (std::size_t r : rows) {
        for (std::size_t c = 0; c < n; ++c) {
            const double d = std::log1p(ds.counts.at(r, c)) - st.mean.at(c);
            st.sd.at(c) += d * d;
        }
    }
    for (std::size_t c = 0; c < n; ++c) {
        const double var = st.sd.at(c) * inv;
        st.sd.at(c) = var > 1e-12 ? std::sqrt(var) : 1.0; // constant feature: center only
    }
    return st;
}

} // namespace

std::pair<Checkpoint, TrainReport> train(const Dataset& ds, ModelConfig cfg, const TrainConfig& tc) {
    ds.validate();
    tc.validate();
    cfg.n_genes = ds.n_genes();
    cfg.schema = ds.derive_schema();
    const auto env_vocab = ds.env_vocab();
    cfg.n_env = env_vocab.size();
    cfg.validate();

    Rng rng(tc.seed);
    InvaeModel model = InvaeModel::init(cfg, rng.next_u64());

    // Stratified validation split by (group, label).
    std::vector<double> group_totals;
    const auto gid = ds.group_ids(&group_totals);
    std::map<std::string, std::vector<std::size_t>> strata;
    for (std::size_t r = 0; r < ds.n_cells(); ++r) {
        std::string key = std::to_string(gid[r]);
        if (ds.has_labels()) {
            key += '\x1f' + ds.labels[r];
        }
        strata[key].push_back(r);
    }
    std::vector<std::size_t> train_rows, val_rows;
    for (auto& [key, rows] : strata) {
        rng.shuffle(rows);
        std::size_t n_val = static_cast<std::size_t>(std::floor(tc.val_fraction * static_cast<double>(rows.size())));
        if (rows.size() - n_val == 0) {
            n_val = 0; // never empty a stratum's training part
        }
        for (std::size_t k = 0; k < rows.size(); ++k) {
            (k < n_val ? val_rows : train_rows).push_back(rows[k]);
        }
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
    if (train_rows.empty()) {
        throw ConfigError("training split is empty");
    }

    const Standardization st = compute_standardization(ds, train_rows);
    PreparedData data = prepare(ds, model, env_vocab, st, false);

    LossHyper hyper;
    hyper.beta = cfg.variant == Variant::InVae ? tc.beta : 0.0;
    hyper.lambda_reg_sm = tc.lambda_reg_sm;
    hyper.mc_samples = tc.mc_samples;

    AdamState adam_elbo, adam_sm;
    adam_elbo.lr = tc.lr;
    adam_sm.lr = tc.lr;

    TrainReport report;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    ParamStore best_params = model.params();
    std::size_t since_best = 0;

    const std::size_t m = cfg.latent_dim();
    Rng val_noise_master = rng.fork(0x5eed);

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Exponential decay from lr to lr * lr_final_fraction across epochs.
        const double frac = tc.epochs > 1
                                ? static_cast<double>(epoch - 1) / static_cast<double>(tc.epochs - 1)
                                : 0.0;
        const double lr_now = tc.lr * std::pow(tc.lr_final_fraction, frac);
        adam_elbo.lr = lr_now;
        adam_sm.lr = lr_now;
        auto batches = stratified_batches(train_rows, gid, tc.batch_size, rng);
        EpochStats stats;
        double weight_sum = 0.0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Batch batch = make_batch(data, batches[bi]);
            Tensor noise = normal_noise(rng, batch.size(), m * tc.mc_samples);
            BatchStep step;
            try {
                step = batch_losses(model, batch, noise, hyper, true);
                adam_step(adam_elbo, model.params(), step.elbo_tc_grads);
                if (model.has_ef_prior()) {
                    adam_step(adam_sm, model.params(), step.sm_grads);
                    // Optional extra prior refits on the same detached samples.
                    for (std::size_t extra = 1; extra < tc.sm_steps; ++extra) {
                        model.params().set_frozen_prefix("iprior.", false);
                        for (const auto& n : model.elbo_scope()) {
                            model.params().set_frozen(n, true);
                        }
                        Graph g(&model.params());
                        GradMap sm_grads = g.param_gradients(
                            build_sm(g, model, step.z_prior_block, step.sm_cond, hyper.lambda_reg_sm));
                        adam_step(adam_sm, model.params(), sm_grads);
                        for (const auto& n : model.elbo_scope()) {
                            model.params().set_frozen(n, false);
                        }
                    }
                }
            } catch (const std::runtime_error& e) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(bi + 1) + ": " + e.what());
            }
            const double w = static_cast<double>(batch.size());
            stats.train_elbo += w * step.report.elbo_term;
            stats.train_sm += w * step.report.sm_term;
            stats.train_tc += w * step.report.tc_term;
            stats.train_total += w * step.report.total;
            weight_sum += w;
        }
        stats.train_elbo /= weight_sum;
        stats.train_sm /= weight_sum;
        stats.train_tc /= weight_sum;
        stats.train_total /= weight_sum;

        // Validation pass (no updates).
        if (!val_rows.empty()) {
            Rng vr = val_noise_master.fork(epoch);
            auto vbatches = stratified_batches(val_rows, gid, tc.batch_size, vr);
            double vw = 0.0;
            for (const auto& rows : vbatches) {
                Batch batch = make_batch(data, rows);
                Tensor noise = normal_noise(vr, batch.size(), m * tc.mc_samples);
                LossReport r = total_loss(model, batch, noise, hyper);
                const double w = static_cast<double>(batch.size());
                stats.val_elbo += w * r.elbo_term;
                stats.val_sm += w * r.sm_term;
                stats.val_tc += w * r.tc_term;
                stats.val_total += w * r.total;
                vw += w;
            }
            stats.val_elbo /= vw;
            stats.val_sm /= vw;
            stats.val_tc /= vw;
            stats.val_total /= vw;
        } else {
            stats.val_elbo = stats.train_elbo;
            stats.val_sm = stats.train_sm;
            stats.val_tc = stats.train_tc;
            stats.val_total = stats.train_total;
        }
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(stats);

        const double score = -stats.val_elbo;
        if (score < best_val) {
            best_val = score;
            best_epoch = epoch;
            best_params = model.params();
            since_best = 0;
        } else if (++since_best >= tc.patience) {
            break;
        }
    }

    // Restore the best validation parameters.
    for (std::size_t i = 0; i < best_params.count(); ++i) {
        model.params().get(best_params.entry(i).name) = best_params.entry(i).value;
    }
    report.best_epoch = best_epoch;

    Checkpoint ckpt;
    ckpt.model_config = model.config();
    ckpt.train_config = tc;
    ckpt.env_vocab = env_vocab;
    ckpt.gene_names = ds.gene_names;
    ckpt.standardization = st;
    ckpt.params = model.params();
    ckpt.d_embed_dim = model.d_embed_dim();
    return {std::move(ckpt), std::move(report)};
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const unsigned char* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        unsigned v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (s.size() % 4 != 0) {
        throw IoError("corrupt container: bad base64 length");
    }
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int a = val(s[i]), b = val(s[i + 1]);
        int c = s[i + 2] == '=' ? 0 : val(s[i + 2]);
        int d = s[i + 3] == '=' ? 0 : val(s[i + 3]);
        if (a < 0 || b < 0 || c < 0 || d < 0) {
            throw IoError("corrupt container: bad base64 character");
        }
        unsigned v = (a << 18) | (b << 12) | (c << 6) | d;
        out.push_back((v >> 16) & 0xff);
        if (s[i + 2] != '=') out.push_back((v >> 8) & 0xff);
        if (s[i + 3] != '=') out.push_back(v & 0xff);
    }
    return out;
}

std::string encode_tensor_data(const Tensor& t) {
    // Canonical little-endian 64-bit floats.
    std::vector<unsigned char> bytes(t.size() * 8);
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint64_t u;
        std::memcpy(&u, &t.values[i], 8);
        for (int b = 0; b < 8; ++b) {
            bytes[i * 8 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xff);
        }
    }
    return base64_encode(bytes.data(), bytes.size());
}

std::vector<double> decode_tensor_data(const std::string& b64, std::size_t expected) {
    auto bytes = base64_decode(b64);
    if (bytes.size() != expected * 8) {
        throw IoError("corrupt container: tensor payload size mismatch");
    }
    std::vector<double> out(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        std::uint64_t u = 0;
        for (int b = 0; b < 8; ++b) {
            u |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        }
        std::memcpy(&out[i], &u, 8);
    }
    return out;
}

json schema_to_json(const CovariateSchema& schema) {
    json cols = json::array();
    for (const auto& c : schema.columns) {
        json jc;
        jc["name"] = c.name;
        jc["categorical"] = c.categorical;
        if (c.categorical) {
            jc["levels"] = c.levels;
        }
        cols.push_back(jc);
    }
    return cols;
}

CovariateSchema schema_from_json(const json& j) {
    CovariateSchema schema;
    for (const auto& jc : j) {
        CovariateColumn c;
        c.name = jc.at("name").get<std::string>();
        c.categorical = jc.at("categorical").get<bool>();
        if (c.categorical) {
            c.levels = jc.at("levels").get<std::vector<std::string>>();
        }
        schema.columns.push_back(std::move(c));
    }
    return schema;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json j;
    j["format_version"] = ckpt.format_version;

    json mc;
    mc["n_genes"] = ckpt.model_config.n_genes;
    mc["invariant_dim"] = ckpt.model_config.invariant_dim;
    mc["spurious_dim"] = ckpt.model_config.spurious_dim;
    mc["n_env"] = ckpt.model_config.n_env;
    mc["hidden"] = ckpt.model_config.hidden;
    mc["prior_hidden"] = ckpt.model_config.prior_hidden;
    mc["t_nn_dim"] = ckpt.model_config.t_nn_dim;
    mc["d_embed_dim"] = ckpt.d_embed_dim;
    mc["variant"] = variant_name(ckpt.model_config.variant);
    mc["schema"] = schema_to_json(ckpt.model_config.schema);
    j["model_config"] = mc;

    json tcj;
    tcj["epochs"] = ckpt.train_config.epochs;
    tcj["batch_size"] = ckpt.train_config.batch_size;
    tcj["lr"] = ckpt.train_config.lr;
    tcj["lr_final_fraction"] = ckpt.train_config.lr_final_fraction;
    tcj["beta"] = ckpt.train_config.beta;
    tcj["lambda_reg_sm"] = ckpt.train_config.lambda_reg_sm;
    tcj["mc_samples"] = ckpt.train_config.mc_samples;
    tcj["sm_steps"] = ckpt.train_config.sm_steps;
    tcj["seed"] = ckpt.train_config.seed;
    tcj["patience"] = ckpt.train_config.patience;
    tcj["val_fraction"] = ckpt.train_config.val_fraction;
    j["train_config"] = tcj;

    j["covariate_vocab"] = schema_to_json(ckpt.model_config.schema);
    j["env_vocab"] = ckpt.env_vocab;
    j["gene_names"] = ckpt.gene_names;
    j["standardization"] = {{"mean", ckpt.standardization.mean.values},
                            {"std", ckpt.standardization.sd.values}};

    json params = json::array();
    for (std::size_t i = 0; i < ckpt.params.count(); ++i) {
        const auto& e = ckpt.params.entry(i);
        json p;
        p["name"] = e.name;
        p["shape"] = e.value.shape;
        p["data"] = encode_tensor_data(e.value);
        params.push_back(std::move(p));
    }
    j["params"] = std::move(params);

    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write checkpoint '" + path + "'");
    }
    out << j.dump(1) << "\n";
    if (!out) {
        throw IoError("checkpoint write failed for '" + path + "'");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path + "'");
    }
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw IoError(std::string("corrupt container: ") + e.what());
    }
    Checkpoint ckpt;
    try {
        ckpt.format_version = j.at("format_version").get<int>();
        if (ckpt.format_version != 1) {
            throw ConfigError("unsupported checkpoint format version " +
                              std::to_string(ckpt.format_version));
        }
        const auto& mc = j.at("model_config");
        ckpt.model_config.n_genes = mc.at("n_genes").get<std::size_t>();
        ckpt.model_config.invariant_dim = mc.at("invariant_dim").get<std::size_t>();
        ckpt.model_config.spurious_dim = mc.at("spurious_dim").get<std::size_t>();
        ckpt.model_config.n_env = mc.at("n_env").get<std::size_t>();
        ckpt.model_config.hidden = mc.at("hidden").get<std::vector<std::size_t>>();
        ckpt.model_config.prior_hidden = mc.at("prior_hidden").get<std::vector<std::size_t>>();
        ckpt.model_config.t_nn_dim = mc.at("t_nn_dim").get<std::size_t>();
        ckpt.d_embed_dim = mc.at("d_embed_dim").get<std::size_t>();
        ckpt.model_config.d_embed_dim = ckpt.d_embed_dim;
        ckpt.model_config.variant = variant_from_name(mc.at("variant").get<std::string>());
        ckpt.model_config.schema = schema_from_json(mc.at("schema"));

        const auto& tcj = j.at("train_config");
        ckpt.train_config.epochs = tcj.at("epochs").get<std::size_t>();
        ckpt.train_config.batch_size = tcj.at("batch_size").get<std::size_t>();
        ckpt.train_config.lr = tcj.at("lr").get<double>();
        ckpt.train_config.lr_final_fraction = tcj.at("lr_final_fraction").get<double>();
        ckpt.train_config.beta = tcj.at("beta").get<double>();
        ckpt.train_config.lambda_reg_sm = tcj.at("lambda_reg_sm").get<double>();
        ckpt.train_config.mc_samples = tcj.at("mc_samples").get<std::size_t>();
        ckpt.train_config.sm_steps = tcj.at("sm_steps").get<std::size_t>();
        ckpt.train_config.seed = tcj.at("seed").get<std::uint64_t>();
        ckpt.train_config.patience = tcj.at("patience").get<std::size_t>();
        ckpt.train_config.val_fraction = tcj.at("val_fraction").get<double>();

        ckpt.env_vocab = j.at("env_vocab").get<std::vector<std::string>>();
        ckpt.gene_names = j.at("gene_names").get<std::vector<std::string>>();
        ckpt.standardization.mean =
            Tensor::vector(j.at("standardization").at("mean").get<std::vector<double>>());
        ckpt.standardization.sd =
            Tensor::vector(j.at("standardization").at("std").get<std::vector<double>>());

        for (const auto& p : j.at("params")) {
            const auto shape = p.at("shape").get<std::vector<std::size_t>>();
            auto data = decode_tensor_data(p.at("data").get<std::string>(), shape_product(shape));
            ckpt.params.add(p.at("name").get<std::string>(), Tensor(shape, std::move(data)));
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError(std::string("corrupt container: ") + e.what());
    }
    return ckpt;
}

InvaeModel model_from_checkpoint(const Checkpoint& ckpt) {
    InvaeModel model = InvaeModel::init(ckpt.model_config, 0);
    // Replace initialized parameters with stored ones; missing names are a
    // container error.
    for (const auto& name : model.params().names()) {
        if (!ckpt.params.contains(name)) {
            throw IoError("corrupt container: missing parameter '" + name + "'");
        }
        const Tensor& stored = ckpt.params.get(name);
        Tensor& dst = model.params().get(name);
        if (!dst.same_shape(stored)) {
            throw IoError("corrupt container: shape mismatch for parameter '" + name + "'");
        }
        dst = stored;
    }
    return model;
}

Embeddings embed(const Dataset& ds, const Checkpoint& ckpt, bool lenient) {
    ds.validate();
    // Gene columns are matched by name; missing genes are a schema error.
    std::vector<std::size_t> gene_pos(ckpt.gene_names.size());
    {
        std::map<std::string, std::size_t> pos;
        for (std::size_t c = 0; c < ds.gene_names.size(); ++c) {
            pos[ds.gene_names[c]] = c;
        }
        for (std::size_t c = 0; c < ckpt.gene_names.size(); ++c) {
            auto it = pos.find(ckpt.gene_names[c]);
            if (it == pos.end()) {
                throw SchemaError("dataset is missing gene '" + ckpt.gene_names[c] + "'");
            }
            gene_pos[c] = it->second;
        }
    }
    // Covariate columns matched by name against the checkpoint schema.
    const auto& schema = ckpt.model_config.schema;
    std::vector<std::size_t> col_pos(schema.columns.size());
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
        bool found = false;
        for (std::size_t k = 0; k < ds.d_columns.size(); ++k) {
            if (ds.d_columns[k].name == schema.columns[c].name) {
                col_pos[c] = k;
                found = true;
                break;
            }
        }
        if (!found) {
            throw SchemaError("dataset is missing covariate column '" + schema.columns[c].name + "'");
        }
    }

    InvaeModel model = model_from_checkpoint(ckpt);
    const auto& cfg = model.config();
    Embeddings out;
    out.z_invariant = Tensor({ds.n_cells(), cfg.invariant_dim});
    out.z_spurious = Tensor({ds.n_cells(), cfg.spurious_dim});

    std::vector<std::string> values(schema.columns.size());
    Tensor x({cfg.n_genes});
    for (std::size_t r = 0; r < ds.n_cells(); ++r) {
        for (std::size_t c = 0; c < cfg.n_genes; ++c) {
            x.at(c) = ds.counts.at(r, gene_pos[c]);
        }
        CovariateEncoding cov;
        cov.one_hot_e = Tensor({cfg.n_env}, 0.0);
        const std::size_t e = env_index_of(ckpt.env_vocab, ds.env[r], lenient);
        if (e < cfg.n_env) {
            cov.one_hot_e.at(e) = 1.0;
        }
        for (std::size_t c = 0; c < schema.columns.size(); ++c) {
            values[c] = ds.d_columns[col_pos[c]].values[r];
        }
        Tensor d_raw({1}, 0.0);
        if (!schema.columns.empty()) {
            try {
                d_raw = schema.encode_raw(values, lenient);
            } catch (const std::invalid_argument& e) {
                throw SchemaError(e.what());
            }
        }
        cov.d_embed = model.encode_covariates(d_raw);
        DiagGaussianParams q;
        try {
            q = model.encode(x, cov, ckpt.standardization);
        } catch (const std::invalid_argument& e) {
            throw SchemaError(e.what());
        }
        for (std::size_t c = 0; c < cfg.invariant_dim; ++c) {
            out.z_invariant.at(r, c) = q.mean.at(c);
        }
        for (std::size_t c = 0; c < cfg.spurious_dim; ++c) {
            out.z_spurious.at(r, c) = q.mean.at(cfg.invariant_dim + c);
        }
    }
    return out;
}

} // namespace invae
