#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "invae/errors.hpp"
#include "invae/rng.hpp"
#include "invae/synthdata.hpp"
#include "invae/training.hpp"

using namespace invae;
namespace fs = std::filesystem;

namespace {

SynthConfig tiny_synth(std::uint64_t seed = 0) {
    SynthConfig c;
    c.n_env = 2;
    c.n_classes = 2;
    c.zi_dim = 2;
    c.zs_dim = 1;
    c.n_genes = 12;
    c.cells_per_cell = 25;
    c.dec_width = 16;
    c.lib_log_mean = std::log(200.0);
    c.seed = seed;
    return c;
}

ModelConfig tiny_model(Variant v = Variant::InVae) {
    ModelConfig cfg;
    cfg.invariant_dim = 2;
    cfg.spurious_dim = 1;
    cfg.hidden = {16};
    cfg.prior_hidden = {8};
    cfg.variant = v;
    return cfg;
}

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 32;
    tc.lr = 0.01;
    tc.seed = 7;
    return tc;
}

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("one epoch smoke run produces one finite report row") {
    Dataset ds = generate(tiny_synth()).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(1));
    REQUIRE(report.epochs.size() == 1);
    const auto& e = report.epochs[0];
    for (double v : {e.train_elbo, e.train_sm, e.train_tc, e.train_total, e.val_elbo, e.val_total}) {
        CHECK(std::isfinite(v));
    }
    CHECK(ckpt.params.count() > 0);
}

TEST_CASE("fixed seed reproduces byte-identical checkpoints") {
    Dataset ds = generate(tiny_synth(3)).data;
    auto [ckpt1, rep1] = train(ds, tiny_model(), tiny_train(2));
    auto [ckpt2, rep2] = train(ds, tiny_model(), tiny_train(2));
    const std::string p1 = temp_path("invae_ck_a.json");
    const std::string p2 = temp_path("invae_ck_b.json");
    save_checkpoint(ckpt1, p1);
    save_checkpoint(ckpt2, p2);
    CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("training reduces the total loss on the synthetic toy") {
    Dataset ds = generate(tiny_synth(11)).data;
    TrainConfig tc = tiny_train(30);
    tc.patience = 30;
    auto [ckpt, report] = train(ds, tiny_model(), tc);
    REQUIRE(report.epochs.size() >= 10);
    CHECK(report.epochs.back().train_total < report.epochs.front().train_total);
    CHECK(report.epochs.back().train_elbo > report.epochs.front().train_elbo);
}

TEST_CASE("checkpoint round trip preserves bytes and embeddings") {
    Dataset ds = generate(tiny_synth(5)).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(2));
    const std::string p1 = temp_path("invae_rt1.json");
    const std::string p2 = temp_path("invae_rt2.json");
    save_checkpoint(ckpt, p1);
    Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);
    CHECK(file_bytes(p1) == file_bytes(p2));

    Embeddings e1 = embed(ds, ckpt);
    Embeddings e2 = embed(ds, loaded);
    REQUIRE(e1.z_invariant.size() == e2.z_invariant.size());
    CHECK(std::memcmp(e1.z_invariant.values.data(), e2.z_invariant.values.data(),
                      e1.z_invariant.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(e1.z_spurious.values.data(), e2.z_spurious.values.data(),
                      e1.z_spurious.size() * sizeof(double)) == 0);
}

TEST_CASE("corrupt and version-mismatched containers are rejected") {
    Dataset ds = generate(tiny_synth(6)).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(1));
    const std::string path = temp_path("invae_corrupt.json");
    save_checkpoint(ckpt, path);

    SUBCASE("truncated file") {
        std::string bytes = file_bytes(path);
        std::ofstream out(path, std::ios::trunc | std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), IoError);
    }
    SUBCASE("unsupported format version") {
        std::string bytes = file_bytes(path);
        const std::string needle = "\"format_version\": 1";
        const auto pos = bytes.find(needle);
        REQUIRE(pos != std::string::npos);
        bytes.replace(pos, needle.size(), "\"format_version\": 9");
        std::ofstream out(path, std::ios::trunc | std::ios::binary);
        out << bytes;
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
    }
}

TEST_CASE("embed shapes, determinism and identical rows for identical cells") {
    SynthConfig sc = tiny_synth(9);
    Dataset ds = generate(sc).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(2));
    Embeddings e = embed(ds, ckpt);
    CHECK(e.z_invariant.rows() == ds.n_cells());
    CHECK(e.z_invariant.cols() == 2);
    CHECK(e.z_spurious.cols() == 1);

    // duplicate first cell under another id: identical embedding rows
    Dataset dup = ds;
    dup.cell_ids.push_back("dup");
    dup.env.push_back(ds.env[0]);
    dup.labels.push_back(ds.labels[0]);
    for (auto& col : dup.d_columns) {
        col.values.push_back(col.values[0]);
    }
    Tensor counts({ds.n_cells() + 1, ds.n_genes()});
    std::copy(ds.counts.values.begin(), ds.counts.values.end(), counts.values.begin());
    for (std::size_t c = 0; c < ds.n_genes(); ++c) {
        counts.at(ds.n_cells(), c) = ds.counts.at(0, c);
    }
    dup.counts = std::move(counts);
    dup.true_z_invariant = Tensor();
    dup.true_z_spurious = Tensor();
    Embeddings e2 = embed(dup, ckpt);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(e2.z_invariant.at(ds.n_cells(), c) == e2.z_invariant.at(0, c));
    }

    Embeddings e3 = embed(ds, ckpt);
    CHECK(std::memcmp(e.z_invariant.values.data(), e3.z_invariant.values.data(),
                      e.z_invariant.size() * sizeof(double)) == 0);
}

TEST_CASE("embed rejects unseen environments unless lenient") {
    Dataset ds = generate(tiny_synth(10)).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(1));
    Dataset odd = ds;
    odd.env[0] = "e99";
    CHECK_THROWS_AS(embed(odd, ckpt), SchemaError);
    CHECK_NOTHROW(embed(odd, ckpt, true));
}

TEST_CASE("embed matches gene columns by name") {
    Dataset ds = generate(tiny_synth(12)).data;
    auto [ckpt, report] = train(ds, tiny_model(), tiny_train(1));
    Embeddings base = embed(ds, ckpt);

    // permute gene columns; embeddings must be identical
    Dataset shuffled = ds;
    std::vector<std::size_t> perm(ds.n_genes());
    for (std::size_t c = 0; c < perm.size(); ++c) {
        perm[c] = (c + 3) % perm.size();
    }
    shuffled.gene_names.clear();
    shuffled.counts = Tensor({ds.n_cells(), ds.n_genes()});
    for (std::size_t c = 0; c < perm.size(); ++c) {
        shuffled.gene_names.push_back(ds.gene_names[perm[c]]);
        for (std::size_t r = 0; r < ds.n_cells(); ++r) {
            shuffled.counts.at(r, c) = ds.counts.at(r, perm[c]);
        }
    }
    Embeddings e = embed(shuffled, ckpt);
    CHECK(std::memcmp(base.z_invariant.values.data(), e.z_invariant.values.data(),
                      base.z_invariant.size() * sizeof(double)) == 0);

    // missing gene is a schema error
    Dataset missing = ds;
    missing.gene_names[0] = "not_a_gene";
    CHECK_THROWS_AS(embed(missing, ckpt), SchemaError);
}

TEST_CASE("step-A updates only the elbo scope; step-B only the prior") {
    Dataset ds = generate(tiny_synth(20)).data;
    ModelConfig cfg = tiny_model();
    cfg.n_genes = ds.n_genes();
    cfg.schema = ds.derive_schema();
    cfg.n_env = ds.env_vocab().size();
    InvaeModel model = InvaeModel::init(cfg, 99);

    std::vector<double> group_totals;
    auto gid = ds.group_ids(&group_totals);

    // Build one batch by hand via the training helpers.
    Rng rng(1);
    std::vector<std::size_t> all(ds.n_cells());
    for (std::size_t r = 0; r < all.size(); ++r) {
        all[r] = r;
    }
    auto batches = stratified_batches(all, gid, 32, rng);
    REQUIRE(!batches.empty());

    // Reuse the training loop machinery at the loss level.
    Standardization st;
    st.mean = Tensor({cfg.n_genes}, 0.0);
    st.sd = Tensor({cfg.n_genes}, 1.0);
    Batch batch;
    {
        const auto& rows = batches[0];
        batch.counts = Tensor({rows.size(), cfg.n_genes});
        batch.onehot_e = Tensor({rows.size(), cfg.n_env});
        batch.d_raw = Tensor({rows.size(), cfg.schema.raw_dim()});
        batch.library = Tensor({rows.size()});
        batch.group.resize(rows.size());
        batch.group_total = group_totals;
        const auto env_vocab = ds.env_vocab();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            double lib = 0.0;
            for (std::size_t c = 0; c < cfg.n_genes; ++c) {
                batch.counts.at(r, c) = ds.counts.at(rows[r], c);
                lib += batch.counts.at(r, c);
            }
            batch.library.at(r) = lib;
            for (std::size_t e = 0; e < env_vocab.size(); ++e) {
                if (env_vocab[e] == ds.env[rows[r]]) {
                    batch.onehot_e.at(r, e) = 1.0;
                }
            }
            Tensor draw = cfg.schema.encode_raw({ds.d_columns[0].values[rows[r]]}, false);
            for (std::size_t c = 0; c < draw.size(); ++c) {
                batch.d_raw.at(r, c) = draw.at(c);
            }
            batch.group[r] = gid[rows[r]];
        }
        batch.x_std = st.apply_log1p(batch.counts);
    }

    auto snapshot = [&](const std::vector<std::string>& names) {
        std::map<std::string, std::vector<double>> snap;
        for (const auto& n : names) {
            snap[n] = model.params().get(n).values;
        }
        return snap;
    };
    auto bitwise_equal = [&](const std::map<std::string, std::vector<double>>& snap) {
        for (const auto& [n, vals] : snap) {
            const auto& now = model.params().get(n).values;
            if (std::memcmp(vals.data(), now.data(), vals.size() * sizeof(double)) != 0) {
                return false;
            }
        }
        return true;
    };

    LossHyper hyper;
    AdamState adam_a, adam_b;
    for (int rep = 0; rep < 10; ++rep) {
        Tensor noise({batch.size(), cfg.latent_dim()});
        for (double& v : noise.values) {
            v = rng.normal();
        }
        BatchStep step = batch_losses(model, batch, noise, hyper, true);

        auto prior_snap = snapshot(model.sm_scope());
        adam_step(adam_a, model.params(), step.elbo_tc_grads);
        CHECK(bitwise_equal(prior_snap));

        auto elbo_snap = snapshot(model.elbo_scope());
        adam_step(adam_b, model.params(), step.sm_grads);
        CHECK(bitwise_equal(elbo_snap));
    }
}

TEST_CASE("validation elbo improves from the first to the best epoch") {
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Dataset ds = generate(tiny_synth(40 + seed)).data;
        TrainConfig tc = tiny_train(25);
        tc.seed = seed;
        tc.patience = 25;
        auto [ckpt, report] = train(ds, tiny_model(), tc);
        if (report.epochs.back().val_elbo > report.epochs.front().val_elbo) {
            ++improved;
        }
    }
    CHECK(improved >= 2);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    tc.epochs = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.batch_size = 2;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.lr = 0.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}
