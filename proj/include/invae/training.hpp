#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "invae/dataset.hpp"
#include "invae/losses.hpp"
#include "invae/model.hpp"

namespace invae {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 256;
    double lr = 0.01;
    double lr_final_fraction = 1.0; // exponential decay target, 1 = constant
    double beta = 1.0;
    double lambda_reg_sm = 0.01;
    std::size_t mc_samples = 1;
    std::size_t sm_steps = 1; // score-matching updates per batch
    std::uint64_t seed = 0;
    std::size_t patience = 10;
    double val_fraction = 0.1;

    void validate() const;
};

struct Checkpoint {
    int format_version = 1;
    ModelConfig model_config;
    TrainConfig train_config;
    std::vector<std::string> env_vocab;
    std::vector<std::string> gene_names;
    Standardization standardization;
    ParamStore params;
    std::size_t d_embed_dim = 0;
};

struct EpochStats {
    double train_elbo = 0.0, train_sm = 0.0, train_tc = 0.0, train_total = 0.0;
    double val_elbo = 0.0, val_sm = 0.0, val_tc = 0.0, val_total = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0; // 1-based index of the restored parameters
};

// Two-scope protocol per batch: gradients for both losses are evaluated at
// the same parameter state, then the ELBO/TC step is applied with the
// invariant prior frozen and the SM step with everything else frozen.
std::pair<Checkpoint, TrainReport> train(const Dataset& ds, ModelConfig cfg, const TrainConfig& tc);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct Embeddings {
    Tensor z_invariant; // [N, i] posterior means
    Tensor z_spurious;  // [N, s]
};

Embeddings embed(const Dataset& ds, const Checkpoint& ckpt, bool lenient = false);

// Rebuild a model around checkpoint parameters.
InvaeModel model_from_checkpoint(const Checkpoint& ckpt);

// Shared with tests: deterministic stratified batch construction.
std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& indices,
                                                         const std::vector<std::size_t>& group_of,
                                                         std::size_t batch_size, Rng& rng);

} // namespace invae
