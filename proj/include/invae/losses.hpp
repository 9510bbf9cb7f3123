#pragma once

#include <vector>

#include "invae/distributions.hpp"
#include "invae/graph.hpp"
#include "invae/model.hpp"
#include "invae/tensor.hpp"

namespace invae {

// One training batch. Rows share the gene dimension; group ids index
// group_total, which holds the dataset-level cell count n_u per domain
// group u = (d categories, e).
struct Batch {
    Tensor counts;   // [B, n]
    Tensor x_std;    // [B, n] standardized log1p counts
    Tensor onehot_e; // [B, n_env]
    Tensor d_raw;    // [B, schema raw dim]
    Tensor library;  // [B]
    std::vector<std::size_t> group;
    std::vector<double> group_total;

    std::size_t size() const { return counts.rank() == 2 ? counts.rows() : 0; }
    void validate(const InvaeModel& model) const;
};

struct LossReport {
    double elbo_term = 0.0;
    double sm_term = 0.0;
    double tc_term = 0.0;
    double total = 0.0; // -elbo + sm + beta * tc
};

struct LossHyper {
    double beta = 1.0;
    double lambda_reg_sm = 0.01;
    std::size_t mc_samples = 1;
};

// ELBO and TC share one graph (one encoder forward); the sampled latents
// and covariate embeddings are exported for the score-matching pass.
// noise is [batch, latent_dim * mc_samples]; the ELBO averages one term per
// m-column noise block and TC uses the first draw.
struct ElboTcBuild {
    Graph::Var elbo = -1; // scalar batch mean, maximize
    Graph::Var tc = -1;   // scalar, minimize; -1 when no group has size >= 2
    Tensor z_values;      // [B, m] first reparameterized draw
    Tensor d_embed_values;
};

ElboTcBuild build_elbo_tc(Graph& g, const InvaeModel& model, const Batch& batch, const Tensor& noise);

// Score-matching objective on detached latent samples; gradients flow only
// into the prior networks. z_block is [B, prior latent dim]; cond is the
// lambda-network conditioning input [B, cond dim].
Graph::Var build_sm(Graph& g, const InvaeModel& model, const Tensor& z_block, const Tensor& cond,
                    double lambda_reg_sm);

// Value-level operations.

// Requires the invariant-prior parameters to be flagged frozen.
double elbo_loss(InvaeModel& model, const Batch& batch, const Tensor& noise);

double sm_loss(InvaeModel& model, const Tensor& z_block, const Tensor& cond, double lambda_reg_sm);

// log( (1/(n_u b)) sum_j q_j(z_eval) ) over coordinates [from, to).
double minibatch_log_marginal(const Tensor& z_eval, const std::vector<DiagGaussianParams>& components,
                              double n_u, std::size_t from, std::size_t to);

double tc_loss(InvaeModel& model, const Batch& batch, const Tensor& noise);

// Total-correlation estimator over explicit posterior parameters; rows
// grouped by domain, groups of size < 2 skipped. Returns -1 (no node) when
// no group qualifies.
Graph::Var tc_estimator_core(Graph& g, Graph::Var z, Graph::Var mu, Graph::Var lv,
                             std::size_t invariant_dim, const std::vector<std::size_t>& group,
                             const std::vector<double>& group_total);

double tc_estimate_value(const Tensor& z, const Tensor& mu, const Tensor& lv,
                         std::size_t invariant_dim, const std::vector<std::size_t>& group,
                         const std::vector<double>& group_total);

LossReport total_loss(InvaeModel& model, const Batch& batch, const Tensor& noise, const LossHyper& hyper);

// Both gradient scopes evaluated at the same parameter state. The ELBO/TC
// map contains no invariant-prior names; the SM map contains only them.
struct BatchStep {
    LossReport report;
    GradMap elbo_tc_grads;
    GradMap sm_grads;
    Tensor z_prior_block; // detached samples fed to the SM pass
    Tensor sm_cond;
};

BatchStep batch_losses(InvaeModel& model, const Batch& batch, const Tensor& noise,
                       const LossHyper& hyper, bool want_grads);

} // namespace invae
