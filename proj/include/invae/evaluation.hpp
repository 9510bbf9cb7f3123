#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "invae/tensor.hpp"

namespace invae {

using Labels = std::vector<int>;

// Map arbitrary string labels to dense integer ids (sorted vocabulary).
Labels encode_labels(const std::vector<std::string>& values, std::vector<std::string>* vocab = nullptr);

// Mean correlation coefficient: |Pearson| cross correlation, maximum-weight
// column assignment, mean of matched entries. Columns with zero variance
// correlate as 0. Spearman variant ranks both arguments first.
double mcc(const Tensor& z_true, const Tensor& z_est, bool spearman = false);

// Multinomial logistic regression probe, full-batch gradient descent.
struct ProbeResult {
    std::map<int, double> accuracy_by_env; // env id -> accuracy
    double train_accuracy = 0.0;
    double avg = 0.0, min = 0.0, max = 0.0, median = 0.0; // over evaluated envs
};

ProbeResult probe_accuracy(const Tensor& z, const Labels& y, const Labels& env,
                           const std::vector<int>& train_envs);

// Silhouette scores (Euclidean). Returns per-point s(i); singleton clusters
// score 0.
std::vector<double> silhouette_values(const Tensor& z, const Labels& labels);
// (mean + 1) / 2 over all points.
double silhouette_label_asw(const Tensor& z, const Labels& labels);
// Batch mixing: mean over groups of mean(1 - |s_batch|) within the group.
double batch_asw(const Tensor& z, const Labels& batch_labels, const Labels& group_labels);

double nmi(const Labels& a, const Labels& b);
double ari(const Labels& a, const Labels& b);

Labels kmeans(const Tensor& z, std::size_t k, std::uint64_t seed);

struct KnnGraph {
    std::size_t k = 0;
    std::vector<std::vector<std::size_t>> neighbors; // exactly k per node, no self
};

KnnGraph knn_graph(const Tensor& z, std::size_t k);

double graph_connectivity(const KnnGraph& g, const Labels& labels);

struct KbetResult {
    double rejection_rate = 0.0;
    bool merged_batches = false; // small expected counts forced a merge
};

KbetResult kbet(const KnnGraph& g, const Labels& batch_labels, double alpha = 0.05,
                double sample_fraction = 0.25, std::uint64_t seed = 0);

// Labels found in the fewest batches.
std::vector<int> isolated_labels(const Labels& type_labels, const Labels& batch_labels);
double isolated_label_f1(const Labels& cluster_labels, const Labels& type_labels,
                         const Labels& batch_labels);
double isolated_label_silhouette(const Tensor& z, const Labels& type_labels,
                                 const Labels& batch_labels);

struct MetricsReport {
    std::map<std::string, double> metrics;
    std::vector<std::pair<std::string, std::string>> skipped; // name, reason
};

struct ReportInputs {
    Tensor z_invariant;                     // required
    Tensor z_spurious;                      // may be empty
    std::optional<Labels> type_labels;      // y
    std::optional<Labels> batch_labels;     // e
    std::optional<Tensor> true_z_invariant; // ground truth, may be empty
    std::optional<Tensor> true_z_spurious;
    std::vector<int> probe_train_envs; // empty: no probe
    std::uint64_t seed = 0;
};

MetricsReport metrics_report(const ReportInputs& in);

} // namespace invae
