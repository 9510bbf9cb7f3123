#pragma once

#include <string>
#include <vector>

#include "invae/model.hpp"
#include "invae/tensor.hpp"

namespace invae {

// One observed covariate column (everything between cell_id and env in
// obs.csv). Columns whose every value parses as a number are continuous;
// all others are categorical.
struct ObsColumn {
    std::string name;
    bool categorical = true;
    std::vector<std::string> values; // raw strings, one per cell
};

struct Dataset {
    std::vector<std::string> cell_ids;
    std::vector<std::string> gene_names;
    Tensor counts; // [N, n] integer-valued
    std::vector<ObsColumn> d_columns;
    std::vector<std::string> env;
    std::vector<std::string> labels; // empty when obs.csv has no label column
    Tensor true_z_invariant;         // empty when latents_true.csv absent
    Tensor true_z_spurious;

    std::size_t n_cells() const { return cell_ids.size(); }
    std::size_t n_genes() const { return gene_names.size(); }
    bool has_labels() const { return !labels.empty(); }
    bool has_true_latents() const { return true_z_invariant.size() > 0; }

    void validate() const;

    // Vocabulary helpers (sorted unique values).
    std::vector<std::string> env_vocab() const;
    std::vector<std::string> label_vocab() const;
    CovariateSchema derive_schema() const;

    // Domain group u = (categorical d values, env). Returns per-cell group
    // ids and fills totals with the dataset-level count per group.
    std::vector<std::size_t> group_ids(std::vector<double>* totals) const;
};

// Directory layout: counts.csv, obs.csv, optional latents_true.csv.
Dataset read_dataset_dir(const std::string& dir);
void write_dataset_dir(const Dataset& ds, const std::string& dir, const std::string& manifest_json);

// CSV helpers shared with the CLI (no quoting; fields must not contain
// commas or newlines).
std::vector<std::vector<std::string>> read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::vector<std::string>>& rows);
std::string format_double(double v); // 17 significant digits

} // namespace invae
