#include "invae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "invae/errors.hpp"

namespace invae {

namespace fs = std::filesystem;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() && in.peek() == EOF) {
            break;
        }
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            std::size_t pos = line.find(',', start);
            if (pos == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, pos - start));
            start = pos + 1;
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

void write_csv(const std::string& path, const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (row[i].find(',') != std::string::npos || row[i].find('\n') != std::string::npos) {
                throw IoError("CSV field contains a delimiter: '" + row[i] + "'");
            }
            out << (i ? "," : "") << row[i];
        }
        out << "\n";
    }
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

void Dataset::validate() const {
    const std::size_t n = n_cells();
    if (n == 0) {
        throw SchemaError("dataset has no cells");
    }
    if (counts.rank() != 2 || counts.rows() != n || counts.cols() != n_genes()) {
        throw SchemaError("counts shape does not match cell/gene lists");
    }
    if (env.size() != n) {
        throw SchemaError("env column length mismatch");
    }
    if (!labels.empty() && labels.size() != n) {
        throw SchemaError("label column length mismatch");
    }
    for (const auto& col : d_columns) {
        if (col.values.size() != n) {
            throw SchemaError("covariate column '" + col.name + "' length mismatch");
        }
    }
    for (double v : counts.values) {
        if (v < 0.0 || std::floor(v) != v || !std::isfinite(v)) {
            throw SchemaError("counts must be non-negative integers");
        }
    }
    if (has_true_latents()) {
        if (true_z_invariant.rows() != n ||
            (true_z_spurious.size() > 0 && true_z_spurious.rows() != n)) {
            throw SchemaError("true latents row count mismatch");
        }
    }
}

namespace {

std::vector<std::string> sorted_unique(const std::vector<std::string>& values) {
    std::set<std::string> s(values.begin(), values.end());
    return std::vector<std::string>(s.begin(), s.end());
}

} // namespace

std::vector<std::string> Dataset::env_vocab() const { return sorted_unique(env); }
std::vector<std::string> Dataset::label_vocab() const { return sorted_unique(labels); }

CovariateSchema Dataset::derive_schema() const {
    CovariateSchema schema;
    for (const auto& col : d_columns) {
        CovariateColumn c;
        c.name = col.name;
        c.categorical = col.categorical;
        if (col.categorical) {
            c.levels = sorted_unique(col.values);
        }
        schema.columns.push_back(std::move(c));
    }
    return schema;
}

std::vector<std::size_t> Dataset::group_ids(std::vector<double>* totals) const {
    std::map<std::string, std::size_t> keys;
    std::vector<std::size_t> ids(n_cells());
    std::vector<double> counts_per_group;
    for (std::size_t r = 0; r < n_cells(); ++r) {
        std::string key;
        for (const auto& col : d_columns) {
            if (col.categorical) {
                key += col.values[r];
                key += '\x1f';
            }
        }
        key += env[r];
        auto [it, inserted] = keys.try_emplace(key, counts_per_group.size());
        if (inserted) {
            counts_per_group.push_back(0.0);
        }
        ids[r] = it->second;
        counts_per_group[it->second] += 1.0;
    }
    if (totals) {
        *totals = std::move(counts_per_group);
    }
    return ids;
}

namespace {

double parse_count(const std::string& s, const std::string& where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw SchemaError("non-numeric count '" + s + "' in " + where);
    }
    if (pos != s.size() || v < 0.0 || std::floor(v) != v) {
        throw SchemaError("invalid count '" + s + "' in " + where);
    }
    return v;
}

bool parses_as_number(const std::string& s) {
    if (s.empty()) {
        return false;
    }
    std::size_t pos = 0;
    try {
        (void)std::stod(s, &pos);
    } catch (const std::exception&) {
        return false;
    }
    return pos == s.size();
}

} // namespace

Dataset read_dataset_dir(const std::string& dir) {
    const fs::path base(dir);
    if (!fs::exists(base / "counts.csv")) {
        throw IoError("missing " + (base / "counts.csv").string());
    }
    if (!fs::exists(base / "obs.csv")) {
        throw IoError("missing " + (base / "obs.csv").string());
    }

    Dataset ds;
    {
        auto rows = read_csv((base / "counts.csv").string());
        if (rows.size() < 2 || rows[0].size() < 2 || rows[0][0] != "cell_id") {
            throw SchemaError("counts.csv: expected header 'cell_id,<genes...>'");
        }
        ds.gene_names.assign(rows[0].begin() + 1, rows[0].end());
        const std::size_t n = rows.size() - 1;
        ds.counts = Tensor({n, ds.gene_names.size()});
        ds.cell_ids.reserve(n);
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != ds.gene_names.size() + 1) {
                throw SchemaError("counts.csv: row " + std::to_string(r) + " has wrong field count");
            }
            ds.cell_ids.push_back(rows[r][0]);
            for (std::size_t c = 0; c < ds.gene_names.size(); ++c) {
                ds.counts.at(r - 1, c) = parse_count(rows[r][c + 1], "counts.csv row " + std::to_string(r));
            }
        }
    }
    {
        auto rows = read_csv((base / "obs.csv").string());
        if (rows.size() != ds.cell_ids.size() + 1 || rows[0].size() < 2 || rows[0][0] != "cell_id") {
            throw SchemaError("obs.csv: expected header 'cell_id,<d columns...>,env[,label]' and one row per cell");
        }
        const auto& header = rows[0];
        std::size_t env_col = header.size();
        for (std::size_t c = 1; c < header.size(); ++c) {
            if (header[c] == "env") {
                env_col = c;
                break;
            }
        }
        if (env_col == header.size()) {
            throw SchemaError("obs.csv: missing 'env' column");
        }
        const bool has_label = env_col + 1 < header.size();
        if (has_label && (header[env_col + 1] != "label" || env_col + 2 != header.size())) {
            throw SchemaError("obs.csv: columns after 'env' must be exactly 'label'");
        }
        for (std::size_t c = 1; c < env_col; ++c) {
            ObsColumn col;
            col.name = header[c];
            ds.d_columns.push_back(std::move(col));
        }
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != header.size()) {
                throw SchemaError("obs.csv: row " + std::to_string(r) + " has wrong field count");
            }
            if (rows[r][0] != ds.cell_ids[r - 1]) {
                throw SchemaError("obs.csv: cell_id order differs from counts.csv at row " +
                                  std::to_string(r));
            }
            for (std::size_t c = 1; c < env_col; ++c) {
                ds.d_columns[c - 1].values.push_back(rows[r][c]);
            }
            ds.env.push_back(rows[r][env_col]);
            if (has_label) {
                ds.labels.push_back(rows[r][env_col + 1]);
            }
        }
        for (auto& col : ds.d_columns) {
            col.categorical = !std::all_of(col.values.begin(), col.values.end(), parses_as_number);
        }
    }
    if (fs::exists(base / "latents_true.csv")) {
        auto rows = read_csv((base / "latents_true.csv").string());
        if (rows.size() != ds.cell_ids.size() + 1 || rows[0].empty() || rows[0][0] != "cell_id") {
            throw SchemaError("latents_true.csv: bad header or row count");
        }
        std::size_t zi = 0, zs = 0;
        for (std::size_t c = 1; c < rows[0].size(); ++c) {
            if (rows[0][c].rfind("zI_", 0) == 0) {
                ++zi;
            } else if (rows[0][c].rfind("zS_", 0) == 0) {
                ++zs;
            } else {
                throw SchemaError("latents_true.csv: unexpected column '" + rows[0][c] + "'");
            }
        }
        ds.true_z_invariant = Tensor({ds.cell_ids.size(), zi});
        ds.true_z_spurious = Tensor({ds.cell_ids.size(), zs});
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != zi + zs + 1 || rows[r][0] != ds.cell_ids[r - 1]) {
                throw SchemaError("latents_true.csv: row " + std::to_string(r) + " malformed");
            }
            for (std::size_t c = 0; c < zi; ++c) {
                ds.true_z_invariant.at(r - 1, c) = std::stod(rows[r][1 + c]);
            }
            for (std::size_t c = 0; c < zs; ++c) {
                ds.true_z_spurious.at(r - 1, c) = std::stod(rows[r][1 + zi + c]);
            }
        }
    }
    ds.validate();
    return ds;
}

void write_dataset_dir(const Dataset& ds, const std::string& dir, const std::string& manifest_json) {
    ds.validate();
    const fs::path base(dir);
    std::error_code ec;
    fs::create_directories(base, ec);
    if (ec) {
        throw IoError("cannot create directory '" + dir + "': " + ec.message());
    }

    {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> header = {"cell_id"};
        header.insert(header.end(), ds.gene_names.begin(), ds.gene_names.end());
        rows.push_back(std::move(header));
        for (std::size_t r = 0; r < ds.n_cells(); ++r) {
            std::vector<std::string> row = {ds.cell_ids[r]};
            for (std::size_t c = 0; c < ds.n_genes(); ++c) {
                row.push_back(std::to_string(static_cast<long long>(ds.counts.at(r, c))));
            }
            rows.push_back(std::move(row));
        }
        write_csv((base / "counts.csv").string(), rows);
    }
    {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> header = {"cell_id"};
        for (const auto& col : ds.d_columns) {
            header.push_back(col.name);
        }
        header.push_back("env");
        if (ds.has_labels()) {
            header.push_back("label");
        }
        rows.push_back(std::move(header));
        for (std::size_t r = 0; r < ds.n_cells(); ++r) {
            std::vector<std::string> row = {ds.cell_ids[r]};
            for (const auto& col : ds.d_columns) {
                row.push_back(col.values[r]);
            }
            row.push_back(ds.env[r]);
            if (ds.has_labels()) {
                row.push_back(ds.labels[r]);
            }
            rows.push_back(std::move(row));
        }
        write_csv((base / "obs.csv").string(), rows);
    }
    if (ds.has_true_latents()) {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> header = {"cell_id"};
        for (std::size_t c = 0; c < ds.true_z_invariant.cols(); ++c) {
            header.push_back("zI_" + std::to_string(c + 1));
        }
        for (std::size_t c = 0; c < ds.true_z_spurious.cols(); ++c) {
            header.push_back("zS_" + std::to_string(c + 1));
        }
        rows.push_back(std::move(header));
        for (std::size_t r = 0; r < ds.n_cells(); ++r) {
            std::vector<std::string> row = {ds.cell_ids[r]};
            for (std::size_t c = 0; c < ds.true_z_invariant.cols(); ++c) {
                row.push_back(format_double(ds.true_z_invariant.at(r, c)));
            }
            for (std::size_t c = 0; c < ds.true_z_spurious.cols(); ++c) {
                row.push_back(format_double(ds.true_z_spurious.at(r, c)));
            }
            rows.push_back(std::move(row));
        }
        write_csv((base / "latents_true.csv").string(), rows);
    }
    {
        std::ofstream out(base / "manifest.json", std::ios::trunc);
        if (!out) {
            throw IoError("cannot write manifest.json");
        }
        out << manifest_json << "\n";
    }
}

} // namespace invae
