#include "invae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "invae/rng.hpp"
#include "invae/special.hpp"

namespace invae {

Labels encode_labels(const std::vector<std::string>& values, std::vector<std::string>* vocab) {
    std::set<std::string> uniq(values.begin(), values.end());
    std::vector<std::string> v(uniq.begin(), uniq.end());
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < v.size(); ++i) {
        index[v[i]] = static_cast<int>(i);
    }
    Labels out;
    out.reserve(values.size());
    for (const auto& s : values) {
        out.push_back(index[s]);
    }
    if (vocab) {
        *vocab = std::move(v);
    }
    return out;
}

namespace {

int label_count(const Labels& l) {
    int mx = -1;
    for (int v : l) {
        mx = std::max(mx, v);
    }
    return mx + 1;
}

std::vector<double> column(const Tensor& z, std::size_t c) {
    std::vector<double> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        out[r] = z.at(r, c);
    }
    return out;
}

std::vector<double> row_of(const Tensor& z, std::size_t r) {
    std::vector<double> out(z.cols());
    for (std::size_t c = 0; c < z.cols(); ++c) {
        out[c] = z.at(r, c);
    }
    return out;
}

std::vector<double> to_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j); // average rank for ties
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) {
        return 0.0; // zero-variance column
    }
    return sab / std::sqrt(saa * sbb);
}

// Maximum-weight assignment on a rectangular matrix (rows <= cols after
// transposition), classic O(n^2 m) Hungarian with potentials.
std::vector<int> max_weight_assignment(const std::vector<std::vector<double>>& w) {
    const std::size_t rows = w.size();
    const std::size_t cols = w.empty() ? 0 : w[0].size();
    // Convert to min-cost.
    double mx = 0.0;
    for (const auto& row : w) {
        for (double v : row) {
            mx = std::max(mx, v);
        }
    }
    const std::size_t n = rows, m = cols;
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, 1e300);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = 1e300;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cost = mx - w[i0 - 1][j - 1];
                const double cur = cost - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> match(rows, -1);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] != 0) {
            match[p[j] - 1] = static_cast<int>(j - 1);
        }
    }
    return match;
}

} // namespace

double mcc(const Tensor& z_true, const Tensor& z_est, bool spearman) {
    if (z_true.rank() != 2 || z_est.rank() != 2 || z_true.rows() != z_est.rows()) {
        throw std::invalid_argument("mcc: row counts must match");
    }
    if (z_true.rows() < 2) {
        throw std::invalid_argument("mcc: need at least 2 rows");
    }
    const std::size_t da = z_true.cols();
    const std::size_t db = z_est.cols();
    std::vector<std::vector<double>> acorr(da, std::vector<double>(db, 0.0));
    std::vector<std::vector<double>> ca(da), cb(db);
    for (std::size_t i = 0; i < da; ++i) {
        ca[i] = column(z_true, i);
        if (spearman) {
            ca[i] = to_ranks(ca[i]);
        }
    }
    for (std::size_t j = 0; j < db; ++j) {
        cb[j] = column(z_est, j);
        if (spearman) {
            cb[j] = to_ranks(cb[j]);
        }
    }
    for (std::size_t i = 0; i < da; ++i) {
        for (std::size_t j = 0; j < db; ++j) {
            acorr[i][j] = std::fabs(pearson(ca[i], cb[j]));
        }
    }
    // Score over min(da, db) matched pairs.
    const bool transpose = da > db;
    std::vector<std::vector<double>> w = acorr;
    if (transpose) {
        w.assign(db, std::vector<double>(da, 0.0));
        for (std::size_t i = 0; i < da; ++i) {
            for (std::size_t j = 0; j < db; ++j) {
                w[j][i] = acorr[i][j];
            }
        }
    }
    const auto match = max_weight_assignment(w);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < match.size(); ++i) {
        if (match[i] >= 0) {
            total += w[i][static_cast<std::size_t>(match[i])];
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Probe classifier
// ---------------------------------------------------------------------------

ProbeResult probe_accuracy(const Tensor& z, const Labels& y, const Labels& env,
                           const std::vector<int>& train_envs) {
    const std::size_t n = z.rows();
    if (y.size() != n || env.size() != n) {
        throw std::invalid_argument("probe_accuracy: label lengths must match rows");
    }
    std::set<int> train_set(train_envs.begin(), train_envs.end());
    std::vector<std::size_t> train_rows;
    for (std::size_t r = 0; r < n; ++r) {
        if (train_set.count(env[r])) {
            train_rows.push_back(r);
        }
    }
    if (train_rows.empty()) {
        throw std::invalid_argument("probe_accuracy: no training rows for the given environments");
    }
    const int classes = label_count(y);
    std::set<int> train_classes;
    for (std::size_t r : train_rows) {
        train_classes.insert(y[r]);
    }

    const std::size_t d = z.cols();
    // Standardize features on the training rows.
    std::vector<double> mean(d, 0.0), sd(d, 1.0);
    for (std::size_t r : train_rows) {
        for (std::size_t c = 0; c < d; ++c) {
            mean[c] += z.at(r, c);
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        mean[c] /= static_cast<double>(train_rows.size());
    }
    std::vector<double> var(d, 0.0);
    for (std::size_t r : train_rows) {
        for (std::size_t c = 0; c < d; ++c) {
            const double v = z.at(r, c) - mean[c];
            var[c] += v * v;
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        sd[c] = var[c] > 1e-12 ? std::sqrt(var[c] / static_cast<double>(train_rows.size())) : 1.0;
    }
    auto feature = [&](std::size_t r, std::size_t c) { return (z.at(r, c) - mean[c]) / sd[c]; };

    std::vector<double> w(static_cast<std::size_t>(classes) * (d + 1), 0.0);
    auto predict_scores = [&](std::size_t r, std::vector<double>& scores) {
        for (int k = 0; k < classes; ++k) {
            double s = w[static_cast<std::size_t>(k) * (d + 1) + d]; // intercept
            for (std::size_t c = 0; c < d; ++c) {
                s += w[static_cast<std::size_t>(k) * (d + 1) + c] * feature(r, c);
            }
            scores[static_cast<std::size_t>(k)] = s;
        }
    };

    if (train_classes.size() >= 2) {
        // Full-batch gradient descent with halving step control.
        const double inv_n = 1.0 / static_cast<double>(train_rows.size());
        std::vector<double> grad(w.size());
        std::vector<double> scores(static_cast<std::size_t>(classes));
        auto loss_and_grad = [&](std::vector<double>* g) {
            if (g) {
                std::fill(g->begin(), g->end(), 0.0);
            }
            double loss = 0.0;
            for (std::size_t r : train_rows) {
                predict_scores(r, scores);
                double mx = scores[0];
                for (double s : scores) mx = std::max(mx, s);
                double sum = 0.0;
                for (double s : scores) sum += std::exp(s - mx);
                const double lse = mx + std::log(sum);
                loss += (lse - scores[static_cast<std::size_t>(y[r])]) * inv_n;
                if (g) {
                    for (int k = 0; k < classes; ++k) {
                        const double p = std::exp(scores[static_cast<std::size_t>(k)] - lse);
                        const double coef = (p - (k == y[r] ? 1.0 : 0.0)) * inv_n;
                        for (std::size_t c = 0; c < d; ++c) {
                            (*g)[static_cast<std::size_t>(k) * (d + 1) + c] += coef * feature(r, c);
                        }
                        (*g)[static_cast<std::size_t>(k) * (d + 1) + d] += coef;
                    }
                }
            }
            return loss;
        };
        double lr = 5.0;
        double loss = loss_and_grad(&grad);
        std::vector<double> w_try(w.size());
        for (int iter = 0; iter < 4000; ++iter) {
            double gnorm = 0.0;
            for (double g : grad) gnorm = std::max(gnorm, std::fabs(g));
            if (gnorm < 1e-7 || lr < 1e-10) {
                break;
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                w_try[i] = w[i] - lr * grad[i];
            }
            std::swap(w, w_try);
            const double new_loss = loss_and_grad(&grad);
            if (new_loss > loss) {
                std::swap(w, w_try); // revert
                lr *= 0.5;
                loss = loss_and_grad(&grad);
            } else {
                loss = new_loss;
                lr *= 1.05;
            }
        }
    } else {
        // Degenerate single-class training set: constant predictor.
        const int only = *train_classes.begin();
        w[static_cast<std::size_t>(only) * (d + 1) + d] = 1.0;
    }

    // Per-environment accuracies.
    ProbeResult res;
    std::map<int, std::pair<double, double>> env_hits; // env -> (correct, total)
    double train_correct = 0.0;
    std::vector<double> scores(static_cast<std::size_t>(classes));
    std::vector<int> pred(n);
    for (std::size_t r = 0; r < n; ++r) {
        predict_scores(r, scores);
        int best = 0;
        for (int k = 1; k < classes; ++k) {
            if (scores[static_cast<std::size_t>(k)] > scores[static_cast<std::size_t>(best)]) {
                best = k;
            }
        }
        pred[r] = best;
        auto& he = env_hits[env[r]];
        he.first += best == y[r] ? 1.0 : 0.0;
        he.second += 1.0;
        if (train_set.count(env[r])) {
            train_correct += best == y[r] ? 1.0 : 0.0;
        }
    }
    for (const auto& [e, ht] : env_hits) {
        res.accuracy_by_env[e] = ht.first / ht.second;
    }
    res.train_accuracy = train_correct / static_cast<double>(train_rows.size());

    // Summary over per-class accuracies on held-out environments (falls back
    // to all environments when nothing is held out).
    std::map<int, std::pair<double, double>> class_hits;
    bool any_heldout = false;
    for (std::size_t r = 0; r < n; ++r) {
        if (!train_set.count(env[r])) {
            any_heldout = true;
            auto& hc = class_hits[y[r]];
            hc.first += pred[r] == y[r] ? 1.0 : 0.0;
            hc.second += 1.0;
        }
    }
    if (!any_heldout) {
        for (std::size_t r = 0; r < n; ++r) {
            auto& hc = class_hits[y[r]];
            hc.first += pred[r] == y[r] ? 1.0 : 0.0;
            hc.second += 1.0;
        }
    }
    std::vector<double> per_class;
    for (const auto& [cls, ht] : class_hits) {
        per_class.push_back(ht.first / ht.second);
    }
    std::sort(per_class.begin(), per_class.end());
    if (!per_class.empty()) {
        res.min = per_class.front();
        res.max = per_class.back();
        res.avg = std::accumulate(per_class.begin(), per_class.end(), 0.0) /
                  static_cast<double>(per_class.size());
        const std::size_t h = per_class.size() / 2;
        res.median = per_class.size() % 2 ? per_class[h] : 0.5 * (per_class[h - 1] + per_class[h]);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Silhouettes
// ---------------------------------------------------------------------------

std::vector<double> silhouette_values(const Tensor& z, const Labels& labels) {
    const std::size_t n = z.rows();
    if (labels.size() != n || n < 2) {
        throw std::invalid_argument("silhouette: need >= 2 labeled rows");
    }
    const int k = label_count(labels);
    std::vector<std::size_t> cluster_size(static_cast<std::size_t>(k), 0);
    for (int l : labels) {
        cluster_size[static_cast<std::size_t>(l)] += 1;
    }
    std::vector<double> s(n, 0.0);
    std::vector<double> dist_sum(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                continue;
            }
            double d2 = 0.0;
            for (std::size_t c = 0; c < z.cols(); ++c) {
                const double d = z.at(i, c) - z.at(j, c);
                d2 += d * d;
            }
            dist_sum[static_cast<std::size_t>(labels[j])] += std::sqrt(d2);
        }
        const std::size_t own = static_cast<std::size_t>(labels[i]);
        if (cluster_size[own] <= 1) {
            s[i] = 0.0; // singleton convention
            continue;
        }
        const double a = dist_sum[own] / static_cast<double>(cluster_size[own] - 1);
        double b = 1e300;
        for (int c = 0; c < k; ++c) {
            const std::size_t cc = static_cast<std::size_t>(c);
            if (c == labels[i] || cluster_size[cc] == 0) {
                continue;
            }
            b = std::min(b, dist_sum[cc] / static_cast<double>(cluster_size[cc]));
        }
        const double denom = std::max(a, b);
        s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return s;
}

double silhouette_label_asw(const Tensor& z, const Labels& labels) {
    if (label_count(labels) < 2) {
        throw std::invalid_argument("silhouette_label_asw: need >= 2 labels");
    }
    const auto s = silhouette_values(z, labels);
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    return (mean + 1.0) / 2.0;
}

double batch_asw(const Tensor& z, const Labels& batch_labels, const Labels& group_labels) {
    const std::size_t n = z.rows();
    if (batch_labels.size() != n || group_labels.size() != n) {
        throw std::invalid_argument("batch_asw: label lengths must match");
    }
    const int groups = label_count(group_labels);
    double total = 0.0;
    int counted = 0;
    for (int gidx = 0; gidx < groups; ++gidx) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < n; ++r) {
            if (group_labels[r] == gidx) {
                rows.push_back(r);
            }
        }
        if (rows.empty()) {
            continue;
        }
        std::set<int> batches;
        for (std::size_t r : rows) {
            batches.insert(batch_labels[r]);
        }
        double score = 1.0; // single batch: s == 0 by convention, 1 - |0| = 1
        if (batches.size() >= 2 && rows.size() >= 2) {
            Tensor sub({rows.size(), z.cols()});
            Labels sub_labels(rows.size());
            std::map<int, int> remap;
            for (std::size_t i = 0; i < rows.size(); ++i) {
                for (std::size_t c = 0; c < z.cols(); ++c) {
                    sub.at(i, c) = z.at(rows[i], c);
                }
                auto [it, ins] = remap.try_emplace(batch_labels[rows[i]], static_cast<int>(remap.size()));
                sub_labels[i] = it->second;
            }
            const auto s = silhouette_values(sub, sub_labels);
            score = 0.0;
            for (double v : s) {
                score += 1.0 - std::fabs(v);
            }
            score /= static_cast<double>(s.size());
        }
        total += score;
        ++counted;
    }
    if (counted == 0) {
        throw std::invalid_argument("batch_asw: no groups");
    }
    return total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Clustering agreement
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> contingency(const Labels& a, const Labels& b) {
    const int ka = label_count(a), kb = label_count(b);
    std::vector<std::vector<double>> c(static_cast<std::size_t>(ka),
                                       std::vector<double>(static_cast<std::size_t>(kb), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        c[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])] += 1.0;
    }
    return c;
}

} // namespace

double nmi(const Labels& a, const Labels& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("nmi: labelings must have equal length >= 2");
    }
    const double n = static_cast<double>(a.size());
    const auto c = contingency(a, b);
    std::vector<double> ra(c.size(), 0.0), rb(c.empty() ? 0 : c[0].size(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t j = 0; j < c[i].size(); ++j) {
            ra[i] += c[i][j];
            rb[j] += c[i][j];
        }
    }
    double mi = 0.0, ha = 0.0, hb = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t j = 0; j < c[i].size(); ++j) {
            if (c[i][j] > 0.0) {
                mi += (c[i][j] / n) * std::log(c[i][j] * n / (ra[i] * rb[j]));
            }
        }
    }
    for (double v : ra) {
        if (v > 0.0) ha -= (v / n) * std::log(v / n);
    }
    for (double v : rb) {
        if (v > 0.0) hb -= (v / n) * std::log(v / n);
    }
    const double denom = 0.5 * (ha + hb);
    if (denom <= 0.0) {
        return 0.0; // 0/0 convention
    }
    return std::max(0.0, std::min(1.0, mi / denom));
}

double ari(const Labels& a, const Labels& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("ari: labelings must have equal length >= 2");
    }
    const auto c = contingency(a, b);
    auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double sum_ij = 0.0;
    std::vector<double> ra(c.size(), 0.0), rb(c.empty() ? 0 : c[0].size(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t j = 0; j < c[i].size(); ++j) {
            sum_ij += comb2(c[i][j]);
            ra[i] += c[i][j];
            rb[j] += c[i][j];
        }
    }
    double sa = 0.0, sb = 0.0;
    for (double v : ra) sa += comb2(v);
    for (double v : rb) sb += comb2(v);
    const double total = comb2(static_cast<double>(a.size()));
    // Cleared of the 1/total division so small integer cases are exact.
    const double num = sum_ij * total - sa * sb;
    const double den = 0.5 * (sa + sb) * total - sa * sb;
    if (den == 0.0) {
        return 0.0; // e.g. one labeling puts everything in one cluster
    }
    return num / den;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

Labels kmeans(const Tensor& z, std::size_t k, std::uint64_t seed) {
    const std::size_t n = z.rows();
    const std::size_t d = z.cols();
    if (k < 1 || k > n) {
        throw std::invalid_argument("kmeans: k must be in [1, rows]");
    }
    Rng rng(seed);
    Labels best_labels(n, 0);
    double best_inertia = 1e300;
    auto dist2 = [&](std::size_t r, const std::vector<double>& c) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = z.at(r, j) - c[j];
            s += v * v;
        }
        return s;
    };
    for (int restart = 0; restart < 10; ++restart) {
        // k-means++ seeding
        std::vector<std::vector<double>> centers;
        centers.reserve(k);
        std::vector<double> mind2(n, 1e300);
        std::size_t first = static_cast<std::size_t>(rng.uniform_index(n));
        centers.push_back(row_of(z, first));
        for (std::size_t c = 1; c < k; ++c) {
            double total = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                mind2[r] = std::min(mind2[r], dist2(r, centers.back()));
                total += mind2[r];
            }
            std::size_t pick = 0;
            if (total > 0.0) {
                double target = rng.uniform() * total;
                for (std::size_t r = 0; r < n; ++r) {
                    target -= mind2[r];
                    if (target <= 0.0) {
                        pick = r;
                        break;
                    }
                }
            } else {
                pick = static_cast<std::size_t>(rng.uniform_index(n));
            }
            centers.push_back(row_of(z, pick));
        }
        // Lloyd iterations
        Labels labels(n, 0);
        for (int iter = 0; iter < 200; ++iter) {
            bool changed = false;
            for (std::size_t r = 0; r < n; ++r) {
                int best = 0;
                double bd = dist2(r, centers[0]);
                for (std::size_t c = 1; c < k; ++c) {
                    const double dd = dist2(r, centers[c]);
                    if (dd < bd) {
                        bd = dd;
                        best = static_cast<int>(c);
                    }
                }
                if (labels[r] != best) {
                    labels[r] = best;
                    changed = true;
                }
            }
            std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t r = 0; r < n; ++r) {
                counts[static_cast<std::size_t>(labels[r])] += 1;
                for (std::size_t j = 0; j < d; ++j) {
                    sums[static_cast<std::size_t>(labels[r])][j] += z.at(r, j);
                }
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (counts[c] == 0) {
                    // Reassign an empty cluster to the point farthest from
                    // its center.
                    std::size_t far = 0;
                    double fd = -1.0;
                    for (std::size_t r = 0; r < n; ++r) {
                        const double dd = dist2(r, centers[static_cast<std::size_t>(labels[r])]);
                        if (dd > fd) {
                            fd = dd;
                            far = r;
                        }
                    }
                    centers[c] = row_of(z, far);
                    changed = true;
                } else {
                    for (std::size_t j = 0; j < d; ++j) {
                        centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
                    }
                }
            }
            if (!changed) {
                break;
            }
        }
        double inertia = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            inertia += dist2(r, centers[static_cast<std::size_t>(labels[r])]);
        }
        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    return best_labels;
}

// ---------------------------------------------------------------------------
// kNN graph and graph metrics
// ---------------------------------------------------------------------------

KnnGraph knn_graph(const Tensor& z, std::size_t k) {
    const std::size_t n = z.rows();
    if (k < 1 || k >= n) {
        throw std::invalid_argument("knn_graph: k must be in [1, rows)");
    }
    KnnGraph g;
    g.k = k;
    g.neighbors.assign(n, {});
    std::vector<std::pair<double, std::size_t>> dists(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < z.cols(); ++c) {
                const double d = z.at(i, c) - z.at(j, c);
                d2 += d * d;
            }
            dists[j] = {d2, j};
        }
        dists[i].first = 1e301; // exclude self
        // Ties break toward the lower index via the pair ordering.
        std::partial_sort(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k), dists.end());
        g.neighbors[i].reserve(k);
        for (std::size_t t = 0; t < k; ++t) {
            g.neighbors[i].push_back(dists[t].second);
        }
    }
    return g;
}

namespace {

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

} // namespace

double graph_connectivity(const KnnGraph& g, const Labels& labels) {
    const std::size_t n = g.neighbors.size();
    if (labels.size() != n) {
        throw std::invalid_argument("graph_connectivity: label length mismatch");
    }
    const int k = label_count(labels);
    double total = 0.0;
    for (int lab = 0; lab < k; ++lab) {
        std::vector<std::size_t> nodes;
        std::vector<std::ptrdiff_t> pos(n, -1);
        for (std::size_t r = 0; r < n; ++r) {
            if (labels[r] == lab) {
                pos[r] = static_cast<std::ptrdiff_t>(nodes.size());
                nodes.push_back(r);
            }
        }
        if (nodes.empty()) {
            throw std::invalid_argument("graph_connectivity: empty label " + std::to_string(lab));
        }
        UnionFind uf(nodes.size());
        for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
            for (std::size_t nb : g.neighbors[nodes[idx]]) {
                if (pos[nb] >= 0) {
                    // Edges are treated as undirected within the subgraph.
                    uf.unite(idx, static_cast<std::size_t>(pos[nb]));
                }
            }
        }
        std::map<std::size_t, std::size_t> comp;
        std::size_t largest = 0;
        for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
            largest = std::max(largest, ++comp[uf.find(idx)]);
        }
        total += static_cast<double>(largest) / static_cast<double>(nodes.size());
    }
    return total / static_cast<double>(k);
}

KbetResult kbet(const KnnGraph& g, const Labels& batch_labels, double alpha, double sample_fraction,
                std::uint64_t seed) {
    const std::size_t n = g.neighbors.size();
    if (batch_labels.size() != n) {
        throw std::invalid_argument("kbet: label length mismatch");
    }
    const int nb = label_count(batch_labels);
    KbetResult res;
    if (nb < 2) {
        return res; // single batch: nothing to reject
    }
    // Global composition; merge smallest batches while an expected count
    // would fall below 1.
    std::vector<double> counts(static_cast<std::size_t>(nb), 0.0);
    for (int b : batch_labels) {
        counts[static_cast<std::size_t>(b)] += 1.0;
    }
    std::vector<int> merge_to(static_cast<std::size_t>(nb));
    std::iota(merge_to.begin(), merge_to.end(), 0);
    std::vector<std::pair<double, int>> order;
    for (int b = 0; b < nb; ++b) {
        order.push_back({counts[static_cast<std::size_t>(b)], b});
    }
    std::sort(order.begin(), order.end());
    const double hood = static_cast<double>(g.k + 1);
    std::size_t merged_away = 0;
    for (std::size_t idx = 0; idx + 1 < order.size(); ++idx) {
        const double expected = hood * order[idx].first / static_cast<double>(n);
        if (expected >= 1.0) {
            break;
        }
        merge_to[static_cast<std::size_t>(order[idx].second)] = order[idx + 1].second;
        order[idx + 1].first += order[idx].first;
        std::sort(order.begin() + static_cast<std::ptrdiff_t>(idx) + 1, order.end());
        res.merged_batches = true;
        ++merged_away;
    }
    auto resolve = [&](int b) {
        while (merge_to[static_cast<std::size_t>(b)] != b) {
            b = merge_to[static_cast<std::size_t>(b)];
        }
        return b;
    };
    std::map<int, std::size_t> dense;
    for (int b = 0; b < nb; ++b) {
        const int r = resolve(b);
        if (!dense.count(r)) {
            const std::size_t next = dense.size();
            dense[r] = next;
        }
    }
    const std::size_t kb = dense.size();
    if (kb < 2) {
        return res;
    }
    std::vector<double> pi(kb, 0.0);
    for (int b : batch_labels) {
        pi[dense[resolve(b)]] += 1.0 / static_cast<double>(n);
    }

    Rng rng(seed);
    std::vector<std::size_t> order_nodes(n);
    std::iota(order_nodes.begin(), order_nodes.end(), 0);
    rng.shuffle(order_nodes);
    std::size_t tested = std::max<std::size_t>(1, static_cast<std::size_t>(sample_fraction * static_cast<double>(n)));
    tested = std::min(tested, n);

    const int df = static_cast<int>(kb) - 1;
    std::size_t rejected = 0;
    std::vector<double> obs(kb);
    for (std::size_t t = 0; t < tested; ++t) {
        const std::size_t node = order_nodes[t];
        std::fill(obs.begin(), obs.end(), 0.0);
        obs[dense[resolve(batch_labels[node])]] += 1.0;
        for (std::size_t nbr : g.neighbors[node]) {
            obs[dense[resolve(batch_labels[nbr])]] += 1.0;
        }
        double stat = 0.0;
        for (std::size_t b = 0; b < kb; ++b) {
            const double expected = hood * pi[b];
            const double d = obs[b] - expected;
            stat += d * d / expected;
        }
        if (chi2_sf(stat, df) < alpha) {
            ++rejected;
        }
    }
    res.rejection_rate = static_cast<double>(rejected) / static_cast<double>(tested);
    return res;
}

// ---------------------------------------------------------------------------
// Isolated labels
// ---------------------------------------------------------------------------

std::vector<int> isolated_labels(const Labels& type_labels, const Labels& batch_labels) {
    if (type_labels.size() != batch_labels.size()) {
        throw std::invalid_argument("isolated_labels: length mismatch");
    }
    std::map<int, std::set<int>> batches_of;
    for (std::size_t r = 0; r < type_labels.size(); ++r) {
        batches_of[type_labels[r]].insert(batch_labels[r]);
    }
    std::size_t min_batches = SIZE_MAX;
    for (const auto& [lab, bs] : batches_of) {
        min_batches = std::min(min_batches, bs.size());
    }
    std::vector<int> out;
    for (const auto& [lab, bs] : batches_of) {
        if (bs.size() == min_batches) {
            out.push_back(lab);
        }
    }
    return out;
}

double isolated_label_f1(const Labels& cluster_labels, const Labels& type_labels,
                         const Labels& batch_labels) {
    if (cluster_labels.size() != type_labels.size()) {
        throw std::invalid_argument("isolated_label_f1: length mismatch");
    }
    const auto isolated = isolated_labels(type_labels, batch_labels);
    const int kc = label_count(cluster_labels);
    if (kc < 1) {
        throw std::invalid_argument("isolated_label_f1: no clusters");
    }
    double total = 0.0;
    for (int lab : isolated) {
        double best = 0.0;
        for (int c = 0; c < kc; ++c) {
            double tp = 0.0, fp = 0.0, fn = 0.0;
            for (std::size_t r = 0; r < type_labels.size(); ++r) {
                const bool in_c = cluster_labels[r] == c;
                const bool in_l = type_labels[r] == lab;
                if (in_c && in_l) tp += 1.0;
                if (in_c && !in_l) fp += 1.0;
                if (!in_c && in_l) fn += 1.0;
            }
            if (tp == 0.0) {
                continue;
            }
            const double precision = tp / (tp + fp);
            const double recall = tp / (tp + fn);
            best = std::max(best, 2.0 * precision * recall / (precision + recall));
        }
        total += best;
    }
    return total / static_cast<double>(isolated.size());
}

double isolated_label_silhouette(const Tensor& z, const Labels& type_labels,
                                 const Labels& batch_labels) {
    const auto isolated = isolated_labels(type_labels, batch_labels);
    double total = 0.0;
    for (int lab : isolated) {
        Labels binary(type_labels.size());
        std::size_t members = 0;
        for (std::size_t r = 0; r < type_labels.size(); ++r) {
            binary[r] = type_labels[r] == lab ? 1 : 0;
            members += binary[r];
        }
        const auto s = silhouette_values(z, binary);
        double mean = 0.0;
        for (std::size_t r = 0; r < s.size(); ++r) {
            if (binary[r] == 1) {
                mean += s[r];
            }
        }
        mean /= static_cast<double>(members);
        total += (mean + 1.0) / 2.0;
    }
    return total / static_cast<double>(isolated.size());
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

namespace {

Tensor concat_blocks(const Tensor& a, const Tensor& b) {
    if (b.size() == 0) {
        return a;
    }
    Tensor out({a.rows(), a.cols() + b.cols()});
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out.at(r, c) = a.at(r, c);
        }
        for (std::size_t c = 0; c < b.cols(); ++c) {
            out.at(r, a.cols() + c) = b.at(r, c);
        }
    }
    return out;
}

} // namespace

MetricsReport metrics_report(const ReportInputs& in) {
    MetricsReport report;
    auto skip = [&](const std::string& name, const std::string& reason) {
        report.skipped.push_back({name, reason});
    };

    std::vector<std::pair<std::string, const Tensor*>> blocks;
    blocks.push_back({"invariant", &in.z_invariant});
    Tensor all;
    if (in.z_spurious.size() > 0) {
        blocks.push_back({"spurious", &in.z_spurious});
        all = concat_blocks(in.z_invariant, in.z_spurious);
        blocks.push_back({"all", &all});
    }

    // Latent recovery.
    if (in.true_z_invariant && in.true_z_invariant->size() > 0) {
        report.metrics["mcc_invariant"] = mcc(*in.true_z_invariant, in.z_invariant);
    } else {
        skip("mcc_invariant", "no ground-truth invariant latents");
    }
    if (in.true_z_spurious && in.true_z_spurious->size() > 0 && in.z_spurious.size() > 0) {
        report.metrics["mcc_spurious"] = mcc(*in.true_z_spurious, in.z_spurious);
    } else {
        skip("mcc_spurious", "no ground-truth spurious latents");
    }

    const bool have_types = in.type_labels.has_value();
    const bool have_batches = in.batch_labels.has_value();
    if (!have_types) {
        skip("type_metrics", "no label column");
    }
    if (!have_batches) {
        skip("batch_metrics", "no environment column");
    }

    for (const auto& [bname, zp] : blocks) {
        const Tensor& z = *zp;
        const std::size_t n = z.rows();
        if (have_types) {
            const Labels& y = *in.type_labels;
            const int k = label_count(y);
            if (k >= 2) {
                report.metrics["asw_label_" + bname] = silhouette_label_asw(z, y);
                Labels clusters = kmeans(z, static_cast<std::size_t>(k), in.seed);
                report.metrics["nmi_" + bname] = nmi(y, clusters);
                report.metrics["ari_" + bname] = ari(y, clusters);
                const std::size_t gk = std::min<std::size_t>(15, n - 1);
                KnnGraph g = knn_graph(z, gk);
                report.metrics["graph_connectivity_" + bname] = graph_connectivity(g, y);
                if (have_batches) {
                    report.metrics["asw_batch_" + bname] = batch_asw(z, *in.batch_labels, y);
                    report.metrics["isolated_label_f1_" + bname] =
                        isolated_label_f1(clusters, y, *in.batch_labels);
                    report.metrics["isolated_label_silhouette_" + bname] =
                        isolated_label_silhouette(z, y, *in.batch_labels);
                }
            } else {
                skip("asw_label_" + bname, "fewer than 2 label classes");
            }
        }
        if (have_batches) {
            const std::size_t bk = std::min<std::size_t>(50, n - 1);
            KnnGraph g = knn_graph(z, bk);
            report.metrics["kbet_" + bname] = kbet(g, *in.batch_labels, 0.05, 0.25, in.seed).rejection_rate;
        }
    }

    if (!in.probe_train_envs.empty() && have_types && have_batches) {
        for (const auto& [bname, zp] : blocks) {
            ProbeResult pr = probe_accuracy(*zp, *in.type_labels, *in.batch_labels, in.probe_train_envs);
            const std::string prefix = "probe_" + bname;
            report.metrics[prefix + "_acc_train"] = pr.train_accuracy;
            report.metrics[prefix + "_acc_avg"] = pr.avg;
            report.metrics[prefix + "_acc_min"] = pr.min;
            report.metrics[prefix + "_acc_max"] = pr.max;
            report.metrics[prefix + "_acc_median"] = pr.median;
            double held_sum = 0.0;
            std::size_t held_n = 0;
            for (const auto& [env_id, acc] : pr.accuracy_by_env) {
                report.metrics[prefix + "_acc_env_" + std::to_string(env_id)] = acc;
                if (std::find(in.probe_train_envs.begin(), in.probe_train_envs.end(), env_id) ==
                    in.probe_train_envs.end()) {
                    held_sum += acc;
                    ++held_n;
                }
            }
            if (held_n > 0) {
                report.metrics[prefix + "_acc_heldout"] = held_sum / static_cast<double>(held_n);
            }
        }
        // Headline number: invariant-block held-out accuracy; with nothing
        // held out it falls back to the overall probe accuracy.
        if (report.metrics.count("probe_invariant_acc_heldout")) {
            report.metrics["probe_accuracy_heldout"] = report.metrics["probe_invariant_acc_heldout"];
        } else if (report.metrics.count("probe_invariant_acc_avg")) {
            report.metrics["probe_accuracy_heldout"] = report.metrics["probe_invariant_acc_avg"];
        }
    } else if (!in.probe_train_envs.empty()) {
        skip("probe_accuracy", "probe requires labels and environments");
    }

    return report;
}

} // namespace invae
