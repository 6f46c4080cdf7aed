#include "mrf/cluster_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "mrf/numerics.hpp"
#include "mrf/rng.hpp"

namespace mrf {

namespace {

Matrix unit_rows(const Matrix& x) {
    Matrix out = x;
    for (std::size_t i = 0; i < out.rows; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < out.cols; ++j) sq += out(i, j) * out(i, j);
        const double norm = std::sqrt(sq);
        if (norm > 0.0)
            for (std::size_t j = 0; j < out.cols; ++j) out(i, j) /= norm;
    }
    return out;
}

double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

std::size_t nearest_centroid(const double* p, const Matrix& centroids) {
    std::size_t best = 0;
    double best_d = sq_dist(p, centroids.row(0), centroids.cols);
    for (std::size_t c = 1; c < centroids.rows; ++c) {
        const double dc = sq_dist(p, centroids.row(c), centroids.cols);
        if (dc < best_d) {
            best_d = dc;
            best = c;
        }
    }
    return best;
}

// Summing a fixed multiset of terms in sorted order makes the result
// independent of the order the terms were produced in, which keeps the
// information metrics exactly symmetric in their arguments.
double sorted_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

struct Contingency {
    std::vector<std::vector<std::size_t>> n; // rows: ids of a, cols: ids of b
    std::vector<std::size_t> a_sizes, b_sizes;
    std::size_t total = 0;
};

std::size_t id_range(const std::vector<std::int32_t>& labels) {
    std::int32_t hi = -1;
    for (std::int32_t l : labels) {
        if (l < 0) raise(Err::BadIndex, "negative label id");
        hi = std::max(hi, l);
    }
    return static_cast<std::size_t>(hi + 1);
}

Contingency contingency(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    if (a.size() != b.size())
        raise(Err::LengthMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.size() < 2) raise(Err::EmptyInput, "need at least 2 points");
    Contingency c;
    c.total = a.size();
    c.a_sizes.assign(id_range(a), 0);
    c.b_sizes.assign(id_range(b), 0);
    c.n.assign(c.a_sizes.size(), std::vector<std::size_t>(c.b_sizes.size(), 0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++c.n[a[i]][b[i]];
        ++c.a_sizes[a[i]];
        ++c.b_sizes[b[i]];
    }
    return c;
}

double entropy(const std::vector<std::size_t>& sizes, std::size_t n) {
    std::vector<double> terms;
    terms.reserve(sizes.size());
    for (std::size_t s : sizes)
        if (s > 0 && s < n)
            terms.push_back(static_cast<double>(s) / static_cast<double>(n) *
                            std::log(static_cast<double>(n) / static_cast<double>(s)));
    return sorted_sum(terms);
}

double mutual_information(const Contingency& c) {
    std::vector<double> terms;
    const double n = static_cast<double>(c.total);
    for (std::size_t i = 0; i < c.a_sizes.size(); ++i)
        for (std::size_t j = 0; j < c.b_sizes.size(); ++j) {
            const std::size_t nij = c.n[i][j];
            if (nij == 0) continue;
            const double arg = n * static_cast<double>(nij) /
                               (static_cast<double>(c.a_sizes[i]) *
                                static_cast<double>(c.b_sizes[j]));
            if (arg == 1.0) continue;
            terms.push_back(static_cast<double>(nij) / n * std::log(arg));
        }
    return sorted_sum(terms);
}

// E[I] under random permutations of one labeling against the other: the joint
// count n_ij is hypergeometric given the margins, and the sum over its support
// is exact with factorials through lgamma.
double expected_mutual_information(const Contingency& c) {
    const auto lg = [](std::size_t v) { return std::lgamma(static_cast<double>(v) + 1.0); };
    const std::size_t n = c.total;
    const double log_n_fact = lg(n);
    std::vector<double> terms;
    for (std::size_t a_size : c.a_sizes) {
        if (a_size == 0) continue;
        for (std::size_t b_size : c.b_sizes) {
            if (b_size == 0) continue;
            // evaluate on (min, max) so the arithmetic is identical when the
            // arguments are swapped, keeping ami exactly symmetric
            const auto [ai, bj] = std::minmax(a_size, b_size);
            const std::size_t lo = ai + bj > n ? ai + bj - n : 1;
            const std::size_t hi = ai;
            for (std::size_t nij = std::max<std::size_t>(lo, 1); nij <= hi; ++nij) {
                const double arg = static_cast<double>(n) * static_cast<double>(nij) /
                                   (static_cast<double>(ai) * static_cast<double>(bj));
                if (arg == 1.0) continue;
                const double log_p = lg(ai) + lg(bj) + lg(n - ai) + lg(n - bj) - log_n_fact -
                                     lg(nij) - lg(ai - nij) - lg(bj - nij) -
                                     lg(n - ai - bj + nij);
                terms.push_back(std::exp(log_p) * static_cast<double>(nij) /
                                static_cast<double>(n) * std::log(arg));
            }
        }
    }
    return sorted_sum(terms);
}

// Exact max-weight one-to-one assignment on a square integer-valued matrix by
// the potentials + augmenting path method. Weight values are counts, so all
// intermediate arithmetic stays integral and the optimum is exact.
double assignment_max(const std::vector<std::vector<double>>& w) {
    const std::size_t s = w.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(s + 1, 0.0), v(s + 1, 0.0);
    std::vector<std::size_t> match(s + 1, 0), way(s + 1, 0);
    for (std::size_t i = 1; i <= s; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(s + 1, inf);
        std::vector<char> used(s + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= s; ++j) {
                if (used[j]) continue;
                const double cur = -w[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= s; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0.0;
    for (std::size_t j = 1; j <= s; ++j)
        if (match[j] != 0) total += w[match[j] - 1][j - 1];
    return total;
}

std::vector<std::vector<std::size_t>> group_by_label(const std::vector<std::int32_t>& labels) {
    std::vector<std::vector<std::size_t>> groups(id_range(labels));
    for (std::size_t i = 0; i < labels.size(); ++i)
        groups[labels[i]].push_back(i);
    std::erase_if(groups, [](const auto& g) { return g.empty(); });
    return groups;
}

std::vector<std::vector<std::size_t>> separation_groups(const Matrix& x,
                                                        const std::vector<std::int32_t>& labels) {
    if (labels.size() != x.rows)
        raise(Err::LengthMismatch,
              std::to_string(labels.size()) + " labels for " + std::to_string(x.rows) + " rows");
    auto groups = group_by_label(labels);
    if (groups.size() < 2) raise(Err::SingleCluster, "separation needs at least 2 clusters");
    return groups;
}

} // namespace

void KmeansConfig::validate() const {
    if (k < 2) raise(Err::ConfigError, "k must be at least 2");
    if (restarts < 1) raise(Err::ConfigError, "restarts must be at least 1");
    if (minibatch < 1) raise(Err::ConfigError, "minibatch must be at least 1");
    if (iterations < 1) raise(Err::ConfigError, "iterations must be at least 1");
}

Clustering minibatch_kmeans(const Matrix& x, const KmeansConfig& cfg) {
    cfg.validate();
    const std::size_t n = x.rows, d = x.cols, k = cfg.k;
    if (n < k)
        raise(Err::TooFewRows, std::to_string(n) + " rows for k=" + std::to_string(k));

    const RngStream root(cfg.seed);
    std::vector<Clustering> runs(cfg.restarts);
    parallel_for(cfg.restarts, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            RngStream rng = root.split(r);
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            for (std::size_t i = 0; i + 1 < n; ++i)
                std::swap(order[i], order[i + rng.next_below(n - i)]);

            // seed centroids from sampled rows, preferring k distinct values
            Matrix centroids(k, d);
            std::size_t taken = 0;
            for (std::size_t idx : order) {
                bool dup = false;
                for (std::size_t c = 0; c < taken && !dup; ++c)
                    dup = std::memcmp(centroids.row(c), x.row(idx), d * sizeof(double)) == 0;
                if (dup) continue;
                std::copy_n(x.row(idx), d, centroids.row(taken));
                if (++taken == k) break;
            }
            for (std::size_t idx = 0; taken < k; ++idx)
                std::copy_n(x.row(order[idx]), d, centroids.row(taken++));

            const std::size_t batch = std::min(cfg.minibatch, n);
            std::vector<std::uint64_t> counts(k, 0);
            std::vector<std::size_t> picks(batch), assign(batch);
            for (std::size_t it = 0; it < cfg.iterations; ++it) {
                for (std::size_t b = 0; b < batch; ++b) picks[b] = rng.next_below(n);
                for (std::size_t b = 0; b < batch; ++b)
                    assign[b] = nearest_centroid(x.row(picks[b]), centroids);
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t c = assign[b];
                    const double eta = 1.0 / static_cast<double>(++counts[c]);
                    double* cr = centroids.row(c);
                    const double* pr = x.row(picks[b]);
                    for (std::size_t j = 0; j < d; ++j) cr[j] += eta * (pr[j] - cr[j]);
                }
            }

            Clustering run;
            run.centroids = std::move(centroids);
            run.labels.resize(n);
            run.inertia = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t c = nearest_centroid(x.row(i), run.centroids);
                run.labels[i] = static_cast<std::int32_t>(c);
                run.inertia += sq_dist(x.row(i), run.centroids.row(c), d);
            }
            runs[r] = std::move(run);
        }
    });

    std::size_t best = 0;
    for (std::size_t r = 1; r < cfg.restarts; ++r)
        if (runs[r].inertia < runs[best].inertia) best = r;
    return std::move(runs[best]);
}

double cluster_accuracy(const std::vector<std::int32_t>& pred,
                        const std::vector<std::int32_t>& truth) {
    if (pred.size() != truth.size())
        raise(Err::LengthMismatch,
              std::to_string(pred.size()) + " vs " + std::to_string(truth.size()));
    if (pred.empty()) raise(Err::EmptyInput, "no labels");
    const std::size_t cp = id_range(pred), ct = id_range(truth);
    const std::size_t s = std::max(cp, ct);
    std::vector<std::vector<double>> w(s, std::vector<double>(s, 0.0));
    for (std::size_t i = 0; i < pred.size(); ++i) w[pred[i]][truth[i]] += 1.0;
    return 100.0 * assignment_max(w) / static_cast<double>(pred.size());
}

double nmi(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    const Contingency c = contingency(a, b);
    const double ha = entropy(c.a_sizes, c.total);
    const double hb = entropy(c.b_sizes, c.total);
    if (ha == 0.0 && hb == 0.0) return 1.0;
    const double v = mutual_information(c) / (0.5 * (ha + hb));
    return std::clamp(v, 0.0, 1.0);
}

double ami(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    const Contingency c = contingency(a, b);
    const double ha = entropy(c.a_sizes, c.total);
    const double hb = entropy(c.b_sizes, c.total);
    if (ha == 0.0 && hb == 0.0) return 1.0;
    const double mi = mutual_information(c);
    const double emi = expected_mutual_information(c);
    double denom = 0.5 * (ha + hb) - emi;
    denom = denom >= 0.0 ? std::max(denom, 1e-15) : std::min(denom, -1e-15);
    return (mi - emi) / denom;
}

double ari(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
    const Contingency c = contingency(a, b);
    using Wide = unsigned __int128;
    Wide sum_sq = 0, sum_a = 0, sum_b = 0;
    for (const auto& row : c.n)
        for (std::size_t nij : row) sum_sq += Wide(nij) * nij;
    for (std::size_t ai : c.a_sizes) sum_a += Wide(ai) * ai;
    for (std::size_t bj : c.b_sizes) sum_b += Wide(bj) * bj;
    const Wide n = c.total;
    // ordered-pair confusion counts
    const Wide tp = sum_sq - n;
    const Wide fp = sum_a - sum_sq;
    const Wide fn = sum_b - sum_sq;
    const Wide tn = n * n + sum_sq - sum_a - sum_b;
    if (fp == 0 && fn == 0) return 1.0;
    const __int128 num = 2 * (__int128(tp) * __int128(tn) - __int128(fn) * __int128(fp));
    const __int128 den = __int128(tp + fn) * __int128(fn + tn) +
                         __int128(tp + fp) * __int128(fp + tn);
    return static_cast<double>(num) / static_cast<double>(den);
}

double silhouette(const Matrix& x, const std::vector<std::int32_t>& labels) {
    const auto groups = separation_groups(x, labels);
    std::vector<std::size_t> group_of(x.rows);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t i : groups[g]) group_of[i] = g;

    std::vector<double> scores(x.rows, 0.0);
    parallel_for(x.rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t own = group_of[i];
            if (groups[own].size() == 1) continue; // singleton convention
            double a_sum = 0.0;
            double b = std::numeric_limits<double>::infinity();
            for (std::size_t g = 0; g < groups.size(); ++g) {
                double sum = 0.0;
                for (std::size_t j : groups[g])
                    sum += std::sqrt(sq_dist(x.row(i), x.row(j), x.cols));
                if (g == own) {
                    a_sum = sum;
                } else {
                    b = std::min(b, sum / static_cast<double>(groups[g].size()));
                }
            }
            const double a = a_sum / static_cast<double>(groups[own].size() - 1);
            const double m = std::max(a, b);
            scores[i] = m > 0.0 ? (b - a) / m : 0.0;
        }
    });
    double total = 0.0;
    for (double s : scores) total += s;
    return 100.0 * total / static_cast<double>(x.rows);
}

double davies_bouldin(const Matrix& x, const std::vector<std::int32_t>& labels) {
    const auto groups = separation_groups(x, labels);
    const std::size_t G = groups.size(), d = x.cols;
    Matrix centroids(G, d);
    for (std::size_t g = 0; g < G; ++g) {
        double* c = centroids.row(g);
        for (std::size_t i : groups[g])
            for (std::size_t j = 0; j < d; ++j) c[j] += x(i, j);
        for (std::size_t j = 0; j < d; ++j) c[j] /= static_cast<double>(groups[g].size());
    }
    std::vector<double> scatter(G, 0.0);
    for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t i : groups[g])
            scatter[g] += std::sqrt(sq_dist(x.row(i), centroids.row(g), d));
        scatter[g] /= static_cast<double>(groups[g].size());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < G; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < G; ++j) {
            if (j == i) continue;
            const double dist = std::sqrt(sq_dist(centroids.row(i), centroids.row(j), d));
            const double spread = scatter[i] + scatter[j];
            double ratio;
            if (dist > 0.0)
                ratio = spread / dist;
            else
                ratio = spread > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
            worst = std::max(worst, ratio);
        }
        total += worst;
    }
    return total / static_cast<double>(G);
}

std::vector<double> block_cluster_similarity(
    const std::vector<std::vector<std::int32_t>>& per_block_labels) {
    if (per_block_labels.size() < 2)
        raise(Err::TooFewRows, "need labelings for at least 2 blocks");
    std::vector<double> out;
    out.reserve(per_block_labels.size() - 1);
    for (std::size_t i = 0; i + 1 < per_block_labels.size(); ++i)
        out.push_back(100.0 * nmi(per_block_labels[i], per_block_labels[i + 1]));
    return out;
}

ClusterMetrics cluster_metrics(const Matrix& features, const std::vector<std::int32_t>& truth,
                               const KmeansConfig& cfg) {
    const Matrix normalized = unit_rows(features);
    const Clustering clustering = minibatch_kmeans(normalized, cfg);
    ClusterMetrics m;
    m.acc = cluster_accuracy(clustering.labels, truth);
    m.nmi = 100.0 * nmi(clustering.labels, truth);
    m.ami = 100.0 * ami(clustering.labels, truth);
    m.ari = 100.0 * ari(clustering.labels, truth);
    m.sil = silhouette(normalized, truth);
    m.dbs = davies_bouldin(normalized, truth);
    m.kmeans_labels = clustering.labels;
    return m;
}

} // namespace mrf
