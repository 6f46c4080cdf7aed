#pragma once

#include <cstdint>
#include <vector>

#include "mrf/matrix.hpp"

namespace mrf {

struct KmeansConfig {
    std::size_t k = 8;
    std::size_t minibatch = 256;
    std::size_t iterations = 60;
    std::size_t restarts = 100;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Clustering {
    std::vector<std::int32_t> labels;
    Matrix centroids;
    double inertia = 0.0;
};

// Mini-batch k-means with per-centroid 1/count learning rates. Each restart
// draws its own rng stream and initializes from k sampled rows (preferring
// distinct values); the restart with the lowest full-dataset inertia wins,
// ties going to the lower restart index. Callers are expected to L2-normalize
// embedding rows beforehand; see cluster_metrics for the packaged protocol.
Clustering minibatch_kmeans(const Matrix& x, const KmeansConfig& cfg);

// Accuracy under the best one-to-one matching of predicted cluster ids to
// truth ids (rectangular contingency zero-padded), in percent.
double cluster_accuracy(const std::vector<std::int32_t>& pred,
                        const std::vector<std::int32_t>& truth);

// Mutual information normalized by the arithmetic mean of the entropies,
// in [0, 1]; two zero-entropy partitions count as a perfect match.
double nmi(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b);

// Chance-adjusted mutual information under the permutation model, with the
// expected value computed exactly from the hypergeometric distribution.
double ami(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b);

// Chance-adjusted Rand index via pair counting.
double ari(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b);

// Mean silhouette value scaled to [-100, 100]; singleton clusters contribute
// 0. Distances are Euclidean on the rows as given.
double silhouette(const Matrix& x, const std::vector<std::int32_t>& labels);

// Mean over clusters of the worst (scatter_i + scatter_j) / centroid_distance
// ratio; lower is better, 0 for point-mass clusters.
double davies_bouldin(const Matrix& x, const std::vector<std::int32_t>& labels);

// NMI x 100 between consecutive blocks' cluster labelings.
std::vector<double> block_cluster_similarity(
    const std::vector<std::vector<std::int32_t>>& per_block_labels);

// The full battery in report scale: ACC, NMI, AMI, ARI and SIL on 0-100,
// DBS raw. Rows are L2-normalized once, k-means runs on the normalized
// features, agreement metrics compare k-means labels against the truth, and
// the separation scores use the truth labels.
struct ClusterMetrics {
    double acc = 0.0;
    double nmi = 0.0;
    double ami = 0.0;
    double ari = 0.0;
    double sil = 0.0;
    double dbs = 0.0;
    std::vector<std::int32_t> kmeans_labels;
};

ClusterMetrics cluster_metrics(const Matrix& features, const std::vector<std::int32_t>& truth,
                               const KmeansConfig& cfg);

} // namespace mrf
