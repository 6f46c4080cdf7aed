#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mrf/cluster_eval.hpp"
#include "mrf/rng.hpp"

using namespace mrf;

namespace {

using Labels = std::vector<std::int32_t>;

Labels random_labels(std::size_t n, std::int32_t ids, RngStream& rng) {
    Labels out(n);
    for (auto& l : out) l = static_cast<std::int32_t>(rng.next_below(ids));
    return out;
}

// exhaustive optimal matching, the oracle for the assignment solver
double brute_force_accuracy(const Labels& pred, const Labels& truth) {
    std::int32_t cp = 0, ct = 0;
    for (auto l : pred) cp = std::max(cp, l + 1);
    for (auto l : truth) ct = std::max(ct, l + 1);
    const std::size_t s = static_cast<std::size_t>(std::max(cp, ct));
    std::vector<std::vector<std::size_t>> w(s, std::vector<std::size_t>(s, 0));
    for (std::size_t i = 0; i < pred.size(); ++i) ++w[pred[i]][truth[i]];
    std::vector<std::size_t> perm(s);
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = 0;
    do {
        std::size_t total = 0;
        for (std::size_t i = 0; i < s; ++i) total += w[i][perm[i]];
        best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return 100.0 * static_cast<double>(best) / static_cast<double>(pred.size());
}

Matrix two_blobs(std::size_t per_side, double gap, double noise, Labels& truth,
                 std::uint64_t seed) {
    RngStream rng(seed);
    Matrix x(2 * per_side, 4);
    truth.assign(2 * per_side, 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const bool right = i >= per_side;
        truth[i] = right ? 1 : 0;
        x(i, 0) = (right ? gap : -gap) + noise * rng.next_gaussian();
        for (std::size_t j = 1; j < 4; ++j) x(i, j) = noise * rng.next_gaussian();
    }
    return x;
}

} // namespace

TEST_CASE("k-means rejects bad configs and undersized data") {
    KmeansConfig cfg;
    cfg.k = 1;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.k = 2;
    cfg.restarts = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);

    Matrix x(3, 2);
    KmeansConfig four;
    four.k = 4;
    CHECK_THROWS_AS(minibatch_kmeans(x, four), Error);
}

TEST_CASE("repeated distinct points cluster perfectly at zero inertia") {
    const std::size_t k = 4, copies = 6;
    Matrix x(k * copies, 3);
    Labels truth(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const std::size_t v = i % k;
        truth[i] = static_cast<std::int32_t>(v);
        x(i, 0) = static_cast<double>(v);
        x(i, 1) = 2.0 * static_cast<double>(v) - 1.5;
        x(i, 2) = -0.25 * static_cast<double>(v);
    }
    for (std::size_t restarts : {std::size_t{1}, std::size_t{8}}) {
        KmeansConfig cfg;
        cfg.k = k;
        cfg.minibatch = 5;
        cfg.iterations = 12;
        cfg.restarts = restarts;
        cfg.seed = 3;
        const Clustering res = minibatch_kmeans(x, cfg);
        CHECK(res.inertia == 0.0);
        // purity: every cluster id maps to exactly one point value
        CHECK(cluster_accuracy(res.labels, truth) == 100.0);
    }
}

TEST_CASE("two tight blobs are recovered exactly") {
    Labels truth;
    const Matrix x = two_blobs(20, 5.0, 0.1, truth, 11);
    KmeansConfig cfg;
    cfg.k = 2;
    cfg.minibatch = 16;
    cfg.iterations = 30;
    cfg.restarts = 10;
    cfg.seed = 7;
    const Clustering res = minibatch_kmeans(x, cfg);
    CHECK(ari(res.labels, truth) == 1.0);
}

TEST_CASE("more restarts never hurt the selected inertia") {
    RngStream rng(21);
    Matrix x(90, 6);
    for (auto& v : x.data) v = rng.next_gaussian();
    KmeansConfig cfg;
    cfg.k = 6;
    cfg.minibatch = 12;
    cfg.iterations = 8;
    cfg.seed = 19;
    cfg.restarts = 1;
    const double one = minibatch_kmeans(x, cfg).inertia;
    cfg.restarts = 100;
    const double many = minibatch_kmeans(x, cfg).inertia;
    CHECK(many <= one);
}

TEST_CASE("k-means is bitwise reproducible for a fixed seed") {
    RngStream rng(33);
    Matrix x(70, 5);
    for (auto& v : x.data) v = rng.next_gaussian();
    KmeansConfig cfg;
    cfg.k = 5;
    cfg.minibatch = 10;
    cfg.iterations = 15;
    cfg.restarts = 12;
    cfg.seed = 99;
    const Clustering a = minibatch_kmeans(x, cfg);
    const Clustering b = minibatch_kmeans(x, cfg);
    CHECK(a.labels == b.labels);
    CHECK(a.centroids.data == b.centroids.data);
    CHECK(a.inertia == b.inertia);
}

TEST_CASE("cluster accuracy matches hand counts and ignores id names") {
    const Labels truth = {0, 1, 1, 2, 2, 0};
    CHECK(cluster_accuracy(truth, truth) == 100.0);
    const Labels renamed = {2, 0, 0, 1, 1, 2};
    CHECK(cluster_accuracy(renamed, truth) == 100.0);
    // every contingency cell holds one point, so a one-to-one matching can
    // cover at most 3 of the 6 points; brute force agrees
    const Labels pred = {0, 0, 1, 1, 2, 2};
    CHECK(cluster_accuracy(pred, truth) == doctest::Approx(100.0 * 3.0 / 6.0));
    CHECK(brute_force_accuracy(pred, truth) == doctest::Approx(100.0 * 3.0 / 6.0));
    CHECK_THROWS_AS(cluster_accuracy({0, 1}, {0, 1, 2}), Error);

    // invariance under independent relabelings of both sides
    RngStream rng(5);
    const Labels p = random_labels(40, 5, rng);
    const Labels t = random_labels(40, 4, rng);
    const double base = cluster_accuracy(p, t);
    const std::int32_t pperm[5] = {3, 0, 4, 1, 2};
    const std::int32_t tperm[4] = {1, 3, 0, 2};
    Labels p2(p.size()), t2(t.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p2[i] = pperm[p[i]];
        t2[i] = tperm[t[i]];
    }
    CHECK(cluster_accuracy(p2, t2) == base);
}

TEST_CASE("the assignment solver agrees with brute force on random instances") {
    RngStream rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 10 + rng.next_below(40);
        const std::int32_t cp = 2 + static_cast<std::int32_t>(rng.next_below(5));
        const std::int32_t ct = 2 + static_cast<std::int32_t>(rng.next_below(5));
        const Labels pred = random_labels(n, cp, rng);
        const Labels truth = random_labels(n, ct, rng);
        CHECK(cluster_accuracy(pred, truth) ==
              doctest::Approx(brute_force_accuracy(pred, truth)).epsilon(1e-12));
    }
}

TEST_CASE("agreement scores are 1 on identical partitions") {
    const Labels a = {0, 0, 1, 1, 2, 2, 2, 1, 0, 2};
    CHECK(nmi(a, a) == 1.0);
    CHECK(ami(a, a) == 1.0);
    CHECK(ari(a, a) == 1.0);
}

TEST_CASE("degenerate partitions hit the pinned conventions") {
    const Labels constant = {0, 0, 0, 0};
    const Labels balanced = {0, 0, 1, 1};
    CHECK(ari(constant, balanced) == 0.0);
    CHECK(nmi(constant, constant) == 1.0);
    CHECK(ami(constant, constant) == 1.0);
    CHECK(nmi(constant, balanced) == 0.0);
    CHECK_THROWS_AS(nmi({0, 1}, {0, 1, 1}), Error);
    CHECK_THROWS_AS(ari({0}, {0}), Error);
}

TEST_CASE("chance-adjusted scores sit at zero for independent labelings") {
    RngStream rng(71);
    double ami_sum = 0.0, ari_sum = 0.0;
    const int draws = 100;
    for (int t = 0; t < draws; ++t) {
        const Labels a = random_labels(200, 5, rng);
        const Labels b = random_labels(200, 7, rng);
        ami_sum += ami(a, b);
        ari_sum += ari(a, b);
    }
    CHECK(std::abs(ami_sum / draws) < 0.05);
    CHECK(std::abs(ari_sum / draws) < 0.05);
    // the unadjusted score does not vanish, which is the point of adjusting
    double nmi_sum = 0.0;
    RngStream rng2(71);
    for (int t = 0; t < draws; ++t) {
        const Labels a = random_labels(200, 5, rng2);
        const Labels b = random_labels(200, 7, rng2);
        nmi_sum += nmi(a, b);
    }
    CHECK(nmi_sum / draws > 0.01);
}

TEST_CASE("information and rand scores are exactly symmetric") {
    RngStream rng(17);
    for (int t = 0; t < 20; ++t) {
        const Labels a = random_labels(60, 2 + rng.next_below(5), rng);
        const Labels b = random_labels(60, 2 + rng.next_below(5), rng);
        CHECK(nmi(a, b) == nmi(b, a));
        CHECK(ami(a, b) == ami(b, a));
        CHECK(ari(a, b) == ari(b, a));
    }
}

TEST_CASE("refining a partition lowers its rand agreement") {
    const Labels coarse = {0, 0, 0, 0, 1, 1, 1, 1};
    const Labels fine = {0, 0, 2, 2, 1, 1, 3, 3}; // splits both clusters
    CHECK(ari(coarse, fine) < 1.0);
    CHECK(ari(coarse, coarse) == 1.0);
}

TEST_CASE("silhouette matches the 4-point closed form") {
    const double eps = 1e-3, D = 10.0;
    const Matrix x = Matrix::of({{0.0}, {eps}, {D}, {D + eps}});
    const Labels labels = {0, 0, 1, 1};
    const double outer = 1.0 - eps / (D + eps / 2.0);
    const double inner = 1.0 - eps / (D - eps / 2.0);
    const double expected = 100.0 * (outer + inner) / 2.0;
    CHECK(silhouette(x, labels) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(davies_bouldin(x, labels) == doctest::Approx(eps / D).epsilon(1e-12));
}

TEST_CASE("random labels on one blob give a silhouette near zero") {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        RngStream rng(seed);
        Matrix x(60, 5);
        for (auto& v : x.data) v = rng.next_gaussian();
        const Labels labels = random_labels(60, 3, rng);
        CHECK(std::abs(silhouette(x, labels)) < 10.0);
    }
}

TEST_CASE("duplicated points per cluster give zero scatter") {
    Matrix x(6, 2);
    Labels labels(6);
    for (std::size_t i = 0; i < 6; ++i) {
        const std::int32_t c = static_cast<std::int32_t>(i / 2);
        labels[i] = c;
        x(i, 0) = static_cast<double>(c);
        x(i, 1) = -static_cast<double>(c);
    }
    CHECK(davies_bouldin(x, labels) == 0.0);
    CHECK(silhouette(x, labels) == 100.0);
}

TEST_CASE("separation scores demand at least two clusters") {
    Matrix x(4, 2);
    const Labels one = {0, 0, 0, 0};
    CHECK_THROWS_AS(silhouette(x, one), Error);
    CHECK_THROWS_AS(davies_bouldin(x, one), Error);
    CHECK_THROWS_AS(silhouette(x, {0, 1}), Error);
}

TEST_CASE("block similarity is chained pairwise mutual information") {
    const Labels y = {0, 1, 2, 0, 1, 2, 0, 1};
    const std::vector<Labels> same = {y, y, y};
    const auto sims = block_cluster_similarity(same);
    REQUIRE(sims.size() == 2);
    CHECK(sims[0] == 100.0);
    CHECK(sims[1] == 100.0);

    RngStream rng(9);
    const Labels a = random_labels(500, 4, rng);
    const Labels b = random_labels(500, 4, rng);
    const auto pair = block_cluster_similarity({a, b});
    REQUIRE(pair.size() == 1);
    CHECK(pair[0] == 100.0 * nmi(a, b));
    CHECK(pair[0] < 5.0);

    CHECK_THROWS_AS(block_cluster_similarity({y}), Error);
}

TEST_CASE("the packaged battery reports sane numbers on blobs") {
    Labels truth;
    const Matrix x = two_blobs(30, 4.0, 0.2, truth, 44);
    KmeansConfig cfg;
    cfg.k = 2;
    cfg.minibatch = 16;
    cfg.iterations = 25;
    cfg.restarts = 20;
    cfg.seed = 5;
    const ClusterMetrics m = cluster_metrics(x, truth, cfg);
    CHECK(m.acc == 100.0);
    CHECK(m.nmi == 100.0);
    CHECK(m.ami == doctest::Approx(100.0).epsilon(1e-9));
    CHECK(m.ari == 100.0);
    CHECK(m.sil > 50.0);
    CHECK(m.dbs < 1.0);
    CHECK(m.kmeans_labels.size() == truth.size());
}
