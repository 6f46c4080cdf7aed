#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "mrf/kernels.hpp"
#include "mrf/numerics.hpp"
#include "mrf/probe_eval.hpp"
#include "mrf/rng.hpp"

namespace mrf {

namespace {

Matrix normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows; ++i) {
        const double n = std::sqrt(kernels::sumsq(out.row(i), out.cols));
        if (n > 0.0) kernels::scal(1.0 / n, out.row(i), out.cols);
    }
    return out;
}

} // namespace

std::size_t ProbeDataset::num_classes() const {
    std::int32_t top = -1;
    for (auto y : train_y) top = std::max(top, y);
    for (auto y : test_y) top = std::max(top, y);
    return static_cast<std::size_t>(top + 1);
}

void ProbeDataset::validate() const {
    if (train_x.rows != train_y.size() || test_x.rows != test_y.size())
        raise(Err::LengthMismatch, "feature/label row counts");
    if (train_x.cols != test_x.cols) raise(Err::DimMismatch, "train/test feature width");
    for (auto y : train_y)
        if (y < 0) raise(Err::MissingClass, "negative train label");
    for (auto y : test_y)
        if (y < 0) raise(Err::MissingClass, "negative test label");
}

double knn_probe(const ProbeDataset& ds, const KnnConfig& cfg) {
    ds.validate();
    if (cfg.k < 1 || cfg.temperature <= 0.0) raise(Err::ConfigError, "knn k/temperature");
    if (ds.train_x.rows < cfg.k)
        raise(Err::TooFewNeighbors, "train rows < k");
    if (ds.test_x.rows == 0) raise(Err::EmptyInput, "empty test split");

    const Matrix train = normalize_rows(ds.train_x);
    const Matrix test = normalize_rows(ds.test_x);
    const std::size_t classes = ds.num_classes();

    std::vector<std::uint8_t> correct(test.rows, 0);
    parallel_for(test.rows, [&](std::size_t lo, std::size_t hi) {
        struct Hit {
            double sim;
            std::size_t idx;
        };
        std::vector<Hit> best;
        std::vector<double> votes(classes);
        for (std::size_t i = lo; i < hi; ++i) {
            best.clear();
            for (std::size_t t = 0; t < train.rows; ++t) {
                const double sim = kernels::dot(test.row(i), train.row(t), test.cols);
                if (best.size() == cfg.k && sim <= best.back().sim) continue;
                auto at = std::find_if(best.begin(), best.end(),
                                       [&](const Hit& h) { return sim > h.sim; });
                best.insert(at, Hit{sim, t});
                if (best.size() > cfg.k) best.pop_back();
            }
            std::fill(votes.begin(), votes.end(), 0.0);
            for (const Hit& h : best)
                votes[static_cast<std::size_t>(ds.train_y[h.idx])] +=
                    std::exp(h.sim / cfg.temperature);
            std::size_t pick = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (votes[c] > votes[pick]) pick = c;
            correct[i] = pick == static_cast<std::size_t>(ds.test_y[i]) ? 1 : 0;
        }
    });
    const auto hits = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
    return static_cast<double>(hits) / static_cast<double>(test.rows);
}

LogisticGrads logistic_loss_grad(const LogisticModel& model, const Matrix& x,
                                 const std::vector<std::int32_t>& y, double weight_decay) {
    const std::size_t n = x.rows;
    const std::size_t classes = model.W.rows;
    if (n != y.size()) raise(Err::LengthMismatch, "label count");
    if (x.cols != model.W.cols) raise(Err::DimMismatch, "feature width");

    Matrix logits(n, classes);
    matmul_nt(x, model.W, logits);
    for (std::size_t i = 0; i < n; ++i)
        kernels::axpy(1.0, model.b.data(), logits.row(i), classes);

    LogisticGrads out;
    out.W = Matrix(classes, x.cols);
    out.b.assign(classes, 0.0);

    Matrix dlogits(n, classes);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double* row = logits.row(i);
        const double lse = log_sum_exp({row, classes});
        loss += lse - row[static_cast<std::size_t>(y[i])];
        double* drow = dlogits.row(i);
        for (std::size_t c = 0; c < classes; ++c)
            drow[c] = std::exp(row[c] - lse) / static_cast<double>(n);
        drow[static_cast<std::size_t>(y[i])] -= 1.0 / static_cast<double>(n);
    }
    out.loss = loss / static_cast<double>(n);

    matmul_tn(dlogits, x, out.W);
    for (std::size_t i = 0; i < n; ++i)
        kernels::axpy(1.0, dlogits.row(i), out.b.data(), classes);

    if (weight_decay != 0.0) {
        out.loss += 0.5 * weight_decay * kernels::sumsq(model.W.data.data(), model.W.data.size());
        kernels::axpy(weight_decay, model.W.data.data(), out.W.data.data(),
                      model.W.data.size());
    }
    return out;
}

double linear_probe(const ProbeDataset& ds, std::size_t epochs, double lr,
                    double weight_decay, std::vector<double>* loss_trace) {
    ds.validate();
    if (ds.train_x.rows == 0) raise(Err::EmptyInput, "empty train split");
    const std::size_t classes = ds.num_classes();
    std::vector<std::uint8_t> seen(classes, 0);
    for (auto y : ds.train_y) seen[static_cast<std::size_t>(y)] = 1;
    for (std::size_t c = 0; c < classes; ++c)
        if (!seen[c]) raise(Err::MissingClass, "class " + std::to_string(c) + " absent");

    LogisticModel model;
    model.W = Matrix(classes, ds.train_x.cols);
    model.b.assign(classes, 0.0);

    for (std::size_t e = 0; e < epochs; ++e) {
        LogisticGrads g = logistic_loss_grad(model, ds.train_x, ds.train_y, weight_decay);
        if (loss_trace) loss_trace->push_back(g.loss);
        kernels::axpy(-lr, g.W.data.data(), model.W.data.data(), model.W.data.size());
        kernels::axpy(-lr, g.b.data(), model.b.data(), classes);
    }

    std::size_t hits = 0;
    Matrix logits(ds.test_x.rows, classes);
    matmul_nt(ds.test_x, model.W, logits);
    for (std::size_t i = 0; i < ds.test_x.rows; ++i) {
        double* row = logits.row(i);
        kernels::axpy(1.0, model.b.data(), row, classes);
        std::size_t pick = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (row[c] > row[pick]) pick = c;
        if (pick == static_cast<std::size_t>(ds.test_y[i])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.test_x.rows);
}

ProbeDataset low_shot_split(const Matrix& features, const std::vector<std::int32_t>& labels,
                            std::size_t n_per_class, std::uint64_t seed) {
    if (features.rows != labels.size()) raise(Err::LengthMismatch, "feature/label rows");
    if (n_per_class == 0) raise(Err::ConfigError, "n_per_class must be positive");
    std::int32_t top = -1;
    for (auto y : labels) {
        if (y < 0) raise(Err::MissingClass, "negative label");
        top = std::max(top, y);
    }
    const std::size_t classes = static_cast<std::size_t>(top + 1);

    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < labels.size(); ++i)
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    for (std::size_t c = 0; c < classes; ++c)
        if (by_class[c].size() < n_per_class)
            raise(Err::ClassTooSmall, "class " + std::to_string(c) + " has " +
                                          std::to_string(by_class[c].size()) + " rows");

    RngStream rng(seed);
    std::vector<std::uint8_t> in_train(labels.size(), 0);
    std::size_t train_rows = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        auto& pool = by_class[c];
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const std::size_t j = i + rng.next_below(pool.size() - i);
            std::swap(pool[i], pool[j]);
            in_train[pool[i]] = 1;
            ++train_rows;
        }
    }
    if (train_rows == labels.size()) raise(Err::EmptyTest, "no rows left for the test split");

    ProbeDataset ds;
    ds.train_x = Matrix(train_rows, features.cols);
    ds.test_x = Matrix(labels.size() - train_rows, features.cols);
    std::size_t tr = 0, te = 0;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const std::size_t src = by_class[c][i];
            std::copy_n(features.row(src), features.cols, ds.train_x.row(tr++));
            ds.train_y.push_back(labels[src]);
        }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (in_train[i]) continue;
        std::copy_n(features.row(i), features.cols, ds.test_x.row(te++));
        ds.test_y.push_back(labels[i]);
    }
    return ds;
}

std::vector<double> per_block_knn(const EncoderParams& params, const Matrix& train_x,
                                  const std::vector<std::int32_t>& train_y,
                                  const Matrix& test_x, const std::vector<std::int32_t>& test_y,
                                  const KnnConfig& cfg) {
    auto train = encode(params, train_x, Collect::per_block);
    auto test = encode(params, test_x, Collect::per_block);
    std::vector<double> acc;
    for (std::size_t b = 0; b < params.config.depth; ++b) {
        ProbeDataset ds;
        ds.train_x = train.cls_per_block[b];
        ds.train_y = train_y;
        ds.test_x = test.cls_per_block[b];
        ds.test_y = test_y;
        acc.push_back(knn_probe(ds, cfg));
    }
    return acc;
}

} // namespace mrf
