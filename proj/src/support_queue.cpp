#include <algorithm>
#include <cmath>

#include "mrf/error.hpp"
#include "mrf/kernels.hpp"
#include "mrf/numerics.hpp"
#include "mrf/support_queue.hpp"

namespace mrf {

SupportQueue::SupportQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), store_(capacity, dim), labels_(capacity, -1) {
    if (capacity == 0) raise(Err::ConfigError, "queue capacity must be >= 1");
}

std::size_t SupportQueue::physical_of(std::size_t logical) const {
    const std::size_t start = (write_cursor_ + capacity_ - filled_) % capacity_;
    return (start + logical) % capacity_;
}

void SupportQueue::enqueue_batch(const Matrix& embeddings, const std::vector<std::int32_t>* labels) {
    if (embeddings.cols != dim_) raise(Err::DimMismatch, "embedding dim vs queue dim");
    if (labels && labels->size() != embeddings.rows)
        raise(Err::DimMismatch, "labels length vs embedding rows");
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        const double norm = std::sqrt(kernels::sumsq(embeddings.row(i), dim_));
        if (std::abs(norm - 1.0) > 1e-6)
            raise(Err::NotNormalized,
                  "row " + std::to_string(i) + " norm " + std::to_string(norm));
    }
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        std::copy_n(embeddings.row(i), dim_, store_.row(write_cursor_));
        labels_[write_cursor_] = labels ? (*labels)[i] : -1;
        write_cursor_ = (write_cursor_ + 1) % capacity_;
        if (filled_ < capacity_) ++filled_;
    }
}

namespace {

struct Hit {
    double sim;
    std::size_t logical;
};

// keeps the k best hits ordered by (sim desc, logical asc); callers feed
// logical indices in increasing order
void offer(std::vector<Hit>& best, std::size_t k, double sim, std::size_t logical) {
    if (best.size() == k && sim <= best.back().sim) return;
    auto pos = std::find_if(best.begin(), best.end(),
                            [&](const Hit& h) { return sim > h.sim; });
    best.insert(pos, Hit{sim, logical});
    if (best.size() > k) best.pop_back();
}

} // namespace

SupportQueue::Retrieval SupportQueue::retrieve_nn(const Matrix& anchors, std::size_t k,
                                                  RngStream& rng) const {
    if (k == 0) raise(Err::ConfigError, "k must be >= 1");
    if (filled_ < k)
        raise(Err::QueueTooSmall,
              "filled " + std::to_string(filled_) + " < k " + std::to_string(k));
    if (anchors.cols != dim_) raise(Err::DimMismatch, "anchor dim vs queue dim");

    Retrieval out;
    out.selected = Matrix(anchors.rows, dim_);
    out.indices.resize(anchors.rows);

    std::vector<std::vector<Hit>> per_anchor(anchors.rows);
    parallel_for(anchors.rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t a = lo; a < hi; ++a) {
            auto& best = per_anchor[a];
            best.reserve(k + 1);
            for (std::size_t l = 0; l < filled_; ++l) {
                const double sim = kernels::dot(anchors.row(a), slot(physical_of(l)), dim_);
                offer(best, k, sim, l);
            }
        }
    });

    // selection draws happen in anchor order so results are seed-reproducible
    for (std::size_t a = 0; a < anchors.rows; ++a) {
        const auto& best = per_anchor[a];
        const std::size_t pick = (k == 1) ? 0 : static_cast<std::size_t>(rng.next_below(k));
        const std::size_t logical = best[pick].logical;
        out.indices[a] = logical;
        std::copy_n(slot(physical_of(logical)), dim_, out.selected.row(a));
    }
    return out;
}

double SupportQueue::nn_swap_accuracy(const Matrix& anchors,
                                      const std::vector<std::int32_t>& anchor_labels) const {
    if (filled_ == 0) raise(Err::QueueTooSmall, "empty queue");
    if (anchors.rows != anchor_labels.size())
        raise(Err::DimMismatch, "anchor labels length");
    if (!fully_labeled()) raise(Err::UnlabeledQueue, "queue entry without label");

    std::size_t hits = 0;
    for (std::size_t a = 0; a < anchors.rows; ++a) {
        double best_sim = -2.0;
        std::size_t best_l = 0;
        for (std::size_t l = 0; l < filled_; ++l) {
            const double sim = kernels::dot(anchors.row(a), slot(physical_of(l)), dim_);
            if (sim > best_sim) {
                best_sim = sim;
                best_l = l;
            }
        }
        if (label_at(best_l) == anchor_labels[a]) ++hits;
    }
    return anchors.rows == 0 ? 0.0 : static_cast<double>(hits) / anchors.rows;
}

Matrix SupportQueue::snapshot_vectors() const {
    Matrix out(filled_, dim_);
    for (std::size_t l = 0; l < filled_; ++l)
        std::copy_n(slot(physical_of(l)), dim_, out.row(l));
    return out;
}

std::vector<std::int32_t> SupportQueue::snapshot_labels() const {
    if (!fully_labeled()) return {};
    std::vector<std::int32_t> out(filled_);
    for (std::size_t l = 0; l < filled_; ++l) out[l] = label_at(l);
    return out;
}

bool SupportQueue::fully_labeled() const {
    for (std::size_t l = 0; l < filled_; ++l)
        if (label_at(l) < 0) return false;
    return filled_ > 0;
}

std::int32_t SupportQueue::label_at(std::size_t logical) const {
    return labels_[physical_of(logical)];
}

} // namespace mrf
