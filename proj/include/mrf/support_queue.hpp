#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/rng.hpp"

namespace mrf {

struct QueueConfig {
    std::size_t capacity = 65536;
    std::size_t top_k = 20;
};

// Fixed-capacity FIFO ring of unit-norm bottleneck vectors with optional class
// labels. Retrieval scans all filled entries; no approximate index.
class SupportQueue {
public:
    SupportQueue() = default;
    SupportQueue(std::size_t capacity, std::size_t dim);

    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    std::size_t filled() const { return filled_; }

    // Appends rows in order, overwriting the oldest entries once full.
    // Throws NotNormalized if a row norm deviates from 1 by more than 1e-6.
    void enqueue_batch(const Matrix& embeddings,
                       const std::vector<std::int32_t>* labels = nullptr);

    struct Retrieval {
        Matrix selected;                   // one row per anchor
        std::vector<std::size_t> indices;  // logical index into the queue (0 = oldest)
    };

    // For each anchor: cosine similarity against all filled entries, keep the
    // k best (ties to the older entry), pick one of those k uniformly at
    // random. k = 1 is the plain argmax and ignores the rng.
    Retrieval retrieve_nn(const Matrix& anchors, std::size_t k, RngStream& rng) const;

    // Fraction of anchors whose top-1 neighbor carries the anchor's label.
    double nn_swap_accuracy(const Matrix& anchors,
                            const std::vector<std::int32_t>& anchor_labels) const;

    // Contents in FIFO order (oldest first), for snapshots and tests.
    Matrix snapshot_vectors() const;
    std::vector<std::int32_t> snapshot_labels() const; // empty if any entry unlabeled

    bool fully_labeled() const;
    std::int32_t label_at(std::size_t logical_index) const;

private:
    const double* slot(std::size_t physical) const { return store_.row(physical); }
    std::size_t physical_of(std::size_t logical) const;

    std::size_t capacity_ = 0;
    std::size_t dim_ = 0;
    Matrix store_;                              // capacity x dim ring storage
    std::vector<std::int32_t> labels_;          // -1 = unlabeled
    std::size_t write_cursor_ = 0;
    std::size_t filled_ = 0;
};

} // namespace mrf
