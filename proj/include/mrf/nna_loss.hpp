#pragma once

#include <cstdint>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/rng.hpp"
#include "mrf/support_queue.hpp"

namespace mrf {

// One contrastive instance: each anchor is pulled toward its retrieved
// positive and pushed from the non-excluded negatives. Positives and
// negatives are constants; only the anchors carry gradient. negatives are
// row-aligned with anchors, so the exclusion mask is square and its diagonal
// (each anchor vs its own negative slot) must always be set.
struct ContrastiveBatch {
    Matrix anchors;     // N x d, unit rows
    Matrix positives;   // N x d, unit rows
    Matrix negatives;   // N x d, unit rows
    std::vector<std::uint8_t> exclude; // N*N row-major; nonzero = term dropped
    double temperature = 0.2;

    bool excluded(std::size_t i, std::size_t j) const {
        return exclude[i * anchors.rows + j] != 0;
    }
};

struct LossOutput {
    double loss = 0.0;                 // mean over anchors
    std::vector<double> per_anchor;    // individual loss terms
    Matrix grad_anchors;               // d loss / d anchors
};

// loss_i = log(exp(p_i/t) + sum_j exp(n_ij/t)) - p_i/t with p_i the
// positive similarity and n_ij the surviving negative similarities,
// evaluated in log space. Gradient is with respect to anchors only.
LossOutput nna_loss(const ContrastiveBatch& batch);

// Assembles a batch from row-aligned predictor/projector outputs: positives
// are queue neighbors of proj rows, negatives are the proj rows themselves
// (or their own queue neighbors when swap_negatives is set), and the mask
// drops anchor/negative pairs originating from the same source sample.
ContrastiveBatch build_batch_nna(const Matrix& pred, const Matrix& proj,
                                 const SupportQueue& queue, double temperature,
                                 std::size_t k, bool swap_negatives,
                                 const std::vector<std::size_t>& same_sample_groups,
                                 RngStream& rng);

} // namespace mrf
