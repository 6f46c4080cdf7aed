#include <cmath>

#include "mrf/error.hpp"
#include "mrf/kernels.hpp"
#include "mrf/nna_loss.hpp"
#include "mrf/numerics.hpp"

namespace mrf {

LossOutput nna_loss(const ContrastiveBatch& batch) {
    const std::size_t n = batch.anchors.rows;
    const std::size_t d = batch.anchors.cols;
    const double tau = batch.temperature;
    if (tau <= 0.0) raise(Err::BadTemperature, "temperature must be positive");
    if (!batch.anchors.same_shape(batch.positives) || !batch.anchors.same_shape(batch.negatives))
        raise(Err::DimMismatch, "anchors/positives/negatives shapes differ");
    if (batch.exclude.size() != n * n) raise(Err::DimMismatch, "mask size");
    for (std::size_t i = 0; i < n; ++i)
        if (!batch.excluded(i, i))
            raise(Err::MaskDiagonal, "mask diagonal must exclude (i,i)");

    LossOutput out;
    out.per_anchor.resize(n);
    out.grad_anchors = Matrix(n, d);

    parallel_for(n, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> logits;
        std::vector<std::size_t> surviving;
        for (std::size_t i = lo; i < hi; ++i) {
            const double* z = batch.anchors.row(i);
            const double p = kernels::dot(batch.positives.row(i), z, d);

            logits.clear();
            surviving.clear();
            logits.push_back(p / tau);
            for (std::size_t j = 0; j < n; ++j) {
                if (batch.excluded(i, j)) continue;
                logits.push_back(kernels::dot(batch.negatives.row(j), z, d) / tau);
                surviving.push_back(j);
            }

            const double lse = log_sum_exp(logits);
            out.per_anchor[i] = lse - p / tau;

            // softmax over {positive, surviving negatives}; mean over anchors
            double* g = out.grad_anchors.row(i);
            const double sp = std::exp(logits[0] - lse);
            kernels::axpy((sp - 1.0) / (tau * n), batch.positives.row(i), g, d);
            for (std::size_t t = 0; t < surviving.size(); ++t) {
                const double sj = std::exp(logits[t + 1] - lse);
                kernels::axpy(sj / (tau * n), batch.negatives.row(surviving[t]), g, d);
            }
        }
    });

    double total = 0.0;
    for (double v : out.per_anchor) total += v;
    out.loss = total / static_cast<double>(n);
    if (!std::isfinite(out.loss) || !all_finite(out.grad_anchors.data))
        raise(Err::NonFinite, "contrastive loss produced a non-finite value");
    return out;
}

ContrastiveBatch build_batch_nna(const Matrix& pred, const Matrix& proj,
                                 const SupportQueue& queue, double temperature,
                                 std::size_t k, bool swap_negatives,
                                 const std::vector<std::size_t>& same_sample_groups,
                                 RngStream& rng) {
    if (!pred.same_shape(proj)) raise(Err::DimMismatch, "pred/proj shapes differ");
    if (same_sample_groups.size() != pred.rows)
        raise(Err::DimMismatch, "group list length vs batch rows");

    ContrastiveBatch batch;
    batch.temperature = temperature;
    batch.anchors = pred;
    batch.positives = queue.retrieve_nn(proj, k, rng).selected;
    batch.negatives = swap_negatives ? queue.retrieve_nn(proj, k, rng).selected : proj;

    const std::size_t n = pred.rows;
    batch.exclude.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (same_sample_groups[i] == same_sample_groups[j])
                batch.exclude[i * n + j] = 1;
    return batch;
}

} // namespace mrf
