#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrf/blob_data.hpp"
#include "mrf/id_head.hpp"
#include "mrf/matrix.hpp"
#include "mrf/optim.hpp"
#include "mrf/rng.hpp"
#include "mrf/support_queue.hpp"
#include "mrf/toy_encoder.hpp"

namespace mrf {

struct RefineConfig {
    std::size_t epochs = 30;
    std::size_t batch = 64;
    double peak_lr = 4e-4;
    std::size_t warmup_epochs = 4;
    double end_lr = 1e-6;
    double layer_decay = 0.65;
    std::size_t freeze_blocks = 0;
    double encoder_wd = 0.05;
    double head_wd = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double temperature = 0.2;
    QueueConfig queue;
    double ema_momentum = 0.9999;
    ViewConfig views;
    ScheduleKind schedule = ScheduleKind::constant;
    bool swap_negatives = false;
    std::size_t init_epochs = 5; // head-initialization phase budget
    double init_lr = 2e-4;
    std::size_t knn_log_every = 0;   // epochs between subset probes, 0 = off
    std::size_t knn_log_subset = 256;

    void validate(std::size_t encoder_depth) const;
};

// Heads plus their private support queues, one per attach index.
struct HeadEnsemble {
    EnsembleConfig config;
    std::vector<HeadParams> heads;
    std::vector<SupportQueue> queues;

    static HeadEnsemble init(const EncoderConfig& enc, const EnsembleConfig& ens,
                             const QueueConfig& queue_cfg, RngStream& rng);
};

struct RefineLogRow {
    std::uint64_t step = 0;
    std::vector<double> head_losses; // unweighted, one per head
    double nn_swap = 0.0;            // final head's queue, this batch's globals
    double lr = 0.0;                 // schedule value before layer decay
};

struct RefineLogs {
    std::vector<RefineLogRow> rows;
    std::vector<double> epoch_swap;
    std::vector<std::pair<std::uint64_t, double>> knn_checks; // (step, accuracy)
};

std::string logs_to_csv(const RefineLogs& logs);

// Trains the heads against the frozen encoder with top-1 retrieval to give
// refinement a sane starting point; queues are warm afterwards. Returns the
// per-epoch mean head loss.
std::vector<double> init_heads_phase(const EncoderParams& encoder, HeadEnsemble& ensemble,
                                     const Matrix& data, const std::vector<std::int32_t>& labels,
                                     const BlobDatasetConfig& data_cfg, const RefineConfig& cfg,
                                     RngStream& rng);

struct RefineResult {
    EmaState ema;
    RefineLogs logs;
};

// The refinement loop: per step builds 2 global + n_local views per sample,
// encodes every view once, feeds each head the summary features of its
// block across all views, and aligns predictions with queue neighbors of the
// opposite (or a random) global view's projections. Gradients flow through
// the heads into the encoder; blocks at or below freeze_blocks stay fixed;
// only global projections enter the queues.
RefineResult refine(EncoderParams& encoder, HeadEnsemble& ensemble, const Matrix& data,
                    const std::vector<std::int32_t>& labels, const BlobDatasetConfig& data_cfg,
                    const RefineConfig& cfg, RngStream& rng);

} // namespace mrf
