#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mrf/kernels.hpp"
#include "mrf/nna_loss.hpp"
#include "mrf/numerics.hpp"
#include "mrf/probe_eval.hpp"
#include "mrf/refine.hpp"

namespace mrf {

void RefineConfig::validate(std::size_t encoder_depth) const {
    if (epochs > 0 && batch == 0) raise(Err::ConfigError, "zero batch size");
    if (!(layer_decay > 0.0 && layer_decay <= 1.0)) raise(Err::ConfigError, "layer_decay in (0,1]");
    if (freeze_blocks >= encoder_depth) raise(Err::ConfigError, "freeze_blocks below depth");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) raise(Err::ConfigError, "ema momentum in [0,1]");
    if (temperature <= 0.0) raise(Err::BadTemperature, "temperature must be positive");
    if (peak_lr <= 0.0 || end_lr < 0.0 || init_lr <= 0.0) raise(Err::ConfigError, "learning rates");
    if (queue.capacity == 0 || queue.top_k == 0) raise(Err::ConfigError, "queue config");
    views.validate();
}

HeadEnsemble HeadEnsemble::init(const EncoderConfig& enc, const EnsembleConfig& ens,
                                const QueueConfig& queue_cfg, RngStream& rng) {
    ens.validate(enc.depth);
    HeadEnsemble out;
    out.config = ens;
    for (std::size_t h = 0; h < ens.head_configs.size(); ++h) {
        if (ens.head_configs[h].input_dim != enc.width)
            raise(Err::DimMismatch, "head input vs encoder width");
        RngStream hr = rng.split(7000 + h);
        out.heads.push_back(HeadParams::init(ens.head_configs[h], hr));
        out.queues.emplace_back(queue_cfg.capacity, ens.head_configs[h].bottleneck());
    }
    return out;
}

namespace {

std::vector<std::span<const double>> const_views(const std::vector<std::span<double>>& v) {
    return {v.begin(), v.end()};
}

// encoder views walked per layer-decay group so lr assignment lines up
std::vector<std::span<double>> encoder_group_views(EncoderParams& p,
                                                   std::vector<std::size_t>* group_of = nullptr) {
    std::vector<std::span<double>> out;
    for (std::size_t g = 0; g <= p.config.depth; ++g)
        for (auto v : p.group_views(g)) {
            out.push_back(v);
            if (group_of) group_of->push_back(g);
        }
    return out;
}

Matrix rows_slice(const Matrix& m, std::size_t row0, std::size_t nrows) {
    Matrix out(nrows, m.cols);
    std::copy_n(m.row(row0), nrows * m.cols, out.data.data());
    return out;
}

HeadGrads zero_head_grads(const HeadParams& params) {
    HeadGrads g;
    for (const auto& layer : params.layers) {
        LayerGrads lg;
        lg.W = Matrix(layer.W.rows, layer.W.cols);
        lg.b.assign(layer.b.size(), 0.0);
        lg.gamma.assign(layer.gamma.size(), 0.0);
        lg.beta.assign(layer.beta.size(), 0.0);
        g.layers.push_back(std::move(lg));
    }
    return g;
}

struct StepOutcome {
    std::vector<double> head_losses;
    std::vector<HeadGrads> head_grads;
    EncoderGrads enc_grads;
    bool has_enc_grads = false;
    double nn_swap = 0.0;
};

// One multi-view contrastive step. Encodes every view once, runs each head
// on the stacked summary features, and pairs anchors with queue neighbors:
// each global against the other global's projections, each local against a
// random global's. Global projections are enqueued at the end; when a queue
// is still empty they are enqueued first so retrieval has something to see.
StepOutcome contrastive_step(const EncoderParams& enc, HeadEnsemble& ens, const Matrix& batch,
                             const std::vector<std::int32_t>& batch_labels,
                             const BlobDatasetConfig& data_cfg, const RefineConfig& cfg,
                             const std::vector<double>& weights, std::size_t k,
                             bool want_encoder_grads, std::uint64_t step_id, RngStream& rng) {
    const std::size_t B = batch.rows;
    const std::size_t L = cfg.views.n_local;
    const std::size_t V = 2 + L;
    const std::size_t H = ens.heads.size();
    const std::size_t depth = enc.config.depth;
    const std::size_t w = enc.config.width;

    std::vector<std::size_t> pairing(L);
    for (auto& g : pairing) g = rng.next_below(2);

    std::vector<Matrix> view_inputs(V, Matrix(B, enc.config.input_dim()));
    for (std::size_t s = 0; s < B; ++s) {
        Matrix mv = make_views(batch.row_span(s), data_cfg, cfg.views, rng);
        for (std::size_t v = 0; v < V; ++v)
            std::copy_n(mv.row(v), mv.cols, view_inputs[v].row(s));
    }

    std::vector<EncodeResult> encoded;
    encoded.reserve(V);
    for (std::size_t v = 0; v < V; ++v)
        encoded.push_back(encode(enc, view_inputs[v], Collect::per_block, want_encoder_grads));

    std::vector<std::size_t> groups(V * B);
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t s = 0; s < B; ++s) groups[v * B + s] = s;

    StepOutcome out;
    out.head_losses.resize(H);
    out.head_grads.resize(H);
    std::vector<std::vector<Matrix>> tap_grads;
    if (want_encoder_grads)
        tap_grads.assign(V, std::vector<Matrix>(depth));

    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t tap = ens.config.attach_indices[h] - 1;
        Matrix x(V * B, w);
        for (std::size_t v = 0; v < V; ++v)
            std::copy_n(encoded[v].cls_per_block[tap].data.data(), B * w, x.row(v * B));

        HeadForward fw = head_forward(ens.heads[h], x, HeadMode::train);
        SupportQueue& queue = ens.queues[h];

        Matrix globals = rows_slice(fw.proj_norm, 0, 2 * B);
        std::vector<std::int32_t> global_labels(batch_labels);
        global_labels.insert(global_labels.end(), batch_labels.begin(), batch_labels.end());

        const bool last_head = h + 1 == H;
        bool bootstrapped = false;
        if (queue.filled() == 0) {
            queue.enqueue_batch(globals, &global_labels);
            bootstrapped = true;
        }
        if (last_head && queue.fully_labeled())
            out.nn_swap = queue.nn_swap_accuracy(rows_slice(fw.proj_norm, 0, B), batch_labels);

        const std::size_t k_eff = std::min(k, queue.filled());
        ContrastiveBatch cb;
        cb.anchors = fw.pred_norm;
        cb.temperature = cfg.temperature;
        cb.positives = Matrix(V * B, queue.dim());
        auto put_positives = [&](std::size_t anchor_row0, std::size_t query_view) {
            Matrix queries = rows_slice(fw.proj_norm, query_view * B, B);
            Matrix sel = queue.retrieve_nn(queries, k_eff, rng).selected;
            std::copy_n(sel.data.data(), B * queue.dim(), cb.positives.row(anchor_row0));
        };
        put_positives(0, 1);
        put_positives(B, 0);
        for (std::size_t l = 0; l < L; ++l) put_positives((2 + l) * B, pairing[l]);

        cb.negatives = cfg.swap_negatives
                           ? queue.retrieve_nn(fw.proj_norm, k_eff, rng).selected
                           : fw.proj_norm;
        const std::size_t n = V * B;
        cb.exclude.assign(n * n, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (groups[i] == groups[j]) cb.exclude[i * n + j] = 1;

        LossOutput lo = nna_loss(cb);
        if (!std::isfinite(lo.loss))
            raise(Err::NonFiniteLoss, "head " + std::to_string(h) + " at step " +
                                          std::to_string(step_id));
        out.head_losses[h] = lo.loss;

        if (weights[h] != 0.0) {
            Matrix grad_norm = lo.grad_anchors;
            if (weights[h] != 1.0)
                kernels::scal(weights[h], grad_norm.data.data(), grad_norm.data.size());
            Matrix grad_pred_raw = l2_normalize_rows_backward(fw.pred_raw, grad_norm);
            HeadBackward hb = head_backward(ens.heads[h], fw.cache, grad_pred_raw, Matrix());
            out.head_grads[h] = std::move(hb.grads);
            if (want_encoder_grads)
                for (std::size_t v = 0; v < V; ++v) {
                    Matrix& t = tap_grads[v][tap];
                    if (t.rows == 0) t = Matrix(B, w);
                    kernels::axpy(1.0, hb.grad_input.row(v * B), t.data.data(), B * w);
                }
        } else {
            // zero-weight heads still log their loss but skip the backward
            out.head_grads[h] = zero_head_grads(ens.heads[h]);
        }

        if (!bootstrapped) queue.enqueue_batch(globals, &global_labels);
    }

    if (want_encoder_grads) {
        out.enc_grads = zero_like(enc);
        out.has_enc_grads = true;
        auto enc_grad_views = encoder_group_views(out.enc_grads);
        for (std::size_t v = 0; v < V; ++v) {
            EncoderGrads g = encoder_backward(enc, encoded[v].cache, tap_grads[v], Matrix());
            auto gv = encoder_group_views(g);
            for (std::size_t i = 0; i < gv.size(); ++i)
                kernels::axpy(1.0, gv[i].data(), enc_grad_views[i].data(), gv[i].size());
        }
    }
    return out;
}

std::vector<std::size_t> shuffled_order(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);
    return order;
}

Matrix gather_rows(const Matrix& data, const std::vector<std::size_t>& order, std::size_t at,
                   std::size_t take) {
    Matrix out(take, data.cols);
    for (std::size_t i = 0; i < take; ++i)
        std::copy_n(data.row(order[at + i]), data.cols, out.row(i));
    return out;
}

double subset_knn_accuracy(const EncoderParams& enc, const Matrix& data,
                           const std::vector<std::int32_t>& labels, std::size_t subset,
                           std::size_t k) {
    const std::size_t n = data.rows;
    const std::size_t take = std::min(subset, n);
    const std::size_t stride = std::max<std::size_t>(1, n / take);
    ProbeDataset ds;
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0, at = 0; i < take; ++i, at += stride)
        (i % 2 ? test_idx : train_idx).push_back(at % n);
    Matrix all(train_idx.size() + test_idx.size(), data.cols);
    std::size_t r = 0;
    for (auto i : train_idx) {
        std::copy_n(data.row(i), data.cols, all.row(r++));
        ds.train_y.push_back(labels[i]);
    }
    for (auto i : test_idx) {
        std::copy_n(data.row(i), data.cols, all.row(r++));
        ds.test_y.push_back(labels[i]);
    }
    Matrix feats = encode(enc, all, Collect::final_only).cls_per_block.back();
    ds.train_x = rows_slice(feats, 0, train_idx.size());
    ds.test_x = rows_slice(feats, train_idx.size(), test_idx.size());
    return knn_probe(ds, KnnConfig{std::min(k, ds.train_x.rows), 0.07});
}

} // namespace

std::vector<double> init_heads_phase(const EncoderParams& encoder, HeadEnsemble& ensemble,
                                     const Matrix& data, const std::vector<std::int32_t>& labels,
                                     const BlobDatasetConfig& data_cfg, const RefineConfig& cfg,
                                     RngStream& rng) {
    cfg.validate(encoder.config.depth);
    if (data.rows != labels.size()) raise(Err::LengthMismatch, "data/label rows");
    if (data.rows == 0) raise(Err::EmptyInput, "empty dataset");
    const std::size_t H = ensemble.heads.size();

    std::vector<std::span<double>> head_views;
    std::vector<std::size_t> sizes;
    for (auto& head : ensemble.heads)
        for (auto v : head.trainable_views()) {
            head_views.push_back(v);
            sizes.push_back(v.size());
        }
    AdamW opt(sizes, AdamWConfig{cfg.beta1, cfg.beta2, 1e-8});
    const std::vector<double> lrs(sizes.size(), cfg.init_lr);
    const std::vector<double> wds(sizes.size(), cfg.head_wd);
    const std::vector<double> weights(H, 1.0);

    std::vector<double> epoch_losses;
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.init_epochs; ++epoch) {
        auto order = shuffled_order(data.rows, rng);
        double acc = 0.0;
        std::size_t steps = 0;
        for (std::size_t at = 0; at < data.rows; at += cfg.batch) {
            const std::size_t take = std::min(cfg.batch, data.rows - at);
            Matrix batch = gather_rows(data, order, at, take);
            std::vector<std::int32_t> batch_labels(take);
            for (std::size_t i = 0; i < take; ++i) batch_labels[i] = labels[order[at + i]];

            StepOutcome so = contrastive_step(encoder, ensemble, batch, batch_labels, data_cfg,
                                              cfg, weights, 1, false, step, rng);
            acc += std::accumulate(so.head_losses.begin(), so.head_losses.end(), 0.0) /
                   static_cast<double>(H);
            ++steps;
            ++step;

            std::vector<std::span<const double>> grad_views;
            for (auto& hg : so.head_grads)
                for (auto v : hg.views()) grad_views.push_back(v);
            opt.step(head_views, grad_views, lrs, wds);
        }
        epoch_losses.push_back(acc / static_cast<double>(steps));
    }
    return epoch_losses;
}

RefineResult refine(EncoderParams& encoder, HeadEnsemble& ensemble, const Matrix& data,
                    const std::vector<std::int32_t>& labels, const BlobDatasetConfig& data_cfg,
                    const RefineConfig& cfg, RngStream& rng) {
    cfg.validate(encoder.config.depth);
    if (data.rows != labels.size()) raise(Err::LengthMismatch, "data/label rows");
    if (data.rows == 0) raise(Err::EmptyInput, "empty dataset");
    const std::size_t H = ensemble.heads.size();
    const std::size_t depth = encoder.config.depth;
    const ScheduleSpec sched{cfg.schedule, H};

    std::vector<std::size_t> group_of;
    auto enc_views = encoder_group_views(encoder, &group_of);
    RefineResult res{EmaState(const_views(enc_views), cfg.ema_momentum), {}};

    std::vector<std::span<double>> all_views(enc_views);
    std::vector<std::size_t> sizes;
    std::vector<double> lr_factor, wds;
    for (std::size_t i = 0; i < enc_views.size(); ++i) {
        sizes.push_back(enc_views[i].size());
        const std::size_t g = group_of[i];
        const bool frozen = cfg.freeze_blocks > 0 && g <= cfg.freeze_blocks;
        lr_factor.push_back(frozen ? 0.0
                                   : std::pow(cfg.layer_decay, static_cast<double>(depth - g)));
        wds.push_back(frozen ? 0.0 : cfg.encoder_wd);
    }
    for (auto& head : ensemble.heads)
        for (auto v : head.trainable_views()) {
            all_views.push_back(v);
            sizes.push_back(v.size());
            lr_factor.push_back(1.0);
            wds.push_back(cfg.head_wd);
        }
    AdamW opt(sizes, AdamWConfig{cfg.beta1, cfg.beta2, 1e-8});

    const std::size_t spe = (data.rows + cfg.batch - 1) / std::max<std::size_t>(1, cfg.batch);
    const std::uint64_t total_steps = cfg.epochs * spe;
    const std::uint64_t warmup_steps = cfg.warmup_epochs * spe;
    std::uint64_t step = 0;
    std::vector<double> weights(H), lrs(sizes.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = shuffled_order(data.rows, rng);
        double swap_acc = 0.0;
        std::size_t steps_this_epoch = 0;
        for (std::size_t at = 0; at < data.rows; at += cfg.batch) {
            const std::size_t take = std::min(cfg.batch, data.rows - at);
            Matrix batch = gather_rows(data, order, at, take);
            std::vector<std::int32_t> batch_labels(take);
            for (std::size_t i = 0; i < take; ++i) batch_labels[i] = labels[order[at + i]];

            const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
            for (std::size_t h = 0; h < H; ++h) weights[h] = schedule_weight(sched, h, progress);
            const double base_lr =
                lr_schedule(step, total_steps, cfg.peak_lr, warmup_steps, cfg.end_lr);

            StepOutcome so = contrastive_step(encoder, ensemble, batch, batch_labels, data_cfg,
                                              cfg, weights, cfg.queue.top_k, true, step, rng);

            auto enc_grad_views = encoder_group_views(so.enc_grads);
            std::vector<std::span<const double>> grad_views(enc_grad_views.begin(),
                                                            enc_grad_views.end());
            for (auto& hg : so.head_grads)
                for (auto v : hg.views()) grad_views.push_back(v);
            for (std::size_t i = 0; i < sizes.size(); ++i) lrs[i] = base_lr * lr_factor[i];
            opt.step(all_views, grad_views, lrs, wds);
            res.ema.update(const_views(enc_views));

            res.logs.rows.push_back(RefineLogRow{step, so.head_losses, so.nn_swap, base_lr});
            swap_acc += so.nn_swap;
            ++steps_this_epoch;
            ++step;
        }
        res.logs.epoch_swap.push_back(swap_acc / static_cast<double>(steps_this_epoch));
        if (cfg.knn_log_every && (epoch + 1) % cfg.knn_log_every == 0)
            res.logs.knn_checks.emplace_back(
                step, subset_knn_accuracy(encoder, data, labels, cfg.knn_log_subset, 10));
    }
    return res;
}

std::string logs_to_csv(const RefineLogs& logs) {
    std::string out = "step";
    const std::size_t H = logs.rows.empty() ? 0 : logs.rows.front().head_losses.size();
    for (std::size_t h = 0; h < H; ++h) out += ",loss_head_" + std::to_string(h);
    out += ",nn_swap,lr\n";
    char buf[64];
    for (const auto& row : logs.rows) {
        out += std::to_string(row.step);
        for (double l : row.head_losses) {
            std::snprintf(buf, sizeof(buf), ",%.17g", l);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", row.nn_swap, row.lr);
        out += buf;
        out += '\n';
    }
    return out;
}

} // namespace mrf
