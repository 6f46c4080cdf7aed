// End-to-end acceptance battery. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any fail. Criteria can be run
// individually by listing their numbers as arguments: `acceptance 1 5 10`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mrf/blob_data.hpp"
#include "mrf/cluster_eval.hpp"
#include "mrf/error.hpp"
#include "mrf/experiment.hpp"
#include "mrf/id_head.hpp"
#include "mrf/matrix.hpp"
#include "mrf/nna_loss.hpp"
#include "mrf/numerics.hpp"
#include "mrf/rng.hpp"
#include "mrf/support_queue.hpp"
#include "mrf/toy_encoder.hpp"

using namespace mrf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

Matrix random_unit_rows(std::size_t rows, std::size_t cols, RngStream& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            m(i, j) = rng.next_gaussian();
            sq += m(i, j) * m(i, j);
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < cols; ++j) m(i, j) *= inv;
    }
    return m;
}

// shared accumulator for the gradient battery: absolute tolerance 1e-7 plus
// 1e-5 relative to the finite-difference value, per coordinate
struct GradTally {
    double worst = 0.0;
    bool ok = true;
    int instances = 0;

    void absorb(std::span<const double> analytic, std::span<const double> numeric) {
        ++instances;
        if (analytic.size() != numeric.size()) {
            ok = false;
            return;
        }
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double diff = std::abs(analytic[i] - numeric[i]);
            worst = std::max(worst, diff);
            if (diff > 1e-7 + 1e-5 * std::abs(numeric[i])) ok = false;
        }
    }
};

std::string format(const char* fmt, ...) {
    char buf[512];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, args);
    va_end(args);
    return buf;
}

// ---- criterion 1: gradient exactness -------------------------------------

void gradcheck_nna(GradTally& tally, RngStream& rng) {
    const std::size_t n = 2 + rng.next_below(7);
    const std::size_t d = 3 + rng.next_below(14);
    const double taus[] = {0.1, 0.2, 0.5};

    ContrastiveBatch batch;
    batch.anchors = random_unit_rows(n, d, rng);
    batch.positives = random_unit_rows(n, d, rng);
    batch.negatives = random_unit_rows(n, d, rng);
    batch.temperature = taus[rng.next_below(3)];
    batch.exclude.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            batch.exclude[i * n + j] = (i == j || rng.next_below(4) == 0) ? 1 : 0;

    const LossOutput out = nna_loss(batch);
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> x) {
            ContrastiveBatch b = batch;
            std::copy(x.begin(), x.end(), b.anchors.data.begin());
            return nna_loss(b).loss;
        },
        batch.anchors.data, 1e-6);
    tally.absorb(out.grad_anchors.data, numeric);
}

void gradcheck_head(GradTally& tally, RngStream& rng, bool check_params) {
    HeadConfig hc;
    hc.input_dim = 3 + rng.next_below(6);
    const std::size_t h = 6 + rng.next_below(6);
    const std::size_t b = 3 + rng.next_below(4);
    hc.projector_dims = {hc.input_dim, h, h, b};
    hc.predictor_dims = {b, 4 + rng.next_below(6), b};
    const HeadParams head = HeadParams::init(hc, rng);

    const std::size_t rows = 2 + rng.next_below(4);
    Matrix x(rows, hc.input_dim);
    for (auto& v : x.data) v = rng.next_gaussian();
    Matrix grad_pred(rows, b);
    for (auto& v : grad_pred.data) v = rng.next_gaussian();

    HeadParams work = head;
    const HeadForward fwd = head_forward(work, x, HeadMode::train);
    const HeadBackward back = head_backward(work, fwd.cache, grad_pred, Matrix());

    const auto objective = [&](const HeadParams& p, const Matrix& input) {
        HeadParams fresh = p;
        const HeadForward f = head_forward(fresh, input, HeadMode::train);
        double s = 0.0;
        for (std::size_t i = 0; i < f.pred_raw.data.size(); ++i)
            s += grad_pred.data[i] * f.pred_raw.data[i];
        return s;
    };

    if (check_params) {
        HeadParams probe = head;
        std::vector<double> flat, analytic;
        for (auto v : probe.trainable_views()) flat.insert(flat.end(), v.begin(), v.end());
        HeadGrads grads = back.grads;
        for (auto v : grads.views()) analytic.insert(analytic.end(), v.begin(), v.end());
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> vals) {
                HeadParams p = head;
                std::size_t at = 0;
                for (auto v : p.trainable_views())
                    for (auto& e : v) e = vals[at++];
                return objective(p, x);
            },
            flat, 1e-6);
        tally.absorb(analytic, numeric);
    } else {
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> vals) {
                Matrix xi(rows, hc.input_dim);
                std::copy(vals.begin(), vals.end(), xi.data.begin());
                return objective(head, xi);
            },
            x.data, 1e-6);
        tally.absorb(back.grad_input.data, numeric);
    }
}

void gradcheck_encoder(GradTally& tally, RngStream& rng, BlockKind kind) {
    EncoderConfig cfg;
    cfg.depth = 3;
    cfg.block_kind = kind;
    if (rng.next_below(2) == 0) {
        cfg.width = 8;
        cfg.tokens = 4;
        cfg.token_dim = 4;
        cfg.mlp_hidden = 12;
    } else {
        cfg.width = 6;
        cfg.tokens = 3;
        cfg.token_dim = 2;
        cfg.mlp_hidden = 8;
    }
    EncoderParams params = EncoderParams::init(cfg, rng);
    const std::size_t rows = 2 + rng.next_below(2);
    Matrix data(rows, cfg.input_dim());
    for (auto& v : data.data) v = rng.next_gaussian();
    Matrix grad_tap(rows, cfg.width);
    for (auto& v : grad_tap.data) v = rng.next_gaussian();

    const EncodeResult fwd = encode(params, data, Collect::final_only, true);
    std::vector<Matrix> taps(cfg.depth);
    taps.back() = grad_tap;
    EncoderGrads grads = encoder_backward(params, fwd.cache, taps, Matrix());

    std::vector<double> analytic, flat;
    for (auto v : grads.trainable_views()) analytic.insert(analytic.end(), v.begin(), v.end());
    for (auto v : params.trainable_views()) flat.insert(flat.end(), v.begin(), v.end());
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> vals) {
            EncoderParams p = params;
            std::size_t at = 0;
            for (auto v : p.trainable_views())
                for (auto& e : v) e = vals[at++];
            const EncodeResult f = encode(p, data, Collect::final_only, false);
            const Matrix& tap = f.cls_per_block.back();
            double s = 0.0;
            for (std::size_t i = 0; i < tap.data.size(); ++i) s += grad_tap.data[i] * tap.data[i];
            return s;
        },
        flat, 1e-6);
    tally.absorb(analytic, numeric);
}

Outcome criterion_gradients() {
    const auto t0 = Clock::now();
    RngStream rng(101);
    GradTally tally;
    for (int i = 0; i < 20; ++i) gradcheck_nna(tally, rng);
    for (int i = 0; i < 20; ++i) gradcheck_head(tally, rng, i % 2 == 0);
    for (int i = 0; i < 20; ++i)
        gradcheck_encoder(tally, rng,
                          i % 2 == 0 ? BlockKind::residual_mlp : BlockKind::single_head_attention);
    const double dt = seconds_since(t0);
    const bool in_time = dt < 30.0;
    return {tally.ok && in_time,
            format("%d instances, worst |analytic-fd| %.2e, %.1fs", tally.instances, tally.worst,
                   dt)};
}

// ---- criterion 2: analytic contrastive values ----------------------------

Outcome criterion_analytic_values() {
    RngStream rng(202);
    double worst = 0.0;
    for (double tau : {0.1, 0.2, 0.35}) {
        // positive-only: the lone negative sits in the always-masked own slot
        ContrastiveBatch solo;
        solo.anchors = random_unit_rows(1, 6, rng);
        solo.positives = random_unit_rows(1, 6, rng);
        solo.negatives = random_unit_rows(1, 6, rng);
        solo.exclude = {1};
        solo.temperature = tau;
        worst = std::max(worst, std::abs(nna_loss(solo).loss));

        // one surviving negative with exactly the positive's similarity
        const double theta = 0.4;
        ContrastiveBatch pair;
        pair.anchors = Matrix(2, 2);
        pair.anchors(0, 0) = 1.0;
        pair.anchors(0, 1) = 0.0;
        const Matrix second = random_unit_rows(1, 2, rng);
        pair.anchors(1, 0) = second(0, 0);
        pair.anchors(1, 1) = second(0, 1);
        pair.positives = Matrix(2, 2);
        pair.positives(0, 0) = std::cos(theta);
        pair.positives(0, 1) = std::sin(theta);
        pair.positives(1, 0) = 0.0;
        pair.positives(1, 1) = 1.0;
        pair.negatives = Matrix(2, 2);
        pair.negatives(0, 0) = 0.6;  // only anchor 1's slot, masked below
        pair.negatives(0, 1) = 0.8;
        pair.negatives(1, 0) = std::cos(theta);
        pair.negatives(1, 1) = -std::sin(theta);
        pair.exclude = {1, 0, 1, 1}; // anchor 0 sees only negative 1
        pair.temperature = tau;
        const LossOutput out = nna_loss(pair);
        worst = std::max(worst, std::abs(out.per_anchor[0] - std::log(2.0)));
        worst = std::max(worst, std::abs(out.per_anchor[1])); // positive-only row
    }
    return {worst <= 1e-9, format("worst deviation %.2e over 3 temperatures", worst)};
}

// ---- criterion 3: queue-equals-batch negative swap consistency -----------

Outcome criterion_nnclr_equivalence() {
    RngStream rng(303);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 4 + rng.next_below(7);
        const std::size_t d = 4 + rng.next_below(9);
        const double taus[] = {0.1, 0.2, 0.35};
        const double tau = taus[trial % 3];

        const Matrix proj = random_unit_rows(n, d, rng);
        const Matrix pred = random_unit_rows(n, d, rng);
        SupportQueue queue(n, d);
        queue.enqueue_batch(proj);
        std::vector<std::size_t> groups(n);
        std::iota(groups.begin(), groups.end(), 0);

        double losses[2];
        for (int swap = 0; swap < 2; ++swap) {
            RngStream pick = rng.split(trial * 2 + swap);
            const ContrastiveBatch batch =
                build_batch_nna(pred, proj, queue, tau, 1, swap == 1, groups, pick);
            losses[swap] = nna_loss(batch).loss;
        }
        worst = std::max(worst, std::abs(losses[0] - losses[1]));
    }
    return {worst <= 1e-12, format("worst |plain-swapped| %.2e over 5 instances", worst)};
}

// ---- criterion 4: queue replay against a list reference ------------------

Outcome criterion_queue_replay() {
    RngStream rng(404);
    std::size_t total_ops = 0;
    std::size_t content_checks = 0, query_checks = 0;
    bool ok = true;

    for (std::size_t capacity : {std::size_t{1}, std::size_t{7}, std::size_t{32}}) {
        const std::size_t dim = 6;
        SupportQueue queue(capacity, dim);
        std::deque<std::vector<double>> ref;
        std::deque<std::int32_t> ref_labels;

        std::size_t batches = 0, ops = 0;
        const std::size_t budget = capacity == 32 ? 60000 : 25000;
        while (ops < budget) {
            const std::size_t rows = 1 + rng.next_below(5);
            const Matrix batch = random_unit_rows(rows, dim, rng);
            std::vector<std::int32_t> labels(rows);
            for (auto& l : labels) l = static_cast<std::int32_t>(rng.next_below(4));
            queue.enqueue_batch(batch, &labels);
            for (std::size_t i = 0; i < rows; ++i) {
                ref.emplace_back(batch.row(i), batch.row(i) + dim);
                ref_labels.push_back(labels[i]);
                if (ref.size() > capacity) {
                    ref.pop_front();
                    ref_labels.pop_front();
                }
            }
            ops += rows;
            total_ops += rows;
            ++batches;

            if (batches % 16 == 0 || ops >= budget) {
                ++content_checks;
                const Matrix snap = queue.snapshot_vectors();
                const auto snap_labels = queue.snapshot_labels();
                ok &= snap.rows == ref.size() && snap_labels.size() == ref.size();
                for (std::size_t i = 0; ok && i < ref.size(); ++i) {
                    ok &= std::memcmp(snap.row(i), ref[i].data(), dim * sizeof(double)) == 0;
                    ok &= snap_labels[i] == ref_labels[i];
                }
            }

            if (batches % 8 == 0 && queue.filled() > 0) {
                ++query_checks;
                const Matrix anchors = random_unit_rows(2, dim, rng);

                // exhaustive similarities, oldest first
                auto sims_of = [&](std::size_t a) {
                    std::vector<double> s(ref.size());
                    for (std::size_t i = 0; i < ref.size(); ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < dim; ++j) dot += anchors(a, j) * ref[i][j];
                        s[i] = dot;
                    }
                    return s;
                };

                RngStream r1 = rng.split(batches);
                const auto top1 = queue.retrieve_nn(anchors, 1, r1);
                for (std::size_t a = 0; a < 2; ++a) {
                    const auto sims = sims_of(a);
                    std::size_t best = 0;
                    for (std::size_t i = 1; i < sims.size(); ++i)
                        if (sims[i] > sims[best]) best = i;
                    ok &= top1.indices[a] == best;
                    ok &= std::memcmp(top1.selected.row(a), ref[best].data(),
                                      dim * sizeof(double)) == 0;
                }

                const std::size_t k = std::min<std::size_t>(3, queue.filled());
                RngStream r2 = rng.split(batches + 1);
                const auto topk = queue.retrieve_nn(anchors, k, r2);
                for (std::size_t a = 0; a < 2; ++a) {
                    auto sims = sims_of(a);
                    std::vector<std::size_t> order(sims.size());
                    std::iota(order.begin(), order.end(), 0);
                    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
                        return sims[x] > sims[y];
                    });
                    const bool member =
                        std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                                  topk.indices[a]) != order.begin() + static_cast<std::ptrdiff_t>(k);
                    ok &= member;
                }
            }
        }
    }
    return {ok && total_ops >= 100000,
            format("%zu ops, %zu content checks, %zu query checks", total_ops, content_checks,
                   query_checks)};
}

// ---- criterion 5: clustering metric oracles ------------------------------

double brute_force_accuracy(const std::vector<std::int32_t>& pred,
                            const std::vector<std::int32_t>& truth) {
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

Outcome criterion_cluster_oracles() {
    const auto t0 = Clock::now();
    RngStream rng(505);
    bool ok = true;

    auto random_labels = [&](std::size_t n, std::size_t ids) {
        std::vector<std::int32_t> out(n);
        for (auto& l : out) l = static_cast<std::int32_t>(rng.next_below(ids));
        return out;
    };

    double worst_acc = 0.0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t n = 2 + rng.next_below(30);
        const auto pred = random_labels(n, 1 + rng.next_below(6));
        const auto truth = random_labels(n, 1 + rng.next_below(6));
        const double diff = std::abs(cluster_accuracy(pred, truth) - brute_force_accuracy(pred, truth));
        worst_acc = std::max(worst_acc, diff);
        ok &= diff <= 1e-9;
    }

    for (int i = 0; i < 20; ++i) {
        const auto a = random_labels(50, 2 + rng.next_below(5));
        ok &= std::abs(nmi(a, a) - 1.0) <= 1e-12;
        ok &= std::abs(ami(a, a) - 1.0) <= 1e-12;
        ok &= std::abs(ari(a, a) - 1.0) <= 1e-12;
    }

    double sum_ami = 0.0, sum_ari = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto a = random_labels(200, 5);
        const auto b = random_labels(200, 7);
        sum_ami += ami(a, b);
        sum_ari += ari(a, b);
    }
    const double mean_ami = sum_ami / 100.0, mean_ari = sum_ari / 100.0;
    ok &= std::abs(mean_ami) < 0.05 && std::abs(mean_ari) < 0.05;

    const double dt = seconds_since(t0);
    ok &= dt < 60.0;
    return {ok, format("assignment worst %.1e, null AMI %.3f ARI %.3f, %.1fs", worst_acc, mean_ami,
                       mean_ari, dt)};
}

// ---- criterion 6: loss-weight schedule conformance -----------------------

double reference_weight(ScheduleKind kind, std::size_t heads, std::size_t h, double p) {
    const std::size_t final = heads - 1;
    switch (kind) {
        case ScheduleKind::constant:
            return 1.0;
        case ScheduleKind::uniform_decay:
            return h == final ? 1.0 : 1.0 - p;
        case ScheduleKind::staggered_decay: {
            if (h == final) return 1.0;
            const double hf = static_cast<double>(h);
            const double span = static_cast<double>(heads - 1);
            const double start = 0.5 * hf / span;
            const double end = 0.5 * (hf + 1.0) / span + 0.5 * hf / span;
            if (p <= start) return 1.0;
            if (p >= end) return 0.0;
            return (end - p) / (end - start);
        }
        case ScheduleKind::staggered_step:
            if (h == final) return 1.0;
            return p < static_cast<double>(h + 1) / static_cast<double>(heads) ? 1.0 : 0.0;
        case ScheduleKind::one_hot: {
            const auto active = std::min(
                static_cast<std::size_t>(p * static_cast<double>(heads)), heads - 1);
            return h == active ? 1.0 : 0.0;
        }
    }
    return -1.0;
}

Outcome criterion_schedules() {
    RngStream rng(606);
    double worst = 0.0;
    int points = 0;
    for (ScheduleKind kind :
         {ScheduleKind::constant, ScheduleKind::uniform_decay, ScheduleKind::staggered_decay,
          ScheduleKind::staggered_step, ScheduleKind::one_hot}) {
        for (int i = 0; i < 50; ++i) {
            const std::size_t heads = 2 + rng.next_below(5);
            const std::size_t h = rng.next_below(heads);
            const double p = rng.next_double();
            const ScheduleSpec spec{kind, heads};
            worst = std::max(worst,
                             std::abs(schedule_weight(spec, h, p) - reference_weight(kind, heads, h, p)));
            ++points;
        }
    }
    // the two pinned endpoint cases
    const ScheduleSpec hot{ScheduleKind::one_hot, 4};
    worst = std::max(worst, std::abs(schedule_weight(hot, 0, 0.1) - 1.0));
    worst = std::max(worst, std::abs(schedule_weight(hot, 2, 0.1) - 0.0));
    const ScheduleSpec step{ScheduleKind::staggered_step, 4};
    for (std::size_t h = 0; h < 3; ++h)
        worst = std::max(worst, std::abs(schedule_weight(step, h, 0.9) - 0.0));
    worst = std::max(worst, std::abs(schedule_weight(step, 3, 0.9) - 1.0));
    return {worst <= 1e-12, format("%d sampled points x 5 kinds, worst %.2e", points / 5, worst)};
}

// ---- criterion 7: relative improvement -----------------------------------

Outcome criterion_relative_improvement() {
    bool ok = true;
    ok &= relative_improvement({1, 2, 3, 4}) == std::vector<double>{1.0, 1.0, 1.0};
    ok &= relative_improvement({0, 5, 5}) == std::vector<double>{1.0, 0.0};
    ok &= relative_improvement({10, 12, 11, 15}) == std::vector<double>{0.5, -0.25, 1.0};

    RngStream rng(707);
    int checked = 0;
    while (checked < 30) {
        std::vector<double> curve(2 + rng.next_below(9));
        for (auto& v : curve) v = rng.next_gaussian();
        bool constant = true;
        for (std::size_t i = 1; i < curve.size(); ++i) constant &= curve[i] == curve[0];
        if (constant) continue;
        const auto out = relative_improvement(curve);
        double peak = 0.0;
        for (double v : out) peak = std::max(peak, std::abs(v));
        ok &= peak == 1.0;
        ++checked;
    }
    return {ok, format("3 worked examples, %d random non-constant inputs", checked)};
}

// ---- criteria 8 and 9: desk-scale central claim and head-count ablation --

struct ClaimRun {
    double unrefined_final = 0.0;
    double unrefined_best = 0.0;
    double refined_final = 0.0;
    double acc_unrefined = 0.0, acc_refined = 0.0;
    double sil_unrefined = 0.0, sil_refined = 0.0;
};

ExperimentConfig claim_config(std::uint64_t seed, const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.out_dir = out_dir;
    cfg.stages = {"pretrain", "init_heads", "refine", "probe", "cluster"};

    cfg.data.layout = BlobLayout::image_grid;
    cfg.data.n_classes = 8;
    cfg.data.n_per_class = 200;
    cfg.data.grid = 16;
    cfg.data.patch = 4;
    cfg.data.spread = 1.0;
    cfg.data.noise = 0.3;
    cfg.data.seed = 1; // fixed benchmark draw; training seeds vary

    cfg.encoder.depth = 8;
    cfg.encoder.width = 32;
    cfg.encoder.tokens = 16;
    cfg.encoder.token_dim = 16;
    cfg.encoder.mlp_hidden = 128;

    cfg.mim.epochs = 12;
    cfg.mim.batch = 64;
    cfg.mim.lr = 1e-3;
    cfg.mim.probe_epochs = 5;

    cfg.refine.epochs = 14;
    cfg.refine.batch = 64;
    cfg.refine.peak_lr = 3.5e-3;
    cfg.refine.warmup_epochs = 1;
    cfg.refine.temperature = 0.15;
    cfg.refine.swap_negatives = true;
    cfg.refine.queue.capacity = 4096;
    cfg.refine.queue.top_k = 20;
    cfg.refine.init_epochs = 5;
    cfg.refine.init_lr = 1e-3;
    cfg.refine.views.n_local = 2;
    cfg.refine.views.jitter_sd = 0.3; // matched to the dataset noise

    cfg.probe.knn.k = 20;
    cfg.probe.linear_epochs = 40;
    cfg.probe.low_shot = {1, 5};

    cfg.cluster.kmeans.k = 8;
    cfg.cluster.kmeans.minibatch = 64;
    cfg.cluster.kmeans.iterations = 30;
    cfg.cluster.kmeans.restarts = 50;

    cfg.validate();
    return cfg;
}

ClaimRun extract_claim(const json& report) {
    ClaimRun r;
    const json& probe = report.at("stages").at("probe");
    r.unrefined_final = probe.at("unrefined").at("final_knn").get<double>();
    const auto curve = probe.at("unrefined").at("per_block_knn").get<std::vector<double>>();
    r.unrefined_best = *std::max_element(curve.begin(), curve.end());
    r.refined_final = probe.at("refined").at("final_knn").get<double>();
    const json& cluster = report.at("stages").at("cluster");
    r.acc_unrefined = cluster.at("unrefined").at("ACC").get<double>();
    r.acc_refined = cluster.at("refined").at("ACC").get<double>();
    r.sil_unrefined = cluster.at("unrefined").at("SIL").get<double>();
    r.sil_refined = cluster.at("refined").at("SIL").get<double>();
    return r;
}

std::vector<ClaimRun> g_claim_runs; // shared between criteria 8 and 9
fs::path g_claim_base;

Outcome criterion_central_claim() {
    const auto t0 = Clock::now();
    g_claim_base = fs::temp_directory_path() / "mrf_acceptance";
    fs::remove_all(g_claim_base);
    fs::create_directories(g_claim_base);

    g_claim_runs.clear();
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const ExperimentConfig cfg =
            claim_config(seed, (g_claim_base / ("claim_seed" + std::to_string(seed))).string());
        g_claim_runs.push_back(extract_claim(run_experiment(cfg)));
    }

    double u_final = 0.0, u_best = 0.0, r_final = 0.0;
    double acc_u = 0.0, acc_r = 0.0, sil_u = 0.0, sil_r = 0.0;
    for (const ClaimRun& r : g_claim_runs) {
        u_final += r.unrefined_final / 3.0;
        u_best += r.unrefined_best / 3.0;
        r_final += r.refined_final / 3.0;
        acc_u += r.acc_unrefined / 3.0;
        acc_r += r.acc_refined / 3.0;
        sil_u += r.sil_unrefined / 3.0;
        sil_r += r.sil_refined / 3.0;
    }

    const bool gain = r_final >= u_final + 5.0;
    const bool recovers = r_final >= u_best - 1.0;
    const bool clusters = acc_r > acc_u && sil_r > sil_u;
    return {gain && recovers && clusters,
            format("knn %.1f->%.1f (best block %.1f), ACC %.1f->%.1f, SIL %.1f->%.1f, %.0fs",
                   u_final, r_final, u_best, acc_u, acc_r, sil_u, sil_r, seconds_since(t0))};
}

Outcome criterion_head_count_ablation() {
    const auto t0 = Clock::now();
    if (g_claim_runs.size() != 3)
        return {false, "needs the central-claim runs (criterion 8) first"};

    double multi = 0.0, single = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ExperimentConfig cfg =
            claim_config(seed, (g_claim_base / ("single_seed" + std::to_string(seed))).string());
        cfg.heads.attach = {cfg.encoder.depth}; // final block only
        fs::create_directories(cfg.out_dir);
        fs::copy_file(g_claim_base / ("claim_seed" + std::to_string(seed)) / "pretrain.mrfc",
                      fs::path(cfg.out_dir) / "pretrain.mrfc",
                      fs::copy_options::overwrite_existing);
        const json report = run_stages(cfg, {"init_heads", "refine", "probe"});
        single += report.at("stages").at("probe").at("refined").at("final_knn").get<double>() / 3.0;
        multi += g_claim_runs[seed - 1].refined_final / 3.0;
    }
    return {multi >= single - 1.0,
            format("multi-head %.1f vs single-head %.1f, %.0fs", multi, single, seconds_since(t0))};
}

// ---- criterion 10: byte-level determinism --------------------------------

ExperimentConfig tiny_pipeline_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.seed = 7;
    cfg.out_dir = out_dir;

    cfg.data.layout = BlobLayout::vector_mode;
    cfg.data.n_classes = 3;
    cfg.data.n_per_class = 20;
    cfg.data.dim = 16;
    cfg.data.spread = 3.0;
    cfg.data.noise = 0.3;
    cfg.data.seed = 5;

    cfg.encoder.depth = 4;
    cfg.encoder.width = 16;
    cfg.encoder.tokens = 8;
    cfg.encoder.token_dim = 2;
    cfg.encoder.mlp_hidden = 24;

    cfg.mim.epochs = 3;
    cfg.mim.batch = 10;
    cfg.mim.probe_epochs = 2;

    cfg.heads.projector_dims = {16, 24, 24, 12};
    cfg.heads.predictor_dims = {12, 16, 12};

    cfg.refine.epochs = 2;
    cfg.refine.batch = 10;
    cfg.refine.queue.capacity = 128;
    cfg.refine.queue.top_k = 3;
    cfg.refine.init_epochs = 2;
    cfg.refine.views.n_local = 2;
    cfg.refine.views.jitter_sd = 0.05;

    cfg.probe.knn.k = 5;
    cfg.probe.linear_epochs = 30;
    cfg.probe.low_shot = {1, 2};

    cfg.cluster.kmeans.k = 3;
    cfg.cluster.kmeans.minibatch = 16;
    cfg.cluster.kmeans.iterations = 10;
    cfg.cluster.kmeans.restarts = 5;

    cfg.validate();
    return cfg;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion_determinism() {
    const fs::path dir = fs::temp_directory_path() / "mrf_acceptance" / "determinism";
    fs::remove_all(dir);
    const ExperimentConfig cfg = tiny_pipeline_config(dir.string());

    run_experiment(cfg);
    const std::string report1 = file_bytes(dir / "report.json");
    const std::string ckpt1 = file_bytes(dir / "refine.mrfc");
    run_experiment(cfg);
    const bool same_report = file_bytes(dir / "report.json") == report1;
    const bool same_ckpt = file_bytes(dir / "refine.mrfc") == ckpt1;
    return {same_report && same_ckpt && !report1.empty(),
            format("report %s, checkpoint %s across two identical runs",
                   same_report ? "identical" : "differs", same_ckpt ? "identical" : "differs")};
}

} // namespace

int main(int argc, char** argv) {
    struct Entry {
        int id;
        const char* name;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {1, "gradient exactness", criterion_gradients},
        {2, "contrastive analytic values", criterion_analytic_values},
        {3, "negative-swap consistency", criterion_nnclr_equivalence},
        {4, "support queue replay", criterion_queue_replay},
        {5, "cluster metric oracles", criterion_cluster_oracles},
        {6, "schedule conformance", criterion_schedules},
        {7, "relative improvement", criterion_relative_improvement},
        {8, "refinement central claim", criterion_central_claim},
        {9, "head－count ablation", criterion_head_count_ablation},
        {10, "byte-level determinism", criterion_determinism},
    };

    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    bool all_ok = true;
    for (const Entry& e : entries) {
        if (!selected.empty() && !selected.count(e.id)) continue;
        Outcome out;
        try {
            out = e.fn();
        } catch (const std::exception& ex) {
            out = {false, std::string("exception: ") + ex.what()};
        }
        all_ok &= out.pass;
        std::printf("criterion %2d  %-28s %s  (%s)\n", e.id, e.name, out.pass ? "PASS" : "FAIL",
                    out.detail.c_str());
        std::fflush(stdout);
    }
    return all_ok ? 0 : 1;
}
