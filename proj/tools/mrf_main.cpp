#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mrf/experiment.hpp"
#include "mrf/id_head.hpp"
#include "mrf/nna_loss.hpp"
#include "mrf/numerics.hpp"
#include "mrf/probe_eval.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> stages;
};

mrf::ExperimentConfig resolve_config(const CommonArgs& args) {
    mrf::ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = mrf::load_experiment_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.out_dir = *args.out;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file (JSON)");
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out, "override the output directory");
}

int run_named_stages(const CommonArgs& args, const std::vector<std::string>& stages) {
    const mrf::ExperimentConfig cfg = resolve_config(args);
    mrf::run_stages(cfg, stages);
    std::printf("wrote %s/report.json\n", cfg.out_dir.c_str());
    return 0;
}

// Re-derives every analytic gradient against central differences; any
// mismatch beyond tolerance fails the run.
bool gradcheck_one(const char* name, std::span<const double> analytic,
                   std::span<const double> numeric) {
    double worst = 0.0;
    bool ok = analytic.size() == numeric.size();
    for (std::size_t i = 0; ok && i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double tol = 1e-8 + 1e-5 * std::abs(numeric[i]);
        worst = std::max(worst, diff);
        if (diff > tol) ok = false;
    }
    std::printf("%-28s %s   worst |analytic - fd| = %.3g\n", name, ok ? "ok  " : "FAIL", worst);
    return ok;
}

int run_gradcheck() {
    using namespace mrf;
    bool all_ok = true;
    RngStream rng(20240);

    {
        // contrastive loss wrt anchors
        const std::size_t n = 5, d = 8;
        ContrastiveBatch batch;
        auto unit_rows = [&](Matrix m) {
            for (std::size_t i = 0; i < m.rows; ++i) {
                double sq = 0.0;
                for (std::size_t j = 0; j < m.cols; ++j) sq += m(i, j) * m(i, j);
                const double inv = 1.0 / std::sqrt(sq);
                for (std::size_t j = 0; j < m.cols; ++j) m(i, j) *= inv;
            }
            return m;
        };
        Matrix raw(n, d);
        for (auto& v : raw.data) v = rng.next_gaussian();
        batch.anchors = unit_rows(raw);
        for (auto& v : raw.data) v = rng.next_gaussian();
        batch.positives = unit_rows(raw);
        for (auto& v : raw.data) v = rng.next_gaussian();
        batch.negatives = unit_rows(raw);
        batch.exclude.assign(n * n, 0);
        for (std::size_t i = 0; i < n; ++i) batch.exclude[i * n + i] = 1;
        batch.temperature = 0.2;

        const LossOutput out = nna_loss(batch);
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> x) {
                ContrastiveBatch b = batch;
                std::copy(x.begin(), x.end(), b.anchors.data.begin());
                return nna_loss(b).loss;
            },
            batch.anchors.data, 1e-6);
        all_ok &= gradcheck_one("nna_loss/anchors", out.grad_anchors.data, numeric);
    }

    {
        // head stack wrt input, through batch-norm statistics
        HeadConfig hc;
        hc.input_dim = 6;
        hc.projector_dims = {6, 10, 10, 4};
        hc.predictor_dims = {4, 8, 4};
        HeadParams head = HeadParams::init(hc, rng);
        Matrix x(4, 6);
        for (auto& v : x.data) v = rng.next_gaussian();
        Matrix grad_pred(4, 4, 0.0);
        for (auto& v : grad_pred.data) v = rng.next_gaussian();

        HeadParams work = head;
        const HeadForward fwd = head_forward(work, x, HeadMode::train);
        const HeadBackward back = head_backward(work, fwd.cache, grad_pred, Matrix());
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> flat) {
                HeadParams fresh = head;
                Matrix xi(4, 6);
                std::copy(flat.begin(), flat.end(), xi.data.begin());
                const HeadForward f = head_forward(fresh, xi, HeadMode::train);
                double s = 0.0;
                for (std::size_t i = 0; i < f.pred_raw.data.size(); ++i)
                    s += grad_pred.data[i] * f.pred_raw.data[i];
                return s;
            },
            x.data, 1e-6);
        all_ok &= gradcheck_one("head_stack/input", back.grad_input.data, numeric);
    }

    {
        // logistic probe wrt weights
        const std::size_t classes = 3, dim = 5, n = 12;
        Matrix x(n, dim);
        for (auto& v : x.data) v = rng.next_gaussian();
        std::vector<std::int32_t> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::int32_t>(i % classes);
        LogisticModel model{Matrix(classes, dim), std::vector<double>(classes, 0.0)};
        for (auto& v : model.W.data) v = 0.1 * rng.next_gaussian();
        const LogisticGrads grads = logistic_loss_grad(model, x, y, 0.01);
        const auto numeric = finite_diff_grad(
            [&](std::span<const double> flat) {
                LogisticModel m = model;
                std::copy(flat.begin(), flat.end(), m.W.data.begin());
                return logistic_loss_grad(m, x, y, 0.01).loss;
            },
            model.W.data, 1e-6);
        all_ok &= gradcheck_one("logistic_probe/weights", grads.W.data, numeric);
    }

    {
        // encoder wrt parameters, summary-tap objective
        EncoderConfig cfg;
        cfg.depth = 3;
        cfg.width = 8;
        cfg.tokens = 4;
        cfg.token_dim = 4;
        cfg.mlp_hidden = 12;
        EncoderParams params = EncoderParams::init(cfg, rng);
        Matrix data(3, cfg.input_dim());
        for (auto& v : data.data) v = rng.next_gaussian();
        Matrix grad_tap(3, cfg.width);
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
                for (std::size_t i = 0; i < tap.data.size(); ++i)
                    s += grad_tap.data[i] * tap.data[i];
                return s;
            },
            flat, 1e-6);
        all_ok &= gradcheck_one("encoder/params", analytic, numeric);
    }

    std::printf("gradcheck: %s\n", all_ok ? "all gradients match" : "MISMATCH");
    return all_ok ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked-pretraining refinement pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    struct Verb {
        const char* name;
        const char* help;
        const char* stage; // nullptr = special handling
    };
    const Verb verbs[] = {
        {"pretrain", "masked-reconstruction pre-training", "pretrain"},
        {"analyze-blocks", "per-block probe diagnostics", "analyze_blocks"},
        {"init-heads", "head initialization against the frozen encoder", "init_heads"},
        {"refine", "contrastive refinement", "refine"},
        {"probe", "k-NN / linear / low-shot probes", "probe"},
        {"cluster", "k-means cluster battery", "cluster"},
    };
    for (const Verb& v : verbs) add_common(app.add_subcommand(v.name, v.help), args);

    CLI::App* report = app.add_subcommand("report", "run configured stages and merge the report");
    add_common(report, args);
    report->add_option("--stage", args.stages, "restrict to the named stages");

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
    (void)gradcheck;

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("gradcheck")) return run_gradcheck();
        if (app.got_subcommand("report")) {
            const mrf::ExperimentConfig cfg = resolve_config(args);
            if (args.stages.empty())
                mrf::run_experiment(cfg);
            else
                mrf::run_stages(cfg, args.stages);
            std::printf("wrote %s/report.json\n", cfg.out_dir.c_str());
            return 0;
        }
        for (const Verb& v : verbs)
            if (app.got_subcommand(v.name)) return run_named_stages(args, {v.stage});
        std::fprintf(stderr, "no subcommand\n");
        return 2;
    } catch (const mrf::Error& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return e.code == mrf::Err::ConfigError ? 2 : 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    }
}
