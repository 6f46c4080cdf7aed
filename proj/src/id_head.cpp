#include <algorithm>
#include <cmath>

#include "mrf/error.hpp"
#include "mrf/id_head.hpp"
#include "mrf/kernels.hpp"
#include "mrf/numerics.hpp"

namespace mrf {

void HeadConfig::validate() const {
    if (projector_dims.size() != 4) raise(Err::ConfigError, "projector needs 4 dims (3 layers)");
    if (predictor_dims.size() != 3) raise(Err::ConfigError, "predictor needs 3 dims (2 layers)");
    if (projector_dims[0] != input_dim) raise(Err::ConfigError, "projector input dim mismatch");
    if (predictor_dims[0] != projector_dims[3] || predictor_dims[2] != projector_dims[3])
        raise(Err::ConfigError, "predictor must map bottleneck to bottleneck");
    for (auto d : projector_dims)
        if (d < 1) raise(Err::ConfigError, "projector dim < 1");
    for (auto d : predictor_dims)
        if (d < 1) raise(Err::ConfigError, "predictor dim < 1");
    if (bn_epsilon <= 0.0) raise(Err::ConfigError, "bn epsilon must be positive");
    if (bn_momentum <= 0.0 || bn_momentum > 1.0) raise(Err::ConfigError, "bn momentum in (0,1]");
}

HeadConfig HeadConfig::desk(std::size_t input_dim) {
    HeadConfig c;
    c.input_dim = input_dim;
    c.projector_dims = {input_dim, 256, 256, 64};
    c.predictor_dims = {64, 512, 64};
    return c;
}

HeadConfig HeadConfig::paper(std::size_t input_dim) {
    HeadConfig c;
    c.input_dim = input_dim;
    c.projector_dims = {input_dim, 2048, 2048, 256};
    c.predictor_dims = {256, 4096, 256};
    return c;
}

HeadParams HeadParams::init(const HeadConfig& cfg, RngStream& rng) {
    cfg.validate();
    HeadParams p;
    p.config = cfg;
    auto add_stage = [&](std::size_t in, std::size_t out, bool gelu) {
        HeadLayer L;
        L.W = Matrix(out, in);
        const double sd = std::sqrt(2.0 / static_cast<double>(in));
        for (auto& w : L.W.data) w = sd * rng.next_gaussian();
        L.b.assign(out, 0.0);
        L.gamma.assign(out, 1.0);
        L.beta.assign(out, 0.0);
        L.run_mean.assign(out, 0.0);
        L.run_var.assign(out, 1.0);
        L.gelu = gelu;
        p.layers.push_back(std::move(L));
    };
    add_stage(cfg.projector_dims[0], cfg.projector_dims[1], true);
    add_stage(cfg.projector_dims[1], cfg.projector_dims[2], true);
    add_stage(cfg.projector_dims[2], cfg.projector_dims[3], false);
    add_stage(cfg.predictor_dims[0], cfg.predictor_dims[1], true);
    add_stage(cfg.predictor_dims[1], cfg.predictor_dims[2], false);
    return p;
}

std::vector<std::span<double>> HeadParams::trainable_views() {
    std::vector<std::span<double>> v;
    for (auto& L : layers) {
        v.emplace_back(L.W.data);
        v.emplace_back(L.b);
        v.emplace_back(L.gamma);
        v.emplace_back(L.beta);
    }
    return v;
}

std::vector<std::span<double>> HeadGrads::views() {
    std::vector<std::span<double>> v;
    for (auto& L : layers) {
        v.emplace_back(L.W.data);
        v.emplace_back(L.b);
        v.emplace_back(L.gamma);
        v.emplace_back(L.beta);
    }
    return v;
}

void HeadGrads::accumulate(const HeadGrads& other, double scale) {
    for (std::size_t s = 0; s < layers.size(); ++s) {
        auto& a = layers[s];
        const auto& b = other.layers[s];
        kernels::axpy(scale, b.W.data.data(), a.W.data.data(), a.W.data.size());
        kernels::axpy(scale, b.b.data(), a.b.data(), a.b.size());
        kernels::axpy(scale, b.gamma.data(), a.gamma.data(), a.gamma.size());
        kernels::axpy(scale, b.beta.data(), a.beta.data(), a.beta.size());
    }
}

namespace {

// rows with vanishing norm pass through as zeros (an untrained head can emit
// exact zeros; callers that feed the contrastive loss always train first)
Matrix normalize_rows_lenient(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double norm = std::sqrt(kernels::sumsq(m.row(i), m.cols));
        if (norm >= 1e-12) kernels::scal(1.0 / norm, out.row(i), m.cols);
    }
    return out;
}

void add_bias_rows(Matrix& m, const std::vector<double>& b) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += b[j];
    }
}

} // namespace

HeadForward head_forward(HeadParams& params, const Matrix& x, HeadMode mode) {
    if (params.layers.empty()) raise(Err::ConfigError, "head has no layers");
    if (x.cols != params.layers.front().in_dim()) raise(Err::DimMismatch, "head input width");
    const std::size_t n = x.rows;
    const bool train = mode == HeadMode::train;
    if (train && n < 2) raise(Err::BatchTooSmall, "batch statistics need >= 2 rows");

    HeadForward out;
    out.cache.batch = n;
    out.cache.train = train;

    Matrix cur = x;
    for (std::size_t s = 0; s < params.layers.size(); ++s) {
        HeadLayer& L = params.layers[s];
        const std::size_t f = L.out_dim();

        LayerCache lc;
        if (train) lc.input = cur;

        Matrix pre(n, f);
        matmul_nt(cur, L.W, pre);
        add_bias_rows(pre, L.b);
        if (train) lc.preact = pre;

        Matrix act = pre;
        if (L.gelu) {
            for (auto& v : act.data) v = gelu(v);
            if (train) lc.postact = act;
        }

        if (!L.bn) {
            out.cache.layers.push_back(std::move(lc));
            cur = std::move(act);
            if (s == 2) out.proj_raw = cur;
            continue;
        }

        Matrix bn(n, f);
        if (train) {
            std::vector<double> mean(f, 0.0), var(f, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* r = act.row(i);
                for (std::size_t j = 0; j < f; ++j) mean[j] += r[j];
            }
            for (auto& m : mean) m /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* r = act.row(i);
                for (std::size_t j = 0; j < f; ++j) {
                    const double d = r[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for (auto& v : var) v /= static_cast<double>(n);

            lc.inv_std.resize(f);
            for (std::size_t j = 0; j < f; ++j)
                lc.inv_std[j] = 1.0 / std::sqrt(var[j] + params.config.bn_epsilon);

            lc.xhat = Matrix(n, f);
            for (std::size_t i = 0; i < n; ++i) {
                const double* r = act.row(i);
                double* xh = lc.xhat.row(i);
                double* o = bn.row(i);
                for (std::size_t j = 0; j < f; ++j) {
                    xh[j] = (r[j] - mean[j]) * lc.inv_std[j];
                    o[j] = L.gamma[j] * xh[j] + L.beta[j];
                }
            }
            const double mom = params.config.bn_momentum;
            for (std::size_t j = 0; j < f; ++j) {
                L.run_mean[j] = (1.0 - mom) * L.run_mean[j] + mom * mean[j];
                L.run_var[j] = (1.0 - mom) * L.run_var[j] + mom * var[j];
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                const double* r = act.row(i);
                double* o = bn.row(i);
                for (std::size_t j = 0; j < f; ++j) {
                    const double inv = 1.0 / std::sqrt(L.run_var[j] + params.config.bn_epsilon);
                    o[j] = L.gamma[j] * (r[j] - L.run_mean[j]) * inv + L.beta[j];
                }
            }
        }

        out.cache.layers.push_back(std::move(lc));
        cur = std::move(bn);
        if (s == 2) out.proj_raw = cur;
    }

    out.pred_raw = cur;
    out.proj_norm = normalize_rows_lenient(out.proj_raw);
    out.pred_norm = normalize_rows_lenient(out.pred_raw);
    return out;
}

HeadBackward head_backward(const HeadParams& params, const HeadCache& cache,
                           const Matrix& grad_pred_raw, const Matrix& grad_proj_raw) {
    if (!cache.train || cache.layers.size() != params.layers.size())
        raise(Err::StaleCache, "backward needs a train-mode cache");
    const std::size_t n = cache.batch;
    if (grad_pred_raw.rows != n || grad_pred_raw.cols != params.layers.back().out_dim())
        raise(Err::StaleCache, "output gradient shape");
    const bool has_proj_grad = grad_proj_raw.rows != 0;
    if (has_proj_grad &&
        (params.layers.size() != 5 || grad_proj_raw.rows != n ||
         grad_proj_raw.cols != params.layers[2].out_dim()))
        raise(Err::StaleCache, "projector gradient shape");

    HeadBackward out;
    out.grads.layers.resize(params.layers.size());

    Matrix up = grad_pred_raw;
    for (std::size_t si = params.layers.size(); si-- > 0;) {
        const HeadLayer& L = params.layers[si];
        const LayerCache& lc = cache.layers[si];
        const std::size_t f = L.out_dim();
        if (up.rows != n || up.cols != f) raise(Err::StaleCache, "layer gradient shape");

        LayerGrads& g = out.grads.layers[si];
        g.gamma.assign(f, 0.0);
        g.beta.assign(f, 0.0);

        Matrix dact;
        if (L.bn) {
            // batch-norm backward, batch-statistics path: every row
            // contributes to the mean and variance, so the Jacobian couples
            // all rows
            Matrix dxhat(n, f);
            for (std::size_t i = 0; i < n; ++i) {
                const double* u = up.row(i);
                const double* xh = lc.xhat.row(i);
                double* dx = dxhat.row(i);
                for (std::size_t j = 0; j < f; ++j) {
                    g.gamma[j] += u[j] * xh[j];
                    g.beta[j] += u[j];
                    dx[j] = u[j] * L.gamma[j];
                }
            }
            std::vector<double> sum_dx(f, 0.0), sum_dx_xh(f, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double* dx = dxhat.row(i);
                const double* xh = lc.xhat.row(i);
                for (std::size_t j = 0; j < f; ++j) {
                    sum_dx[j] += dx[j];
                    sum_dx_xh[j] += dx[j] * xh[j];
                }
            }
            dact = Matrix(n, f);
            const double invn = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* dx = dxhat.row(i);
                const double* xh = lc.xhat.row(i);
                double* da = dact.row(i);
                for (std::size_t j = 0; j < f; ++j)
                    da[j] = lc.inv_std[j] * invn *
                            (static_cast<double>(n) * dx[j] - sum_dx[j] - xh[j] * sum_dx_xh[j]);
            }
        } else {
            dact = up;
        }

        Matrix dpre = std::move(dact);
        if (L.gelu) {
            for (std::size_t i = 0; i < n; ++i) {
                double* dp = dpre.row(i);
                const double* pa = lc.preact.row(i);
                for (std::size_t j = 0; j < f; ++j) dp[j] *= gelu_grad(pa[j]);
            }
        }

        g.W = Matrix(f, L.in_dim());
        matmul_tn(dpre, lc.input, g.W);
        g.b.assign(f, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* dp = dpre.row(i);
            for (std::size_t j = 0; j < f; ++j) g.b[j] += dp[j];
        }

        Matrix dinput(n, L.in_dim());
        matmul_nn(dpre, L.W, dinput);
        up = std::move(dinput);

        // the projector output feeds both the predictor and the loss directly
        if (si == 3 && has_proj_grad) {
            for (std::size_t t = 0; t < up.data.size(); ++t)
                up.data[t] += grad_proj_raw.data[t];
        }
    }

    out.grad_input = std::move(up);
    return out;
}

void EnsembleConfig::validate(std::size_t encoder_depth) const {
    if (attach_indices.empty()) raise(Err::ConfigError, "no attach indices");
    if (attach_indices.size() != head_configs.size())
        raise(Err::ConfigError, "attach indices vs head configs length");
    for (std::size_t i = 0; i < attach_indices.size(); ++i) {
        if (attach_indices[i] < 1 || attach_indices[i] > encoder_depth)
            raise(Err::ConfigError, "attach index out of range");
        if (i > 0 && attach_indices[i] <= attach_indices[i - 1])
            raise(Err::ConfigError, "attach indices must be strictly increasing");
    }
}

EnsembleConfig EnsembleConfig::last_third(std::size_t encoder_depth, std::size_t input_dim) {
    EnsembleConfig e;
    const std::size_t count = (encoder_depth + 2) / 3;
    for (std::size_t i = encoder_depth - count + 1; i <= encoder_depth; ++i) {
        e.attach_indices.push_back(i);
        e.head_configs.push_back(HeadConfig::desk(input_dim));
    }
    return e;
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
    if (name == "constant") return ScheduleKind::constant;
    if (name == "uniform_decay") return ScheduleKind::uniform_decay;
    if (name == "staggered_decay") return ScheduleKind::staggered_decay;
    if (name == "staggered_step") return ScheduleKind::staggered_step;
    if (name == "one_hot") return ScheduleKind::one_hot;
    raise(Err::ConfigError, "unknown schedule kind: " + name);
}

std::string schedule_kind_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::constant: return "constant";
        case ScheduleKind::uniform_decay: return "uniform_decay";
        case ScheduleKind::staggered_decay: return "staggered_decay";
        case ScheduleKind::staggered_step: return "staggered_step";
        case ScheduleKind::one_hot: return "one_hot";
    }
    raise(Err::ConfigError, "invalid schedule kind");
}

double schedule_weight(const ScheduleSpec& spec, std::size_t head_index, double progress) {
    if (!(progress >= 0.0 && progress <= 1.0))
        raise(Err::BadProgress, "progress outside [0,1]");
    const std::size_t H = spec.head_count;
    if (H < 1) raise(Err::ConfigError, "head count must be >= 1");
    if (head_index >= H) raise(Err::BadIndex, "head index out of range");
    const bool final_head = head_index + 1 == H;

    switch (spec.kind) {
        case ScheduleKind::constant:
            return 1.0;
        case ScheduleKind::uniform_decay:
            return final_head ? 1.0 : 1.0 - progress;
        case ScheduleKind::staggered_decay: {
            if (final_head) return 1.0;
            const double denom = static_cast<double>(H - 1);
            const double start = 0.5 * static_cast<double>(head_index) / denom;
            const double end = 0.5 * (2.0 * static_cast<double>(head_index) + 1.0) / denom;
            if (progress <= start) return 1.0;
            if (progress >= end) return 0.0;
            return (end - progress) / (end - start);
        }
        case ScheduleKind::staggered_step: {
            if (final_head) return 1.0;
            const double threshold =
                static_cast<double>(head_index + 1) / static_cast<double>(H);
            return progress < threshold ? 1.0 : 0.0;
        }
        case ScheduleKind::one_hot: {
            const auto seg = std::min<std::size_t>(
                H - 1, static_cast<std::size_t>(progress * static_cast<double>(H)));
            return seg == head_index ? 1.0 : 0.0;
        }
    }
    raise(Err::ConfigError, "invalid schedule kind");
}

} // namespace mrf
