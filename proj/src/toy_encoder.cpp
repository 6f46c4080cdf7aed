#include <algorithm>
#include <cmath>
#include <numeric>

#include "mrf/error.hpp"
#include "mrf/kernels.hpp"
#include "mrf/numerics.hpp"
#include "mrf/optim.hpp"
#include "mrf/toy_encoder.hpp"

namespace mrf {

namespace {
constexpr double kLnEps = 1e-5;
}

BlockKind block_kind_from_name(const std::string& name) {
    if (name == "residual_mlp") return BlockKind::residual_mlp;
    if (name == "single_head_attention") return BlockKind::single_head_attention;
    raise(Err::ConfigError, "unknown block kind: " + name);
}

std::string block_kind_name(BlockKind kind) {
    return kind == BlockKind::residual_mlp ? "residual_mlp" : "single_head_attention";
}

void EncoderConfig::validate() const {
    if (depth < 3) raise(Err::ConfigError, "depth must be >= 3");
    if (width < 4) raise(Err::ConfigError, "width must be >= 4");
    if (tokens < 2) raise(Err::ConfigError, "need at least 2 tokens");
    if (token_dim < 1) raise(Err::ConfigError, "token dim must be >= 1");
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, RngStream& rng) {
    cfg.validate();
    EncoderParams p;
    p.config = cfg;
    const std::size_t d = cfg.width;

    p.embed_W = Matrix(d, cfg.token_dim);
    const double embed_sd = 1.0 / std::sqrt(static_cast<double>(cfg.token_dim));
    for (auto& w : p.embed_W.data) w = embed_sd * rng.next_gaussian();
    p.embed_b.assign(d, 0.0);

    p.cls.resize(d);
    for (auto& v : p.cls) v = 0.02 * rng.next_gaussian();
    p.pos = Matrix(cfg.tokens + 1, d);
    for (auto& v : p.pos.data) v = 0.02 * rng.next_gaussian();

    const std::size_t h = cfg.hidden();
    const double w1_sd = std::sqrt(2.0 / static_cast<double>(d));
    const double w2_sd = std::sqrt(2.0 / static_cast<double>(h));
    const double attn_sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        BlockParams blk;
        blk.ln1_g.assign(d, 1.0);
        blk.ln1_b.assign(d, 0.0);
        blk.W1 = Matrix(h, d);
        for (auto& w : blk.W1.data) w = w1_sd * rng.next_gaussian();
        blk.b1.assign(h, 0.0);
        blk.W2 = Matrix(d, h);
        for (auto& w : blk.W2.data) w = w2_sd * rng.next_gaussian();
        blk.b2.assign(d, 0.0);
        if (cfg.block_kind == BlockKind::single_head_attention) {
            blk.ln0_g.assign(d, 1.0);
            blk.ln0_b.assign(d, 0.0);
            for (Matrix* m : {&blk.Wq, &blk.Wk, &blk.Wv, &blk.Wo}) {
                *m = Matrix(d, d);
                for (auto& w : m->data) w = attn_sd * rng.next_gaussian();
            }
            blk.bq.assign(d, 0.0);
            blk.bk.assign(d, 0.0);
            blk.bv.assign(d, 0.0);
            blk.bo.assign(d, 0.0);
        }
        p.blocks.push_back(std::move(blk));
    }
    return p;
}

namespace {

void collect_block_views(BlockParams& b, std::vector<std::span<double>>& out) {
    out.emplace_back(b.ln1_g);
    out.emplace_back(b.ln1_b);
    out.emplace_back(b.W1.data);
    out.emplace_back(b.b1);
    out.emplace_back(b.W2.data);
    out.emplace_back(b.b2);
    out.emplace_back(b.ln0_g);
    out.emplace_back(b.ln0_b);
    out.emplace_back(b.Wq.data);
    out.emplace_back(b.bq);
    out.emplace_back(b.Wk.data);
    out.emplace_back(b.bk);
    out.emplace_back(b.Wv.data);
    out.emplace_back(b.bv);
    out.emplace_back(b.Wo.data);
    out.emplace_back(b.bo);
}

} // namespace

std::vector<std::span<double>> EncoderParams::group_views(std::size_t group) {
    std::vector<std::span<double>> out;
    if (group == 0) {
        out.emplace_back(embed_W.data);
        out.emplace_back(embed_b);
        out.emplace_back(cls);
        out.emplace_back(pos.data);
    } else {
        if (group > blocks.size()) raise(Err::BadIndex, "block group out of range");
        collect_block_views(blocks[group - 1], out);
    }
    return out;
}

std::vector<std::span<double>> EncoderParams::trainable_views() {
    std::vector<std::span<double>> out;
    for (std::size_t g = 0; g <= blocks.size(); ++g)
        for (auto v : group_views(g)) out.push_back(v);
    return out;
}

std::size_t EncoderParams::param_count() const {
    std::size_t total = 0;
    for (auto v : const_cast<EncoderParams*>(this)->trainable_views()) total += v.size();
    return total;
}

EncoderGrads zero_like(const EncoderParams& params) {
    EncoderGrads g = params;
    for (auto v : g.trainable_views()) std::fill(v.begin(), v.end(), 0.0);
    return g;
}

namespace {

// ---- layer norm over the feature axis ----

void ln_forward(const Matrix& x, const std::vector<double>& gamma,
                const std::vector<double>& beta, Matrix& out, Matrix& xhat,
                std::vector<double>& inv_std) {
    const std::size_t m = x.rows, d = x.cols;
    out = Matrix(m, d);
    xhat = Matrix(m, d);
    inv_std.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* r = x.row(i);
        const double mean = kernels::sum(r, d) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = r[j] - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        inv_std[i] = inv;
        double* xh = xhat.row(i);
        double* o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (r[j] - mean) * inv;
            o[j] = gamma[j] * xh[j] + beta[j];
        }
    }
}

// dy is the gradient at the LN output; returns gradient at the LN input and
// accumulates dgamma/dbeta
Matrix ln_backward(const Matrix& dy, const Matrix& xhat, const std::vector<double>& inv_std,
                   const std::vector<double>& gamma, std::vector<double>& dgamma,
                   std::vector<double>& dbeta) {
    const std::size_t m = dy.rows, d = dy.cols;
    Matrix dx(m, d);
    for (std::size_t i = 0; i < m; ++i) {
        const double* g = dy.row(i);
        const double* xh = xhat.row(i);
        double* o = dx.row(i);
        double sum_du = 0.0, sum_du_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            const double du = g[j] * gamma[j];
            sum_du += du;
            sum_du_xh += du * xh[j];
        }
        const double inv = inv_std[i];
        const double invd = 1.0 / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double du = g[j] * gamma[j];
            o[j] = inv * (du - invd * sum_du - xh[j] * invd * sum_du_xh);
        }
    }
    return dx;
}

void add_bias_rows(Matrix& m, const std::vector<double>& b) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += b[j];
    }
}

void colsum_into(const Matrix& m, std::vector<double>& out) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) out[j] += r[j];
    }
}

// ---- one encoder block ----

Matrix block_forward(const BlockParams& blk, BlockKind kind, const Matrix& x,
                     std::size_t samples, std::size_t seq, BlockCache* cache) {
    const std::size_t d = x.cols;
    Matrix cur = x;
    BlockCache local;
    BlockCache& c = cache ? *cache : local;
    if (cache) c.input = x;

    if (kind == BlockKind::single_head_attention) {
        Matrix u0;
        ln_forward(cur, blk.ln0_g, blk.ln0_b, u0, c.a_xhat, c.a_inv_std);
        Matrix q(cur.rows, d), k(cur.rows, d), vv(cur.rows, d);
        matmul_nt(u0, blk.Wq, q);
        add_bias_rows(q, blk.bq);
        matmul_nt(u0, blk.Wk, k);
        add_bias_rows(k, blk.bk);
        matmul_nt(u0, blk.Wv, vv);
        add_bias_rows(vv, blk.bv);

        Matrix attn(cur.rows, seq);
        Matrix ctx(cur.rows, d);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        std::vector<double> logits(seq);
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t base = s * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                for (std::size_t j = 0; j < seq; ++j)
                    logits[j] = scale * kernels::dot(q.row(base + i), k.row(base + j), d);
                const double lse = log_sum_exp(logits);
                double* arow = attn.row(base + i);
                for (std::size_t j = 0; j < seq; ++j) arow[j] = std::exp(logits[j] - lse);
                double* crow = ctx.row(base + i);
                for (std::size_t j = 0; j < seq; ++j)
                    kernels::axpy(arow[j], vv.row(base + j), crow, d);
            }
        }
        Matrix y(cur.rows, d);
        matmul_nt(ctx, blk.Wo, y);
        add_bias_rows(y, blk.bo);
        for (std::size_t t = 0; t < cur.data.size(); ++t) cur.data[t] += y.data[t];
        if (cache) {
            c.u0 = std::move(u0);
            c.q = std::move(q);
            c.k = std::move(k);
            c.vv = std::move(vv);
            c.attn = std::move(attn);
            c.ctx = std::move(ctx);
            c.x_mid = cur;
        }
    }

    // MLP sublayer; the residual_mlp kind mixes the token mean into each row
    Matrix u;
    ln_forward(cur, blk.ln1_g, blk.ln1_b, u, c.u_xhat, c.u_inv_std);
    Matrix v = std::move(u);
    if (kind == BlockKind::residual_mlp) {
        std::vector<double> mean(d);
        for (std::size_t s = 0; s < samples; ++s) {
            std::fill(mean.begin(), mean.end(), 0.0);
            const std::size_t base = s * seq;
            for (std::size_t i = 0; i < seq; ++i)
                kernels::axpy(1.0 / static_cast<double>(seq), v.row(base + i), mean.data(), d);
            for (std::size_t i = 0; i < seq; ++i)
                kernels::axpy(1.0, mean.data(), v.row(base + i), d);
        }
    }
    Matrix pre1(cur.rows, blk.W1.rows);
    matmul_nt(v, blk.W1, pre1);
    add_bias_rows(pre1, blk.b1);
    Matrix h = pre1;
    for (auto& t : h.data) t = gelu(t);
    Matrix out(cur.rows, d);
    matmul_nt(h, blk.W2, out);
    add_bias_rows(out, blk.b2);
    for (std::size_t t = 0; t < cur.data.size(); ++t) cur.data[t] += out.data[t];

    if (cache) {
        c.v = std::move(v);
        c.pre1 = std::move(pre1);
        c.h = std::move(h);
    }
    return cur;
}

// dX is the gradient at the block output; returns the gradient at the input
Matrix block_backward(const BlockParams& blk, BlockKind kind, const BlockCache& c,
                      std::size_t samples, std::size_t seq, const Matrix& dX,
                      BlockParams& g) {
    const std::size_t d = dX.cols;

    // MLP sublayer backward
    Matrix dout = dX;
    Matrix dh(dX.rows, blk.W1.rows);
    matmul_nn(dout, blk.W2, dh);
    matmul_tn(dout, c.h, g.W2, true);
    colsum_into(dout, g.b2);
    Matrix dpre1 = std::move(dh);
    for (std::size_t t = 0; t < dpre1.data.size(); ++t)
        dpre1.data[t] *= gelu_grad(c.pre1.data[t]);
    matmul_tn(dpre1, c.v, g.W1, true);
    colsum_into(dpre1, g.b1);
    Matrix dv(dX.rows, d);
    matmul_nn(dpre1, blk.W1, dv);

    if (kind == BlockKind::residual_mlp) {
        std::vector<double> sum(d);
        for (std::size_t s = 0; s < samples; ++s) {
            std::fill(sum.begin(), sum.end(), 0.0);
            const std::size_t base = s * seq;
            for (std::size_t i = 0; i < seq; ++i)
                kernels::axpy(1.0, dv.row(base + i), sum.data(), d);
            for (std::size_t i = 0; i < seq; ++i)
                kernels::axpy(1.0 / static_cast<double>(seq), sum.data(), dv.row(base + i), d);
        }
    }
    Matrix dmid = ln_backward(dv, c.u_xhat, c.u_inv_std, blk.ln1_g, g.ln1_g, g.ln1_b);
    for (std::size_t t = 0; t < dmid.data.size(); ++t) dmid.data[t] += dX.data[t];

    if (kind == BlockKind::residual_mlp) return dmid;

    // attention sublayer backward; dmid is the gradient at x_mid
    Matrix dy = dmid;
    Matrix dctx(dX.rows, d);
    matmul_nn(dy, blk.Wo, dctx);
    matmul_tn(dy, c.ctx, g.Wo, true);
    colsum_into(dy, g.bo);

    Matrix dq(dX.rows, d), dk(dX.rows, d), dvv(dX.rows, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> dA(seq), dL(seq);
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t base = s * seq;
        for (std::size_t i = 0; i < seq; ++i) {
            const double* arow = c.attn.row(base + i);
            const double* dc = dctx.row(base + i);
            double inner = 0.0;
            for (std::size_t j = 0; j < seq; ++j) {
                dA[j] = kernels::dot(dc, c.vv.row(base + j), d);
                kernels::axpy(arow[j], dc, dvv.row(base + j), d);
                inner += dA[j] * arow[j];
            }
            for (std::size_t j = 0; j < seq; ++j) {
                dL[j] = arow[j] * (dA[j] - inner);
                kernels::axpy(scale * dL[j], c.k.row(base + j), dq.row(base + i), d);
                kernels::axpy(scale * dL[j], c.q.row(base + i), dk.row(base + j), d);
            }
        }
    }

    Matrix du0(dX.rows, d);
    matmul_nn(dq, blk.Wq, du0);
    matmul_tn(dq, c.u0, g.Wq, true);
    colsum_into(dq, g.bq);
    matmul_nn(dk, blk.Wk, du0, true);
    matmul_tn(dk, c.u0, g.Wk, true);
    colsum_into(dk, g.bk);
    matmul_nn(dvv, blk.Wv, du0, true);
    matmul_tn(dvv, c.u0, g.Wv, true);
    colsum_into(dvv, g.bv);

    Matrix dx0 = ln_backward(du0, c.a_xhat, c.a_inv_std, blk.ln0_g, g.ln0_g, g.ln0_b);
    for (std::size_t t = 0; t < dx0.data.size(); ++t) dx0.data[t] += dmid.data[t];
    return dx0;
}

} // namespace

EncodeResult encode_tokens(const EncoderParams& params, const Matrix& token_values,
                           const std::vector<std::uint32_t>& token_positions,
                           std::size_t samples, std::size_t upto_blocks, Collect collect,
                           bool want_cache) {
    const EncoderConfig& cfg = params.config;
    if (token_values.cols != cfg.token_dim) raise(Err::ShapeMismatch, "token value width");
    if (token_positions.size() != token_values.rows)
        raise(Err::ShapeMismatch, "token position count");
    if (samples == 0 || token_values.rows % samples != 0)
        raise(Err::ShapeMismatch, "token rows not divisible by sample count");
    if (upto_blocks < 1 || upto_blocks > cfg.depth)
        raise(Err::ShapeMismatch, "block range");
    for (auto p : token_positions)
        if (p >= cfg.tokens) raise(Err::ShapeMismatch, "token position out of range");

    const std::size_t per = token_values.rows / samples;
    const std::size_t seq = per + 1;
    const std::size_t d = cfg.width;

    Matrix x(samples * seq, d);
    for (std::size_t s = 0; s < samples; ++s) {
        double* clsrow = x.row(s * seq);
        for (std::size_t j = 0; j < d; ++j) clsrow[j] = params.cls[j] + params.pos(0, j);
        for (std::size_t t = 0; t < per; ++t) {
            const std::size_t vrow = s * per + t;
            double* o = x.row(s * seq + 1 + t);
            const double* val = token_values.row(vrow);
            for (std::size_t j = 0; j < d; ++j) {
                o[j] = params.embed_b[j] + params.pos(1 + token_positions[vrow], j) +
                       kernels::dot(params.embed_W.row(j), val, cfg.token_dim);
            }
        }
    }

    EncodeResult res;
    if (want_cache) {
        res.cache.samples = samples;
        res.cache.seq = seq;
        res.cache.token_values = token_values;
        res.cache.token_positions = token_positions;
        res.cache.x0 = x;
        res.cache.blocks.resize(upto_blocks);
    }

    for (std::size_t b = 0; b < upto_blocks; ++b) {
        x = block_forward(params.blocks[b], cfg.block_kind, x, samples, seq,
                          want_cache ? &res.cache.blocks[b] : nullptr);
        if (collect == Collect::per_block || b + 1 == upto_blocks) {
            Matrix tap(samples, d);
            for (std::size_t s = 0; s < samples; ++s)
                std::copy_n(x.row(s * seq), d, tap.row(s));
            res.cls_per_block.push_back(std::move(tap));
        }
    }
    if (want_cache) res.cache.final_tokens = x;
    return res;
}

EncodeResult encode(const EncoderParams& params, const Matrix& inputs, Collect collect,
                    bool want_cache) {
    const EncoderConfig& cfg = params.config;
    if (inputs.cols != cfg.input_dim()) raise(Err::ShapeMismatch, "sample width");
    const std::size_t n = inputs.rows;
    Matrix token_values(n * cfg.tokens, cfg.token_dim);
    std::vector<std::uint32_t> positions(n * cfg.tokens);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t t = 0; t < cfg.tokens; ++t) {
            std::copy_n(inputs.row(s) + t * cfg.token_dim, cfg.token_dim,
                        token_values.row(s * cfg.tokens + t));
            positions[s * cfg.tokens + t] = static_cast<std::uint32_t>(t);
        }
    return encode_tokens(params, token_values, positions, n, cfg.depth, collect, want_cache);
}

EncoderGrads encoder_backward(const EncoderParams& params, const EncodeCache& cache,
                              const std::vector<Matrix>& grad_cls_taps,
                              const Matrix& grad_final_tokens) {
    const EncoderConfig& cfg = params.config;
    const std::size_t depth_cached = cache.blocks.size();
    if (depth_cached == 0) raise(Err::StaleCache, "cache holds no blocks");
    const std::size_t rows = cache.samples * cache.seq;
    const std::size_t d = cfg.width;
    if (grad_cls_taps.size() > cfg.depth) raise(Err::ShapeMismatch, "tap list too long");
    for (std::size_t b = 0; b < grad_cls_taps.size(); ++b) {
        const Matrix& t = grad_cls_taps[b];
        if (t.rows == 0) continue;
        if (b >= depth_cached) raise(Err::ShapeMismatch, "tap beyond cached depth");
        if (t.rows != cache.samples || t.cols != d) raise(Err::ShapeMismatch, "tap shape");
    }
    if (grad_final_tokens.rows != 0 &&
        (grad_final_tokens.rows != rows || grad_final_tokens.cols != d))
        raise(Err::ShapeMismatch, "final token gradient shape");

    EncoderGrads grads = zero_like(params);
    Matrix dX = grad_final_tokens.rows ? grad_final_tokens : Matrix(rows, d);

    for (std::size_t b = depth_cached; b-- > 0;) {
        if (b < grad_cls_taps.size() && grad_cls_taps[b].rows != 0) {
            for (std::size_t s = 0; s < cache.samples; ++s)
                kernels::axpy(1.0, grad_cls_taps[b].row(s), dX.row(s * cache.seq), d);
        }
        dX = block_backward(params.blocks[b], cfg.block_kind, cache.blocks[b],
                            cache.samples, cache.seq, dX, grads.blocks[b]);
    }

    const std::size_t per = cache.seq - 1;
    for (std::size_t s = 0; s < cache.samples; ++s) {
        const double* dcls = dX.row(s * cache.seq);
        for (std::size_t j = 0; j < d; ++j) {
            grads.cls[j] += dcls[j];
            grads.pos(0, j) += dcls[j];
        }
        for (std::size_t t = 0; t < per; ++t) {
            const std::size_t vrow = s * per + t;
            const double* dr = dX.row(s * cache.seq + 1 + t);
            const double* val = cache.token_values.row(vrow);
            const std::size_t p = cache.token_positions[vrow];
            for (std::size_t j = 0; j < d; ++j) {
                grads.pos(1 + p, j) += dr[j];
                grads.embed_b[j] += dr[j];
                kernels::axpy(dr[j], val, grads.embed_W.row(j), cfg.token_dim);
            }
        }
    }
    return grads;
}

// ---- masked reconstruction ----

void MimConfig::validate(const EncoderConfig& enc) const {
    if (mask_ratio <= 0.0 || mask_ratio >= 1.0) raise(Err::ConfigError, "mask ratio in (0,1)");
    const std::size_t masked = masked_per_sample(enc);
    if (masked < 1 || masked >= enc.tokens)
        raise(Err::DegenerateMask, "mask ratio leaves no masked or no visible token");
    if (decoder_depth < 1) raise(Err::ConfigError, "decoder depth >= 1");
}

std::size_t MimConfig::masked_per_sample(const EncoderConfig& enc) const {
    return static_cast<std::size_t>(
        std::llround(mask_ratio * static_cast<double>(enc.tokens)));
}

DecoderParams DecoderParams::init(const EncoderConfig& enc, const MimConfig& mim,
                                  RngStream& rng) {
    DecoderParams p;
    p.width = mim.decoder_width ? mim.decoder_width : enc.width / 2;
    if (p.width < 2) raise(Err::ConfigError, "decoder width too small");
    const std::size_t w = p.width;

    p.in_W = Matrix(w, enc.width);
    const double in_sd = 1.0 / std::sqrt(static_cast<double>(enc.width));
    for (auto& v : p.in_W.data) v = in_sd * rng.next_gaussian();
    p.in_b.assign(w, 0.0);
    p.mask_token.resize(w);
    for (auto& v : p.mask_token) v = 0.02 * rng.next_gaussian();
    p.pos = Matrix(enc.tokens + 1, w);
    for (auto& v : p.pos.data) v = 0.02 * rng.next_gaussian();

    const std::size_t h = 2 * w;
    const double w1_sd = std::sqrt(2.0 / static_cast<double>(w));
    const double w2_sd = std::sqrt(2.0 / static_cast<double>(h));
    for (std::size_t b = 0; b < mim.decoder_depth; ++b) {
        BlockParams blk;
        blk.ln1_g.assign(w, 1.0);
        blk.ln1_b.assign(w, 0.0);
        blk.W1 = Matrix(h, w);
        for (auto& v : blk.W1.data) v = w1_sd * rng.next_gaussian();
        blk.b1.assign(h, 0.0);
        blk.W2 = Matrix(w, h);
        for (auto& v : blk.W2.data) v = w2_sd * rng.next_gaussian();
        blk.b2.assign(w, 0.0);
        p.blocks.push_back(std::move(blk));
    }

    p.out_W = Matrix(enc.token_dim, w);
    const double out_sd = 1.0 / std::sqrt(static_cast<double>(w));
    for (auto& v : p.out_W.data) v = out_sd * rng.next_gaussian();
    p.out_b.assign(enc.token_dim, 0.0);
    return p;
}

std::vector<std::span<double>> DecoderParams::trainable_views() {
    std::vector<std::span<double>> out;
    out.emplace_back(in_W.data);
    out.emplace_back(in_b);
    out.emplace_back(mask_token);
    out.emplace_back(pos.data);
    for (auto& b : blocks) collect_block_views(b, out);
    out.emplace_back(out_W.data);
    out.emplace_back(out_b);
    return out;
}

std::size_t DecoderParams::param_count() const {
    std::size_t total = 0;
    for (auto v : const_cast<DecoderParams*>(this)->trainable_views()) total += v.size();
    return total;
}

namespace {

struct MaskPlan {
    Matrix visible_values;                    // n*vis x token_dim
    std::vector<std::uint32_t> visible_positions;
    std::vector<std::vector<std::uint32_t>> masked; // per sample, original indices
    std::vector<std::vector<std::int64_t>> slot_of; // per sample, position -> visible slot or -1
};

MaskPlan draw_masks(const EncoderConfig& cfg, const MimConfig& mim, const Matrix& batch,
                    RngStream& rng) {
    const std::size_t T = cfg.tokens;
    const std::size_t n_mask = mim.masked_per_sample(cfg);
    const std::size_t n_vis = T - n_mask;
    const std::size_t n = batch.rows;

    MaskPlan plan;
    plan.visible_values = Matrix(n * n_vis, cfg.token_dim);
    plan.visible_positions.resize(n * n_vis);
    plan.masked.resize(n);
    plan.slot_of.assign(n, std::vector<std::int64_t>(T, -1));

    std::vector<std::uint32_t> perm(T);
    for (std::size_t s = 0; s < n; ++s) {
        std::iota(perm.begin(), perm.end(), 0u);
        for (std::size_t i = T; i > 1; --i)
            std::swap(perm[i - 1], perm[rng.next_below(i)]);
        for (std::size_t t = 0; t < n_vis; ++t) {
            const std::uint32_t p = perm[t];
            const std::size_t vrow = s * n_vis + t;
            std::copy_n(batch.row(s) + p * cfg.token_dim, cfg.token_dim,
                        plan.visible_values.row(vrow));
            plan.visible_positions[vrow] = p;
            plan.slot_of[s][p] = static_cast<std::int64_t>(t);
        }
        for (std::size_t t = n_vis; t < T; ++t)
            plan.masked[s].push_back(perm[t]);
        std::sort(plan.masked[s].begin(), plan.masked[s].end());
    }
    return plan;
}

struct MimStep {
    double loss = 0.0;
    EncoderGrads enc_grads;   // valid when train_encoder
    DecoderGrads dec_grads;   // valid when compute_grads
};

DecoderGrads zero_decoder_like(const DecoderParams& dec) {
    DecoderGrads g = dec;
    for (auto v : g.trainable_views()) std::fill(v.begin(), v.end(), 0.0);
    return g;
}

// One masked-reconstruction pass over `batch` through the first `tap_block`
// encoder blocks.
MimStep mim_step(const EncoderParams& enc, DecoderParams& dec, const EncoderConfig& cfg,
                 const MimConfig& mim, const Matrix& batch, std::size_t tap_block,
                 RngStream& rng, bool train_encoder, bool compute_grads) {
    const std::size_t T = cfg.tokens;
    const std::size_t P = cfg.token_dim;
    const std::size_t n = batch.rows;
    const std::size_t w = dec.width;
    const std::size_t dseq = T + 1;

    MaskPlan plan = draw_masks(cfg, mim, batch, rng);
    const std::size_t n_vis = T - mim.masked_per_sample(cfg);

    auto encres = encode_tokens(enc, plan.visible_values, plan.visible_positions, n,
                                tap_block, Collect::final_only, true);
    const Matrix& feats = encres.cache.final_tokens; // n*(n_vis+1) x width
    const std::size_t eseq = n_vis + 1;

    // assemble the decoder sequence: projected summary + projected visibles
    // + mask tokens, all with decoder position embeddings
    Matrix dx(n * dseq, w);
    for (std::size_t s = 0; s < n; ++s) {
        {
            double* o = dx.row(s * dseq);
            const double* e = feats.row(s * eseq);
            for (std::size_t j = 0; j < w; ++j)
                o[j] = dec.in_b[j] + dec.pos(0, j) + kernels::dot(dec.in_W.row(j), e, cfg.width);
        }
        for (std::size_t p = 0; p < T; ++p) {
            double* o = dx.row(s * dseq + 1 + p);
            const std::int64_t slot = plan.slot_of[s][p];
            if (slot >= 0) {
                const double* e = feats.row(s * eseq + 1 + static_cast<std::size_t>(slot));
                for (std::size_t j = 0; j < w; ++j)
                    o[j] = dec.in_b[j] + dec.pos(1 + p, j) +
                           kernels::dot(dec.in_W.row(j), e, cfg.width);
            } else {
                for (std::size_t j = 0; j < w; ++j)
                    o[j] = dec.mask_token[j] + dec.pos(1 + p, j);
            }
        }
    }

    std::vector<BlockCache> dec_caches(dec.blocks.size());
    Matrix cur = dx;
    for (std::size_t b = 0; b < dec.blocks.size(); ++b)
        cur = block_forward(dec.blocks[b], BlockKind::residual_mlp, cur, n, dseq,
                            compute_grads ? &dec_caches[b] : nullptr);

    // reconstruction error on masked patches only
    const std::size_t masked_total = n * mim.masked_per_sample(cfg);
    const double norm = 1.0 / static_cast<double>(masked_total * P);
    MimStep out;
    if (compute_grads) out.dec_grads = zero_decoder_like(dec);
    Matrix dcur(compute_grads ? n * dseq : 0, compute_grads ? w : 0);
    std::vector<double> pred(P);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::uint32_t p : plan.masked[s]) {
            const double* tok = cur.row(s * dseq + 1 + p);
            const double* target = batch.row(s) + p * P;
            for (std::size_t j = 0; j < P; ++j) {
                pred[j] = dec.out_b[j] + kernels::dot(dec.out_W.row(j), tok, w);
                const double diff = pred[j] - target[j];
                out.loss += norm * diff * diff;
                if (compute_grads) {
                    const double dp = 2.0 * norm * diff;
                    // d loss / d tok and the output head grads
                    kernels::axpy(dp, dec.out_W.row(j), dcur.row(s * dseq + 1 + p), w);
                    out.dec_grads.out_b[j] += dp;
                    kernels::axpy(dp, tok, out.dec_grads.out_W.row(j), w);
                }
            }
        }
    }

    if (!compute_grads) return out;

    for (std::size_t b = dec.blocks.size(); b-- > 0;)
        dcur = block_backward(dec.blocks[b], BlockKind::residual_mlp, dec_caches[b], n, dseq,
                              dcur, out.dec_grads.blocks[b]);

    Matrix denc(train_encoder ? n * eseq : 0, train_encoder ? cfg.width : 0);
    for (std::size_t s = 0; s < n; ++s) {
        {
            const double* dr = dcur.row(s * dseq);
            for (std::size_t j = 0; j < w; ++j) {
                out.dec_grads.pos(0, j) += dr[j];
                out.dec_grads.in_b[j] += dr[j];
            }
            const double* e = feats.row(s * eseq);
            for (std::size_t j = 0; j < w; ++j)
                kernels::axpy(dr[j], e, out.dec_grads.in_W.row(j), cfg.width);
            if (train_encoder)
                for (std::size_t j = 0; j < w; ++j)
                    kernels::axpy(dr[j], dec.in_W.row(j), denc.row(s * eseq), cfg.width);
        }
        for (std::size_t p = 0; p < T; ++p) {
            const double* dr = dcur.row(s * dseq + 1 + p);
            for (std::size_t j = 0; j < w; ++j) out.dec_grads.pos(1 + p, j) += dr[j];
            const std::int64_t slot = plan.slot_of[s][p];
            if (slot < 0) {
                for (std::size_t j = 0; j < w; ++j) out.dec_grads.mask_token[j] += dr[j];
            } else {
                const std::size_t erow = s * eseq + 1 + static_cast<std::size_t>(slot);
                const double* e = feats.row(erow);
                for (std::size_t j = 0; j < w; ++j) {
                    out.dec_grads.in_b[j] += dr[j];
                    kernels::axpy(dr[j], e, out.dec_grads.in_W.row(j), cfg.width);
                }
                if (train_encoder)
                    for (std::size_t j = 0; j < w; ++j)
                        kernels::axpy(dr[j], dec.in_W.row(j), denc.row(erow), cfg.width);
            }
        }
    }

    if (train_encoder)
        out.enc_grads = encoder_backward(enc, encres.cache, {}, denc);
    return out;
}

std::vector<std::span<const double>> as_const_views(std::vector<std::span<double>> v) {
    return {v.begin(), v.end()};
}

} // namespace

MimResult mim_pretrain(const EncoderConfig& cfg, const MimConfig& mim, const Matrix& data,
                       RngStream& rng) {
    cfg.validate();
    mim.validate(cfg);
    if (data.rows == 0) raise(Err::EmptyInput, "empty dataset");
    if (data.cols != cfg.input_dim()) raise(Err::ShapeMismatch, "sample width");

    MimResult res;
    res.params = EncoderParams::init(cfg, rng);
    res.decoder = DecoderParams::init(cfg, mim, rng);

    auto enc_views = res.params.trainable_views();
    auto dec_views = res.decoder.trainable_views();
    std::vector<std::size_t> sizes;
    for (auto v : enc_views) sizes.push_back(v.size());
    for (auto v : dec_views) sizes.push_back(v.size());
    AdamW opt(sizes, AdamWConfig{0.9, 0.95, 1e-8});
    std::vector<double> lrs(sizes.size(), mim.lr);
    const std::vector<double> wds(sizes.size(), 0.0);

    const std::size_t steps_per_epoch = (data.rows + mim.batch - 1) / mim.batch;
    const std::uint64_t total_steps = mim.epochs * steps_per_epoch;
    const std::uint64_t warmup = std::max<std::uint64_t>(1, total_steps / 20);
    std::uint64_t gstep = 0;

    std::vector<std::size_t> order(data.rows);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < mim.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t at = 0; at < order.size(); at += mim.batch) {
            const std::size_t take = std::min(mim.batch, order.size() - at);
            Matrix batch(take, data.cols);
            for (std::size_t i = 0; i < take; ++i)
                std::copy_n(data.row(order[at + i]), data.cols, batch.row(i));

            MimStep step = mim_step(res.params, res.decoder, cfg, mim, batch, cfg.depth,
                                    rng, true, true);
            epoch_loss += step.loss;
            ++steps;
            std::fill(lrs.begin(), lrs.end(), lr_schedule(gstep++, total_steps, mim.lr, warmup, 0.0));

            auto eg = step.enc_grads.trainable_views();
            auto dg = step.dec_grads.trainable_views();
            std::vector<std::span<double>> params;
            std::vector<std::span<const double>> grads;
            auto ev = res.params.trainable_views();
            auto dv = res.decoder.trainable_views();
            params.insert(params.end(), ev.begin(), ev.end());
            params.insert(params.end(), dv.begin(), dv.end());
            grads.insert(grads.end(), eg.begin(), eg.end());
            grads.insert(grads.end(), dg.begin(), dg.end());
            opt.step(params, grads, lrs, wds);
        }
        res.epoch_losses.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
    }
    return res;
}

std::vector<double> per_block_reconstruction_probe(const EncoderParams& params,
                                                   const MimConfig& mim, const Matrix& data,
                                                   RngStream& rng) {
    const EncoderConfig& cfg = params.config;
    mim.validate(cfg);
    if (data.rows == 0) raise(Err::EmptyInput, "empty dataset");
    if (data.cols != cfg.input_dim()) raise(Err::ShapeMismatch, "sample width");

    std::vector<double> losses;
    for (std::size_t b = 1; b <= cfg.depth; ++b) {
        // every block's decoder starts from the same draws and sees the same
        // mask sequence, so loss differences reflect the features alone
        RngStream block_rng = rng.split(1000);
        DecoderParams dec = DecoderParams::init(cfg, mim, block_rng);
        auto dec_views = dec.trainable_views();
        std::vector<std::size_t> sizes;
        for (auto v : dec_views) sizes.push_back(v.size());
        AdamW opt(sizes, AdamWConfig{0.9, 0.95, 1e-8});
        std::vector<double> lrs(sizes.size(), mim.lr);
        const std::vector<double> wds(sizes.size(), 0.0);

        const std::size_t steps_per_epoch = (data.rows + mim.batch - 1) / mim.batch;
        const std::uint64_t total_steps = mim.probe_epochs * steps_per_epoch;
        const std::uint64_t warmup = std::max<std::uint64_t>(1, total_steps / 20);
        std::uint64_t gstep = 0;

        std::vector<std::size_t> order(data.rows);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t epoch = 0; epoch < mim.probe_epochs; ++epoch) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[block_rng.next_below(i)]);
            for (std::size_t at = 0; at < order.size(); at += mim.batch) {
                const std::size_t take = std::min(mim.batch, order.size() - at);
                Matrix batch(take, data.cols);
                for (std::size_t i = 0; i < take; ++i)
                    std::copy_n(data.row(order[at + i]), data.cols, batch.row(i));
                MimStep step =
                    mim_step(params, dec, cfg, mim, batch, b, block_rng, false, true);
                auto dg = step.dec_grads.trainable_views();
                std::fill(lrs.begin(), lrs.end(),
                          lr_schedule(gstep++, total_steps, mim.lr, warmup, 0.0));
                opt.step(dec.trainable_views(), as_const_views(dg), lrs, wds);
            }
        }

        // identical evaluation masks across blocks make the losses comparable
        RngStream eval_rng = rng.split(777777);
        double eval_loss = 0.0;
        std::size_t eval_steps = 0;
        for (std::size_t at = 0; at < data.rows; at += mim.batch) {
            const std::size_t take = std::min(mim.batch, data.rows - at);
            Matrix batch(take, data.cols);
            for (std::size_t i = 0; i < take; ++i)
                std::copy_n(data.row(at + i), data.cols, batch.row(i));
            eval_loss += mim_step(params, dec, cfg, mim, batch, b, eval_rng, false, false).loss;
            ++eval_steps;
        }
        losses.push_back(eval_loss / static_cast<double>(eval_steps));
    }
    return losses;
}

std::vector<double> relative_improvement(const std::vector<double>& metric_per_block) {
    if (metric_per_block.size() < 2) raise(Err::TooShort, "need at least 2 entries");
    std::vector<double> delta(metric_per_block.size() - 1);
    double max_abs = 0.0;
    for (std::size_t i = 0; i + 1 < metric_per_block.size(); ++i) {
        delta[i] = metric_per_block[i + 1] - metric_per_block[i];
        max_abs = std::max(max_abs, std::abs(delta[i]));
    }
    if (max_abs == 0.0) return delta;
    for (auto& d : delta) d /= max_abs;
    return delta;
}

} // namespace mrf
