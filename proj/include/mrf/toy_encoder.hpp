#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/rng.hpp"

namespace mrf {

enum class BlockKind { residual_mlp, single_head_attention };

BlockKind block_kind_from_name(const std::string& name);
std::string block_kind_name(BlockKind kind);

// Samples are flat rows of tokens * token_dim values; images map their patch
// grid onto that layout (tokens = grid cells, token_dim = pixels per patch).
struct EncoderConfig {
    std::size_t depth = 12;
    std::size_t width = 64;
    BlockKind block_kind = BlockKind::residual_mlp;
    std::size_t tokens = 16;
    std::size_t token_dim = 16;
    std::size_t mlp_hidden = 0; // 0 = 4 * width

    std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * width; }
    std::size_t input_dim() const { return tokens * token_dim; }
    void validate() const;
};

// The residual_mlp block folds a parameter-free token-mean mix into its MLP
// branch: v_i = LN(x_i) + mean_j LN(x_j), x_i += W2 gelu(W1 v_i + b1) + b2.
// Without the mix the summary token could never see the patches. The
// attention kind carries its own pre-norm (ln0) plus projections and runs a
// plain per-token MLP sublayer.
struct BlockParams {
    std::vector<double> ln1_g, ln1_b;
    Matrix W1;
    std::vector<double> b1;
    Matrix W2;
    std::vector<double> b2;
    // attention sublayer, empty for residual_mlp
    std::vector<double> ln0_g, ln0_b;
    Matrix Wq, Wk, Wv, Wo;
    std::vector<double> bq, bk, bv, bo;
};

struct EncoderParams {
    EncoderConfig config;
    Matrix embed_W;             // width x token_dim
    std::vector<double> embed_b;
    std::vector<double> cls;    // learned class-summary token, never masked
    Matrix pos;                 // (tokens + 1) x width; row 0 = summary slot
    std::vector<BlockParams> blocks;

    static EncoderParams init(const EncoderConfig& cfg, RngStream& rng);

    std::vector<std::span<double>> trainable_views();
    // view group per layer-decay bucket: 0 = embeddings, b = block b (1-based)
    std::vector<std::span<double>> group_views(std::size_t group);
    std::size_t param_count() const;
};

// Grad accumulators share the parameter layout.
using EncoderGrads = EncoderParams;
EncoderGrads zero_like(const EncoderParams& params);

struct BlockCache {
    Matrix input;                 // rows = samples * seq
    // mlp sublayer
    Matrix u_xhat;                // layer-norm intermediates
    std::vector<double> u_inv_std;
    Matrix v;                     // MLP branch input (post-mix for residual_mlp)
    Matrix pre1;
    Matrix h;
    // attention sublayer
    Matrix a_xhat;
    std::vector<double> a_inv_std;
    Matrix u0, q, k, vv;          // projected sequences
    Matrix attn;                  // rows = samples * seq, cols = seq
    Matrix ctx;
    Matrix x_mid;                 // after the attention residual
};

struct EncodeCache {
    std::size_t samples = 0;
    std::size_t seq = 0;          // visible tokens + 1
    Matrix token_values;          // samples*(seq-1) x token_dim, embedding input
    std::vector<std::uint32_t> token_positions; // original patch index per row
    Matrix x0;                    // embedded sequence
    std::vector<BlockCache> blocks;
    Matrix final_tokens;          // output of the last encoded block
};

enum class Collect { final_only, per_block };

struct EncodeResult {
    std::vector<Matrix> cls_per_block; // one n x width matrix per encoded block
    EncodeCache cache;                 // filled when requested
};

// Full-sequence encode of flat samples. per_block collects the summary tap
// after every block; final_only keeps only the last.
EncodeResult encode(const EncoderParams& params, const Matrix& inputs, Collect collect,
                    bool want_cache = false);

// Encodes per-sample token subsets (the masked path). token_values carries
// vis_per_sample rows per sample; token_positions gives each row's original
// patch index. Encodes through the first `upto_blocks` blocks only.
EncodeResult encode_tokens(const EncoderParams& params, const Matrix& token_values,
                           const std::vector<std::uint32_t>& token_positions,
                           std::size_t samples, std::size_t upto_blocks, Collect collect,
                           bool want_cache = false);

// Accumulates exact gradients for every parameter reached by the cached
// forward. grad_cls_taps[b-1], when non-empty, is injected at block b's
// summary output; grad_final_tokens, when non-empty, at the full token
// output of the deepest cached block.
EncoderGrads encoder_backward(const EncoderParams& params, const EncodeCache& cache,
                              const std::vector<Matrix>& grad_cls_taps,
                              const Matrix& grad_final_tokens);

struct MimConfig {
    double mask_ratio = 0.75;
    std::size_t decoder_depth = 2;
    std::size_t decoder_width = 0; // 0 = width / 2
    std::size_t epochs = 30;
    std::size_t batch = 64;
    double lr = 1e-3;
    std::size_t probe_epochs = 10;

    void validate(const EncoderConfig& enc) const;
    std::size_t masked_per_sample(const EncoderConfig& enc) const;
};

// Reconstruction decoder: linear input projection, learned mask token,
// positional table, a short stack of mean-mix blocks, and a per-token output
// head back to raw patch values.
struct DecoderParams {
    std::size_t width = 0;
    Matrix in_W;
    std::vector<double> in_b;
    std::vector<double> mask_token;
    Matrix pos;                 // (tokens + 1) x width
    std::vector<BlockParams> blocks;
    Matrix out_W;               // token_dim x width
    std::vector<double> out_b;

    static DecoderParams init(const EncoderConfig& enc, const MimConfig& mim, RngStream& rng);
    std::vector<std::span<double>> trainable_views();
    std::size_t param_count() const;
};

using DecoderGrads = DecoderParams;

struct MimResult {
    EncoderParams params;
    DecoderParams decoder;
    std::vector<double> epoch_losses;
};

// Masked-reconstruction pre-training: per sample a fresh mask hides
// mask_ratio of the patches, the encoder sees summary + visible tokens only,
// and the decoder rebuilds the masked patches from the full-length sequence
// (projected visibles + mask tokens). Loss is mean squared error on masked
// positions only.
MimResult mim_pretrain(const EncoderConfig& cfg, const MimConfig& mim, const Matrix& data,
                       RngStream& rng);

// Frozen-encoder decodability sweep: trains an independent decoder on each
// block's features and reports the per-block evaluation loss.
std::vector<double> per_block_reconstruction_probe(const EncoderParams& params,
                                                   const MimConfig& mim, const Matrix& data,
                                                   RngStream& rng);

// Successive differences scaled by the largest absolute difference; all-zero
// differences map to all zeros.
std::vector<double> relative_improvement(const std::vector<double>& metric_per_block);

} // namespace mrf
