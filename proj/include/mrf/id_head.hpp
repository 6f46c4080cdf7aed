#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/rng.hpp"

namespace mrf {

// Projector (3 linear layers) + predictor (2 linear layers). Every hidden
// linear is followed by GELU then batch normalization; the final linear of
// each MLP is followed by batch normalization only.
struct HeadConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> projector_dims; // [input_dim, H_p, H_p, bottleneck]
    std::vector<std::size_t> predictor_dims; // [bottleneck, H_q, bottleneck]
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.1;

    std::size_t bottleneck() const { return projector_dims.back(); }
    void validate() const;

    // projector [in, 256, 256, 64], predictor [64, 512, 64]
    static HeadConfig desk(std::size_t input_dim);
    // projector [in, 2048, 2048, 256], predictor [256, 4096, 256]
    static HeadConfig paper(std::size_t input_dim);
};

// One linear + optional GELU + optional batch-norm stage. W is out x in;
// y = x W^T + b. The standard head always normalizes; the flags exist so
// tests can express stripped-down stages.
struct HeadLayer {
    Matrix W;
    std::vector<double> b;
    std::vector<double> gamma, beta;
    std::vector<double> run_mean, run_var;
    bool gelu = false;
    bool bn = true;

    std::size_t in_dim() const { return W.cols; }
    std::size_t out_dim() const { return W.rows; }
};

struct HeadParams {
    HeadConfig config;
    std::vector<HeadLayer> layers; // 3 projector stages then 2 predictor stages

    static HeadParams init(const HeadConfig& cfg, RngStream& rng);

    // trainable arrays only (weights, biases, gamma, beta); running stats and
    // step-invariant metadata are excluded
    std::vector<std::span<double>> trainable_views();
};

struct LayerCache {
    Matrix input;             // stage input
    Matrix preact;            // after linear
    Matrix postact;           // after GELU (empty when the stage has none)
    Matrix xhat;              // normalized pre-scale output
    std::vector<double> inv_std;
};

struct HeadCache {
    std::size_t batch = 0;
    bool train = false;
    std::vector<LayerCache> layers;
};

struct HeadForward {
    Matrix proj_raw, proj_norm;
    Matrix pred_raw, pred_norm;
    HeadCache cache;
};

enum class HeadMode { train, eval };

// Train mode normalizes by batch statistics and folds them into the running
// estimates; eval mode reads the running estimates and produces no usable
// cache. Throws BatchTooSmall for train batches with fewer than 2 rows.
HeadForward head_forward(HeadParams& params, const Matrix& x, HeadMode mode);

struct LayerGrads {
    Matrix W;
    std::vector<double> b, gamma, beta;
};

struct HeadGrads {
    std::vector<LayerGrads> layers;

    std::vector<std::span<double>> views(); // aligned with HeadParams::trainable_views
    void accumulate(const HeadGrads& other, double scale);
};

// Exact gradients through the linear/GELU/batch-norm stack, including the
// dependence of batch statistics on every row. grad_pred_raw and
// grad_proj_raw are gradients with respect to the raw (unnormalized) outputs;
// an empty grad_proj_raw counts as zero. Returns parameter gradients plus
// the gradient flowing into the encoder tap.
struct HeadBackward {
    HeadGrads grads;
    Matrix grad_input;
};
HeadBackward head_backward(const HeadParams& params, const HeadCache& cache,
                           const Matrix& grad_pred_raw, const Matrix& grad_proj_raw);

// Which encoder blocks carry heads. Indices are 1-based from the input side.
struct EnsembleConfig {
    std::vector<std::size_t> attach_indices;
    std::vector<HeadConfig> head_configs;

    void validate(std::size_t encoder_depth) const;
    static EnsembleConfig last_third(std::size_t encoder_depth, std::size_t input_dim);
};

enum class ScheduleKind { constant, uniform_decay, staggered_decay, staggered_step, one_hot };

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::constant;
    std::size_t head_count = 1;
};

ScheduleKind schedule_kind_from_name(const std::string& name);
std::string schedule_kind_name(ScheduleKind kind);

// Loss weight of head `head_index` (0 = earliest attached) at training
// progress in [0,1]. The final head keeps weight 1 under every schedule
// except one_hot, where exactly one head is active per progress segment.
double schedule_weight(const ScheduleSpec& spec, std::size_t head_index, double progress);

} // namespace mrf
