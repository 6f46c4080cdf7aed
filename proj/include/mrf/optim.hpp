#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mrf/matrix.hpp"

namespace mrf {

// Decoupled-weight-decay adaptive-moment optimizer over a fixed set of
// parameter arrays. Views passed to step() must match the sizes given at
// construction, in order.
struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

class AdamW {
public:
    AdamW() = default;
    AdamW(const std::vector<std::size_t>& sizes, AdamWConfig cfg = {});

    // lr and weight decay are per-view so callers can express layer-wise
    // learning rates and split decay groups
    void step(const std::vector<std::span<double>>& params,
              const std::vector<std::span<const double>>& grads,
              const std::vector<double>& lrs, const std::vector<double>& wds);

    std::uint64_t step_count() const { return t_; }

    std::vector<std::vector<double>>& first_moments() { return m1_; }
    std::vector<std::vector<double>>& second_moments() { return m2_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m1_, m2_;
    std::uint64_t t_ = 0;
};

// Shadow parameter copy blended toward the live parameters each step:
// shadow <- m * shadow + (1 - m) * params.
class EmaState {
public:
    EmaState() = default;
    EmaState(const std::vector<std::span<const double>>& params, double momentum);

    void update(const std::vector<std::span<const double>>& params);
    const std::vector<std::vector<double>>& shadow() const { return shadow_; }
    std::vector<std::vector<double>>& shadow() { return shadow_; }
    double momentum() const { return momentum_; }

private:
    double momentum_ = 0.9999;
    std::vector<std::vector<double>> shadow_;
};

// Linear warmup from 0 to peak over warmup_steps, then cosine decay that
// lands exactly on end_lr at total_steps.
double lr_schedule(std::uint64_t step, std::uint64_t total_steps, double peak,
                   std::uint64_t warmup_steps, double end_lr);

// peak * decay^(depth - block_idx); block_idx 0 addresses the embedding and
// positional parameters, depth the topmost block.
double layerwise_lr(double peak, double decay, std::size_t block_idx, std::size_t depth);

} // namespace mrf
