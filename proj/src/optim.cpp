#include <cmath>

#include "mrf/error.hpp"
#include "mrf/kernels.hpp"
#include "mrf/optim.hpp"

namespace mrf {

AdamW::AdamW(const std::vector<std::size_t>& sizes, AdamWConfig cfg) : cfg_(cfg) {
    m1_.reserve(sizes.size());
    m2_.reserve(sizes.size());
    for (auto n : sizes) {
        m1_.emplace_back(n, 0.0);
        m2_.emplace_back(n, 0.0);
    }
}

void AdamW::step(const std::vector<std::span<double>>& params,
                 const std::vector<std::span<const double>>& grads,
                 const std::vector<double>& lrs, const std::vector<double>& wds) {
    if (params.size() != m1_.size() || grads.size() != m1_.size() ||
        lrs.size() != m1_.size() || wds.size() != m1_.size())
        raise(Err::ShapeMismatch, "optimizer view count");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t v = 0; v < params.size(); ++v) {
        if (params[v].size() != m1_[v].size() || grads[v].size() != m1_[v].size())
            raise(Err::ShapeMismatch, "optimizer view size");
        kernels::adamw_step(params[v].size(), params[v].data(), grads[v].data(),
                            m1_[v].data(), m2_[v].data(), lrs[v], cfg_.beta1, cfg_.beta2,
                            bc1, bc2, cfg_.eps, wds[v]);
    }
}

EmaState::EmaState(const std::vector<std::span<const double>>& params, double momentum)
    : momentum_(momentum) {
    if (momentum < 0.0 || momentum > 1.0) raise(Err::ConfigError, "ema momentum in [0,1]");
    shadow_.reserve(params.size());
    for (auto p : params) shadow_.emplace_back(p.begin(), p.end());
}

void EmaState::update(const std::vector<std::span<const double>>& params) {
    if (params.size() != shadow_.size()) raise(Err::ShapeMismatch, "ema view count");
    for (std::size_t v = 0; v < params.size(); ++v) {
        if (params[v].size() != shadow_[v].size()) raise(Err::ShapeMismatch, "ema view size");
        kernels::ema_blend(momentum_, params[v].data(), shadow_[v].data(), params[v].size());
    }
}

double lr_schedule(std::uint64_t step, std::uint64_t total_steps, double peak,
                   std::uint64_t warmup_steps, double end_lr) {
    if (step > total_steps) raise(Err::BadIndex, "step beyond schedule end");
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return peak;
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double frac = static_cast<double>(step - warmup_steps) / span;
    const double cos_term = 0.5 * (1.0 + std::cos(M_PI * frac));
    return end_lr + (peak - end_lr) * cos_term;
}

double layerwise_lr(double peak, double decay, std::size_t block_idx, std::size_t depth) {
    if (block_idx > depth) raise(Err::BadIndex, "block index beyond depth");
    return peak * std::pow(decay, static_cast<double>(depth - block_idx));
}

} // namespace mrf
