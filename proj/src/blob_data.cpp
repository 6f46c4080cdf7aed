#include <algorithm>
#include <cmath>
#include <numeric>

#include "mrf/blob_data.hpp"

namespace mrf {

BlobLayout blob_layout_from_name(const std::string& name) {
    if (name == "vector") return BlobLayout::vector_mode;
    if (name == "image") return BlobLayout::image_grid;
    raise(Err::ConfigError, "unknown layout '" + name + "'");
}

std::string blob_layout_name(BlobLayout layout) {
    return layout == BlobLayout::vector_mode ? "vector" : "image";
}

std::size_t BlobDatasetConfig::tokens() const {
    if (layout == BlobLayout::image_grid) {
        const std::size_t per_side = grid / patch;
        return per_side * per_side;
    }
    return 8;
}

std::size_t BlobDatasetConfig::token_dim() const {
    if (layout == BlobLayout::image_grid) return patch * patch;
    return dim / 8;
}

void BlobDatasetConfig::validate() const {
    if (n_classes < 2) raise(Err::ConfigError, "need at least 2 classes");
    if (n_per_class == 0) raise(Err::ConfigError, "empty classes");
    if (spread <= 0.0 || noise <= 0.0) raise(Err::ConfigError, "spread and noise must be positive");
    if (layout == BlobLayout::image_grid) {
        if (patch == 0 || grid == 0 || grid % patch != 0)
            raise(Err::ConfigError, "grid must be a multiple of patch");
    } else {
        if (dim == 0 || dim % 8 != 0)
            raise(Err::ConfigError, "vector dim must be a positive multiple of 8");
    }
}

namespace {

// 3x3 box blur with clamped edges, applied on the raw pixel grid
std::vector<double> blur(const std::vector<double>& img, std::size_t g) {
    std::vector<double> out(img.size());
    for (std::size_t r = 0; r < g; ++r)
        for (std::size_t c = 0; c < g; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const std::size_t rr = static_cast<std::size_t>(
                        std::clamp<long>(static_cast<long>(r) + dr, 0, static_cast<long>(g) - 1));
                    const std::size_t cc = static_cast<std::size_t>(
                        std::clamp<long>(static_cast<long>(c) + dc, 0, static_cast<long>(g) - 1));
                    acc += img[rr * g + cc];
                }
            out[r * g + c] = acc / 9.0;
        }
    return out;
}

void patchify(const std::vector<double>& img, std::size_t g, std::size_t p, double* out) {
    const std::size_t per_side = g / p;
    std::size_t at = 0;
    for (std::size_t pr = 0; pr < per_side; ++pr)
        for (std::size_t pc = 0; pc < per_side; ++pc)
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t c = 0; c < p; ++c)
                    out[at++] = img[(pr * p + r) * g + pc * p + c];
}

std::vector<double> unpatchify(std::span<const double> row, std::size_t g, std::size_t p) {
    const std::size_t per_side = g / p;
    std::vector<double> img(g * g);
    std::size_t at = 0;
    for (std::size_t pr = 0; pr < per_side; ++pr)
        for (std::size_t pc = 0; pc < per_side; ++pc)
            for (std::size_t r = 0; r < p; ++r)
                for (std::size_t c = 0; c < p; ++c)
                    img[(pr * p + r) * g + pc * p + c] = row[at++];
    return img;
}

// bilinear resample of the (top,left,side,side) window back to g x g
std::vector<double> crop_resize(const std::vector<double>& img, std::size_t g, double top,
                                double left, double side) {
    std::vector<double> out(g * g);
    const double step = side / static_cast<double>(g);
    for (std::size_t i = 0; i < g; ++i)
        for (std::size_t j = 0; j < g; ++j) {
            const double y = std::clamp(top + (static_cast<double>(i) + 0.5) * step - 0.5, 0.0,
                                        static_cast<double>(g) - 1.0);
            const double x = std::clamp(left + (static_cast<double>(j) + 0.5) * step - 0.5, 0.0,
                                        static_cast<double>(g) - 1.0);
            const std::size_t y0 = static_cast<std::size_t>(y);
            const std::size_t x0 = static_cast<std::size_t>(x);
            const std::size_t y1 = std::min(y0 + 1, g - 1);
            const std::size_t x1 = std::min(x0 + 1, g - 1);
            const double fy = y - static_cast<double>(y0);
            const double fx = x - static_cast<double>(x0);
            out[i * g + j] = (1 - fy) * ((1 - fx) * img[y0 * g + x0] + fx * img[y0 * g + x1]) +
                             fy * ((1 - fx) * img[y1 * g + x0] + fx * img[y1 * g + x1]);
        }
    return out;
}

} // namespace

BlobDataset generate_blobs(const BlobDatasetConfig& cfg) {
    cfg.validate();
    RngStream rng(cfg.seed);

    BlobDataset ds;
    ds.config = cfg;
    const std::size_t d = cfg.sample_dim();
    ds.centers = Matrix(cfg.n_classes, d);

    if (cfg.layout == BlobLayout::image_grid) {
        const std::size_t g = cfg.grid;
        for (std::size_t c = 0; c < cfg.n_classes; ++c) {
            std::vector<double> img(g * g);
            for (auto& v : img) v = cfg.spread * rng.next_gaussian();
            img = blur(blur(img, g), g);
            patchify(img, g, cfg.patch, ds.centers.row(c));
        }
    } else {
        for (auto& v : ds.centers.data) v = cfg.spread * rng.next_gaussian();
    }

    const std::size_t n = cfg.n_classes * cfg.n_per_class;
    ds.samples = Matrix(n, d);
    ds.labels.reserve(n);
    for (std::size_t c = 0; c < cfg.n_classes; ++c)
        for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
            const std::size_t row = c * cfg.n_per_class + i;
            const double* center = ds.centers.row(c);
            double* out = ds.samples.row(row);
            for (std::size_t j = 0; j < d; ++j)
                out[j] = center[j] + cfg.noise * rng.next_gaussian();
            ds.labels.push_back(static_cast<std::int32_t>(c));
        }
    return ds;
}

void ViewConfig::validate() const {
    if (n_global != 2) raise(Err::ConfigError, "the refinement pairing needs exactly 2 globals");
    if (!(global_scale_lo > 0.0 && global_scale_lo <= global_scale_hi && global_scale_hi <= 1.0))
        raise(Err::ConfigError, "global scale range");
    if (!(local_scale_lo > 0.0 && local_scale_lo <= local_scale_hi && local_scale_hi <= 1.0))
        raise(Err::ConfigError, "local scale range");
    if (jitter_sd < 0.0) raise(Err::ConfigError, "negative jitter");
}

Matrix make_views(std::span<const double> sample, const BlobDatasetConfig& data_cfg,
                  const ViewConfig& cfg, RngStream& rng) {
    cfg.validate();
    const std::size_t d = data_cfg.sample_dim();
    if (sample.size() != d) raise(Err::ShapeMismatch, "sample width");
    const std::size_t total = cfg.n_global + cfg.n_local;
    Matrix views(total, d);

    if (data_cfg.layout == BlobLayout::image_grid) {
        const std::size_t g = data_cfg.grid;
        const std::vector<double> img = unpatchify(sample, g, data_cfg.patch);
        for (std::size_t v = 0; v < total; ++v) {
            const bool global = v < cfg.n_global;
            const double lo = global ? cfg.global_scale_lo : cfg.local_scale_lo;
            const double hi = global ? cfg.global_scale_hi : cfg.local_scale_hi;
            const double area = rng.next_uniform(lo, hi);
            const double side =
                std::max(1.0, std::sqrt(area) * static_cast<double>(g));
            const double top = rng.next_uniform(0.0, static_cast<double>(g) - side);
            const double left = rng.next_uniform(0.0, static_cast<double>(g) - side);
            std::vector<double> view = crop_resize(img, g, top, left, side);
            if (rng.next_bool())
                for (std::size_t r = 0; r < g; ++r)
                    std::reverse(view.begin() + r * g, view.begin() + (r + 1) * g);
            if (cfg.color_jitter) {
                const double contrast = rng.next_uniform(0.75, 1.25);
                const double shift = rng.next_uniform(-0.25, 0.25) * data_cfg.spread;
                for (auto& px : view) px = contrast * px + shift;
            }
            if (cfg.jitter_sd > 0.0)
                for (auto& px : view) px += cfg.jitter_sd * rng.next_gaussian();
            patchify(view, g, data_cfg.patch, views.row(v));
        }
    } else {
        std::vector<std::size_t> order(d);
        for (std::size_t v = 0; v < total; ++v) {
            double* out = views.row(v);
            for (std::size_t j = 0; j < d; ++j)
                out[j] = sample[j] + cfg.jitter_sd * rng.next_gaussian();
            if (v >= cfg.n_global) {
                const double keep = rng.next_uniform(cfg.local_scale_lo, cfg.local_scale_hi);
                const std::size_t n_keep = std::max<std::size_t>(
                    1, static_cast<std::size_t>(std::llround(keep * static_cast<double>(d))));
                std::iota(order.begin(), order.end(), std::size_t{0});
                for (std::size_t i = 0; i < n_keep; ++i)
                    std::swap(order[i], order[i + rng.next_below(d - i)]);
                for (std::size_t i = n_keep; i < d; ++i) out[order[i]] = 0.0;
            }
        }
    }
    return views;
}

} // namespace mrf
