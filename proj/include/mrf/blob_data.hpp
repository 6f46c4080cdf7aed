#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mrf/matrix.hpp"
#include "mrf/rng.hpp"

namespace mrf {

enum class BlobLayout { vector_mode, image_grid };

BlobLayout blob_layout_from_name(const std::string& name);
std::string blob_layout_name(BlobLayout layout);

// Synthetic class-blob data. Image rows are stored patch-major (token after
// token, each patch row-major), i.e. already in the encoder's input layout.
struct BlobDatasetConfig {
    std::size_t n_classes = 8;
    std::size_t n_per_class = 200;
    BlobLayout layout = BlobLayout::image_grid;
    std::size_t grid = 16;  // image mode: grid x grid pixels
    std::size_t patch = 4;  // pixels per patch side
    std::size_t dim = 64;   // vector mode width
    double spread = 1.0;
    double noise = 0.1;
    std::uint64_t seed = 1;

    std::size_t tokens() const;
    std::size_t token_dim() const;
    std::size_t sample_dim() const { return tokens() * token_dim(); }
    void validate() const;
};

struct BlobDataset {
    BlobDatasetConfig config;
    Matrix samples;
    std::vector<std::int32_t> labels;
    Matrix centers; // n_classes x sample_dim, noise-free class prototypes
};

// Class centers drawn once from the seed, samples = center + Gaussian noise.
// Image centers are smoothed so nearby pixels correlate and crops stay
// informative.
BlobDataset generate_blobs(const BlobDatasetConfig& cfg);

struct ViewConfig {
    std::size_t n_global = 2;
    std::size_t n_local = 10;
    double global_scale_lo = 0.25, global_scale_hi = 1.0;
    double local_scale_lo = 0.05, local_scale_hi = 0.25;
    bool color_jitter = false;
    double jitter_sd = 0.1; // additive-noise strength, both layouts

    void validate() const;
};

// Augmented copies of one sample, globals first: image mode crops a random
// area fraction in the configured scale range, optionally mirrors, resizes
// back to the full grid and adds pixel jitter; vector mode jitters globally
// and additionally zeroes a random coordinate subset (keep fraction drawn
// from the local scale range) for local views.
Matrix make_views(std::span<const double> sample, const BlobDatasetConfig& data_cfg,
                  const ViewConfig& cfg, RngStream& rng);

} // namespace mrf
