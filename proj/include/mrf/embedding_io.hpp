#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrf/matrix.hpp"

namespace mrf {

// On-disk embedding matrix: "MRFE" magic, version, shape, label flag and an
// absolute payload offset, followed by row-major float64 rows and, when the
// flag is set, one int32 label per row. Everything little-endian.
struct EmbeddingData {
    Matrix features;
    std::vector<std::int32_t> labels; // empty when the file carries none
    bool has_labels = false;
};

void export_embeddings(const std::string& path, const Matrix& features,
                       const std::vector<std::int32_t>* labels = nullptr);

EmbeddingData import_embeddings(const std::string& path);

} // namespace mrf
