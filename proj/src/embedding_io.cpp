#include "mrf/embedding_io.hpp"

#include "wire.hpp"

namespace mrf {

namespace {

constexpr char kMagic[4] = {'M', 'R', 'F', 'E'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kHeaderBytes = 4 + 4 + 8 + 8 + 1 + 8;

} // namespace

void export_embeddings(const std::string& path, const Matrix& features,
                       const std::vector<std::int32_t>* labels) {
    if (labels && labels->size() != features.rows)
        raise(Err::LengthMismatch, std::to_string(labels->size()) + " labels for " +
                                       std::to_string(features.rows) + " rows");
    wire::Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    w.u64(features.rows);
    w.u64(features.cols);
    w.u8(labels ? 1 : 0);
    w.u64(kHeaderBytes);
    for (double v : features.data) w.f64(v);
    if (labels)
        for (std::int32_t l : *labels) w.i32(l);
    wire::write_file(path, w.bytes);
}

EmbeddingData import_embeddings(const std::string& path) {
    const auto bytes = wire::read_file(path);
    wire::Reader r{bytes};
    if (r.str(4) != std::string(kMagic, 4)) raise(Err::BadMagic, path);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        raise(Err::VersionUnsupported, "version " + std::to_string(version) + " in " + path);
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    const bool has_labels = r.u8() != 0;
    const std::uint64_t offset = r.u64();

    if (rows > (std::uint64_t{1} << 32) || cols > (std::uint64_t{1} << 32))
        raise(Err::Truncated, "implausible shape in " + path);
    const std::uint64_t expected =
        offset + rows * cols * 8 + (has_labels ? rows * 4 : 0);
    if (offset < kHeaderBytes || bytes.size() != expected)
        raise(Err::Truncated, path + ": expected " + std::to_string(expected) + " bytes, got " +
                                  std::to_string(bytes.size()));

    r.at = offset;
    EmbeddingData out;
    out.features = Matrix(rows, cols);
    for (double& v : out.features.data) v = r.f64();
    out.has_labels = has_labels;
    if (has_labels) {
        out.labels.resize(rows);
        for (auto& l : out.labels) l = r.i32();
    }
    return out;
}

} // namespace mrf
