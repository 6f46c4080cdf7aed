#include "mrf/checkpoint.hpp"

#include <algorithm>

#include "mrf/error.hpp"
#include "wire.hpp"

namespace mrf {

namespace {

constexpr char kMagic[4] = {'M', 'R', 'F', 'C'};
constexpr std::uint32_t kVersion = 1;

} // namespace

void Checkpoint::add(const std::string& name, std::span<const double> values) {
    for (const auto& [existing, _] : tensors)
        if (existing == name) raise(Err::ConfigError, "duplicate tensor " + name);
    tensors.emplace_back(name, std::vector<double>(values.begin(), values.end()));
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [existing, _] : tensors)
        if (existing == name) return true;
    return false;
}

const std::vector<double>& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [existing, values] : tensors)
        if (existing == name) return values;
    raise(Err::ConfigError, "checkpoint has no tensor " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    wire::Writer w;
    w.raw(kMagic, 4);
    w.u32(kVersion);
    const std::string meta = ck.meta.dump();
    w.u64(meta.size());
    w.raw(meta.data(), meta.size());
    w.u64(ck.tensors.size());
    for (const auto& [name, values] : ck.tensors) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.u64(values.size());
        for (double v : values) w.f64(v);
    }
    wire::write_file(path, w.bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = wire::read_file(path);
    wire::Reader r{bytes};
    if (r.str(4) != std::string(kMagic, 4)) raise(Err::BadMagic, path);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        raise(Err::VersionUnsupported, "version " + std::to_string(version) + " in " + path);

    Checkpoint ck;
    const std::uint64_t meta_len = r.u64();
    const std::string meta = r.str(meta_len);
    try {
        ck.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        raise(Err::IoFailure, path + ": metadata parse: " + e.what());
    }
    const std::uint64_t count = r.u64();
    for (std::uint64_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const std::uint64_t len = r.u64();
        r.need(len * 8);
        std::vector<double> values(len);
        for (auto& v : values) v = r.f64();
        ck.tensors.emplace_back(std::move(name), std::move(values));
    }
    if (r.at != bytes.size()) raise(Err::Truncated, path + ": trailing bytes");
    return ck;
}

void pack_views(Checkpoint& ck, const std::string& name,
                const std::vector<std::span<double>>& views) {
    std::vector<double> flat;
    for (const auto& v : views) flat.insert(flat.end(), v.begin(), v.end());
    ck.add(name, flat);
}

void unpack_views(const Checkpoint& ck, const std::string& name,
                  const std::vector<std::span<double>>& views) {
    const std::vector<double>& flat = ck.tensor(name);
    std::size_t total = 0;
    for (const auto& v : views) total += v.size();
    if (flat.size() != total)
        raise(Err::ConfigError, "tensor " + name + " holds " + std::to_string(flat.size()) +
                                    " values, expected " + std::to_string(total));
    std::size_t at = 0;
    for (const auto& v : views) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), v.size(), v.begin());
        at += v.size();
    }
}

} // namespace mrf
