#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace mrf {

// Named float64 tensors plus a free-form JSON metadata block, framed like the
// embedding format under the "MRFC" magic. Structural information (configs,
// counters) belongs in meta; unpacking reconstructs objects from their
// configs and overwrites the parameter storage from the manifest.
struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, std::vector<double>>> tensors;

    void add(const std::string& name, std::span<const double> values);
    bool has(const std::string& name) const;
    const std::vector<double>& tensor(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Concatenates parameter views into one named tensor / scatters it back.
void pack_views(Checkpoint& ck, const std::string& name,
                const std::vector<std::span<double>>& views);
void unpack_views(const Checkpoint& ck, const std::string& name,
                  const std::vector<std::span<double>>& views);

} // namespace mrf
