#pragma once

// Checkpoint file: 8-byte magic, u32 manifest length, JSON manifest (version,
// step, config echo, blob table with per-blob length and FNV-1a checksum),
// then raw little-endian float32 blobs in table order.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace detlab {

inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'C', 'K', '0', '0', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

uint64_t fnv1a64(const void* data, size_t len);

struct CheckpointData {
    int version = kCheckpointVersion;
    int64_t step = 0;
    std::string config_json = "{}";  // effective config echo
    std::vector<std::pair<std::string, std::vector<float>>> blobs;

    const std::vector<float>* find(const std::string& name) const {
        for (const auto& [n, v] : blobs)
            if (n == name) return &v;
        return nullptr;
    }
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

}  // namespace detlab
