#include "detlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "detlab/common.hpp"
#include "json.hpp"

namespace detlab {

uint64_t fnv1a64(const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xCBF29CE484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x00000100000001B3ull;
    }
    return h;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    nlohmann::json manifest;
    manifest["version"] = data.version;
    manifest["step"] = data.step;
    manifest["config"] = nlohmann::json::parse(data.config_json);
    manifest["blobs"] = nlohmann::json::array();
    for (const auto& [name, values] : data.blobs) {
        std::ostringstream fnv;
        fnv << std::hex << fnv1a64(values.data(), values.size() * sizeof(float));
        manifest["blobs"].push_back({{"name", name}, {"count", values.size()}, {"fnv", fnv.str()}});
    }
    const std::string mjson = manifest.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(str_cat("cannot open '", path, "' for writing"));
    os.write(kCheckpointMagic, 8);
    const uint32_t mlen = static_cast<uint32_t>(mjson.size());
    os.write(reinterpret_cast<const char*>(&mlen), 4);
    os.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, values] : data.blobs)
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!os) throw IoError(str_cat("write failure on '", path, "'"));
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(str_cat("cannot open checkpoint '", path, "'"));
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError(str_cat("'", path, "' is not a checkpoint (bad magic)"));
    uint32_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 4);
    std::string mjson(mlen, '\0');
    is.read(mjson.data(), mlen);
    if (!is) throw IoError(str_cat("truncated manifest in '", path, "'"));

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const std::exception& e) {
        throw IoError(str_cat("corrupt manifest in '", path, "': ", e.what()));
    }
    CheckpointData data;
    data.version = manifest.at("version").get<int>();
    if (data.version != kCheckpointVersion)
        throw IoError(str_cat("checkpoint version ", data.version, " not supported (expected ", kCheckpointVersion, ")"));
    data.step = manifest.at("step").get<int64_t>();
    data.config_json = manifest.at("config").dump();
    for (const auto& entry : manifest.at("blobs")) {
        const std::string name = entry.at("name").get<std::string>();
        const size_t count = entry.at("count").get<size_t>();
        std::vector<float> values(count);
        is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!is) throw IoError(str_cat("truncated blob '", name, "' in '", path, "'"));
        std::ostringstream fnv;
        fnv << std::hex << fnv1a64(values.data(), values.size() * sizeof(float));
        if (fnv.str() != entry.at("fnv").get<std::string>())
            throw IoError(str_cat("checksum mismatch on blob '", name, "' in '", path, "'"));
        data.blobs.emplace_back(name, std::move(values));
    }
    return data;
}

}  // namespace detlab
