#include "dgrnet/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dgrnet {

namespace {

namespace fs = std::filesystem;

void write_binary_atomic(const fs::path& path, const void* data, std::size_t bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::vector<char> read_all(const fs::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(size));
    f.read(buf.data(), size);
    if (!f) throw std::runtime_error("short read from " + path.string());
    return buf;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    nlohmann::json j;
    f >> j;
    return j;
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    write_binary_atomic(path, content.data(), content.size());
}

void save_volume_f32(const std::filesystem::path& base, const std::string& name, const Shape& shape,
                     const std::vector<float>& data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("save_volume_f32: " + std::to_string(data.size()) +
                                    " values for shape " + shape_str(shape));
    fs::path bin = base;
    bin += ".bin";
    write_binary_atomic(bin, data.data(), data.size() * sizeof(float));
    nlohmann::json sidecar{{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"order", "row-major"}};
    fs::path meta = base;
    meta += ".json";
    write_text_atomic(meta, sidecar.dump(2) + "\n");
}

LoadedArray load_volume_f32(const std::filesystem::path& base) {
    fs::path meta = base;
    meta += ".json";
    nlohmann::json sidecar = read_json(meta);
    LoadedArray out;
    out.name = sidecar.at("name").get<std::string>();
    out.shape = sidecar.at("shape").get<Shape>();
    if (sidecar.at("dtype").get<std::string>() != "f32")
        throw std::runtime_error(meta.string() + ": unsupported dtype " + sidecar.at("dtype").dump());
    fs::path bin = base;
    bin += ".bin";
    std::vector<char> raw = read_all(bin);
    const std::size_t expect = static_cast<std::size_t>(shape_numel(out.shape)) * sizeof(float);
    if (raw.size() != expect)
        throw std::runtime_error(bin.string() + ": expected " + std::to_string(expect) + " bytes for shape " +
                                 shape_str(out.shape) + ", found " + std::to_string(raw.size()));
    out.data.resize(raw.size() / sizeof(float));
    std::memcpy(out.data.data(), raw.data(), raw.size());
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays,
                     const nlohmann::json& config) {
    std::vector<float> blob;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& a : arrays) {
        entries.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", blob.size()}});
        blob.insert(blob.end(), a.data.begin(), a.data.end());
    }
    write_binary_atomic(path, blob.data(), blob.size() * sizeof(float));
    nlohmann::json manifest{{"dtype", "f32"},
                            {"byte_order", "little-endian"},
                            {"total_elements", blob.size()},
                            {"config", config},
                            {"arrays", entries}};
    fs::path meta = path;
    meta += ".json";
    write_text_atomic(meta, manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    fs::path meta = path;
    meta += ".json";
    if (!fs::exists(path) || !fs::exists(meta))
        throw std::runtime_error("checkpoint not found: " + path.string());
    nlohmann::json manifest = read_json(meta);
    std::vector<char> raw = read_all(path);
    const std::size_t total = manifest.at("total_elements").get<std::size_t>();
    if (raw.size() != total * sizeof(float))
        throw std::runtime_error(path.string() + ": expected " + std::to_string(total * sizeof(float)) +
                                 " bytes, found " + std::to_string(raw.size()));
    std::vector<float> blob(total);
    std::memcpy(blob.data(), raw.data(), raw.size());
    Checkpoint ckpt;
    ckpt.config = manifest.at("config");
    for (const auto& e : manifest.at("arrays")) {
        NamedArray a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<Shape>();
        const std::size_t off = e.at("offset").get<std::size_t>();
        const std::size_t n = static_cast<std::size_t>(shape_numel(a.shape));
        if (off + n > blob.size())
            throw std::runtime_error(path.string() + ": array " + a.name + " overruns the blob");
        a.data.assign(blob.begin() + off, blob.begin() + off + n);
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

}  // namespace dgrnet
