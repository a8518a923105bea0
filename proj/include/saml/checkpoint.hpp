// Tensor container files: an 8-byte magic, a little-endian u64 index length,
// a JSON index (name -> shape, dtype, byte offset), then raw little-endian
// payloads. Writes go to a temporary file that is renamed into place.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "saml/models.hpp"

namespace saml {

inline constexpr char kContainerMagic[8] = {'S', 'A', 'M', 'L', 'T', 'N', 'S', '1'};
inline constexpr int kContainerVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const char* p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes `bytes` to `path` via a sibling temporary file and an atomic rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

/// In-memory image of a container file. Tensors are kept in 64-bit; the
/// stored dtype is recorded so a round trip is exact.
struct TensorContainer {
    struct Entry {
        std::string name;
        Shape shape;
        std::string dtype;  // "f32" or "f64"
        std::vector<double> values;
    };
    std::vector<Entry> entries;
    nlohmann::json meta = nlohmann::json::object();

    template <typename T>
    void put(const std::string& name, const Tensor<T>& t) {
        entries.push_back({name, t.shape(), sizeof(T) == 4 ? "f32" : "f64",
                           std::vector<double>(t.values().begin(), t.values().end())});
    }

    template <typename T>
    void put_all(const std::string& prefix, const ParamSet<T>& set) {
        for (std::size_t i = 0; i < set.size(); ++i) put(prefix + set.names[i], set.values[i]);
    }

    const Entry& find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw IoError("container has no tensor '" + name + "'");
    }

    bool contains(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return true;
        return false;
    }

    template <typename T>
    Tensor<T> get(const std::string& name) const {
        const Entry& e = find(name);
        return Tensor<T>(e.shape, std::vector<T>(e.values.begin(), e.values.end()));
    }

    /// Loads every tensor named prefix + name for the names already in `set`.
    template <typename T>
    void get_all(const std::string& prefix, ParamSet<T>& set) const {
        for (std::size_t i = 0; i < set.size(); ++i) {
            Tensor<T> t = get<T>(prefix + set.names[i]);
            if (t.shape() != set.values[i].shape())
                throw IoError("tensor '" + prefix + set.names[i] + "' has shape " + to_string(t.shape()));
            set.values[i] = std::move(t);
        }
    }

    std::string serialize() const {
        nlohmann::json index;
        index["format"] = "saml-tensors";
        index["version"] = kContainerVersion;
        index["meta"] = meta;
        index["tensors"] = nlohmann::json::array();
        std::string payload;
        for (const auto& e : entries) {
            const std::size_t width = e.dtype == "f32" ? 4 : 8;
            index["tensors"].push_back({{"name", e.name},
                                        {"shape", e.shape},
                                        {"dtype", e.dtype},
                                        {"offset", payload.size()},
                                        {"nbytes", e.values.size() * width}});
            for (double v : e.values) {
                if (width == 4)
                    detail::put_le(payload, static_cast<float>(v));
                else
                    detail::put_le(payload, v);
            }
        }
        const std::string text = index.dump();
        std::string out(kContainerMagic, sizeof kContainerMagic);
        detail::put_le<std::uint64_t>(out, text.size());
        out += text;
        out += payload;
        return out;
    }

    static TensorContainer parse(const std::string& bytes) {
        if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, sizeof kContainerMagic) != 0)
            throw IoError("not a tensor container");
        const auto len = detail::get_le<std::uint64_t>(bytes.data() + 8);
        if (len > bytes.size() - 16) throw IoError("truncated container index");
        nlohmann::json index;
        try {
            index = nlohmann::json::parse(bytes.substr(16, len));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("corrupt container index: ") + e.what());
        }
        if (index.value("version", 0) != kContainerVersion)
            throw IoError("unsupported container version " + index.value("version", nlohmann::json(0)).dump());
        const std::size_t base = 16 + len;
        TensorContainer c;
        c.meta = index.value("meta", nlohmann::json::object());
        for (const auto& t : index.at("tensors")) {
            Entry e{t.at("name"), t.at("shape").get<Shape>(), t.at("dtype"), {}};
            if (e.dtype != "f32" && e.dtype != "f64") throw IoError("unknown dtype " + e.dtype);
            const std::size_t width = e.dtype == "f32" ? 4 : 8;
            const std::size_t offset = t.at("offset"), nbytes = t.at("nbytes");
            if (nbytes != numel(e.shape) * width) throw IoError("size mismatch for tensor " + e.name);
            if (base + offset + nbytes > bytes.size()) throw IoError("truncated payload for tensor " + e.name);
            const char* p = bytes.data() + base + offset;
            e.values.resize(numel(e.shape));
            for (std::size_t i = 0; i < e.values.size(); ++i)
                e.values[i] = width == 4 ? detail::get_le<float>(p + 4 * i) : detail::get_le<double>(p + 8 * i);
            c.entries.push_back(std::move(e));
        }
        return c;
    }

    void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
    static TensorContainer load(const std::filesystem::path& path) { return parse(read_file(path)); }
};

inline nlohmann::json to_json(const SegNetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"depth", c.depth},
            {"num_classes", c.num_classes},
            {"norm_mode", to_string(c.norm_mode)}};
}

inline SegNetConfig segnet_config_from_json(const nlohmann::json& j) {
    SegNetConfig c;
    c.in_channels = j.at("in_channels");
    c.base_channels = j.at("base_channels");
    c.depth = j.at("depth");
    c.num_classes = j.at("num_classes");
    c.norm_mode = parse_norm_mode(j.at("norm_mode"));
    return c;
}

template <typename T>
void save_params(const std::filesystem::path& path, const SegNetParams<T>& params) {
    TensorContainer c;
    c.meta = {{"kind", "segnet"}, {"config", to_json(params.config)}};
    c.put_all("theta/", params.weights);
    c.put_all("buffer/", params.running);
    c.save(path);
}

template <typename T>
SegNetParams<T> load_params(const std::filesystem::path& path) {
    const TensorContainer c = TensorContainer::load(path);
    if (!c.meta.contains("config")) throw IoError(path.string() + " has no network configuration");
    SegNetParams<T> p = init_params<T>(segnet_config_from_json(c.meta.at("config")), 0);
    c.get_all("theta/", p.weights);
    c.get_all("buffer/", p.running);
    return p;
}

}  // namespace saml
