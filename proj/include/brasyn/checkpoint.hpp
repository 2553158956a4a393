#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nn.hpp"

namespace brasyn::ckpt {

// Self-describing checkpoint archive: 8-byte magic, u32 version, u64 JSON
// length, JSON metadata (config, epoch, rng state, tensor manifest), then
// float32 little-endian tensor payloads in manifest order.

inline constexpr char kMagic[8] = {'B', 'S', 'Y', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Archive {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        BRASYN_CHECK(false, "checkpoint: tensor not found: ", name);
        return tensors.front().second;
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta_full = meta;
        auto manifest = nlohmann::json::array();
        for (const auto& [name, t] : tensors) {
            nlohmann::json e;
            e["name"] = name;
            e["shape"] = t.shape();
            manifest.push_back(e);
        }
        meta_full["tensors"] = manifest;
        const std::string js = meta_full.dump();

        std::ofstream f(path, std::ios::binary);
        BRASYN_CHECK(f.good(), "checkpoint: cannot open for write: ", path.string());
        f.write(kMagic, 8);
        const std::uint32_t ver = kVersion;
        f.write(reinterpret_cast<const char*>(&ver), 4);
        const std::uint64_t len = js.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(js.data(), std::streamsize(js.size()));
        for (const auto& [name, t] : tensors)
            f.write(reinterpret_cast<const char*>(t.data()),
                    std::streamsize(t.size() * sizeof(float)));
        BRASYN_CHECK(f.good(), "checkpoint: write failed: ", path.string());
    }

    static Archive load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        BRASYN_CHECK(f.good(), "checkpoint: cannot open: ", path.string());
        char magic[8];
        f.read(magic, 8);
        BRASYN_CHECK(f.gcount() == 8 && std::equal(magic, magic + 8, kMagic),
                     "checkpoint: bad magic in ", path.string());
        std::uint32_t ver = 0;
        f.read(reinterpret_cast<char*>(&ver), 4);
        BRASYN_CHECK(ver == kVersion, "checkpoint: unsupported version ", ver);
        std::uint64_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 8);
        std::string js(len, 0);
        f.read(js.data(), std::streamsize(len));
        BRASYN_CHECK(f.good(), "checkpoint: truncated metadata in ", path.string());

        Archive a;
        a.meta = nlohmann::json::parse(js);
        for (const auto& e : a.meta.at("tensors")) {
            Shape shape = e.at("shape").get<Shape>();
            Tensor<float> t(shape);
            f.read(reinterpret_cast<char*>(t.data()),
                   std::streamsize(t.size() * sizeof(float)));
            BRASYN_CHECK(f.gcount() == std::streamsize(t.size() * sizeof(float)),
                         "checkpoint: truncated tensor ", e.at("name").get<std::string>());
            a.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
        }
        a.meta.erase("tensors");
        return a;
    }
};

template <class T>
void put_params(Archive& a, const nn::ParamStore<T>& ps, const std::string& prefix = "") {
    for (const auto& [name, v] : ps.items)
        a.tensors.emplace_back(prefix + name, v->value.template cast<float>());
}

template <class T>
void get_params(const Archive& a, nn::ParamStore<T>& ps, const std::string& prefix = "") {
    for (auto& [name, v] : ps.items) {
        const Tensor<float>& t = a.tensor(prefix + name);
        BRASYN_CHECK(t.shape() == v->value.shape(), "checkpoint: shape mismatch for ",
                     name, ": ", shape_str(t.shape()), " vs ",
                     shape_str(v->value.shape()));
        v->value = t.template cast<T>();
    }
}

} // namespace brasyn::ckpt
