#pragma once

#include <fstream>

#include "lvit/layers.hpp"
#include "lvit/losses.hpp"
#include "lvit/model.hpp"
#include "lvit/trainer.hpp"

#include <json.hpp>

namespace lvit {

// Standard CRC-32 (reflected, polynomial 0xEDB88320).
inline std::uint32_t crc32(const void* data, size_t len, std::uint32_t crc = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const LViTConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"image_size", c.image_size},
                       {"levels", c.levels},
                       {"channels_per_level", c.channels_per_level},
                       {"patch_size", c.patch_size},
                       {"heads", c.heads},
                       {"vit_layers_per_module", c.vit_layers_per_module},
                       {"text_embed_dim", c.text_embed_dim},
                       {"max_tokens", c.max_tokens},
                       {"num_classes", c.num_classes},
                       {"use_gelu", c.use_gelu},
                       {"positional_embeddings", c.positional_embeddings}};
}

inline void from_json(const nlohmann::json& j, LViTConfig& c) {
    c = LViTConfig{};
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
    if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
    if (j.contains("levels")) j.at("levels").get_to(c.levels);
    if (j.contains("channels_per_level")) j.at("channels_per_level").get_to(c.channels_per_level);
    if (j.contains("patch_size")) j.at("patch_size").get_to(c.patch_size);
    if (j.contains("heads")) j.at("heads").get_to(c.heads);
    if (j.contains("vit_layers_per_module")) j.at("vit_layers_per_module").get_to(c.vit_layers_per_module);
    if (j.contains("text_embed_dim")) j.at("text_embed_dim").get_to(c.text_embed_dim);
    if (j.contains("max_tokens")) j.at("max_tokens").get_to(c.max_tokens);
    if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
    if (j.contains("use_gelu")) j.at("use_gelu").get_to(c.use_gelu);
    if (j.contains("positional_embeddings")) j.at("positional_embeddings").get_to(c.positional_embeddings);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"beta", c.beta},          {"lr", c.lr},
                       {"batch_size", c.batch_size}, {"patience", c.patience},
                       {"max_epochs", c.max_epochs}, {"warmup_epochs", c.warmup_epochs},
                       {"label_ratio", c.label_ratio},
                       {"use_text", c.use_text},     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("beta")) j.at("beta").get_to(c.beta);
    if (j.contains("lr")) j.at("lr").get_to(c.lr);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("patience")) j.at("patience").get_to(c.patience);
    if (j.contains("max_epochs")) j.at("max_epochs").get_to(c.max_epochs);
    if (j.contains("warmup_epochs")) j.at("warmup_epochs").get_to(c.warmup_epochs);
    if (j.contains("label_ratio")) j.at("label_ratio").get_to(c.label_ratio);
    if (j.contains("use_text")) j.at("use_text").get_to(c.use_text);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = nlohmann::json{{"alpha", c.alpha}, {"smooth", c.smooth}, {"ce_clamp", c.ce_clamp}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    c = LossConfig{};
    if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
    if (j.contains("smooth")) j.at("smooth").get_to(c.smooth);
    if (j.contains("ce_clamp")) j.at("ce_clamp").get_to(c.ce_clamp);
}

// ---------------------------------------------------------------------------
// Checkpoint binary format
// ---------------------------------------------------------------------------
//
//   "LVIT" | u32 version | u32 json_len | config JSON | u64 param_count
//   | per parameter: u32 name_len + name bytes      (name table)
//   | per parameter: u32 rank, u32 dims..., f32 payload (little-endian)
//   | u32 CRC-32 over everything before it
//
// Parameters are laid out in bank enumeration order (lexicographic), which
// makes save -> load -> save byte-identical.

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string config_json;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> payloads;
};

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));  // little-endian host assumed (x86/arm64)
}

template <typename T>
T take(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string buf;
    buf.append("LVIT", 4);
    detail::put<std::uint32_t>(buf, Checkpoint::kVersion);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(ck.config_json.size()));
    buf.append(ck.config_json);
    detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(ck.names.size()));
    for (const auto& name : ck.names) {
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
    }
    for (size_t i = 0; i < ck.names.size(); ++i) {
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(ck.shapes[i].size()));
        for (const int d : ck.shapes[i]) detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
        for (const float v : ck.payloads[i]) detail::put<float>(buf, v);
    }
    detail::put<std::uint32_t>(buf, crc32(buf.data(), buf.size()));
    return buf;
}

inline Checkpoint decode_checkpoint(const std::string& buf) {
    if (buf.size() < 16 || buf.compare(0, 4, "LVIT") != 0)
        throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
    const std::uint32_t stored_crc = [&] {
        size_t off = buf.size() - 4;
        return detail::take<std::uint32_t>(buf, off);
    }();
    if (crc32(buf.data(), buf.size() - 4) != stored_crc)
        throw std::runtime_error("checkpoint: CRC mismatch, file is corrupted");

    size_t off = 4;
    Checkpoint ck;
    const auto version = detail::take<std::uint32_t>(buf, off);
    if (version != Checkpoint::kVersion)
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
    const auto json_len = detail::take<std::uint32_t>(buf, off);
    if (off + json_len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    ck.config_json = buf.substr(off, json_len);
    off += json_len;
    const auto count = detail::take<std::uint64_t>(buf, off);
    ck.names.resize(count);
    for (auto& name : ck.names) {
        const auto len = detail::take<std::uint32_t>(buf, off);
        if (off + len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
        name = buf.substr(off, len);
        off += len;
    }
    ck.shapes.resize(count);
    ck.payloads.resize(count);
    for (size_t i = 0; i < count; ++i) {
        const auto rank = detail::take<std::uint32_t>(buf, off);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::take<std::uint32_t>(buf, off));
        ck.shapes[i] = shape;
        const auto n = static_cast<size_t>(numel(shape));
        ck.payloads[i].resize(n);
        for (auto& v : ck.payloads[i]) v = detail::take<float>(buf, off);
    }
    if (off != buf.size() - 4) throw std::runtime_error("checkpoint: trailing bytes");
    return ck;
}

template <typename Real>
Checkpoint make_checkpoint(const std::string& config_json, const ParameterBank<Real>& bank) {
    Checkpoint ck;
    ck.config_json = config_json;
    for (const auto& [name, entry] : bank.entries()) {
        ck.names.push_back(name);
        ck.shapes.push_back(entry.tensor.shape());
        std::vector<float> payload(entry.tensor.values().size());
        for (size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(entry.tensor.data()[i]);
        ck.payloads.push_back(std::move(payload));
    }
    return ck;
}

// Loads values into an existing bank; the checkpoint's name table must agree
// with the bank enumeration exactly.
template <typename Real>
void apply_checkpoint(const Checkpoint& ck, ParameterBank<Real>& bank) {
    size_t i = 0;
    for (const auto& [name, entry] : bank.entries()) {
        if (i >= ck.names.size() || ck.names[i] != name)
            throw std::runtime_error("checkpoint: parameter names do not match the model enumeration (" +
                                     name + ")");
        if (ck.shapes[i] != entry.tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        auto t = entry.tensor;
        for (size_t k = 0; k < ck.payloads[i].size(); ++k) t.data()[k] = static_cast<Real>(ck.payloads[i][k]);
        ++i;
    }
    if (i != ck.names.size()) throw std::runtime_error("checkpoint: extra parameters in file");
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
}

}  // namespace lvit
