#pragma once

// On-disk checkpoint: a directory holding
//   model.safetensors  8-byte LE header length, JSON header, contiguous LE float32 payload
//   arch.json          ArchDescriptor sidecar
// Header keys and payload are laid out in lexicographic tensor-name order, so identical
// stores always produce identical bytes.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace glueforge {

namespace fs = std::filesystem;

inline constexpr const char* kTensorFile = "model.safetensors";
inline constexpr const char* kArchFile = "arch.json";

struct Checkpoint {
    TensorStore store;
    ArchDescriptor desc;

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void append_f32_le(std::string& out, std::span<const float> values) {
    std::size_t start = out.size();
    out.resize(start + values.size() * 4);
    char* dst = out.data() + start;
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(dst, values.data(), values.size() * 4);
    } else {
        for (float f : values) {
            auto bits = std::bit_cast<std::uint32_t>(f);
            for (int i = 0; i < 4; ++i) *dst++ = static_cast<char>((bits >> (8 * i)) & 0xff);
        }
    }
}

inline void read_f32_le(const unsigned char* src, std::span<float> out) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), src, out.size() * 4);
    } else {
        for (auto& f : out) {
            std::uint32_t bits = src[0] | (src[1] << 8) | (src[2] << 16) | (std::uint32_t(src[3]) << 24);
            f = std::bit_cast<float>(bits);
            src += 4;
        }
    }
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw Error("read failure on '" + path.string() + "'");
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write failure on '" + path.string() + "'");
}

inline nlohmann::json read_json_file(const fs::path& path) {
    auto text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
    write_file(path, j.dump(2) + "\n");
}

} // namespace detail

/// Serializes a store to safetensors bytes.
inline std::string encode_safetensors(const TensorStore& store) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : store) {
        std::uint64_t bytes = t.numel() * 4;
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    header["__metadata__"] = {{"format", "pt"}};
    std::string text = header.dump();
    // header is space-padded to an 8-byte boundary so the payload stays aligned
    while (text.size() % 8 != 0) text.push_back(' ');

    std::string out;
    out.reserve(8 + text.size() + offset);
    detail::put_u64_le(out, text.size());
    out += text;
    for (const auto& [_, t] : store) detail::append_f32_le(out, t.data);
    return out;
}

inline TensorStore decode_safetensors(const std::string& bytes, const std::string& origin = "<buffer>") {
    auto fail = [&](const std::string& why) -> Error { return Error("malformed header in " + origin + ": " + why); };
    if (bytes.size() < 8) throw fail("file shorter than the 8-byte length prefix");
    auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint64_t header_len = detail::get_u64_le(raw);
    if (header_len > bytes.size() - 8) throw fail("header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw fail(e.what());
    }
    if (!header.is_object()) throw fail("header is not a JSON object");

    const std::uint64_t payload_len = bytes.size() - 8 - header_len;
    const unsigned char* payload = raw + 8 + header_len;

    struct Span { std::uint64_t begin, end; std::string name; };
    std::vector<Span> spans;
    TensorStore store;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") continue;
        Shape shape;
        std::uint64_t begin = 0, end = 0;
        try {
            if (info.at("dtype").get<std::string>() != "F32")
                throw fail("tensor '" + name + "' has unsupported dtype " + info.at("dtype").dump());
            shape = info.at("shape").get<Shape>();
            const auto& off = info.at("data_offsets");
            if (!off.is_array() || off.size() != 2) throw fail("tensor '" + name + "' has bad data_offsets");
            begin = off[0].get<std::uint64_t>();
            end = off[1].get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw fail("tensor '" + name + "': " + e.what());
        }
        for (auto d : shape)
            if (d <= 0) throw fail("tensor '" + name + "' has non-positive dimension");
        if (end < begin || end > payload_len) throw fail("tensor '" + name + "' offsets outside payload");
        if (end - begin != shape_numel(shape) * 4)
            throw Error("shape/count mismatch in " + origin + ": tensor '" + name + "' shape " + shape_string(shape) +
                        " needs " + std::to_string(shape_numel(shape) * 4) + " bytes, header gives " +
                        std::to_string(end - begin));
        std::vector<float> values(shape_numel(shape));
        detail::read_f32_le(payload + begin, values);
        store.insert(name, Tensor(std::move(shape), std::move(values)));
        spans.push_back({begin, end, name});
    }
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
    std::uint64_t cursor = 0;
    for (const auto& s : spans) {
        if (s.begin != cursor) throw fail("payload of '" + s.name + "' overlaps or leaves a gap");
        cursor = s.end;
    }
    if (cursor != payload_len)
        throw Error("shape/count mismatch in " + origin + ": payload has " + std::to_string(payload_len) +
                    " bytes, header accounts for " + std::to_string(cursor));
    return store;
}

inline void save_checkpoint(const TensorStore& store, const ArchDescriptor& desc, const fs::path& dir) {
    desc.check_conforms(store);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create checkpoint directory '" + dir.string() + "': " + ec.message());
    detail::write_file(dir / kTensorFile, encode_safetensors(store));
    detail::write_json_file(dir / kArchFile, to_json(desc));
}

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) { save_checkpoint(ckpt.store, ckpt.desc, dir); }

inline Checkpoint load_checkpoint(const fs::path& dir) {
    for (const char* f : {kTensorFile, kArchFile})
        if (!fs::exists(dir / f)) throw Error("missing file '" + (dir / f).string() + "'");
    Checkpoint ckpt;
    ckpt.store = decode_safetensors(detail::read_file(dir / kTensorFile), (dir / kTensorFile).string());
    ckpt.desc = arch_from_json(detail::read_json_file(dir / kArchFile));
    ckpt.desc.check_conforms(ckpt.store);
    return ckpt;
}

inline bool is_checkpoint_dir(const fs::path& dir) {
    return fs::exists(dir / kTensorFile) && fs::exists(dir / kArchFile);
}

enum class CompatVerdict { mergeable, mixture_only, incompatible };

inline const char* to_string(CompatVerdict v) {
    switch (v) {
    case CompatVerdict::mergeable: return "mergeable";
    case CompatVerdict::mixture_only: return "mixture_only";
    case CompatVerdict::incompatible: return "incompatible";
    }
    return "incompatible";
}

struct CompatReport {
    bool same_arch = false;
    std::vector<std::string> shape_mismatches; ///< sorted; includes names present on one side only
    CompatVerdict verdict = CompatVerdict::incompatible;
};

/// Structural mergeability check. Symmetric in its arguments.
inline CompatReport check_compat(const ArchDescriptor& da, const TensorStore& a, const ArchDescriptor& db,
                                 const TensorStore& b) {
    CompatReport r;
    r.same_arch = da.same_dims(db);
    auto ia = a.begin();
    auto ib = b.begin();
    while (ia != a.end() || ib != b.end()) {
        if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
            r.shape_mismatches.push_back(ia->first);
            ++ia;
        } else if (ia == a.end() || ib->first < ia->first) {
            r.shape_mismatches.push_back(ib->first);
            ++ib;
        } else {
            if (ia->second.shape != ib->second.shape) r.shape_mismatches.push_back(ia->first);
            ++ia;
            ++ib;
        }
    }
    if (r.same_arch && r.shape_mismatches.empty()) r.verdict = CompatVerdict::mergeable;
    else if (da.hidden_dim == db.hidden_dim && da.vocab_size == db.vocab_size) r.verdict = CompatVerdict::mixture_only;
    else r.verdict = CompatVerdict::incompatible;
    return r;
}

inline CompatReport check_compat(const Checkpoint& a, const Checkpoint& b) {
    return check_compat(a.desc, a.store, b.desc, b.store);
}

} // namespace glueforge
