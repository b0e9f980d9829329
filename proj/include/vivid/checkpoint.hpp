#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"
#include "vivid/tensor.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Checkpoint container: magic "VIVD", u32 version, u64 header length, JSON
// header, then a contiguous little-endian f64 payload. The header maps tensor
// names to shape/dtype/offset (offsets relative to payload start, names in
// sorted order) and carries run metadata under "meta". Loading is all or
// nothing: any truncation or inconsistency raises FormatError.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json meta;  // free-form run metadata (config, step, rng, flags)
    std::map<std::string, TensorPtr> tensors;

    const TensorPtr& require(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValidationError("checkpoint is missing tensor " + name);
        return it->second;
    }
};

namespace detail {

inline void append_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

}  // namespace detail

// Serializes tensors (in sorted-name order) plus metadata. Deterministic:
// identical inputs produce identical bytes.
inline std::string encode_checkpoint(const std::vector<std::pair<std::string, TensorPtr>>& tensors,
                                     const nlohmann::json& meta) {
    std::map<std::string, TensorPtr> sorted;
    for (const auto& [name, t] : tensors) {
        if (!sorted.emplace(name, t).second) {
            throw ValidationError("duplicate tensor name " + name);
        }
    }
    nlohmann::json header;
    header["meta"] = meta;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : sorted) {
        header["tensors"][name] = {
            {"shape", t->shape}, {"dtype", "f64"}, {"offset", offset}};
        offset += t->numel() * sizeof(double);
    }
    if (sorted.empty()) header["tensors"] = nlohmann::json::object();
    const std::string header_text = header.dump();

    std::string out;
    out.reserve(16 + header_text.size() + offset);
    out.append("VIVD", 4);
    std::uint32_t version = kCheckpointVersion;
    detail::append_bytes(out, &version, 4);
    std::uint64_t hlen = header_text.size();
    detail::append_bytes(out, &hlen, 8);
    out.append(header_text);
    for (const auto& [name, t] : sorted) {
        detail::append_bytes(out, t->values.data(), t->numel() * sizeof(double));
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16) throw FormatError("checkpoint truncated: missing header");
    if (bytes.compare(0, 4, "VIVD") != 0) throw FormatError("not a checkpoint file (bad magic)");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (16 + hlen > bytes.size()) throw FormatError("checkpoint truncated: header cut short");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, hlen));
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
        throw FormatError("checkpoint header lacks a tensor table");
    }

    const std::size_t payload_start = 16 + hlen;
    const std::size_t payload_size = bytes.size() - payload_start;

    Checkpoint ck;
    if (header.contains("meta")) ck.meta = header["meta"];
    std::uint64_t expected = 0;
    for (const auto& [name, desc] : header["tensors"].items()) {
        if (!desc.contains("shape") || !desc.contains("offset") || !desc.contains("dtype")) {
            throw FormatError("tensor entry " + name + " lacks shape/dtype/offset");
        }
        if (desc["dtype"] != "f64") {
            throw FormatError("tensor " + name + " has unsupported dtype");
        }
        std::vector<int> shape = desc["shape"].get<std::vector<int>>();
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 1) throw FormatError("tensor " + name + " has a non-positive dimension");
            n *= static_cast<std::size_t>(d);
        }
        const std::uint64_t off = desc["offset"].get<std::uint64_t>();
        const std::uint64_t end = off + n * sizeof(double);
        if (end > payload_size) {
            throw FormatError("checkpoint truncated: tensor " + name +
                              " extends past end of payload");
        }
        if (end > expected) expected = end;
        std::vector<double> vals(n);
        std::memcpy(vals.data(), bytes.data() + payload_start + off, n * sizeof(double));
        ck.tensors.emplace(name, make_tensor(shape, std::move(vals)));
    }
    if (expected != payload_size) {
        throw FormatError("checkpoint payload size does not match the tensor table");
    }
    return ck;
}

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, TensorPtr>>& tensors,
                            const nlohmann::json& meta) {
    atomic_write_file(path, encode_checkpoint(tensors, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_file(path));
}

// Strips a full training checkpoint down to the vision encoder: vit.* tensors
// only, meta marked backbone=true. Everything else (projector, decoder,
// optimizer moments) is dropped.
inline void export_backbone(const Checkpoint& full, const std::string& out_path) {
    std::vector<std::pair<std::string, TensorPtr>> kept;
    for (const auto& [name, t] : full.tensors) {
        if (name.rfind("vit.", 0) == 0) kept.emplace_back(name, t);
    }
    if (kept.empty()) throw ValidationError("checkpoint holds no vision encoder tensors");
    nlohmann::json meta = full.meta;
    meta["backbone"] = true;
    meta.erase("rng");
    meta.erase("optimizer_step");
    atomic_write_file(out_path, encode_checkpoint(kept, meta));
}

// Order-insensitive FNV-1a digest over names, shapes and value bit patterns.
// Used to pin down that a parameter set did not move.
inline std::uint64_t tensor_checksum(const std::vector<std::pair<std::string, TensorPtr>>& ts) {
    std::map<std::string, TensorPtr> sorted(ts.begin(), ts.end());
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : sorted) {
        mix(name.data(), name.size());
        for (int d : t->shape) mix(&d, sizeof(d));
        for (double v : t->values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            mix(&bits, 8);
        }
    }
    return h;
}

}  // namespace vivid
