#include "tsv/safetensors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "tsv/errors.hpp"

namespace tsv {

using json = nlohmann::json;

namespace {

constexpr const char* kMetadataKey = "__metadata__";

std::uint64_t read_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t read_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16_le(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("failed to open '" + path.string() + "'");
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    if (size < 0) throw IoError("failed to stat '" + path.string() + "'");
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
    if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), size)) {
        throw IoError("failed to read '" + path.string() + "'");
    }
    return buf;
}

Shape parse_shape(const json& j, const std::string& name) {
    if (!j.is_array()) throw MalformedHeaderError("tensor '" + name + "': shape must be an array");
    Shape shape;
    for (const auto& d : j) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() < 1) {
            throw MalformedHeaderError("tensor '" + name + "': shape entries must be positive integers");
        }
        shape.push_back(d.get<std::int64_t>());
    }
    return shape;
}

std::vector<float> decode(const std::uint8_t* p, std::size_t n, DType dtype) {
    std::vector<float> out(n);
    switch (dtype) {
    case DType::F32:
        for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(read_u32_le(p + 4 * i));
        break;
    case DType::F16:
        for (std::size_t i = 0; i < n; ++i) out[i] = half_to_float(read_u16_le(p + 2 * i));
        break;
    case DType::BF16:
        for (std::size_t i = 0; i < n; ++i) out[i] = bf16_to_float(read_u16_le(p + 2 * i));
        break;
    }
    return out;
}

void encode(std::vector<std::uint8_t>& out, const std::vector<float>& data, DType dtype) {
    for (float f : data) {
        if (dtype == DType::F32) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
        } else {
            std::uint16_t bits = dtype == DType::F16 ? float_to_half(f) : float_to_bf16(f);
            out.push_back(static_cast<std::uint8_t>(bits));
            out.push_back(static_cast<std::uint8_t>(bits >> 8));
        }
    }
}

}  // namespace

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    if (exp == 0) {
        float v = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -v : v;
    }
    if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t ax = x & 0x7fffffffu;
    if (ax >= 0x7f800000u) return sign | 0x7c00u | (ax > 0x7f800000u ? 0x200u : 0u);
    // >= 65520 rounds to infinity
    if (ax >= 0x477ff000u) return sign | 0x7c00u;
    if (ax < 0x38800000u) {
        // subnormal half: scale by 2^24 (exact) and round to nearest even
        float scaled = std::bit_cast<float>(ax) * 16777216.0f;
        return sign | static_cast<std::uint16_t>(std::nearbyint(scaled));
    }
    const std::uint32_t mant = ax & 0x7fffffu;
    const std::uint32_t exp = (ax >> 23) - 127 + 15;
    std::uint32_t h = (exp << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    return sign | static_cast<std::uint16_t>(h);
}

float bf16_to_float(std::uint16_t b) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

std::uint16_t float_to_bf16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    x += 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>(x >> 16);
}

TensorMap parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw TruncatedPayloadError("file shorter than the 8-byte header length field");
    const std::uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw TruncatedPayloadError("header length " + std::to_string(header_len) + " exceeds file size " +
                                    std::to_string(bytes.size()));
    }
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);

    // nlohmann keeps the last value for repeated keys, so duplicates are
    // caught while parsing.
    std::set<std::string> seen;
    json::parser_callback_t on_event = [&seen](int depth, json::parse_event_t event, json& parsed) {
        if (depth == 1 && event == json::parse_event_t::key) {
            auto name = parsed.get<std::string>();
            if (!seen.insert(name).second) throw DuplicateNameError("duplicate tensor name '" + name + "'");
        }
        return true;
    };

    json header;
    try {
        header = json::parse(header_begin, header_begin + header_len, on_event);
    } catch (const json::exception& e) {
        throw MalformedHeaderError(std::string("invalid JSON header: ") + e.what());
    }
    if (!header.is_object()) throw MalformedHeaderError("JSON header is not an object");

    const std::uint8_t* payload = bytes.data() + 8 + header_len;
    const std::uint64_t payload_len = bytes.size() - 8 - header_len;

    TensorMap map;
    for (const auto& [name, entry] : header.items()) {
        if (name == kMetadataKey) {
            if (!entry.is_object()) throw MalformedHeaderError("__metadata__ must be an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string()) throw MalformedHeaderError("__metadata__ value for '" + k + "' is not a string");
                map.metadata.emplace(k, v.get<std::string>());
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw MalformedHeaderError("tensor '" + name + "': entry needs dtype, shape and data_offsets");
        }
        if (!entry["dtype"].is_string()) throw MalformedHeaderError("tensor '" + name + "': dtype is not a string");
        const DType dtype = dtype_from_name(entry["dtype"].get<std::string>());
        const Shape shape = parse_shape(entry["shape"], name);
        const auto& offsets = entry["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
            !offsets[1].is_number_unsigned()) {
            throw MalformedHeaderError("tensor '" + name + "': data_offsets must be [begin, end]");
        }
        const auto begin = offsets[0].get<std::uint64_t>();
        const auto end = offsets[1].get<std::uint64_t>();
        if (end < begin) throw MalformedHeaderError("tensor '" + name + "': data_offsets end < begin");
        const auto numel = static_cast<std::uint64_t>(element_count(shape));
        if (end - begin != numel * dtype_size(dtype)) {
            throw MalformedHeaderError("tensor '" + name + "': byte range does not match shape and dtype");
        }
        if (end > payload_len) {
            throw TruncatedPayloadError("tensor '" + name + "': payload ends at byte " + std::to_string(end) +
                                        " but only " + std::to_string(payload_len) + " bytes are present");
        }
        Tensor t(shape, decode(payload + begin, numel, dtype), dtype);
        if (!t.all_finite()) throw NonFiniteError("tensor '" + name + "' contains NaN or Inf");
        map.entries.emplace(name, std::move(t));
    }
    return map;
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    return parse_checkpoint(bytes);
}

std::vector<std::uint8_t> serialize_checkpoint(const TensorMap& map, const SaveOptions& opts) {
    for (const auto& [name, t] : map.entries) {
        if (!t.all_finite()) throw NonFiniteError("tensor '" + name + "' contains NaN or Inf; refusing to save");
        if (static_cast<std::int64_t>(t.data.size()) != t.numel()) {
            throw InvalidArgument("tensor '" + name + "' data does not match its shape");
        }
    }

    json header = json::object();
    if (!map.metadata.empty()) header[kMetadataKey] = map.metadata;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : map.entries) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(t.numel()) * dtype_size(opts.dtype);
        header[name] = {{"dtype", dtype_name(opts.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }

    std::string text = header.dump();
    // pad so the payload starts 8-byte aligned
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    append_u64_le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : map.entries) encode(out, t.data, opts.dtype);
    return out;
}

void save_checkpoint(const TensorMap& map, const std::filesystem::path& path, const SaveOptions& opts) {
    const auto bytes = serialize_checkpoint(map, opts);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace tsv
