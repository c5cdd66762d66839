#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsv/tensor.hpp"

namespace tsv {

/*
 * safetensors container:
 *
 *   [u64 little-endian N][N bytes UTF-8 JSON header][raw payload]
 *
 * The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end)}
 * with offsets relative to the start of the payload, plus an optional
 * "__metadata__" object of string -> string.
 *
 * Reading accepts F32, F16 and BF16 and widens everything to float. Writing
 * emits F32 unless a narrower dtype is requested explicitly.
 */

TensorMap load_checkpoint(const std::filesystem::path& path);
TensorMap parse_checkpoint(std::span<const std::uint8_t> bytes);

struct SaveOptions {
    DType dtype = DType::F32;
};

/// Throws NonFiniteError before touching the file if any tensor holds NaN/Inf.
void save_checkpoint(const TensorMap& map, const std::filesystem::path& path, const SaveOptions& opts = {});
std::vector<std::uint8_t> serialize_checkpoint(const TensorMap& map, const SaveOptions& opts = {});

// IEEE half / bfloat16 conversions (round-to-nearest-even on narrowing).
float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bf16_to_float(std::uint16_t b);
std::uint16_t float_to_bf16(float f);

}  // namespace tsv
