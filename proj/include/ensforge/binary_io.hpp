#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ensforge/params.hpp"
#include "ensforge/tensor.hpp"

namespace ensforge {

// Weight snapshot ("ENSW", v1):
//   magic[4] version:u32 count:u32
//   per tensor: name_len:u16 name[name_len] ndim:u8 dims:u32*ndim values:f32*prod(dims)
// Raster ("ENSR", v1):
//   magic[4] version:u32 H:u32 W:u32 values:f32*H*W (row-major)
// All integers and floats little-endian.

inline constexpr std::uint32_t kFormatVersion = 1;

std::vector<std::uint8_t> encode_params(const ParamSet& params);
/// Decodes a full ENSW image. Throws FormatError naming the failing offset.
ParamSet decode_params(std::span<const std::uint8_t> bytes);

void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_raster(const Tensor& raster);
Tensor decode_raster(std::span<const std::uint8_t> bytes);

void save_raster(const Tensor& raster, const std::filesystem::path& path);
Tensor load_raster(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ensforge
