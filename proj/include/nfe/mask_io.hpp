// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nfe/fission.hpp"

namespace nfe {

/// Everything needed to reproduce a fission topology bit-for-bit.
///
/// On-disk layout (little-endian):
///   8 bytes   magic "NFEMASK1"
///   u32       JSON header length H
///   H bytes   JSON header: format version, plan, seed, sparsity, pruning
///             method and per-stage layer shapes
///   payload   for each stage: p_i then M_i^1..M_i^g, each bit-packed
///             LSB-first over the stage's flat weight order, padded to a byte
///   u32       CRC-32 of every preceding byte
struct MaskContainer {
  FissionPlan plan;
  GroupMaskSet masks;
  std::uint64_t seed = 0;
  std::string pai_method = "none";

  friend bool operator==(const MaskContainer&, const MaskContainer&) = default;
};

std::vector<std::uint8_t> encode_masks(const MaskContainer& c);
MaskContainer decode_masks(std::span<const std::uint8_t> bytes);

void save_masks(const std::filesystem::path& path, const MaskContainer& c);
MaskContainer load_masks(const std::filesystem::path& path);

/// Bit-packs a stage mask in flat order, LSB first.
std::vector<std::uint8_t> pack_bits(const StageMask& m);
void unpack_bits(std::span<const std::uint8_t> bits, StageMask& m);

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace nfe
