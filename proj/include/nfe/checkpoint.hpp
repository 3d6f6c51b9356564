// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfe/model.hpp"

namespace nfe {

nlohmann::json to_json(const BackboneSpec& spec);
BackboneSpec backbone_spec_from_json(const nlohmann::json& j);

/// Serialised model: architecture, fission plan and masks, every trainable
/// tensor and every normalisation running statistic.
///
/// Layout (little-endian):
///   8 bytes   magic "NFECKPT1"
///   u32       JSON header length, then the header (backbone, dtype, tensor
///             directory of names and shapes, free-form metadata)
///   u32       mask container length, then the container bytes
///   payload   tensors in directory order, raw element bytes of `dtype`
///   u32       CRC-32 of every preceding byte
template <typename T>
std::vector<std::uint8_t> encode_checkpoint(MultiExitModel<T>& model, const nlohmann::json& metadata = {});

template <typename T>
MultiExitModel<T> decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* metadata = nullptr);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, MultiExitModel<T>& model, const nlohmann::json& metadata = {});

template <typename T>
MultiExitModel<T> load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace nfe
