// SPDX-License-Identifier: Apache-2.0
#include "nfe/mask_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "nfe/json_io.hpp"

namespace nfe {

namespace {

constexpr char kMagic[8] = {'N', 'F', 'E', 'M', 'A', 'S', 'K', '1'};
constexpr int kFormatVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json to_json(const FissionPlan& plan) {
  return {{"num_exits", plan.num_exits},
          {"num_stages", plan.num_stages},
          {"groups_per_stage", plan.groups_per_stage},
          {"group_ratios", plan.group_ratios}};
}

FissionPlan plan_from_json(const nlohmann::json& j) {
  try {
    FissionPlan plan;
    plan.num_exits = j.at("num_exits").get<int>();
    plan.num_stages = j.at("num_stages").get<int>();
    plan.groups_per_stage = j.at("groups_per_stage").get<std::vector<int>>();
    plan.group_ratios = j.at("group_ratios").get<std::vector<std::vector<double>>>();
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed plan record: ") + e.what());
  }
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> pack_bits(const StageMask& m) {
  std::vector<std::uint8_t> out((stage_size(m) + 7) / 8, 0);
  std::size_t flat = 0;
  for (const auto& t : m)
    for (auto v : t.values()) {
      if (v) out[flat / 8] |= static_cast<std::uint8_t>(1u << (flat % 8));
      ++flat;
    }
  return out;
}

void unpack_bits(std::span<const std::uint8_t> bits, StageMask& m) {
  if (bits.size() != (stage_size(m) + 7) / 8) fail(ErrorKind::format, "bit array length does not match stage size");
  std::size_t flat = 0;
  for (auto& t : m)
    for (auto& v : t.values()) {
      v = static_cast<std::uint8_t>((bits[flat / 8] >> (flat % 8)) & 1u);
      ++flat;
    }
}

std::vector<std::uint8_t> encode_masks(const MaskContainer& c) {
  c.plan.validate();
  c.masks.verify();
  if (c.masks.num_stages() != c.plan.num_stages) fail(ErrorKind::invalid_argument, "mask set does not match plan");

  nlohmann::json stages = nlohmann::json::array();
  for (const auto& p : c.masks.pai_masks) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& t : p) layers.push_back(t.shape());
    stages.push_back({{"layers", layers}});
  }
  const nlohmann::json header = {{"format_version", kFormatVersion},
                                 {"plan", to_json(c.plan)},
                                 {"seed", c.seed},
                                 {"sparsity", c.masks.sparsity},
                                 {"pai_method", c.pai_method},
                                 {"stages", stages}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (std::size_t i = 0; i < c.masks.group_masks.size(); ++i) {
    auto bits = pack_bits(c.masks.pai_masks[i]);
    out.insert(out.end(), bits.begin(), bits.end());
    for (const auto& g : c.masks.group_masks[i]) {
      bits = pack_bits(g);
      out.insert(out.end(), bits.begin(), bits.end());
    }
  }
  put_u32(out, crc32(out));
  return out;
}

MaskContainer decode_masks(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::format, "not a mask container");
  const std::size_t body = bytes.size() - 4;
  if (crc32(bytes.subspan(0, body)) != get_u32(bytes, body))
    fail(ErrorKind::checksum_mismatch, "mask container CRC mismatch");

  const std::uint32_t hlen = get_u32(bytes, sizeof(kMagic));
  std::size_t pos = sizeof(kMagic) + 4;
  if (pos + hlen > body) fail(ErrorKind::format, "mask container header overruns the file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("mask container header: ") + e.what());
  }
  pos += hlen;
  if (header.value("format_version", 0) != kFormatVersion) fail(ErrorKind::format, "unsupported mask format version");

  MaskContainer c;
  c.plan = plan_from_json(header.at("plan"));
  c.seed = header.at("seed").get<std::uint64_t>();
  c.pai_method = header.value("pai_method", "none");
  c.masks.sparsity = header.at("sparsity").get<double>();
  const auto& stages = header.at("stages");
  if (static_cast<int>(stages.size()) != c.plan.num_stages) fail(ErrorKind::format, "stage count mismatch");

  for (int i = 0; i < c.plan.num_stages; ++i) {
    std::vector<Shape> shapes;
    for (const auto& s : stages[static_cast<std::size_t>(i)].at("layers")) shapes.push_back(s.get<Shape>());
    StageMask proto = zeros_like(shapes);
    const std::size_t nbytes = (stage_size(proto) + 7) / 8;
    auto take = [&](StageMask& m) {
      if (pos + nbytes > body) fail(ErrorKind::format, "mask payload truncated");
      unpack_bits(bytes.subspan(pos, nbytes), m);
      pos += nbytes;
    };
    StageMask p = proto;
    take(p);
    std::vector<StageMask> groups(static_cast<std::size_t>(c.plan.groups(i + 1)), proto);
    for (auto& g : groups) take(g);
    c.masks.pai_masks.push_back(std::move(p));
    c.masks.group_masks.push_back(std::move(groups));
  }
  if (pos != body) fail(ErrorKind::format, "trailing bytes in mask payload");
  c.masks.verify();
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

void save_masks(const std::filesystem::path& path, const MaskContainer& c) { write_file(path, encode_masks(c)); }

MaskContainer load_masks(const std::filesystem::path& path) { return decode_masks(read_file(path)); }

}  // namespace nfe
