// SPDX-License-Identifier: Apache-2.0
#include "nfe/checkpoint.hpp"

#include <cstring>

#include "nfe/json_io.hpp"
#include "nfe/mask_io.hpp"

namespace nfe {

namespace {

constexpr char kMagic[8] = {'N', 'F', 'E', 'C', 'K', 'P', 'T', '1'};

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
void add_norm(std::vector<NamedTensor<T>>& out, const std::string& prefix, BatchNorm<T>& bn) {
  out.push_back({prefix + ".running_mean", &bn.running_mean});
  out.push_back({prefix + ".running_var", &bn.running_var});
}

/// Trainable tensors followed by running statistics, in a fixed order.
template <typename T>
std::vector<NamedTensor<T>> state_tensors(MultiExitModel<T>& model) {
  std::vector<NamedTensor<T>> out;
  for (auto& p : parameters(model)) out.push_back({p.name, &p.param->value});
  if (!model.spec.batch_norm) return out;
  if (model.spec.has_stem()) add_norm(out, "stem.bn", model.stem.norm);
  for (std::size_t n = 0; n < model.nodes.size(); ++n)
    for (std::size_t b = 0; b < model.nodes[n].blocks.size(); ++b) {
      auto& blk = model.nodes[n].blocks[b];
      const std::string bp = "node" + std::to_string(n) + ".block" + std::to_string(b);
      for (std::size_t c = 0; c < blk.norms.size(); ++c) add_norm(out, bp + ".bn" + std::to_string(c), blk.norms[c]);
      if (blk.has_shortcut) add_norm(out, bp + ".shortcut_bn", blk.shortcut_norm);
    }
  return out;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t& pos) {
  if (pos + 4 > b.size()) fail(ErrorKind::format, "checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
  pos += 4;
  return v;
}

template <typename Src, typename Dst>
void read_elements(const std::uint8_t* p, Tensor<Dst>& t) {
  for (std::size_t k = 0; k < t.size(); ++k) {
    Src v;
    std::memcpy(&v, p + k * sizeof(Src), sizeof(Src));
    t[k] = static_cast<Dst>(v);
  }
}

}  // namespace

nlohmann::json to_json(const BackboneSpec& s) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : s.stages) stages.push_back({{"channels", st.channels}, {"blocks", st.blocks}, {"stride", st.stride}});
  return {{"family", s.family},
          {"in_channels", s.in_channels},
          {"image_size", s.image_size},
          {"num_classes", s.num_classes},
          {"stem_channels", s.stem_channels},
          {"stem_kernel", s.stem_kernel},
          {"block", s.block == BlockKind::residual ? "residual" : "plain"},
          {"kernel", s.kernel},
          {"batch_norm", s.batch_norm},
          {"relu", s.relu},
          {"stages", stages}};
}

BackboneSpec backbone_spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  try {
    s.family = j.at("family").get<std::string>();
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.image_size = j.at("image_size").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.stem_channels = j.at("stem_channels").get<std::size_t>();
    s.stem_kernel = j.at("stem_kernel").get<std::size_t>();
    const auto block = j.at("block").get<std::string>();
    if (block != "residual" && block != "plain") fail(ErrorKind::format, "unknown block kind '" + block + "'");
    s.block = block == "residual" ? BlockKind::residual : BlockKind::plain;
    s.kernel = j.at("kernel").get<std::size_t>();
    s.batch_norm = j.at("batch_norm").get<bool>();
    s.relu = j.at("relu").get<bool>();
    for (const auto& st : j.at("stages"))
      s.stages.push_back({st.at("channels").get<std::size_t>(), st.at("blocks").get<int>(), st.at("stride").get<std::size_t>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("backbone spec: ") + e.what());
  }
  s.validate();
  return s;
}

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(MultiExitModel<T>& model, const nlohmann::json& metadata) {
  const auto tensors = state_tensors(model);
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& t : tensors) dir.push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  const nlohmann::json header = {{"format_version", 1},
                                 {"backbone", to_json(model.spec)},
                                 {"dtype", dtype_name<T>()},
                                 {"tensors", dir},
                                 {"metadata", metadata.is_null() ? nlohmann::json::object() : metadata}};
  const std::string h = header.dump();
  MaskContainer mc;
  mc.plan = model.plan;
  mc.masks = model.masks;
  if (metadata.is_object()) {
    mc.seed = metadata.value("seed", std::uint64_t{0});
    mc.pai_method = metadata.value("pai_method", std::string("none"));
  }
  const auto masks = encode_masks(mc);

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  put_u32(out, static_cast<std::uint32_t>(masks.size()));
  out.insert(out.end(), masks.begin(), masks.end());
  for (const auto& t : tensors) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.tensor->data());
    out.insert(out.end(), p, p + t.tensor->size() * sizeof(T));
  }
  put_u32(out, crc32(out));
  return out;
}

template <typename T>
MultiExitModel<T> decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* metadata) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) fail(ErrorKind::format, "not a checkpoint");
  std::size_t tail = bytes.size() - 4;
  if (get_u32(bytes, tail) != crc32(bytes.first(bytes.size() - 4)))
    fail(ErrorKind::checksum_mismatch, "checkpoint CRC mismatch");
  std::size_t pos = 8;
  const std::uint32_t hlen = get_u32(bytes, pos);
  if (pos + hlen > bytes.size()) fail(ErrorKind::format, "checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  const std::uint32_t mlen = get_u32(bytes, pos);
  if (pos + mlen > bytes.size()) fail(ErrorKind::format, "checkpoint masks truncated");
  const MaskContainer mc = decode_masks(bytes.subspan(pos, mlen));
  pos += mlen;

  const BackboneSpec spec = backbone_spec_from_json(header.at("backbone"));
  Rng rng(0);
  const BackboneWeights<T> shell = init_backbone<T>(spec, rng);
  MultiExitModel<T> model = fission_transform(shell, mc.plan, mc.masks, rng);

  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "f64") fail(ErrorKind::format, "unknown dtype " + dtype);
  const std::size_t esize = dtype == "f32" ? 4 : 8;
  const auto tensors = state_tensors(model);
  const auto& dir = header.at("tensors");
  if (dir.size() != tensors.size()) fail(ErrorKind::format, "checkpoint tensor directory does not match the model");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    if (dir[i].at("name").get<std::string>() != t.name || dir[i].at("shape").get<Shape>() != t.tensor->shape())
      fail(ErrorKind::format, "checkpoint tensor " + std::to_string(i) + " does not match " + t.name);
    const std::size_t nbytes = t.tensor->size() * esize;
    if (pos + nbytes > bytes.size() - 4) fail(ErrorKind::format, "checkpoint payload truncated");
    if (esize == 4)
      read_elements<float>(bytes.data() + pos, *t.tensor);
    else
      read_elements<double>(bytes.data() + pos, *t.tensor);
    pos += nbytes;
  }
  if (pos != bytes.size() - 4) fail(ErrorKind::format, "trailing bytes in checkpoint");
  if (metadata) *metadata = header.value("metadata", nlohmann::json::object());
  zero_grad(model);
  return model;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, MultiExitModel<T>& model, const nlohmann::json& metadata) {
  write_file(path, encode_checkpoint(model, metadata));
}

template <typename T>
MultiExitModel<T> load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata) {
  return decode_checkpoint<T>(read_file(path), metadata);
}

#define NFE_INSTANTIATE_CKPT(T)                                                                                 \
  template std::vector<std::uint8_t> encode_checkpoint<T>(MultiExitModel<T>&, const nlohmann::json&);           \
  template MultiExitModel<T> decode_checkpoint<T>(std::span<const std::uint8_t>, nlohmann::json*);              \
  template void save_checkpoint<T>(const std::filesystem::path&, MultiExitModel<T>&, const nlohmann::json&);    \
  template MultiExitModel<T> load_checkpoint<T>(const std::filesystem::path&, nlohmann::json*);

NFE_INSTANTIATE_CKPT(float)
NFE_INSTANTIATE_CKPT(double)

}  // namespace nfe
