#pragma once

// "THEM" tensor records and directory checkpoints.
//
// Record layout (all little-endian):
//   magic "THEM" | version u16 | rank u8 | dims u32[rank] | f64[numel]
//
// A checkpoint directory holds `params.them` (records back to back) and
// `manifest.json` mapping each tensor name to its byte offset and shape.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "themask/tensor.hpp"

namespace themask {

inline constexpr std::uint16_t kTensorFormatVersion = 1;

namespace detail {

inline void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, bytes);
}

inline std::uint64_t get_le(std::istream& in, int bytes) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), bytes)) throw IoError("truncated tensor record");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw ContractError("tensor rank exceeds 255");
  out.write("THEM", 4);
  detail::put_le(out, kTensorFormatVersion, 2);
  detail::put_le(out, t.rank(), 1);
  for (auto d : t.shape()) {
    if (d > 0xffffffffULL) throw ContractError("tensor dimension exceeds u32");
    detail::put_le(out, d, 4);
  }
  for (double v : t.data()) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  if (!out) throw IoError("failed writing tensor record");
}

/// Reads one record. Stored values are accepted as-is, including -inf.
inline Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "THEM") {
    throw IoError("bad tensor magic");
  }
  const auto version = detail::get_le(in, 2);
  if (version != kTensorFormatVersion) {
    throw IoError("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = detail::get_le(in, 1);
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_le(in, 4);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = std::bit_cast<double>(detail::get_le(in, 8));
  return Tensor::make_op(std::move(shape), std::move(values), {}, nullptr, "read", false);
}

inline void save_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

inline Tensor load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

using NamedTensors = std::map<std::string, Tensor>;

struct Checkpoint {
  NamedTensors tensors;
  nlohmann::json meta = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "params.them", std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint in " + dir.string());
  nlohmann::json manifest;
  manifest["format"] = "THEM";
  manifest["version"] = kTensorFormatVersion;
  manifest["tensors"] = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    manifest["tensors"][name] = {{"offset", static_cast<std::uint64_t>(out.tellp())},
                                 {"shape", t.shape()}};
    write_tensor(out, t);
  }
  manifest["meta"] = ckpt.meta;
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
  if (!mf) throw IoError("cannot write manifest in " + dir.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  std::ifstream in(dir / "params.them", std::ios::binary);
  if (!in) throw IoError("missing checkpoint payload in " + dir.string());
  Checkpoint ckpt;
  for (const auto& [name, entry] : manifest.at("tensors").items()) {
    in.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    Tensor t = read_tensor(in);
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw IoError("checkpoint tensor " + name + " disagrees with its manifest shape");
    }
    ckpt.tensors.emplace(name, std::move(t));
  }
  if (manifest.contains("meta")) ckpt.meta = manifest["meta"];
  return ckpt;
}

}  // namespace themask
