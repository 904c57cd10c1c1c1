#pragma once

// Binary checkpoint: magic, format version, a JSON header (config text, step,
// tensor index), then the raw tensor payload in host byte order.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "ocrgan/config.hpp"
#include "ocrgan/nn.hpp"

namespace ocrgan {

inline constexpr char kCheckpointMagic[8] = {'O', 'C', 'R', 'G', 'A', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct CheckpointData {
  RunConfig config;
  long step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::map<std::string, Tensor<T>> tensors;
};

namespace checkpoint_detail {

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "checkpoint: float or double only");
  return std::is_same_v<T, float> ? "float32" : "float64";
}

}  // namespace checkpoint_detail

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& data) {
  nlohmann::json header;
  header["dtype"] = checkpoint_detail::dtype_name<T>();
  header["step"] = data.step;
  header["config"] = to_text(data.config);
  header["extra"] = data.extra;
  auto& index = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, t] : data.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!out) throw CheckpointError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
CheckpointData<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("not a checkpoint: " + path.string());
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  if (len > (std::uint64_t(1) << 30)) throw CheckpointError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw CheckpointError("truncated checkpoint: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header: " + std::string(e.what()));
  }
  if (header.at("dtype") != checkpoint_detail::dtype_name<T>())
    throw CheckpointError("checkpoint dtype " + header.at("dtype").get<std::string>() + " does not match requested " +
                          checkpoint_detail::dtype_name<T>());
  CheckpointData<T> data;
  data.config = parse_config(header.at("config").get<std::string>());
  data.step = header.at("step").get<long>();
  data.extra = header.value("extra", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Tensor<T> t(entry.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!in) throw CheckpointError("truncated checkpoint payload: " + path.string());
    data.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return data;
}

/// Copies parameters and buffers of `reg` into `out` under their registry names.
template <typename T>
void export_registry(const nn::Registry<T>& reg, std::map<std::string, Tensor<T>>& out) {
  for (const auto& p : reg.params) out[p.name] = p.var.value();
  for (const auto& b : reg.buffers) out[b.name] = *b.tensor;
}

/// Restores every parameter and buffer of `reg` from `in`; all must be present
/// with matching shapes.
template <typename T>
void import_registry(nn::Registry<T>& reg, const std::map<std::string, Tensor<T>>& in) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    const auto it = in.find(name);
    if (it == in.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != shape)
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(shape));
    return it->second;
  };
  for (auto& p : reg.params) p.var.mutable_value() = fetch(p.name, p.var.shape());
  for (auto& b : reg.buffers) *b.tensor = fetch(b.name, b.tensor->shape());
}

}  // namespace ocrgan
