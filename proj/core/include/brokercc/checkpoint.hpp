#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brokercc/error.hpp"
#include "brokercc/nn.hpp"

namespace brokercc {

/// Single-file weight archive: magic, little-endian u64 header length, JSON
/// header (config/stage/epoch/metrics plus a tensor manifest), then raw
/// scalar data in manifest order. Shared by BMG-only and full-model
/// checkpoints.
inline constexpr char kCheckpointMagic[8] = {'B', 'C', 'K', 'P', 'T', '0', '0', '1'};

struct CheckpointMeta {
  nlohmann::json config;   // serialized TrainConfig (or a subset)
  std::string stage;       // "distill" | "finetune"
  int epoch = 0;
  nlohmann::json metrics;  // free-form metric snapshot
};

template <class T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<const ParamRegistry<T>*>& registries) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  header["config"] = meta.config;
  header["stage"] = meta.stage;
  header["epoch"] = meta.epoch;
  header["metrics"] = meta.metrics;
  nlohmann::json manifest = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto* reg : registries)
    for (const auto& p : reg->params()) {
      manifest.push_back({{"name", p.name},
                          {"shape", p.var.value().dims()},
                          {"offset", offset},
                          {"count", p.var.value().size()}});
      offset += p.var.value().size();
    }
  header["tensors"] = manifest;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto* reg : registries)
    for (const auto& p : reg->params())
      out.write(reinterpret_cast<const char*>(p.var.value().data()),
                static_cast<std::streamsize>(p.var.value().size() * sizeof(T)));
  if (!out) throw Error(ErrorCode::kIo, "short write while saving checkpoint: " + path);
}

inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw Error(ErrorCode::kMalformed, "not a checkpoint file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw Error(ErrorCode::kMalformed, "truncated checkpoint header: " + path);
  try {
    return nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformed, "bad checkpoint header in " + path + ": " + e.what());
  }
}

/// Loads weights into the given registries by tensor name; every manifest
/// entry must match an existing parameter of identical shape.
template <class T>
CheckpointMeta load_checkpoint(const std::string& path,
                               const std::vector<ParamRegistry<T>*>& registries) {
  nlohmann::json header = read_checkpoint_header(path);
  const std::string want = sizeof(T) == 4 ? "f32" : "f64";
  if (header.value("dtype", "") != want)
    throw Error(ErrorCode::kMalformed, "checkpoint dtype mismatch in " + path);

  std::ifstream in(path, std::ios::binary);
  std::uint64_t hlen = 0;
  in.seekg(sizeof(kCheckpointMagic));
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  const std::streamoff data_start = static_cast<std::streamoff>(sizeof(kCheckpointMagic) + sizeof(hlen) + hlen);

  for (const auto& entry : header["tensors"]) {
    const std::string name = entry["name"].get<std::string>();
    const std::vector<int> shape = entry["shape"].get<std::vector<int>>();
    const std::int64_t offset = entry["offset"].get<std::int64_t>();
    const std::int64_t count = entry["count"].get<std::int64_t>();
    NamedParam<T>* target = nullptr;
    for (auto* reg : registries)
      for (auto& p : reg->params())
        if (p.name == name) target = &p;
    if (!target) throw Error(ErrorCode::kMalformed, "checkpoint tensor '" + name + "' has no destination");
    if (target->var.value().dims() != shape)
      throw Error(ErrorCode::kMalformed, "checkpoint tensor '" + name + "' shape mismatch");
    in.seekg(data_start + static_cast<std::streamoff>(offset * static_cast<std::int64_t>(sizeof(T))));
    in.read(reinterpret_cast<char*>(target->var.value().data()),
            static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(T))));
    if (!in) throw Error(ErrorCode::kMalformed, "truncated checkpoint data in " + path);
  }
  CheckpointMeta meta;
  meta.config = header.value("config", nlohmann::json::object());
  meta.stage = header.value("stage", "");
  meta.epoch = header.value("epoch", 0);
  meta.metrics = header.value("metrics", nlohmann::json::object());
  return meta;
}

}  // namespace brokercc
