#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "isoscan/diffcore.hpp"
#include "isoscan/volume.hpp"

namespace isoscan {

// "VEMC" checkpoint container: magic, u32 version=1, u32 json length, config
// JSON, u32 entry count, then per entry: u32 name length, name, u32 rank,
// u32 dims, f32 little-endian values. Used for both the model and the
// degradation encoder (the JSON carries a "kind" field).
struct CheckpointData {
  nlohmann::json config;
  std::vector<std::pair<std::string, NdArray>> entries;
};

inline void save_vemc(std::ostream& os, const CheckpointData& data) {
  os.write("VEMC", 4);
  detail::put_u32(os, 1u);
  const std::string cfg = data.config.dump();
  detail::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(data.entries.size()));
  for (const auto& [name, arr] : data.entries) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(arr.rank()));
    for (std::size_t i = 0; i < arr.rank(); ++i)
      detail::put_u32(os, static_cast<std::uint32_t>(arr.dim(i)));
    for (std::size_t i = 0; i < arr.size(); ++i)
      detail::put_f32(os, static_cast<float>(arr[i]));
  }
  if (!os) throw std::runtime_error("save_vemc: write failure");
}

inline void save_vemc(const std::string& path, const CheckpointData& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_vemc: cannot open " + path);
  save_vemc(os, data);
}

inline CheckpointData load_vemc(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "VEMC", 4) != 0)
    throw std::runtime_error("load_vemc: bad magic (not a VEMC checkpoint)");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version) || version != 1)
    throw std::runtime_error("load_vemc: unsupported version");
  std::uint32_t json_len = 0;
  if (!detail::get_u32(is, json_len)) throw std::runtime_error("load_vemc: truncated header");
  std::string cfg(json_len, '\0');
  if (!is.read(cfg.data(), json_len)) throw std::runtime_error("load_vemc: truncated config");
  CheckpointData data;
  try {
    data.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_vemc: malformed config JSON: ") + e.what());
  }
  std::uint32_t n_entries = 0;
  if (!detail::get_u32(is, n_entries)) throw std::runtime_error("load_vemc: truncated header");
  data.entries.reserve(n_entries);
  for (std::uint32_t e = 0; e < n_entries; ++e) {
    std::uint32_t name_len = 0, rank = 0;
    if (!detail::get_u32(is, name_len)) throw std::runtime_error("load_vemc: truncated entry");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("load_vemc: truncated entry");
    if (!detail::get_u32(is, rank)) throw std::runtime_error("load_vemc: truncated entry");
    std::vector<int> shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d = 0;
      if (!detail::get_u32(is, d) || d == 0) throw std::runtime_error("load_vemc: bad shape");
      shape[i] = static_cast<int>(d);
      n *= d;
    }
    NdArray arr(shape);
    for (std::size_t i = 0; i < n; ++i) {
      float f = 0.0f;
      if (!detail::get_f32(is, f)) throw std::runtime_error("load_vemc: truncated payload");
      arr[i] = static_cast<double>(f);
    }
    data.entries.emplace_back(std::move(name), std::move(arr));
  }
  return data;
}

inline CheckpointData load_vemc(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_vemc: cannot open " + path);
  return load_vemc(is);
}

inline std::vector<std::pair<std::string, NdArray>> store_entries(const ParamStore& store) {
  std::vector<std::pair<std::string, NdArray>> out;
  out.reserve(store.count());
  for (std::size_t i = 0; i < store.count(); ++i)
    out.emplace_back(store.name(i), store.param(i).value);
  return out;
}

// Copies checkpoint values into an already-constructed store; every store
// parameter must be present with the exact shape.
inline void load_into_store(const CheckpointData& data, ParamStore& store) {
  std::size_t applied = 0;
  for (const auto& [name, arr] : data.entries) {
    if (!store.has(name)) continue;
    Param& p = store.at(name);
    if (!p.value.same_shape(arr))
      throw std::runtime_error("load_into_store: shape mismatch for " + name);
    p.value = arr;
    ++applied;
  }
  if (applied != store.count())
    throw std::runtime_error("load_into_store: checkpoint is missing parameters (" +
                             std::to_string(applied) + "/" + std::to_string(store.count()) + ")");
}

}  // namespace isoscan
