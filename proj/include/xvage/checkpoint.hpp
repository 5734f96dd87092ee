#pragma once

// Checkpoint container.
//
// Layout (all integers little-endian u32 unless noted):
//   "XVCK"                       magic
//   version                      currently 1
//   meta_len, meta[meta_len]     UTF-8 JSON object (config hash, lineage, configs)
//   count                        number of arrays
//   per array:
//     name_len, name[name_len]
//     flags (u8)                 bit 0: learnable
//     ndim, dims[ndim]
//     payload                    prod(dims) float32, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvage/error.hpp"
#include "xvage/network.hpp"

namespace xvage {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  bool learnable = true;
  std::vector<float> data;  // row-major

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  bool operator==(const CheckpointArray&) const = default;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
  std::string lineage() const { return meta.value("lineage", std::string()); }
  std::string config_hash() const { return meta.value("config_hash", std::string()); }
};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "XVCK";
  auto put = [&out](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put(kCheckpointVersion);
  const std::string meta = ck.meta.dump();
  put(static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put(static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    put(static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    out.push_back(static_cast<char>(a.learnable ? 1 : 0));
    put(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put(d);
    out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw DecodeError("checkpoint truncated");
  };
  auto get = [&]() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  };
  need(4);
  if (bytes.compare(0, 4, "XVCK") != 0) throw DecodeError("not a checkpoint file (bad magic)");
  pos = 4;
  const auto version = get();
  if (version != kCheckpointVersion)
    throw DecodeError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto meta_len = get();
  need(meta_len);
  ck.meta = nlohmann::json::parse(bytes.substr(pos, meta_len));
  pos += meta_len;
  const auto count = get();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointArray a;
    const auto name_len = get();
    need(name_len + 1);
    a.name = bytes.substr(pos, name_len);
    pos += name_len;
    a.learnable = (bytes[pos++] & 1) != 0;
    const auto ndim = get();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.shape.push_back(get());
      n *= a.shape.back();
    }
    need(n * sizeof(float));
    a.data.resize(n);
    std::memcpy(a.data.data(), bytes.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    ck.arrays.push_back(std::move(a));
  }
  if (pos != bytes.size()) throw DecodeError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  const auto bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <class T>
CheckpointArray to_array(const Param<T>& p) {
  CheckpointArray a;
  a.name = p.name;
  a.shape = p.shape();
  a.learnable = p.trainable;
  a.data.reserve(static_cast<std::size_t>(p.size()));
  for (Eigen::Index r = 0; r < p.value.rows(); ++r)
    for (Eigen::Index c = 0; c < p.value.cols(); ++c) a.data.push_back(static_cast<float>(p.value(r, c)));
  return a;
}

template <class T>
void from_array(const CheckpointArray& a, Param<T>& p) {
  if (a.shape != p.shape()) {
    std::string want, got;
    for (auto d : p.shape()) want += std::to_string(d) + "x";
    for (auto d : a.shape) got += std::to_string(d) + "x";
    throw ShapeError(p.name + ": checkpoint shape " + got.substr(0, got.size() - 1) + " != model shape " +
                     want.substr(0, want.size() - 1));
  }
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < p.value.rows(); ++r)
    for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = static_cast<T>(a.data[i++]);
}

inline nlohmann::json heads_to_json(const HeadSet& h) {
  return {{"gender", h.gender}, {"age_group", h.age_group}, {"age_regressor", h.age_regressor}, {"speakers", h.speakers}};
}

inline HeadSet heads_from_json(const nlohmann::json& j) {
  HeadSet h;
  h.gender = j.value("gender", false);
  h.age_group = j.value("age_group", false);
  h.age_regressor = j.value("age_regressor", false);
  h.speakers = j.value("speakers", 0);
  return h;
}

/// Captures every array of the model. `meta` receives config hash, embedder
/// config and head set on top of whatever the caller supplied.
template <class T>
Checkpoint capture_checkpoint(Model<T>& model, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  ck.meta["config_hash"] = config_hash(model.config());
  ck.meta["embedder"] = model.config();
  ck.meta["heads"] = heads_to_json(model.heads());
  for (const auto* p : model.params()) ck.arrays.push_back(to_array(*p));
  return ck;
}

/// Copies arrays whose names pass `select` from the checkpoint into the model.
/// Returns the names loaded. Missing arrays are an error.
template <class T>
std::vector<std::string> restore_params(Model<T>& model, const Checkpoint& ck,
                                        const std::function<bool(const std::string&)>& select) {
  std::vector<std::string> loaded;
  std::vector<std::string> problems;
  for (auto* p : model.params()) {
    if (!select(p->name)) continue;
    const auto* a = ck.find(p->name);
    if (!a) {
      problems.push_back(p->name + ": missing from checkpoint");
      continue;
    }
    try {
      from_array(*a, *p);
      loaded.push_back(p->name);
    } catch (const ShapeError& e) {
      problems.push_back(e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ShapeError(msg);
  }
  return loaded;
}

inline bool is_embedder_param(const std::string& name) { return name.rfind("embedder.", 0) == 0; }

inline bool is_head_param(const std::string& name, HeadKind k) {
  return name.rfind("heads." + to_string(k) + ".", 0) == 0;
}

/// Rebuilds a model (embedder + heads recorded in the checkpoint) and loads
/// all of its arrays.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  const auto cfg = ck.meta.at("embedder").get<EmbedderConfig>();
  Model<T> model(cfg, heads_from_json(ck.meta.at("heads")));
  restore_params(model, ck, [](const std::string&) { return true; });
  return model;
}

}  // namespace xvage
