#pragma once

// Parameter checkpoint: magic "FSCK1", u64 header length, JSON header
// {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}, then raw
// little-endian f32 blobs. Offsets are byte offsets from the end of the header.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flood/binio.hpp"
#include "flood/optim.hpp"
#include "flood/tensor.hpp"

namespace flood {

inline constexpr std::string_view kCheckpointMagic = "FSCK1";

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint has no tensor named " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<float> payload;
  for (const auto& [name, t] : ck.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size() * sizeof(float)}});
    payload.insert(payload.end(), t.data().begin(), t.data().end());
  }
  binio::write_framed(path, kCheckpointMagic, header, payload);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto framed = binio::read_framed(path, kCheckpointMagic);
  Checkpoint ck;
  try {
    ck.meta = framed.header.at("meta");
    for (const auto& e : framed.header.at("tensors")) {
      Shape shape = e.at("shape").get<Shape>();
      auto data = binio::floats_at(framed.payload, e.at("offset").get<std::size_t>(), shape_numel(shape),
                                   path.string() + " tensor " + e.at("name").get<std::string>());
      ck.tensors.emplace_back(e.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  return ck;
}

/// Appends every parameter of `params` under `prefix`.
template <typename T>
void store_params(Checkpoint& ck, const ParamStore<T>& params, const std::string& prefix = "") {
  for (std::size_t i = 0; i < params.size(); ++i)
    ck.tensors.emplace_back(prefix + params.names()[i], params.vars()[i].value().template cast<float>());
}

template <typename T>
void load_params(const Checkpoint& ck, ParamStore<T>& params, const std::string& prefix = "") {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const Tensor& src = ck.tensor(prefix + name);
    if (src.shape() != params.vars()[i].shape())
      throw IoError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                    shape_str(params.vars()[i].shape()));
    params.vars()[i].mutable_value() = src.template cast<T>();
  }
}

template <typename T>
void store_adam(Checkpoint& ck, const ParamStore<T>& params, const AdamState<T>& st) {
  ck.meta["adam_step"] = st.step;
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    ck.tensors.emplace_back("adam.m." + params.names()[i], st.m[i].template cast<float>());
    ck.tensors.emplace_back("adam.v." + params.names()[i], st.v[i].template cast<float>());
  }
}

template <typename T>
void load_adam(const Checkpoint& ck, const ParamStore<T>& params, AdamState<T>& st) {
  st = {};
  st.step = ck.meta.value("adam_step", 0L);
  if (st.step == 0 || params.size() == 0 || !ck.has("adam.m." + params.names()[0])) return;
  for (const auto& name : params.names()) {
    st.m.push_back(ck.tensor("adam.m." + name).template cast<T>());
    st.v.push_back(ck.tensor("adam.v." + name).template cast<T>());
  }
}

} // namespace flood
