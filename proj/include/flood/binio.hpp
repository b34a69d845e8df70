#pragma once

// Little-endian framing shared by the checkpoint and motion file formats:
//   magic (5 ASCII bytes) | u64 header length | JSON header | f32 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/error.hpp"

namespace flood::binio {

static_assert(std::endian::native == std::endian::little, "f32 payloads are written in host order");

inline void write_framed(const std::filesystem::path& path, std::string_view magic,
                         const nlohmann::json& header, std::span<const float> payload) {
  if (path.has_parent_path() && !std::filesystem::exists(path.parent_path()))
    throw IoError("parent directory does not exist: " + path.parent_path().string());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  f.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  f.write(reinterpret_cast<const char*>(&len), sizeof len);
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size_bytes()));
  if (!f) throw IoError("write failed: " + path.string());
}

struct Framed {
  nlohmann::json header;
  std::vector<char> payload;
};

inline Framed read_framed(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string got(magic.size(), '\0');
  f.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!f || got != magic)
    throw IoError(path.string() + ": bad magic, expected \"" + std::string(magic) + "\"");
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f) throw IoError(path.string() + ": truncated before header length");
  std::string h(len, '\0');
  f.read(h.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError(path.string() + ": truncated header");
  Framed out;
  try {
    out.header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  out.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  return out;
}

inline std::vector<float> floats_at(const std::vector<char>& payload, std::size_t offset,
                                    std::size_t count, const std::string& what) {
  const std::size_t need = offset + count * sizeof(float);
  if (payload.size() < need)
    throw IoError(what + ": truncated payload, expected " + std::to_string(need) +
                  " bytes but found " + std::to_string(payload.size()));
  std::vector<float> out(count);
  std::memcpy(out.data(), payload.data() + offset, count * sizeof(float));
  return out;
}

} // namespace flood::binio
