#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "smoothcert/error.hpp"
#include "smoothcert/model.hpp"

namespace smoothcert {

// Layout, all integers little-endian u32:
//   "SMCK" | version | spec length | canonical spec JSON
//   | tensor count | per tensor: name length, name, rank, dims...
//   | float32 payload in manifest order | CRC-32 of the payload
inline constexpr std::string_view kCheckpointMagic = "SMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_bytes(std::string& out, std::string_view s) {
  if (s.size() > UINT32_MAX) throw CheckpointError("string too long for checkpoint");
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("truncated checkpoint");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Model<float>& model) {
  const auto entries = model.state();
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_bytes(out, model.spec().canonical_json());
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put_bytes(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (const std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  std::string payload;
  for (const auto& entry : entries) {
    for (const float v : entry.second.data()) detail::put_u32(payload, std::bit_cast<std::uint32_t>(v));
  }
  boost::crc_32_type crc;
  crc.process_bytes(payload.data(), payload.size());
  out += payload;
  detail::put_u32(out, crc.checksum());
  return out;
}

inline Model<float> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader rd(bytes);
  if (rd.take(4) != kCheckpointMagic) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view spec_text = rd.take(rd.u32());
  ModelSpec spec;
  try {
    spec = ModelSpec::from_json(nlohmann::json::parse(spec_text));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("embedded model spec is not valid JSON: ") + e.what());
  } catch (const Error& e) {
    throw CheckpointError(std::string("embedded model spec: ") + e.what());
  }
  Model<float> model(spec);
  const auto expected = model.state();

  const std::uint32_t count = rd.u32();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(rd.take(rd.u32()));
    Shape shape(rd.u32());
    for (auto& d : shape) d = rd.u32();
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  for (std::size_t i = 0; i < std::max<std::size_t>(manifest.size(), expected.size()); ++i) {
    if (i >= manifest.size()) {
      throw CheckpointError("manifest does not match spec: tensor '" + expected[i].first +
                            "' is missing");
    }
    if (i >= expected.size() || manifest[i].first != expected[i].first) {
      throw CheckpointError("manifest does not match spec: unexpected tensor '" +
                            manifest[i].first + "'");
    }
    if (manifest[i].second != expected[i].second.shape()) {
      throw CheckpointError("manifest does not match spec: tensor '" + manifest[i].first +
                            "' has shape " + shape_str(manifest[i].second) + ", spec implies " +
                            shape_str(expected[i].second.shape()));
    }
  }

  std::size_t total = 0;
  for (const auto& m : manifest) total += shape_numel(m.second);
  const std::string_view payload = rd.take(total * 4);
  const std::uint32_t stored = rd.u32();
  if (rd.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint");
  boost::crc_32_type crc;
  crc.process_bytes(payload.data(), payload.size());
  if (crc.checksum() != stored) throw CheckpointError("CRC mismatch: checkpoint payload is corrupted");

  detail::ByteReader prd(payload);
  std::vector<std::pair<std::string, Tensor>> entries;
  for (auto& [name, shape] : manifest) {
    Tensor t(shape);
    for (float& v : t.data()) v = std::bit_cast<float>(prd.u32());
    entries.emplace_back(std::move(name), std::move(t));
  }
  model.load_state(entries);
  return model;
}

// Writes to a sibling temp file and renames it into place.
inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(path.string() + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw CheckpointError(path.string() + ": " + ec.message());
  }
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open checkpoint");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace smoothcert
