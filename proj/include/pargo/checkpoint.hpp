#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "PARG"                      4 bytes magic
//   u32 version                 currently 1
//   u32 n, n bytes              JSON object {"config": {...}, "meta": {...}}
//   records until end of file:
//     u32 n, n bytes            UTF-8 tensor name
//     u8 rank
//     u64 dims[rank]
//     payload                   prod(dims) IEEE-754 values of config.dtype
//
// Projector tensors are written in visit_params() order, followed by any
// extra tensors (e.g. a readout head) supplied by the caller.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pargo/projector.hpp"

namespace pargo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <Real T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <Real T>
struct LoadedCheckpoint {
  ParGoConfig config;
  ProjectorParams<T> params;
  nlohmann::json meta;
  NamedTensors<T> extra;
};

struct CheckpointHeader {
  ParGoConfig config;
  nlohmann::json meta;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::string_view s) { out_.append(s); }
  template <Real T>
  void value(T v) {
    if constexpr (sizeof(T) == 4) {
      u32(std::bit_cast<std::uint32_t>(v));
    } else {
      u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  bool done() const { return pos_ == in_.size(); }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(in_[pos_++])} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<std::uint8_t>(in_[pos_++])} << (8 * i);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <Real T>
  T value() {
    if constexpr (sizeof(T) == 4) {
      return std::bit_cast<T>(u32());
    } else {
      return std::bit_cast<T>(u64());
    }
  }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated at byte " + std::to_string(pos_));
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

template <Real T>
void write_record(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (T v : t.data()) w.value(v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline CheckpointHeader read_header(ByteReader& r) {
  if (r.bytes(4) != "PARG") throw CheckpointError("corrupt checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t len = r.u32();
  const auto text = r.bytes(len);
  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.config = j.at("config").get<ParGoConfig>();
    h.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: bad config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  return h;
}

}  // namespace detail

template <Real T>
std::string encode_checkpoint(const ProjectorParams<T>& params, const ParGoConfig& cfg,
                              const nlohmann::json& meta = nlohmann::json::object(), const NamedTensors<T>& extra = {}) {
  if (cfg.dtype != dtype_of<T>()) throw ConfigError("checkpoint: config dtype does not match parameter type");
  detail::ByteWriter w;
  w.bytes("PARG");
  w.u32(kCheckpointVersion);
  const std::string header = nlohmann::json{{"config", cfg}, {"meta", meta}}.dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  visit_params(params, [&](const std::string& name, const Tensor<T>& t) { detail::write_record(w, name, t); });
  for (const auto& [name, t] : extra) detail::write_record(w, name, t);
  return w.take();
}

template <Real T>
void save_checkpoint(const ProjectorParams<T>& params, const ParGoConfig& cfg, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object(), const NamedTensors<T>& extra = {}) {
  const std::string bytes = encode_checkpoint(params, cfg, meta, extra);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing '" + path + "'");
}

template <Real T>
LoadedCheckpoint<T> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  auto header = detail::read_header(r);
  if (header.config.dtype != dtype_of<T>()) {
    throw CheckpointError("checkpoint holds " + std::string(dtype_name(header.config.dtype)) + " but " +
                          std::string(dtype_name(dtype_of<T>())) + " was requested");
  }
  try {
    header.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }

  std::map<std::string, Tensor<T>> records;
  std::vector<std::string> order;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.bytes(name_len));
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      const std::uint64_t dim = r.u64();
      if (dim == 0 || dim > (std::uint64_t{1} << 40) || n > (std::uint64_t{1} << 40) / dim) {
        throw CheckpointError("corrupt checkpoint: bad extent in record '" + name + "'");
      }
      d = static_cast<std::size_t>(dim);
      n *= dim;
    }
    std::vector<T> values(n);
    for (auto& v : values) v = r.template value<T>();
    if (records.count(name)) throw CheckpointError("corrupt checkpoint: duplicate record '" + name + "'");
    order.push_back(name);
    records.emplace(name, Tensor<T>(std::move(shape), std::move(values)));
  }

  LoadedCheckpoint<T> out;
  out.config = header.config;
  out.meta = std::move(header.meta);
  out.params = init_projector<T>(out.config, Rng(0));
  std::map<std::string, bool> used;
  visit_params(out.params, [&](const std::string& name, Tensor<T>& t) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("corrupt checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw CheckpointError("corrupt checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", config implies " + shape_str(t.shape()));
    }
    t = it->second;
    t.set_requires_grad();
    used[name] = true;
  });
  for (const auto& name : order) {
    if (!used.count(name)) out.extra.emplace_back(name, records.at(name));
  }
  return out;
}

template <Real T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

/// Config and metadata only; used to pick the scalar type before loading.
inline CheckpointHeader peek_checkpoint(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  return detail::read_header(r);
}

}  // namespace pargo
