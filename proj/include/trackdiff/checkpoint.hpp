#pragma once

// Named parameter collections and the checkpoint file format:
//
//   [u64 little-endian header length N][N bytes of JSON header][payload]
//
// The header maps each parameter name to {"shape": [...], "offset": bytes}
// in insertion order, plus an optional "__metadata__" object of strings.
// The payload is the concatenation of all values as little-endian float64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "trackdiff/tensor.hpp"

namespace trackdiff {

class ParamSet {
 public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : items_) out.push_back(t);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

using Metadata = std::map<std::string, std::string>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ParamSet& params, const Metadata& meta = {}) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!meta.empty()) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : meta) m[k] = v;
    header["__metadata__"] = m;
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.items()) {
    header[name] = {{"shape", t.shape()}, {"offset", offset}};
    offset += t.size() * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  detail::put_u64_le(out, text.size());
  out += text;
  for (const auto& [_, t] : params.items()) {
    for (double v : t.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      detail::put_u64_le(out, bits);
    }
  }
  return out;
}

struct Checkpoint {
  ParamSet params;
  Metadata metadata;
};

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated before header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto header_len = detail::get_u64_le(raw);
  if (8 + header_len > bytes.size()) throw CheckpointError("checkpoint truncated inside header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 8 + header_len;
  Checkpoint ck;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) ck.metadata[k] = v.get<std::string>();
      continue;
    }
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto n = shape_size(shape);
    if (payload + offset + n * 8 > bytes.size()) {
      throw CheckpointError("checkpoint payload too short for '" + name + "'");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::bit_cast<double>(detail::get_u64_le(raw + payload + offset + 8 * i));
    }
    ck.params.add(name, Tensor::parameter(std::move(shape), std::move(values)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params, const Metadata& meta = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_checkpoint(params, meta);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for '" + path + "'");
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace trackdiff
