#pragma once

// Tensor blob + manifest format shared by encoder checkpoints, optimizer
// state and classifier heads:
//   <blob>      little-endian float32 values, tensors back to back
//   <manifest>  JSON {"format_version", "dtype", "tensors": [{name, shape, offset, length}]}
// offset/length are in bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kubert/io.hpp"
#include "kubert/nn/graph.hpp"

namespace kubert::nn {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
std::vector<NamedTensor<T>> named_values(ParameterSet<T>& params, const std::string& prefix = "") {
  std::vector<NamedTensor<T>> out;
  for (auto& p : params) out.push_back({prefix + p->name, &p->value});
  return out;
}

namespace detail {

inline uint32_t to_le(uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

}  // namespace detail

template <typename T>
void write_tensors(const std::filesystem::path& dir, const std::string& blob_name,
                   const std::string& manifest_name, const std::vector<NamedTensor<T>>& tensors) {
  std::string blob;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& nt : tensors) {
    const uint64_t offset = blob.size();
    for (T v : nt.tensor->values()) {
      const auto f = static_cast<float>(v);
      const uint32_t bits = detail::to_le(std::bit_cast<uint32_t>(f));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      blob.append(bytes, 4);
    }
    entries.push_back({{"name", nt.name},
                       {"shape", nt.tensor->shape()},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = "float32";
  manifest["tensors"] = entries;
  io::write_file_atomic(dir / blob_name, blob);
  io::write_file_atomic(dir / manifest_name, manifest.dump(2) + "\n");
}

// Every target must appear in the manifest with the same shape and vice
// versa. Nothing is written into the targets unless the whole file checks out.
template <typename T>
void read_tensors(const std::filesystem::path& dir, const std::string& blob_name,
                  const std::string& manifest_name, const std::vector<NamedTensor<T>>& targets) {
  const auto manifest_path = dir / manifest_name;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad manifest '" + manifest_path.string() + "': " + e.what());
  }
  if (manifest.value("format_version", 0) != kCheckpointFormatVersion ||
      manifest.value("dtype", "") != "float32") {
    throw std::runtime_error("unsupported manifest format in '" + manifest_path.string() + "'");
  }
  const std::string blob = io::read_file(dir / blob_name);
  std::unordered_map<std::string, const NamedTensor<T>*> by_name;
  for (const auto& t : targets) by_name[t.name] = &t;

  std::vector<std::pair<const NamedTensor<T>*, std::vector<T>>> staged;
  uint64_t expected_offset = 0;
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("unexpected tensor '" + name + "' in checkpoint");
    const Shape shape = e.at("shape").get<Shape>();
    const Tensor<T>& target = *it->second->tensor;
    if (shape != target.shape()) {
      throw std::runtime_error("tensor '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                               shape_str(target.shape()));
    }
    const auto offset = e.at("offset").get<uint64_t>();
    const auto length = e.at("length").get<uint64_t>();
    if (length != target.size() * 4 || offset != expected_offset || offset + length > blob.size()) {
      throw std::runtime_error("tensor '" + name + "' byte range is inconsistent or truncated");
    }
    std::vector<T> values(target.size());
    for (size_t i = 0; i < values.size(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + 4 * i, 4);
      values[i] = static_cast<T>(std::bit_cast<float>(detail::to_le(bits)));
    }
    staged.emplace_back(it->second, std::move(values));
    by_name.erase(it);
    expected_offset = offset + length;
  }
  if (!by_name.empty()) {
    throw std::runtime_error("checkpoint is missing tensor '" + by_name.begin()->first + "'");
  }
  if (expected_offset != blob.size()) throw std::runtime_error("checkpoint blob has trailing bytes");
  for (auto& [nt, values] : staged) nt->tensor->storage() = std::move(values);
}

}  // namespace kubert::nn
