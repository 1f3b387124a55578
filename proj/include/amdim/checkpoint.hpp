#pragma once

// Checkpoint container: magic "AMDC", format version, a config echo (JSON
// text), then named tensors with dtype + shape + raw little-endian data.
// Write/read round-trips are bit-exact.

#include <cstring>
#include <string>
#include <vector>

#include "amdim/common.hpp"
#include "amdim/tensor.hpp"

namespace amdim {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  static TensorRecord make(std::string name, Shape shape, const std::vector<T>& values) {
    AMDIM_CHECK(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
                "tensor record '" << name << "': " << values.size() << " values for shape "
                                  << shape_str(shape));
    TensorRecord rec;
    rec.name = std::move(name);
    rec.dtype = dtype_of<T>();
    rec.shape = std::move(shape);
    rec.bytes.resize(values.size() * sizeof(T));
    std::memcpy(rec.bytes.data(), values.data(), rec.bytes.size());
    return rec;
  }

  template <typename T>
  std::vector<T> values() const {
    AMDIM_CHECK(dtype == dtype_of<T>(), "tensor record '" << name << "' holds a different dtype");
    std::vector<T> out(bytes.size() / sizeof(T));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <typename T>
  void add(std::string name, Shape shape, const std::vector<T>& values) {
    tensors.push_back(TensorRecord::make<T>(std::move(name), std::move(shape), values));
  }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);  // IngestError on damage

// Named-state glue shared by the encoder, mixture head, and optimizer state.
// Loading is strict: every expected entry must exist with matching dtype and
// shape, otherwise ConfigError.
template <typename T>
void store_named_tensors(Checkpoint& ckpt, const std::string& prefix,
                         std::vector<std::pair<std::string, Tensor<T>>> named) {
  for (auto& [name, t] : named) ckpt.add<T>(prefix + name, t.shape(), t.data());
}

template <typename T>
void load_named_tensors(const Checkpoint& ckpt, const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor<T>>> named) {
  for (auto& [name, t] : named) {
    const TensorRecord* rec = ckpt.find(prefix + name);
    AMDIM_CONFIG_CHECK(rec, "checkpoint: missing tensor '" << prefix + name << "'");
    AMDIM_CONFIG_CHECK(rec->dtype == dtype_of<T>(),
                       "checkpoint: tensor '" << rec->name << "' has the wrong dtype");
    AMDIM_CONFIG_CHECK(rec->shape == t.shape(), "checkpoint: tensor '"
                                                    << rec->name << "' has shape "
                                                    << shape_str(rec->shape) << ", expected "
                                                    << shape_str(t.shape()));
    t.data() = rec->values<T>();
  }
}

template <typename T>
void store_named_buffers(Checkpoint& ckpt, const std::string& prefix,
                         std::vector<std::pair<std::string, std::vector<T>*>> named) {
  for (auto& [name, buf] : named)
    ckpt.add<T>(prefix + name, {static_cast<std::int64_t>(buf->size())}, *buf);
}

template <typename T>
void load_named_buffers(const Checkpoint& ckpt, const std::string& prefix,
                        std::vector<std::pair<std::string, std::vector<T>*>> named) {
  for (auto& [name, buf] : named) {
    const TensorRecord* rec = ckpt.find(prefix + name);
    AMDIM_CONFIG_CHECK(rec, "checkpoint: missing buffer '" << prefix + name << "'");
    AMDIM_CONFIG_CHECK(rec->dtype == dtype_of<T>(),
                       "checkpoint: buffer '" << rec->name << "' has the wrong dtype");
    const auto values = rec->values<T>();
    AMDIM_CONFIG_CHECK(values.size() == buf->size(),
                       "checkpoint: buffer '" << rec->name << "' has " << values.size()
                                              << " values, expected " << buf->size());
    *buf = values;
  }
}

}  // namespace amdim
