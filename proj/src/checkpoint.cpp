#include "amdim/checkpoint.hpp"

#include <cstdint>
#include <fstream>

namespace amdim {

namespace {

constexpr char kMagic[4] = {'A', 'M', 'D', 'C'};

struct Writer {
  std::ofstream out;
  explicit Writer(const std::string& path) : out(path, std::ios::binary | std::ios::trunc) {}

  template <typename T>
  void put(T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, size_t n) { out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
};

struct Reader {
  std::ifstream in;
  std::string path;
  std::int64_t pos = 0;
  Reader(const std::string& p) : in(p, std::ios::binary), path(p) {}

  template <typename T>
  T get() {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IngestError(path, pos, "truncated checkpoint");
    pos += static_cast<std::int64_t>(sizeof(T));
    return v;
  }
  void get_bytes(void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in) throw IngestError(path, pos, "truncated checkpoint");
    pos += static_cast<std::int64_t>(n);
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Writer w(path);
  if (!w.out) throw IngestError(path, 0, "cannot open checkpoint for writing");
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(ckpt.version);
  w.put<std::uint64_t>(ckpt.config_json.size());
  w.put_bytes(ckpt.config_json.data(), ckpt.config_json.size());
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::int64_t>(d);
    w.put<std::uint64_t>(t.bytes.size());
    w.put_bytes(t.bytes.data(), t.bytes.size());
  }
  if (!w.out) throw IngestError(path, 0, "checkpoint write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  if (!r.in) throw IngestError(path, 0, "cannot open checkpoint");
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw IngestError(path, 0, "not a checkpoint file (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion)
    throw IngestError(path, 4, "unsupported checkpoint version " + std::to_string(ckpt.version));
  const auto json_len = r.get<std::uint64_t>();
  ckpt.config_json.resize(json_len);
  r.get_bytes(ckpt.config_json.data(), json_len);
  const auto n_tensors = r.get<std::uint64_t>();
  ckpt.tensors.reserve(n_tensors);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    const auto name_len = r.get<std::uint32_t>();
    t.name.resize(name_len);
    r.get_bytes(t.name.data(), name_len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw IngestError(path, r.pos, "unknown dtype tag " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint32_t>();
    t.shape.resize(ndim);
    std::int64_t numel = 1;
    for (auto& d : t.shape) {
      d = r.get<std::int64_t>();
      if (d < 0) throw IngestError(path, r.pos, "negative dimension in tensor '" + t.name + "'");
      numel *= d;
    }
    const auto nbytes = r.get<std::uint64_t>();
    const size_t elem = t.dtype == DType::f32 ? 4 : 8;
    if (nbytes != static_cast<std::uint64_t>(numel) * elem)
      throw IngestError(path, r.pos,
                        "tensor '" + t.name + "' data size does not match its shape");
    t.bytes.resize(nbytes);
    r.get_bytes(t.bytes.data(), nbytes);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace amdim
