#pragma once

// "DDCK" checkpoint files: a named float32 tensor table followed by a JSON
// metadata trailer.
//
//   "DDCK" | u32 version | u32 count
//   count x { u16 name_len | name | u8 rank | rank x u64 dims | float32 payload }
//   u32 json_len | json
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddc/nn.hpp"

namespace ddc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'D', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raised for files that exist but are not valid checkpoints.
class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  void add(const std::string& name, const Tensor& t) {
    if (find(name)) throw std::invalid_argument("duplicate checkpoint tensor '" + name + "'");
    tensors.emplace_back(name, t.detach());
  }

  template <class T>
  void add_parameters(const std::string& prefix, const ParameterList<T>& params) {
    for (const auto& p : params) add(prefix + p.name, Tensor::cast_from(p.tensor));
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  const Tensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw std::runtime_error("checkpoint has no tensor '" + name + "'");
  }

  /// Tensors whose name starts with `prefix`, keyed by the remainder.
  std::map<std::string, Tensor> with_prefix(const std::string& prefix) const {
    std::map<std::string, Tensor> out;
    for (const auto& [n, t] : tensors)
      if (n.rfind(prefix, 0) == 0) out.emplace(n.substr(prefix.size()), t);
    return out;
  }
};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) {
    throw CheckpointFormatError(std::string("truncated checkpoint while reading ") + what);
  }
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, std::uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + name);
    if (t.rank() > 0xff) throw std::invalid_argument("tensor rank too large: " + name);
    detail::put<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put<std::uint8_t>(os, std::uint8_t(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(os, std::uint64_t(d));
    os.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.numel() * sizeof(float)));
  }
  const std::string meta = ck.metadata.dump();
  detail::put<std::uint32_t>(os, std::uint32_t(meta.size()));
  os.write(meta.data(), std::streamsize(meta.size()));
  return os.str();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointFormatError("not a DDCK checkpoint (bad magic bytes)");
  }
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointFormatError("truncated checkpoint in tensor name");
    const auto rank = detail::get<std::uint8_t>(is, "rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = detail::get<std::uint64_t>(is, "dimension");
      if (d != 0 && numel > (std::uint64_t(1) << 40) / d) {
        throw CheckpointFormatError("implausible shape for tensor '" + name + "'");
      }
      numel *= d;
      shape.push_back(std::size_t(d));
    }
    const std::size_t remaining = bytes.size() - std::size_t(is.tellg());
    if (numel * sizeof(float) > remaining) {
      throw CheckpointFormatError("truncated payload for tensor '" + name + "'");
    }
    std::vector<float> data(numel);
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(numel * sizeof(float)));
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const auto meta_len = detail::get<std::uint32_t>(is, "metadata length");
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), meta_len)) throw CheckpointFormatError("truncated metadata trailer");
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointFormatError("trailing bytes after metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("metadata is not valid JSON: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

/// Throws std::runtime_error if the file is missing, CheckpointFormatError if it is malformed.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ddc
