#pragma once

// Named-tensor archive: a single file holding a textual index (entry name,
// dtype tag, shape) followed by raw little-endian IEEE-754 buffers in index
// order, each 8-byte aligned, with a trailing FNV-1a checksum over all
// buffer bytes. Round trips are bit-exact.
//
// Layout:
//   bytes 0..3   magic "VXTA"
//   u32 LE       format version (currently 1)
//   u32 LE       index length in bytes
//   index        one line per entry: "<name> <f32|f64> <d0> <d1> ...\n"
//   padding      zeros to the next 8-byte boundary
//   buffers      raw values in index order, each zero-padded to 8 bytes
//   u64 LE       fnv1a64 over the unpadded buffer bytes, in order

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "voxfuse/common.hpp"
#include "voxfuse/layers.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

enum class ArchiveFault {
  bad_magic,
  bad_version,
  corrupt_index,
  truncated,
  checksum_mismatch,
  dtype_mismatch,
  missing_entry,
  unknown_name,
  shape_mismatch,
};

struct ArchiveError : IoError {
  ArchiveFault fault;
  ArchiveError(ArchiveFault f, const std::string& msg)
      : IoError("archive: " + msg), fault(f) {}
};

namespace detail {

constexpr char kArchiveMagic[4] = {'V', 'X', 'T', 'A'};
constexpr std::uint32_t kArchiveVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

template <Scalar T>
constexpr const char* dtype_tag() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace detail

// Serializes entries in map order. Entry names must be whitespace-free.
template <Scalar T>
std::string encode_archive(const std::map<std::string, Tensor<T>>& entries) {
  using namespace detail;
  std::ostringstream index;
  for (const auto& [name, t] : entries) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw ContractError("archive: entry name '" + name +
                          "' must be non-empty and whitespace-free");
    }
    index << name << ' ' << dtype_tag<T>();
    for (int e : t.shape()) index << ' ' << e;
    index << '\n';
  }
  const std::string index_text = index.str();

  std::string out;
  out.append(kArchiveMagic, 4);
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(index_text.size()));
  out += index_text;
  while (out.size() % 8) out.push_back('\0');

  std::uint64_t checksum = kFnvOffset;
  for (const auto& [name, t] : entries) {
    const char* bytes = reinterpret_cast<const char*>(t.ptr());
    const std::size_t nbytes = static_cast<std::size_t>(t.size()) * sizeof(T);
    checksum = fnv1a64(bytes, nbytes, checksum);
    out.append(bytes, nbytes);
    while (out.size() % 8) out.push_back('\0');
  }
  put_u64(out, checksum);
  return out;
}

// Parses an archive image. Shape/name validation against specs is done by
// load_params; this only validates structure, dtype, and checksum.
template <Scalar T>
std::map<std::string, Tensor<T>> decode_archive(const std::string& blob) {
  using namespace detail;
  if (blob.size() < 12) throw ArchiveError(ArchiveFault::truncated, "short header");
  if (std::memcmp(blob.data(), kArchiveMagic, 4) != 0) {
    throw ArchiveError(ArchiveFault::bad_magic, "bad magic");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint32_t version = get_u32(base + 4);
  if (version != kArchiveVersion) {
    throw ArchiveError(ArchiveFault::bad_version,
                       "unsupported version " + std::to_string(version));
  }
  const std::uint32_t index_len = get_u32(base + 8);
  if (blob.size() < 12 + std::size_t(index_len)) {
    throw ArchiveError(ArchiveFault::truncated, "index extends past EOF");
  }
  std::istringstream index(blob.substr(12, index_len));

  struct Entry {
    std::string name, dtype;
    std::vector<int> shape;
  };
  std::vector<Entry> order;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Entry e;
    if (!(ls >> e.name >> e.dtype)) {
      throw ArchiveError(ArchiveFault::corrupt_index, "unparsable line '" + line + "'");
    }
    int d;
    while (ls >> d) e.shape.push_back(d);
    if (!ls.eof() || e.shape.empty()) {
      throw ArchiveError(ArchiveFault::corrupt_index, "bad shape in '" + line + "'");
    }
    for (int ext : e.shape) {
      if (ext < 1) throw ArchiveError(ArchiveFault::corrupt_index, "non-positive extent");
    }
    order.push_back(std::move(e));
  }

  std::size_t off = 12 + index_len;
  off += (8 - off % 8) % 8;
  std::uint64_t checksum = kFnvOffset;
  std::map<std::string, Tensor<T>> out;
  for (const auto& e : order) {
    if (e.dtype != detail::dtype_tag<T>()) {
      throw ArchiveError(ArchiveFault::dtype_mismatch,
                         "entry '" + e.name + "' has dtype " + e.dtype);
    }
    const std::size_t count = static_cast<std::size_t>(shape_size(e.shape));
    const std::size_t nbytes = count * sizeof(T);
    if (off + nbytes > blob.size()) {
      throw ArchiveError(ArchiveFault::truncated, "buffer for '" + e.name + "'");
    }
    checksum = fnv1a64(blob.data() + off, nbytes, checksum);
    std::vector<T> data(count);
    std::memcpy(data.data(), blob.data() + off, nbytes);
    if (!out.emplace(e.name, Tensor<T>::from_data(e.shape, std::move(data))).second) {
      throw ArchiveError(ArchiveFault::corrupt_index, "duplicate entry '" + e.name + "'");
    }
    off += nbytes;
    off += (8 - off % 8) % 8;
  }
  if (off + 8 > blob.size()) {
    throw ArchiveError(ArchiveFault::truncated, "missing checksum");
  }
  const std::uint64_t stored = detail::get_u64(
      reinterpret_cast<const unsigned char*>(blob.data()) + off);
  if (stored != checksum) {
    throw ArchiveError(ArchiveFault::checksum_mismatch, "checksum mismatch");
  }
  return out;
}

inline std::string slurp_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spew_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

template <Scalar T>
void write_archive(const std::filesystem::path& path,
                   const std::map<std::string, Tensor<T>>& entries) {
  spew_file(path, encode_archive(entries));
}

template <Scalar T>
std::map<std::string, Tensor<T>> read_archive(const std::filesystem::path& path) {
  return decode_archive<T>(slurp_file(path));
}

template <Scalar T>
void save_params(const ParamStore<T>& store, const std::filesystem::path& path) {
  write_archive(path, store.entries);
}

// Loads and validates against the given specs: every spec entry must be
// present with the exact shape, and the archive may not contain extras.
template <Scalar T>
ParamStore<T> load_params(const std::filesystem::path& path,
                          const std::vector<LayerSpec>& specs) {
  auto loaded = read_archive<T>(path);
  ParamStore<T> store;
  for (const auto& s : specs) {
    for (const auto& [name, shape] : param_shapes(s)) {
      auto it = loaded.find(name);
      if (it == loaded.end()) {
        throw ArchiveError(ArchiveFault::missing_entry,
                           "missing tensor for layer entry '" + name + "'");
      }
      if (it->second.shape() != shape) {
        throw ArchiveError(ArchiveFault::shape_mismatch,
                           "entry '" + name + "' has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(shape));
      }
      Tensor<T> t = it->second;
      if (param_trainable(name)) t.set_requires_grad(true);
      store.entries.emplace(name, std::move(t));
      loaded.erase(it);
    }
  }
  if (!loaded.empty()) {
    throw ArchiveError(ArchiveFault::unknown_name,
                       "archive contains unknown tensor '" +
                           loaded.begin()->first + "'");
  }
  return store;
}

}  // namespace voxfuse
