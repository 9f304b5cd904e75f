#include "dunet/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dunet {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'N', 'E', 'T', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

// The toolchain targets are little-endian; values are written as raw bytes.
template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor*>& state) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, kVersion);
  put<uint64_t>(os, state.size());
  for (const auto& [name, tensor] : state) {
    put<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(os, static_cast<uint32_t>(tensor->rank()));
    for (int64_t d : tensor->shape()) put<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(tensor->data()),
             static_cast<std::streamsize>(tensor->size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

static void read_header(std::istream& is, const std::string& path) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = get<uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
}

void load_checkpoint(const std::string& path, std::map<std::string, Tensor*>& state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  read_header(is, path);
  const uint64_t count = get<uint64_t>(is);
  for (uint64_t e = 0; e < count; ++e) {
    const uint32_t name_len = get<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = get<uint32_t>(is);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = get<int64_t>(is);
    auto it = state.find(name);
    if (it == state.end())
      throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
    Tensor* dst = it->second;
    if (dst->shape() != dims)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    is.read(reinterpret_cast<char*>(dst->data()),
            static_cast<std::streamsize>(dst->size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated values for '" + name + "'");
  }
}

std::map<std::string, std::vector<int64_t>> read_checkpoint_index(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  read_header(is, path);
  std::map<std::string, std::vector<int64_t>> index;
  const uint64_t count = get<uint64_t>(is);
  for (uint64_t e = 0; e < count; ++e) {
    const uint32_t name_len = get<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = get<uint32_t>(is);
    std::vector<int64_t> dims(rank);
    int64_t numel = 1;
    for (auto& d : dims) {
      d = get<int64_t>(is);
      numel *= d;
    }
    is.seekg(numel * static_cast<int64_t>(sizeof(double)), std::ios::cur);
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    index.emplace(std::move(name), std::move(dims));
  }
  return index;
}

}  // namespace dunet
