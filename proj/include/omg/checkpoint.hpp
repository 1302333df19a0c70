#pragma once

// Binary tensor container. Layout, all integers little-endian:
//   magic "OMGA" | version u32 | entry count u32
//   per entry: name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f64) |
//              rank u8 | dims u64[rank] | payload, row-major
// Loading rejects bad magic / truncation (CorruptCheckpoint) and any
// version other than kCheckpointVersion (VersionMismatch).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "omg/error.hpp"
#include "omg/mathutil.hpp"

namespace omg {

constexpr uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::vector<uint64_t> dims;
  std::variant<std::vector<float>, std::vector<double>> data;

  size_t elem_count() const {
    size_t n = 1;
    for (uint64_t d : dims) n *= static_cast<size_t>(d);
    return n;
  }
  bool is_f32() const { return data.index() == 0; }

  static Tensor from_scalar(double v) {
    return Tensor{{1}, std::vector<double>{v}};
  }
  static Tensor from_vec(const Vec& v) {
    std::vector<double> d(v.data(), v.data() + v.size());
    return Tensor{{static_cast<uint64_t>(v.size())}, std::move(d)};
  }
  // Row-major payload.
  static Tensor from_mat(const Mat& m) {
    std::vector<double> d;
    d.reserve(static_cast<size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) d.push_back(m(i, j));
    return Tensor{{static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())},
                  std::move(d)};
  }
  Vec to_vec() const {
    if (dims.size() != 1) throw ShapeMismatch("tensor is not rank-1");
    const auto& d = std::get<std::vector<double>>(data);
    return Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size()));
  }
  Mat to_mat() const {
    if (dims.size() != 2) throw ShapeMismatch("tensor is not rank-2");
    const auto& d = std::get<std::vector<double>>(data);
    Mat m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    size_t k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = d[k++];
    return m;
  }
  double to_scalar() const {
    const auto& d = std::get<std::vector<double>>(data);
    if (d.size() != 1) throw ShapeMismatch("tensor is not a scalar");
    return d[0];
  }

  uint64_t checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint64_t d : dims) h = fnv1a64(&d, sizeof(d), h);
    if (is_f32()) {
      const auto& v = std::get<std::vector<float>>(data);
      h = fnv1a64(v.data(), v.size() * sizeof(float), h);
    } else {
      const auto& v = std::get<std::vector<double>>(data);
      h = fnv1a64(v.data(), v.size() * sizeof(double), h);
    }
    return h;
  }
};

// Named tensor map; iteration (and file order) is name-sorted.
using Checkpoint = std::map<std::string, Tensor>;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw CorruptCheckpoint("truncated while reading a fixed-size field");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot open for write: " + path);
  os.write("OMGA", 4);
  detail::put<uint32_t>(os, kCheckpointVersion);
  detail::put<uint32_t>(os, static_cast<uint32_t>(ckpt.size()));
  for (const auto& [name, t] : ckpt) {
    if (name.size() > 0xffff) throw ValidationError("tensor name too long");
    detail::put<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<uint8_t>(os, t.is_f32() ? 0 : 1);
    detail::put<uint8_t>(os, static_cast<uint8_t>(t.dims.size()));
    for (uint64_t d : t.dims) detail::put<uint64_t>(os, d);
    if (t.is_f32()) {
      const auto& v = std::get<std::vector<float>>(t.data);
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(float)));
    } else {
      const auto& v = std::get<std::vector<double>>(t.data);
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
  }
  if (!os) throw RuntimeFailure("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CorruptCheckpoint("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "OMGA", 4) != 0)
    throw CorruptCheckpoint("bad magic");
  uint32_t version = detail::get<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version));
  uint32_t count = detail::get<uint32_t>(is);
  Checkpoint ckpt;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = detail::get<uint16_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw CorruptCheckpoint("truncated name");
    uint8_t dtype = detail::get<uint8_t>(is);
    if (dtype > 1) throw CorruptCheckpoint("unknown dtype code");
    uint8_t rank = detail::get<uint8_t>(is);
    Tensor t;
    t.dims.resize(rank);
    for (auto& d : t.dims) d = detail::get<uint64_t>(is);
    size_t n = t.elem_count();
    if (dtype == 0) {
      std::vector<float> v(n);
      if (n && !is.read(reinterpret_cast<char*>(v.data()),
                        static_cast<std::streamsize>(n * sizeof(float))))
        throw CorruptCheckpoint("truncated payload for " + name);
      t.data = std::move(v);
    } else {
      std::vector<double> v(n);
      if (n && !is.read(reinterpret_cast<char*>(v.data()),
                        static_cast<std::streamsize>(n * sizeof(double))))
        throw CorruptCheckpoint("truncated payload for " + name);
      t.data = std::move(v);
    }
    ckpt.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace omg
