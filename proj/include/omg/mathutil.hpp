#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "omg/error.hpp"
#include "omg/rng.hpp"

namespace omg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double cosine(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeMismatch("cosine of unequal sizes");
  double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) throw ZeroVector("cosine with zero-norm input");
  return a.dot(b) / (na * nb);
}

// 1 - cos, in [0, 2]
inline double cosine_cost(const Vec& a, const Vec& b) { return 1.0 - cosine(a, b); }

inline Vec softmax_stable(const Vec& s) {
  Vec e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

inline double log_sum_exp(const Vec& s) {
  double m = s.maxCoeff();
  return m + std::log((s.array() - m).exp().sum());
}

inline Vec gaussian_vec(int n, Rng& rng) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// FNV-1a, used for config and tensor checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace omg
