#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "staterank/error.hpp"

namespace staterank {

// Dense vector of reals. Double precision is the default everywhere; the
// float instantiation exists for storage-size experiments.
template <typename T>
class basic_vector {
 public:
  using value_type = T;

  basic_vector() = default;
  explicit basic_vector(std::size_t dim, T fill = T{0}) : data_(dim, fill) {}
  basic_vector(std::initializer_list<T> init) : data_(init) {}
  explicit basic_vector(std::vector<T> data) : data_(std::move(data)) {}

  std::size_t dim() const noexcept { return data_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const basic_vector&, const basic_vector&) = default;

 private:
  std::vector<T> data_;
};

// Row-major dense matrix.
template <typename T>
class basic_matrix {
 public:
  using value_type = T;

  basic_matrix() = default;
  basic_matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  basic_matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("matrix literal: ragged rows");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static basic_matrix identity(std::size_t n) {
    basic_matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * cols_ + j];
  }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const basic_matrix&, const basic_matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Vector = basic_vector<double>;
using Matrix = basic_matrix<double>;
using VectorF = basic_vector<float>;
using MatrixF = basic_matrix<float>;

template <typename Range>
bool all_finite(const Range& values) {
  return std::all_of(values.begin(), values.end(), [](auto x) { return std::isfinite(x); });
}

namespace detail {
template <typename Range>
void require_finite(const Range& values, const char* what) {
  if (!all_finite(values)) throw NumericError(std::string(what) + ": non-finite result");
}
}  // namespace detail

template <typename T>
basic_matrix<T> matmul(const basic_matrix<T>& a, const basic_matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  basic_matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const T aip = a(i, p);
      auto b_row = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aip * b_row[j];
    }
  }
  detail::require_finite(out.span(), "matmul");
  return out;
}

// Span-level kernels are written once over a generic element type and
// exposed for both span arguments (double) and the typed containers.
namespace detail {
template <typename T>
basic_vector<T> matvec(const basic_matrix<T>& m, const T* x, std::size_t n) {
  if (m.cols() != n) throw ShapeError("matvec: shape mismatch");
  basic_vector<T> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    T acc{0};
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
    out[i] = acc;
  }
  return out;
}

template <typename T>
basic_vector<T> matvec_transposed(const basic_matrix<T>& m, const T* x, std::size_t n) {
  if (m.rows() != n) throw ShapeError("matvec_transposed: shape mismatch");
  basic_vector<T> out(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const T xi = x[i];
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] * xi;
  }
  return out;
}

template <typename T>
T dot(const T* a, std::size_t na, const T* b, std::size_t nb) {
  if (na != nb) throw ShapeError("dot: dimension mismatch");
  T acc{0};
  for (std::size_t i = 0; i < na; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
basic_matrix<T> outer(const T* v, std::size_t nv, const T* k, std::size_t nk) {
  basic_matrix<T> out(nv, nk);
  for (std::size_t i = 0; i < nv; ++i) {
    for (std::size_t j = 0; j < nk; ++j) out(i, j) = v[i] * k[j];
  }
  require_finite(out.span(), "outer");
  return out;
}

template <typename T>
basic_vector<T> l2_normalize(const T* v, std::size_t n) {
  const T nrm = std::sqrt(dot(v, n, v, n));
  if (!(nrm > T{0})) throw NumericError("l2_normalize: zero-norm vector");
  if (!std::isfinite(nrm)) throw NumericError("l2_normalize: non-finite norm");
  basic_vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = v[i] / nrm;
  return out;
}

template <typename T>
T cosine(const T* a, std::size_t na, const T* b, std::size_t nb) {
  const T norm_a = std::sqrt(dot(a, na, a, na));
  const T norm_b = std::sqrt(dot(b, nb, b, nb));
  if (!(norm_a > T{0}) || !(norm_b > T{0})) throw NumericError("cosine: zero-norm vector");
  return std::clamp(dot(a, na, b, nb) / (norm_a * norm_b), T{-1}, T{1});
}
}  // namespace detail

using ConstSpan = std::span<const double>;

// m · x
template <typename T>
basic_vector<T> matvec(const basic_matrix<T>& m, const basic_vector<T>& x) {
  return detail::matvec(m, x.data(), x.dim());
}
inline Vector matvec(const Matrix& m, ConstSpan x) { return detail::matvec(m, x.data(), x.size()); }

// mᵀ · x
template <typename T>
basic_vector<T> matvec_transposed(const basic_matrix<T>& m, const basic_vector<T>& x) {
  return detail::matvec_transposed(m, x.data(), x.dim());
}
inline Vector matvec_transposed(const Matrix& m, ConstSpan x) {
  return detail::matvec_transposed(m, x.data(), x.size());
}

template <typename T>
basic_matrix<T> outer(const basic_vector<T>& v, const basic_vector<T>& k) {
  return detail::outer(v.data(), v.dim(), k.data(), k.dim());
}
inline Matrix outer(ConstSpan v, ConstSpan k) { return detail::outer(v.data(), v.size(), k.data(), k.size()); }

// acc += alpha · v kᵀ
inline void add_outer(Matrix& acc, ConstSpan v, ConstSpan k, double alpha = 1.0) {
  if (acc.rows() != v.size() || acc.cols() != k.size()) throw ShapeError("add_outer: shape mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double vi = alpha * v[i];
    auto r = acc.row(i);
    for (std::size_t j = 0; j < k.size(); ++j) r[j] += vi * k[j];
  }
}

template <typename T>
T dot(const basic_vector<T>& a, const basic_vector<T>& b) {
  return detail::dot(a.data(), a.dim(), b.data(), b.dim());
}
inline double dot(ConstSpan a, ConstSpan b) { return detail::dot(a.data(), a.size(), b.data(), b.size()); }

template <typename T>
T norm(const basic_vector<T>& v) {
  return std::sqrt(dot(v, v));
}
inline double norm(ConstSpan v) { return std::sqrt(dot(v, v)); }

template <typename T>
basic_vector<T> l2_normalize(const basic_vector<T>& v) {
  return detail::l2_normalize(v.data(), v.dim());
}
inline Vector l2_normalize(ConstSpan v) { return detail::l2_normalize(v.data(), v.size()); }

template <typename T>
T cosine(const basic_vector<T>& a, const basic_vector<T>& b) {
  return detail::cosine(a.data(), a.dim(), b.data(), b.dim());
}
inline double cosine(ConstSpan a, ConstSpan b) { return detail::cosine(a.data(), a.size(), b.data(), b.size()); }

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Deterministic generator: xoshiro256** seeded through splitmix64. The
// stream depends only on the seed, never on the platform or libstdc++.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw UsageError("Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  template <typename Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) {
      std::swap(c[i - 1], c[static_cast<std::size_t>(below(i))]);
    }
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t s_[4];
};

template <typename T>
void fill_uniform(std::span<T> values, Rng& rng, double lo, double hi) {
  for (auto& v : values) v = static_cast<T>(rng.uniform(lo, hi));
}

// FNV-1a over raw bytes; used for weight checksums and config fingerprints.
class Fnv1a64 {
 public:
  void update(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  // Values are hashed through their little-endian IEEE encoding.
  void update(std::span<const double> values) noexcept {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      update_u64(bits);
    }
  }
  void update_u64(std::uint64_t v) noexcept {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    update(b, 8);
  }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace staterank
