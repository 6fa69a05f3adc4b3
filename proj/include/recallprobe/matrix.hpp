#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "recallprobe/errors.hpp"

namespace rp {

// Dense row-major matrix. All linear algebra in this project runs through the
// few routines below with fixed loop orders, so repeated runs on the same
// machine produce bit-identical results.
template <class T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  template <class U>
  Mat<U> cast() const {
    Mat<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Mat&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
using Vec = std::vector<T>;

template <class T>
inline constexpr T neg_inf = -std::numeric_limits<T>::infinity();

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// C = A * B, accumulated in i-k-j order.
template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows()) fail(errc::validation, "matmul: inner dimensions differ");
  Mat<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* out = c.data() + i * c.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* brow = b.data() + k * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

// C = A * B^T. B is given untransposed, rows of B are dotted against rows of A.
template <class T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.cols()) fail(errc::validation, "matmul_nt: inner dimensions differ");
  Mat<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

// y = A * x
template <class T>
Vec<T> matvec(const Mat<T>& a, std::span<const T> x) {
  if (a.cols() != x.size()) fail(errc::validation, "matvec: dimension mismatch");
  Vec<T> y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

// y = x^T * A, i.e. weighted sum of the rows of A.
template <class T>
Vec<T> vecmat(std::span<const T> x, const Mat<T>& a) {
  if (a.rows() != x.size()) fail(errc::validation, "vecmat: dimension mismatch");
  Vec<T> y(a.cols(), T(0));
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T xk = x[k];
    const T* row = a.data() + k * a.cols();
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += xk * row[j];
  }
  return y;
}

template <class T>
void add_inplace(Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(errc::validation, "add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

template <class T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <class T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
  T m = T(0);
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Index of the largest entry; ties resolve to the lowest index.
template <class T>
int argmax_index(std::span<const T> v) {
  if (v.empty()) fail(errc::validation, "argmax over empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

// Indices of the k largest entries, ordered by value descending and index
// ascending among equal values.
template <class T>
std::vector<int> topk_indices(std::span<const T> v, std::size_t k) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  auto cmp = [&](int a, int b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), cmp);
  idx.resize(k);
  return idx;
}

}  // namespace rp
