#pragma once

// Dense numeric primitives shared by the whole pipeline. Everything here is a
// pure function; templates take the accumulation type so the same code path
// can run in double (training) or long double (finite-difference oracle).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "urt/error.hpp"

namespace urt {

inline constexpr double kNormEps = 1e-12;

using DenseVector = std::vector<double>;

/// Row-major dense matrix.
template <std::floating_point Real>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    require(values_.size() == rows * cols, ErrorKind::dimension,
            "matrix value count " + std::to_string(values_.size()) + " != " +
                std::to_string(rows) + "x" + std::to_string(cols));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<Real> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  std::span<Real> values() noexcept { return values_; }
  std::span<const Real> values() const noexcept { return values_; }
  std::vector<Real>& storage() noexcept { return values_; }
  const std::vector<Real>& storage() const noexcept { return values_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> values_;
};

using DenseMatrix = Matrix<double>;

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  require(a == b, ErrorKind::dimension,
          std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
}

template <class Real = double, class A, class B>
Real dot(std::span<const A> a, std::span<const B> b) {
  Real acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += Real(a[i]) * Real(b[i]);
  return acc;
}

template <class Real = double, class T>
Real norm2(std::span<const T> v) {
  return std::sqrt(dot<Real>(v, v));
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

/// Unit-l2 copy of `v`; vectors with norm <= eps pass through unchanged.
template <std::floating_point Real>
std::vector<Real> l2_normalize(std::span<const Real> v, Real eps = Real(kNormEps)) {
  std::vector<Real> out(v.begin(), v.end());
  const Real n = norm2<Real>(v);
  if (n > eps) {
    for (auto& x : out) x /= n;
  }
  return out;
}

inline DenseVector l2_normalize(const DenseVector& v, double eps = kNormEps) {
  return l2_normalize<double>(std::span<const double>(v), eps);
}

template <std::floating_point Real>
void softmax_inplace(std::span<Real> logits) {
  const Real hi = *std::max_element(logits.begin(), logits.end());
  Real total = 0;
  for (auto& x : logits) {
    x = std::exp(x - hi);
    total += x;
  }
  for (auto& x : logits) x /= total;
}

template <std::floating_point Real>
std::vector<Real> softmax(std::span<const Real> logits) {
  std::vector<Real> out(logits.begin(), logits.end());
  softmax_inplace<Real>(out);
  return out;
}

inline DenseVector softmax(const DenseVector& logits) {
  return softmax<double>(std::span<const double>(logits));
}

/// Cosine similarity with a guarded denominator max(|a||b|, eps), clamped to [-1, 1].
template <class Real = double, class A, class B>
Real cosine_similarity(std::span<const A> a, std::span<const B> b, Real eps = Real(kNormEps)) {
  require_same_length(a.size(), b.size(), "cosine_similarity");
  const Real denom = std::max(norm2<Real>(a) * norm2<Real>(b), eps);
  return std::clamp(dot<Real>(a, b) / denom, Real(-1), Real(1));
}

inline double cosine_similarity(const DenseVector& a, const DenseVector& b,
                                double eps = kNormEps) {
  return cosine_similarity<double>(std::span<const double>(a), std::span<const double>(b),
                                   eps);
}

/// ||A A^T - I||_F^2 for the H x m matrix of per-head attention scores.
template <std::floating_point Real>
Real head_diversity_penalty(const Matrix<Real>& scores) {
  const std::size_t heads = scores.rows();
  Real total = 0;
  for (std::size_t a = 0; a < heads; ++a) {
    for (std::size_t b = 0; b < heads; ++b) {
      Real g = dot<Real>(scores.row(a), scores.row(b));
      if (a == b) g -= Real(1);
      total += g * g;
    }
  }
  return total;
}

/// out = W x + b, accumulated in Real.
template <class Real, class X>
void affine(const DenseMatrix& w, std::span<const double> b, std::span<const X> x,
            std::span<Real> out) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    Real acc = b[r];
    for (std::size_t c = 0; c < wr.size(); ++c) acc += Real(wr[c]) * Real(x[c]);
    out[r] = acc;
  }
}

}  // namespace urt
