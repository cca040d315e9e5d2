#ifndef SRNAS_TENSOR_HPP
#define SRNAS_TENSOR_HPP

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "srnas/errors.hpp"
#include "srnas/rng.hpp"

namespace srnas {

// The training kit runs in float32 end to end.
using Scalar = float;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using MapMat = Eigen::Map<MatrixX>;
using CMapMat = Eigen::Map<const MatrixX>;
using MapVec = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
using CMapVec = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

// Dense tensor, rank 2 (N,F) or rank 4 (N,C,H,W), contiguous row-major in the
// index order given by `shape`. Thin by design: layers view the buffer through
// Eigen maps and do their math as matrix expressions.
struct Tensor {
  std::vector<int> shape;
  ArrayX v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v = ArrayX::Zero(numel_of(shape));
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("tensor dim must be positive");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor filled(std::vector<int> s, Scalar value) {
    Tensor t(std::move(s));
    t.v.setConstant(value);
    return t;
  }

  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.v[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
    return t;
  }

  std::int64_t numel() const { return v.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Rank-4 accessors (N,C,H,W).
  std::int64_t idx(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }
  Scalar& at(int n, int c, int h, int w) { return v[idx(n, c, h, w)]; }
  Scalar at(int n, int c, int h, int w) const { return v[idx(n, c, h, w)]; }

  bool all_finite() const { return v.isFinite().all(); }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

// A learnable (or buffer) array attached to a layer.
struct Param {
  std::vector<int> shape;
  ArrayX value;
  ArrayX grad;
  bool trainable = true;

  Param() = default;
  Param(std::vector<int> s, bool train = true) : shape(std::move(s)), trainable(train) {
    const auto n = Tensor::numel_of(shape);
    value = ArrayX::Zero(n);
    grad = ArrayX::Zero(n);
  }
  std::int64_t numel() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

struct NamedParam {
  std::string name;
  Param* param;
};

}  // namespace srnas

#endif  // SRNAS_TENSOR_HPP
