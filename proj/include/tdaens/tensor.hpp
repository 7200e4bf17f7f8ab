#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace tdaens {

/// Heap storage aligned to Eigen's widest packet, so vectorized reductions
/// see the same alignment on every allocation and give identical bits.
using DoubleVec = std::vector<double, Eigen::aligned_allocator<double>>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

/// Dense row-major matrix of doubles. The storage type for activations,
/// gradient stacks, projected features and attribution scores.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  DoubleVec data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2 from_eigen(const RowMatrix& m);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  MatMap mat() { return MatMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)); }
  ConstMatMap mat() const {
    return ConstMatMap(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor2&, const Tensor2&) = default;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
bool all_finite(std::span<const double> v);

}  // namespace tdaens
